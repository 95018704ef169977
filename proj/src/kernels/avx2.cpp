// Compiled with -mavx2 -mfma. Nothing in here may run before the dispatcher
// has confirmed CPU support.
#include "deflect/kernels.hpp"

#include <immintrin.h>

#include <cmath>

namespace deflect::kernels {
namespace {

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d pair = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(pair, _mm_unpackhi_pd(pair, pair)));
}

double dot(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4),
                           _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  }
  double sum = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) sum += a[i] * b[i];
  return sum;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d a = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(a, _mm256_loadu_pd(x + i),
                                            _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// Four weight rows per pass share each load of x.
void dense_forward(const double* x, std::size_t rows, std::size_t in,
                   const double* w, const double* b, std::size_t out,
                   double* y) {
  const std::size_t vec_in = in - in % 4;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * in;
    double* yr = y + r * out;
    std::size_t o = 0;
    for (; o + 4 <= out; o += 4) {
      const double* w0 = w + o * in;
      const double* w1 = w0 + in;
      const double* w2 = w1 + in;
      const double* w3 = w2 + in;
      __m256d a0 = _mm256_setzero_pd();
      __m256d a1 = _mm256_setzero_pd();
      __m256d a2 = _mm256_setzero_pd();
      __m256d a3 = _mm256_setzero_pd();
      for (std::size_t i = 0; i < vec_in; i += 4) {
        const __m256d xv = _mm256_loadu_pd(xr + i);
        a0 = _mm256_fmadd_pd(_mm256_loadu_pd(w0 + i), xv, a0);
        a1 = _mm256_fmadd_pd(_mm256_loadu_pd(w1 + i), xv, a1);
        a2 = _mm256_fmadd_pd(_mm256_loadu_pd(w2 + i), xv, a2);
        a3 = _mm256_fmadd_pd(_mm256_loadu_pd(w3 + i), xv, a3);
      }
      double s0 = hsum(a0), s1 = hsum(a1), s2 = hsum(a2), s3 = hsum(a3);
      for (std::size_t i = vec_in; i < in; ++i) {
        s0 += w0[i] * xr[i];
        s1 += w1[i] * xr[i];
        s2 += w2[i] * xr[i];
        s3 += w3[i] * xr[i];
      }
      yr[o] = b[o] + s0;
      yr[o + 1] = b[o + 1] + s1;
      yr[o + 2] = b[o + 2] + s2;
      yr[o + 3] = b[o + 3] + s3;
    }
    for (; o < out; ++o) yr[o] = b[o] + dot(xr, w + o * in, in);
  }
}

void dense_backward_params(const double* x, const double* dy, std::size_t rows,
                           std::size_t in, std::size_t out, double* dw,
                           double* db) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * in;
    const double* dyr = dy + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      db[o] += dyr[o];
      axpy(dyr[o], xr, dw + o * in, in);
    }
  }
}

void dense_backward_input(const double* dy, std::size_t rows, std::size_t out,
                          const double* w, std::size_t in, double* dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* dxr = dx + r * in;
    for (std::size_t i = 0; i < in; ++i) dxr[i] = 0.0;
    const double* dyr = dy + r * out;
    for (std::size_t o = 0; o < out; ++o) axpy(dyr[o], w + o * in, dxr, in);
  }
}

void adamw_update(double* params, const double* grads, double* m, double* v,
                  std::size_t n, const AdamwCoeffs& c) {
  const __m256d b1 = _mm256_set1_pd(c.beta1);
  const __m256d b1c = _mm256_set1_pd(1.0 - c.beta1);
  const __m256d b2 = _mm256_set1_pd(c.beta2);
  const __m256d b2c = _mm256_set1_pd(1.0 - c.beta2);
  const __m256d inv_bc1 = _mm256_set1_pd(1.0 / c.bias_correction1);
  const __m256d inv_bc2 = _mm256_set1_pd(1.0 / c.bias_correction2);
  const __m256d eps = _mm256_set1_pd(c.eps);
  const __m256d lr = _mm256_set1_pd(c.lr);
  const __m256d decay = _mm256_set1_pd(1.0 - c.lr * c.weight_decay);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d g = _mm256_loadu_pd(grads + i);
    const __m256d mi = _mm256_fmadd_pd(b1, _mm256_loadu_pd(m + i), _mm256_mul_pd(b1c, g));
    const __m256d vi = _mm256_fmadd_pd(b2, _mm256_loadu_pd(v + i),
                                       _mm256_mul_pd(b2c, _mm256_mul_pd(g, g)));
    _mm256_storeu_pd(m + i, mi);
    _mm256_storeu_pd(v + i, vi);
    const __m256d denom =
        _mm256_add_pd(_mm256_sqrt_pd(_mm256_mul_pd(vi, inv_bc2)), eps);
    const __m256d step = _mm256_div_pd(_mm256_mul_pd(lr, _mm256_mul_pd(mi, inv_bc1)), denom);
    _mm256_storeu_pd(params + i,
                     _mm256_fmsub_pd(_mm256_loadu_pd(params + i), decay, step));
  }
  const double decay_s = 1.0 - c.lr * c.weight_decay;
  for (; i < n; ++i) {
    const double g = grads[i];
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
    const double m_hat = m[i] / c.bias_correction1;
    const double v_hat = v[i] / c.bias_correction2;
    params[i] = params[i] * decay_s - c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
  }
}

}  // namespace

const KernelTable& avx2_table_unchecked() {
  static const KernelTable table{
      .name = "avx2",
      .dot = dot,
      .axpy = axpy,
      .dense_forward = dense_forward,
      .dense_backward_params = dense_backward_params,
      .dense_backward_input = dense_backward_input,
      .adamw_update = adamw_update,
  };
  return table;
}

}  // namespace deflect::kernels
