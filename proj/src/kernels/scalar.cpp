#include "deflect/kernels.hpp"

#include <cmath>

namespace deflect::kernels {
namespace {

double dot(const double* a, const double* b, std::size_t n) {
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += a[i] * b[i];
  return sum;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void dense_forward(const double* x, std::size_t rows, std::size_t in,
                   const double* w, const double* b, std::size_t out,
                   double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * in;
    double* yr = y + r * out;
    for (std::size_t o = 0; o < out; ++o) yr[o] = b[o] + dot(xr, w + o * in, in);
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
  const double decay = 1.0 - c.lr * c.weight_decay;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grads[i];
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
    const double m_hat = m[i] / c.bias_correction1;
    const double v_hat = v[i] / c.bias_correction2;
    params[i] = params[i] * decay - c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
  }
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{
      .name = "scalar",
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
