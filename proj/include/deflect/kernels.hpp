#pragma once

#include <cstddef>
#include <string_view>

// Dense-layer and optimizer inner loops. Every routine has a scalar reference
// implementation; an AVX2+FMA variant is selected at runtime when the CPU
// supports it. The two are equivalence-tested, not bit-identical: the SIMD
// variant reassociates sums and fuses multiply-adds.
//
// Selection: DEFLECT_KERNELS=scalar|avx2 forces a variant, otherwise the best
// available one is used. Results are deterministic for a fixed variant.
namespace deflect::kernels {

struct AdamwCoeffs {
  double lr;
  double beta1;
  double beta2;
  double eps;
  double weight_decay;
  double bias_correction1;  // 1 - beta1^t
  double bias_correction2;  // 1 - beta2^t
};

struct KernelTable {
  std::string_view name;

  double (*dot)(const double* a, const double* b, std::size_t n);

  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);

  // y[r, o] = b[o] + sum_i x[r, i] * w[o, i]; x is rows x in, w is out x in,
  // y is rows x out, all row-major.
  void (*dense_forward)(const double* x, std::size_t rows, std::size_t in,
                        const double* w, const double* b, std::size_t out,
                        double* y);

  // dw[o, i] += sum_r dy[r, o] * x[r, i];  db[o] += sum_r dy[r, o].
  // Rows are accumulated in increasing order.
  void (*dense_backward_params)(const double* x, const double* dy,
                                std::size_t rows, std::size_t in,
                                std::size_t out, double* dw, double* db);

  // dx[r, i] = sum_o dy[r, o] * w[o, i]  (overwrites dx).
  void (*dense_backward_input)(const double* dy, std::size_t rows,
                               std::size_t out, const double* w,
                               std::size_t in, double* dx);

  // Decoupled-weight-decay Adam update over n elements.
  void (*adamw_update)(double* params, const double* grads, double* m,
                       double* v, std::size_t n, const AdamwCoeffs& c);
};

const KernelTable& scalar_table();

// nullptr when the binary was built without AVX2 support or the CPU lacks
// AVX2/FMA.
const KernelTable* avx2_table();

// The table used by the library. Chosen on first use.
const KernelTable& active();

// Overrides the active table ("scalar", "avx2"). Throws ConfigError when the
// variant is unavailable. Not thread-safe with respect to concurrent kernels.
void select(std::string_view name);

}  // namespace deflect::kernels
