#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

// Dense MLP numerics: forward evaluation, exact reverse-mode gradients, AdamW
// with a warmup + cosine learning-rate schedule, and the binary checkpoint
// format.
namespace deflect::diffnet {

enum class Activation : std::uint32_t {
  kLinear = 0,
  kSilu = 1,  // x * sigmoid(x)
};

struct DenseLayer {
  std::size_t in_width = 0;
  std::size_t out_width = 0;
  Activation activation = Activation::kLinear;
  std::vector<double> weights;  // out_width x in_width, row-major
  std::vector<double> bias;     // out_width
};

struct PolicyParams {
  std::vector<DenseLayer> layers;

  std::size_t input_width() const;
  std::size_t output_width() const;
  std::size_t parameter_count() const;

  // Throws ContractViolation on incompatible widths, mismatched array sizes,
  // or non-finite entries.
  void validate() const;
};

// SiLU hidden layers, linear output. Weights ~ N(0, 1/fan_in), zero biases.
PolicyParams make_mlp(std::size_t input_width,
                      std::span<const std::size_t> hidden_widths,
                      std::size_t output_width, std::uint64_t seed);

struct LayerGrad {
  std::vector<double> weights;
  std::vector<double> bias;
};

struct GradAccum {
  std::vector<LayerGrad> layers;

  static GradAccum zeros_like(const PolicyParams& params);
  void set_zero();
  void scale(double factor);
  void add(const GradAccum& other, double factor = 1.0);
  bool shape_matches(const PolicyParams& params) const;
  // Flattened in checkpoint order (per layer: weights then bias).
  std::vector<double> flatten() const;
};

// Flattened parameter vector in checkpoint order, and its inverse.
std::vector<double> flatten(const PolicyParams& params);
void unflatten(std::span<const double> values, PolicyParams& params);

// "layer<i>.weight" / "layer<i>.bias" for the array holding flat index k.
std::string parameter_name(const PolicyParams& params, std::size_t flat_index);

// FNV-1a over the checkpoint byte image.
std::uint64_t checksum(const PolicyParams& params);

std::vector<double> net_forward(const PolicyParams& params,
                                std::span<const double> input);

struct BackwardResult {
  GradAccum grads;
  std::vector<double> input_grad;
};

// Gradients of dot(upstream, net_forward(params, input)).
BackwardResult net_backward(const PolicyParams& params,
                            std::span<const double> input,
                            std::span<const double> upstream);

// Activations recorded by a batched forward pass, consumed by backward.
class Tape {
 public:
  std::size_t rows() const { return rows_; }
  std::span<const double> output() const;
  std::span<const double> output_row(std::size_t r) const;

 private:
  friend void forward_batch(const PolicyParams&, std::span<const double>,
                            std::size_t, Tape&);
  friend void backward_batch(const PolicyParams&, const Tape&,
                             std::span<const double>, GradAccum&,
                             std::vector<double>*);

  std::size_t rows_ = 0;
  // inputs_[l] is the input to layer l (rows x in); pre_[l] its affine output.
  std::vector<std::vector<double>> inputs_;
  std::vector<std::vector<double>> pre_;
  std::vector<double> output_;
};

// input is rows x input_width, row-major.
void forward_batch(const PolicyParams& params, std::span<const double> input,
                   std::size_t rows, Tape& tape);

// Accumulates into grads the gradient of sum_r dot(upstream[r], output[r]).
// When input_grad is non-null it receives rows x input_width values.
void backward_batch(const PolicyParams& params, const Tape& tape,
                    std::span<const double> upstream, GradAccum& grads,
                    std::vector<double>* input_grad = nullptr);

// Forward-only evaluation of a batch without keeping a tape.
void evaluate_batch(const PolicyParams& params, std::span<const double> input,
                    std::size_t rows, std::vector<double>& output,
                    std::vector<double>& scratch_a,
                    std::vector<double>& scratch_b);

struct AdamwSettings {
  double peak_lr = 3e-4;
  std::uint64_t warmup_steps = 0;
  std::uint64_t total_steps = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct OptimizerState {
  std::uint64_t step = 0;
  GradAccum first_moment;
  GradAccum second_moment;
  AdamwSettings settings;
};

OptimizerState make_optimizer(const PolicyParams& params,
                              const AdamwSettings& settings);

// Linear ramp 0 -> peak over the warmup steps, then cosine decay from peak to
// 1% of peak at total_steps. Throws ConfigError when total < warmup and
// ContractViolation when step > total.
double cosine_lr(const OptimizerState& state);

// One AdamW update at lr = cosine_lr(state); increments the step counter.
// Non-finite gradients raise TrainingError naming the parameter array.
void adamw_step(PolicyParams& params, const GradAccum& grads,
                OptimizerState& state);

// "DFLPARM1" checkpoint. See README for the byte layout.
void save_checkpoint(const PolicyParams& params,
                     const std::filesystem::path& path);
PolicyParams load_checkpoint(const std::filesystem::path& path);
std::vector<char> checkpoint_bytes(const PolicyParams& params);

}  // namespace deflect::diffnet
