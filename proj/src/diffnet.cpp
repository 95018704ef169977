#include "deflect/diffnet.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "deflect/binio.hpp"
#include "deflect/errors.hpp"
#include "deflect/kernels.hpp"
#include "deflect/rng.hpp"

namespace deflect::diffnet {
namespace {

constexpr char kMagic[9] = "DFLPARM1";

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void activate(Activation act, std::span<const double> pre, std::span<double> out) {
  if (act == Activation::kLinear) {
    std::copy(pre.begin(), pre.end(), out.begin());
    return;
  }
  for (std::size_t i = 0; i < pre.size(); ++i) out[i] = pre[i] * sigmoid(pre[i]);
}

// grad <- grad * act'(pre)
void activation_backward(Activation act, std::span<const double> pre,
                         std::span<double> grad) {
  if (act == Activation::kLinear) return;
  for (std::size_t i = 0; i < pre.size(); ++i) {
    const double s = sigmoid(pre[i]);
    grad[i] *= s * (1.0 + pre[i] * (1.0 - s));
  }
}

std::string layer_array_name(std::size_t layer, bool bias) {
  return "layer" + std::to_string(layer) + (bias ? ".bias" : ".weight");
}

}  // namespace

std::size_t PolicyParams::input_width() const {
  return layers.empty() ? 0 : layers.front().in_width;
}

std::size_t PolicyParams::output_width() const {
  return layers.empty() ? 0 : layers.back().out_width;
}

std::size_t PolicyParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weights.size() + l.bias.size();
  return n;
}

void PolicyParams::validate() const {
  if (layers.empty()) throw ContractViolation("network has no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.in_width == 0 || l.out_width == 0) {
      throw ContractViolation("layer " + std::to_string(i) + " has zero width");
    }
    if (l.weights.size() != l.in_width * l.out_width || l.bias.size() != l.out_width) {
      throw ContractViolation("layer " + std::to_string(i) + " array sizes do not match its widths");
    }
    if (i > 0 && layers[i - 1].out_width != l.in_width) {
      throw ContractViolation("layer " + std::to_string(i) + " input width " +
                              std::to_string(l.in_width) + " != previous output width " +
                              std::to_string(layers[i - 1].out_width));
    }
    if (l.activation != Activation::kLinear && l.activation != Activation::kSilu) {
      throw ContractViolation("layer " + std::to_string(i) + " has unknown activation");
    }
    for (double w : l.weights) {
      if (!std::isfinite(w)) throw ContractViolation(layer_array_name(i, false) + " is not finite");
    }
    for (double b : l.bias) {
      if (!std::isfinite(b)) throw ContractViolation(layer_array_name(i, true) + " is not finite");
    }
  }
}

PolicyParams make_mlp(std::size_t input_width, std::span<const std::size_t> hidden_widths,
                      std::size_t output_width, std::uint64_t seed) {
  Rng rng(seed);
  PolicyParams params;
  std::size_t in = input_width;
  auto add_layer = [&](std::size_t out, Activation act) {
    DenseLayer layer{in, out, act, std::vector<double>(in * out), std::vector<double>(out, 0.0)};
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& w : layer.weights) w = scale * rng.normal();
    params.layers.push_back(std::move(layer));
    in = out;
  };
  for (std::size_t width : hidden_widths) add_layer(width, Activation::kSilu);
  add_layer(output_width, Activation::kLinear);
  return params;
}

GradAccum GradAccum::zeros_like(const PolicyParams& params) {
  GradAccum g;
  g.layers.reserve(params.layers.size());
  for (const auto& l : params.layers) {
    g.layers.push_back({std::vector<double>(l.weights.size(), 0.0),
                        std::vector<double>(l.bias.size(), 0.0)});
  }
  return g;
}

void GradAccum::set_zero() {
  for (auto& l : layers) {
    std::fill(l.weights.begin(), l.weights.end(), 0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
  }
}

void GradAccum::scale(double factor) {
  for (auto& l : layers) {
    for (double& w : l.weights) w *= factor;
    for (double& b : l.bias) b *= factor;
  }
}

void GradAccum::add(const GradAccum& other, double factor) {
  if (other.layers.size() != layers.size()) throw ContractViolation("gradient shape mismatch");
  const auto& k = kernels::active();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (other.layers[i].weights.size() != layers[i].weights.size() ||
        other.layers[i].bias.size() != layers[i].bias.size()) {
      throw ContractViolation("gradient shape mismatch");
    }
    k.axpy(factor, other.layers[i].weights.data(), layers[i].weights.data(), layers[i].weights.size());
    k.axpy(factor, other.layers[i].bias.data(), layers[i].bias.data(), layers[i].bias.size());
  }
}

bool GradAccum::shape_matches(const PolicyParams& params) const {
  if (layers.size() != params.layers.size()) return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].weights.size() != params.layers[i].weights.size() ||
        layers[i].bias.size() != params.layers[i].bias.size()) {
      return false;
    }
  }
  return true;
}

std::vector<double> GradAccum::flatten() const {
  std::vector<double> out;
  for (const auto& l : layers) {
    out.insert(out.end(), l.weights.begin(), l.weights.end());
    out.insert(out.end(), l.bias.begin(), l.bias.end());
  }
  return out;
}

std::vector<double> flatten(const PolicyParams& params) {
  std::vector<double> out;
  out.reserve(params.parameter_count());
  for (const auto& l : params.layers) {
    out.insert(out.end(), l.weights.begin(), l.weights.end());
    out.insert(out.end(), l.bias.begin(), l.bias.end());
  }
  return out;
}

void unflatten(std::span<const double> values, PolicyParams& params) {
  if (values.size() != params.parameter_count()) {
    throw ContractViolation("flat parameter vector has wrong length");
  }
  std::size_t k = 0;
  for (auto& l : params.layers) {
    for (double& w : l.weights) w = values[k++];
    for (double& b : l.bias) b = values[k++];
  }
}

std::string parameter_name(const PolicyParams& params, std::size_t flat_index) {
  std::size_t offset = 0;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const auto& l = params.layers[i];
    if (flat_index < offset + l.weights.size()) return layer_array_name(i, false);
    offset += l.weights.size();
    if (flat_index < offset + l.bias.size()) return layer_array_name(i, true);
    offset += l.bias.size();
  }
  throw IndexError("flat parameter index out of range");
}

std::uint64_t checksum(const PolicyParams& params) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (char c : checkpoint_bytes(params)) {
    hash ^= static_cast<unsigned char>(c);
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::vector<double> net_forward(const PolicyParams& params, std::span<const double> input) {
  if (params.layers.empty() || input.size() != params.input_width()) {
    throw ContractViolation("net_forward: input length " + std::to_string(input.size()) +
                            " != network input width " + std::to_string(params.input_width()));
  }
  std::vector<double> out, a, b;
  evaluate_batch(params, input, 1, out, a, b);
  return out;
}

BackwardResult net_backward(const PolicyParams& params, std::span<const double> input,
                            std::span<const double> upstream) {
  if (params.layers.empty() || input.size() != params.input_width()) {
    throw ContractViolation("net_backward: input length does not match network input width");
  }
  if (upstream.size() != params.output_width()) {
    throw ContractViolation("net_backward: upstream length does not match network output width");
  }
  Tape tape;
  forward_batch(params, input, 1, tape);
  BackwardResult result{GradAccum::zeros_like(params), {}};
  backward_batch(params, tape, upstream, result.grads, &result.input_grad);
  return result;
}

std::span<const double> Tape::output() const { return output_; }

std::span<const double> Tape::output_row(std::size_t r) const {
  const std::size_t width = output_.size() / rows_;
  return std::span<const double>(output_).subspan(r * width, width);
}

void forward_batch(const PolicyParams& params, std::span<const double> input,
                   std::size_t rows, Tape& tape) {
  if (params.layers.empty() || input.size() != rows * params.input_width()) {
    throw ContractViolation("forward_batch: input size does not match rows x input width");
  }
  const auto& k = kernels::active();
  const std::size_t n_layers = params.layers.size();
  tape.rows_ = rows;
  tape.inputs_.resize(n_layers);
  tape.pre_.resize(n_layers);
  tape.inputs_[0].assign(input.begin(), input.end());
  for (std::size_t li = 0; li < n_layers; ++li) {
    const auto& l = params.layers[li];
    auto& pre = tape.pre_[li];
    pre.resize(rows * l.out_width);
    k.dense_forward(tape.inputs_[li].data(), rows, l.in_width, l.weights.data(),
                    l.bias.data(), l.out_width, pre.data());
    auto& next = (li + 1 < n_layers) ? tape.inputs_[li + 1] : tape.output_;
    next.resize(pre.size());
    activate(l.activation, pre, next);
  }
}

void backward_batch(const PolicyParams& params, const Tape& tape,
                    std::span<const double> upstream, GradAccum& grads,
                    std::vector<double>* input_grad) {
  if (upstream.size() != tape.rows_ * params.output_width()) {
    throw ContractViolation("backward_batch: upstream size does not match rows x output width");
  }
  if (!grads.shape_matches(params)) throw ContractViolation("backward_batch: gradient shape mismatch");
  const auto& k = kernels::active();
  const std::size_t rows = tape.rows_;
  std::vector<double> delta(upstream.begin(), upstream.end());
  std::vector<double> next_delta;
  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const auto& l = params.layers[li];
    activation_backward(l.activation, tape.pre_[li], delta);
    k.dense_backward_params(tape.inputs_[li].data(), delta.data(), rows, l.in_width,
                            l.out_width, grads.layers[li].weights.data(),
                            grads.layers[li].bias.data());
    if (li > 0 || input_grad != nullptr) {
      next_delta.resize(rows * l.in_width);
      k.dense_backward_input(delta.data(), rows, l.out_width, l.weights.data(), l.in_width,
                             next_delta.data());
      delta.swap(next_delta);
    }
  }
  if (input_grad != nullptr) *input_grad = std::move(delta);
}

void evaluate_batch(const PolicyParams& params, std::span<const double> input,
                    std::size_t rows, std::vector<double>& output,
                    std::vector<double>& scratch_a, std::vector<double>& scratch_b) {
  if (params.layers.empty() || input.size() != rows * params.input_width()) {
    throw ContractViolation("evaluate_batch: input size does not match rows x input width");
  }
  const auto& k = kernels::active();
  const double* current = input.data();
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    const auto& l = params.layers[li];
    const bool last = li + 1 == params.layers.size();
    auto& dst = last ? output : ((li % 2 == 0) ? scratch_a : scratch_b);
    dst.resize(rows * l.out_width);
    k.dense_forward(current, rows, l.in_width, l.weights.data(), l.bias.data(), l.out_width,
                    dst.data());
    activate(l.activation, dst, dst);
    current = dst.data();
  }
}

OptimizerState make_optimizer(const PolicyParams& params, const AdamwSettings& settings) {
  if (settings.total_steps < settings.warmup_steps) {
    throw ConfigError("optimizer total steps " + std::to_string(settings.total_steps) +
                      " < warmup steps " + std::to_string(settings.warmup_steps));
  }
  return OptimizerState{0, GradAccum::zeros_like(params), GradAccum::zeros_like(params), settings};
}

double cosine_lr(const OptimizerState& state) {
  const auto& s = state.settings;
  if (s.total_steps < s.warmup_steps) {
    throw ConfigError("cosine_lr: total steps < warmup steps");
  }
  if (state.step > s.total_steps) {
    throw ContractViolation("cosine_lr: step counter exceeds total steps");
  }
  if (state.step < s.warmup_steps) {
    return s.peak_lr * static_cast<double>(state.step) / static_cast<double>(s.warmup_steps);
  }
  const double floor = 0.01 * s.peak_lr;
  const std::uint64_t decay_steps = s.total_steps - s.warmup_steps;
  if (decay_steps == 0) return s.peak_lr;
  const double progress =
      static_cast<double>(state.step - s.warmup_steps) / static_cast<double>(decay_steps);
  return floor + (s.peak_lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_step(PolicyParams& params, const GradAccum& grads, OptimizerState& state) {
  if (!grads.shape_matches(params) || !state.first_moment.shape_matches(params) ||
      !state.second_moment.shape_matches(params)) {
    throw ContractViolation("adamw_step: parameter, gradient and moment shapes differ");
  }
  for (std::size_t li = 0; li < grads.layers.size(); ++li) {
    for (double g : grads.layers[li].weights) {
      if (!std::isfinite(g)) {
        throw TrainingError("non-finite gradient in " + layer_array_name(li, false),
                            layer_array_name(li, false), static_cast<std::int64_t>(state.step));
      }
    }
    for (double g : grads.layers[li].bias) {
      if (!std::isfinite(g)) {
        throw TrainingError("non-finite gradient in " + layer_array_name(li, true),
                            layer_array_name(li, true), static_cast<std::int64_t>(state.step));
      }
    }
  }
  const auto& s = state.settings;
  const double t = static_cast<double>(state.step + 1);
  const kernels::AdamwCoeffs c{cosine_lr(state), s.beta1, s.beta2, s.eps, s.weight_decay,
                               1.0 - std::pow(s.beta1, t), 1.0 - std::pow(s.beta2, t)};
  const auto& k = kernels::active();
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    auto& l = params.layers[li];
    k.adamw_update(l.weights.data(), grads.layers[li].weights.data(),
                   state.first_moment.layers[li].weights.data(),
                   state.second_moment.layers[li].weights.data(), l.weights.size(), c);
    k.adamw_update(l.bias.data(), grads.layers[li].bias.data(),
                   state.first_moment.layers[li].bias.data(),
                   state.second_moment.layers[li].bias.data(), l.bias.size(), c);
  }
  ++state.step;
}

std::vector<char> checkpoint_bytes(const PolicyParams& params) {
  std::ostringstream out(std::ios::binary);
  out.write(kMagic, 8);
  binio::write_u32(out, static_cast<std::uint32_t>(params.layers.size()));
  for (const auto& l : params.layers) {
    binio::write_u32(out, static_cast<std::uint32_t>(l.in_width));
    binio::write_u32(out, static_cast<std::uint32_t>(l.out_width));
    binio::write_u32(out, static_cast<std::uint32_t>(l.activation));
  }
  for (const auto& l : params.layers) {
    for (double w : l.weights) binio::write_f64(out, w);
    for (double b : l.bias) binio::write_f64(out, b);
  }
  const std::string s = out.str();
  return {s.begin(), s.end()};
}

void save_checkpoint(const PolicyParams& params, const std::filesystem::path& path) {
  params.validate();
  const auto bytes = checkpoint_bytes(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

PolicyParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  binio::expect_magic(in, kMagic, path.string());
  const std::uint32_t count = binio::read_u32(in, "layer count");
  if (count == 0 || count > 1024) throw IoError(path.string() + ": implausible layer count");
  PolicyParams params;
  params.layers.resize(count);
  for (auto& l : params.layers) {
    l.in_width = binio::read_u32(in, "layer in-width");
    l.out_width = binio::read_u32(in, "layer out-width");
    const std::uint32_t act = binio::read_u32(in, "layer activation");
    if (act > 1) throw IoError(path.string() + ": unknown activation id " + std::to_string(act));
    l.activation = static_cast<Activation>(act);
    if (l.in_width == 0 || l.out_width == 0 || l.in_width > (1u << 20) || l.out_width > (1u << 20)) {
      throw IoError(path.string() + ": implausible layer width");
    }
  }
  for (auto& l : params.layers) {
    l.weights.resize(l.in_width * l.out_width);
    l.bias.resize(l.out_width);
    for (double& w : l.weights) w = binio::read_f64(in, "weights");
    for (double& b : l.bias) b = binio::read_f64(in, "biases");
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw IoError(path.string() + ": trailing bytes after parameters");
  }
  try {
    params.validate();
  } catch (const ContractViolation& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return params;
}

}  // namespace deflect::diffnet
