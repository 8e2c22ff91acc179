#pragma once

#include <map>

#include "msp/dataset.hpp"
#include "msp/qmodel.hpp"

namespace msp {

// Unsigned activation grid {0 .. 2^bits - 1} * amax / (2^bits - 1).
struct ActQuant {
  int bits = 4;
  double amax = 1.0;

  double step() const { return amax / static_cast<double>((1 << bits) - 1); }
  int max_code() const { return (1 << bits) - 1; }
};

// STE forward: round(clip(a, 0, amax) / step) * step, ties rounding up.
double ste_forward(double a, const ActQuant& q);
// Quantization code of the forward value (round(clip(a)/step)).
int ste_code(double a, const ActQuant& q);
// Pass-through gradient mask: 1 inside [0, amax], 0 outside.
double ste_mask(double a, const ActQuant& q);

// ADMM auxiliaries for one quantized layer; shapes equal the GEMM matrix.
struct AdmmLayerState {
  WeightMatrix z;
  WeightMatrix u;
};

// Z^t = proj(W + U^{t-1}) row-wise under the scheme map (alpha optionally
// refit on W first); U^t = W - Z^t + U^{t-1}.
void admm_update(const WeightMatrix& w, SchemeMap& map, const SchemeTables& tables,
                 const AlphaPolicy& alpha_policy, bool refit_alpha, AdmmLayerState& state);

// Augmented-Lagrangian penalty (rho/2) * sum ||W - Z + U||^2; the W-gradient
// contribution is rho * (W - Z + U).
double augmented_penalty(const WeightMatrix& w, const AdmmLayerState& state, double rho);
void augmented_grad(const WeightMatrix& w, const AdmmLayerState& state, double rho,
                    std::span<double> grad_out);

// Forward/backward execution of a NetworkIR with optional activation
// quantizers. Single-threaded and deterministic.
class NetEngine {
 public:
  NetEngine(NetworkIR net, Shape input_dims, std::size_t num_classes);

  void enable_act_quant(int bits);
  void disable_act_quant();
  bool act_quant_enabled() const { return act_quant_; }

  // Sets per-layer clip values from the 99.9th percentile of pre-activations
  // (and of the raw input) over one float-mode batch.
  void calibrate(const Tensor& batch);
  double input_amax() const { return input_amax_; }
  void set_input_amax(double v) { input_amax_ = v; }
  std::map<std::size_t, double>& act_amax() { return act_amax_; }

  Tensor forward(const Tensor& x);
  double loss_and_grad(const Tensor& x, const std::vector<int>& labels);
  double accuracy(const Dataset& data, std::size_t batch = 256);

  NetworkIR& net() { return net_; }
  const Shape& input_dims() const { return input_dims_; }
  Tensor& grad_w(std::size_t layer_idx);
  Tensor& grad_b(std::size_t layer_idx);
  void zero_grads();
  // W -= lr * scale * (dW + l2 * W); b -= lr * db. l2 skips biases;
  // weight_step_scale (optional, per layer index) damps weight steps only.
  void sgd_step(double lr, double l2,
                const std::map<std::size_t, double>* weight_step_scale = nullptr);

 private:
  Tensor run(const Tensor& x, bool cache);
  void backward(const Tensor& dlogits);

  NetworkIR net_;
  Shape input_dims_;
  std::size_t num_classes_;
  bool act_quant_ = false;
  int act_bits_ = 4;
  double input_amax_ = 1.0;
  std::map<std::size_t, double> act_amax_;  // relu layer index -> clip
  std::map<std::size_t, Tensor> grads_w_, grads_b_;
  // forward caches, keyed by op order
  std::vector<Tensor> cache_in_;
  std::vector<std::vector<std::size_t>> cache_argmax_;
};

struct TrainConfig {
  int epochs = 150;
  int pretrain_epochs = 150;  // float phase before quantization-aware phase
  std::size_t batch = 32;
  double lr = 0.5;
  enum class Schedule { step, cosine };
  Schedule schedule = Schedule::cosine;
  int step_size = 50;
  double gamma = 0.1;
  double l2 = 1e-4;
  double rho = 1e-3;
  // The penalty coefficient anneals as rho * rho_growth^epoch so the
  // constraint binds late in training; the weight step is damped by
  // 1 / (1 + lr * rho) which keeps the quadratic term stable at any rho.
  double rho_growth = 1.1;
  int admm_period = 1;  // epochs between (Z, U) refreshes
  std::uint64_t seed = 7;
  bool quantize = true;
  QuantConfig qconfig;

  void validate() const;
};

struct EpochLog {
  int epoch = 0;
  double task_loss = 0;
  double penalty = 0;
  double feasibility_gap = 0;
  double train_acc = 0;
  double test_acc = 0;
};

struct TrainResult {
  Model model;
  std::vector<EpochLog> log;
  double float_baseline_test_acc = 0;  // after the float phase
  double final_test_acc = 0;           // hard-projected model (quant runs)
  double final_feasibility_gap = 0;    // pre-projection gap at the last epoch
};

// ADMM for weights, STE for activations; hard row-wise projection after the
// final epoch. Aborts with a divergence error on non-finite loss.
TrainResult train(const NetworkIR& net, const Shape& input_dims, std::size_t num_classes,
                  const Dataset& train_data, const Dataset& test_data, const TrainConfig& cfg);

// Sets activation clip values of a quantized model from a float forward over
// the first max_samples samples.
void calibrate_activations(Model& model, const Dataset& data, std::size_t max_samples = 256);

void write_training_log_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log);

}  // namespace msp
