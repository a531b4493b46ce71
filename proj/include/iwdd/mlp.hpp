#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include <Eigen/Dense>

namespace iwdd {

enum class Activation : std::uint32_t { SiLU = 0, Tanh = 1 };

struct Layer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
};

// Parameter-shaped containers reuse Layer (gradients, Adam moments).
using LayerGrads = std::vector<Layer>;

// Fully connected network, hidden activations `activation`, linear output.
// Inputs and outputs are column-batched: (width x batch).
class Mlp {
 public:
  Mlp() = default;
  // All parameters zero.
  Mlp(std::vector<std::size_t> widths, Activation activation = Activation::SiLU);
  // Uniform fan-in initialisation U(-1/sqrt(in), 1/sqrt(in)) for weights and biases.
  static Mlp uniform_init(std::vector<std::size_t> widths, std::uint64_t seed,
                          Activation activation = Activation::SiLU);

  const std::vector<std::size_t>& widths() const { return widths_; }
  std::size_t input_width() const { return widths_.front(); }
  std::size_t output_width() const { return widths_.back(); }
  Activation activation() const { return activation_; }

  const std::vector<Layer>& layers() const { return layers_; }
  // Any mutable access invalidates outstanding forward caches.
  std::vector<Layer>& mutable_layers() {
    ++revision_;
    return layers_;
  }
  std::uint64_t revision() const { return revision_; }

  std::size_t parameter_count() const;
  Eigen::VectorXd flatten() const;
  void assign(const Eigen::VectorXd& flat);
  bool all_finite() const;

 private:
  std::vector<std::size_t> widths_;
  Activation activation_ = Activation::SiLU;
  std::vector<Layer> layers_;
  std::uint64_t revision_ = 0;
};

// Everything backward needs from a forward pass.
struct MlpCache {
  const Mlp* net = nullptr;
  std::uint64_t revision = 0;
  std::vector<Eigen::MatrixXd> inputs;  // input to layer l (post-activation of l-1)
  std::vector<Eigen::MatrixXd> preact;  // pre-activation of hidden layer l
};

Eigen::MatrixXd mlp_forward(const Mlp& net, const Eigen::MatrixXd& input, MlpCache* cache = nullptr);

// Back-propagated error signal at each layer's pre-activation output
// (out_l x batch), plus the gradient w.r.t. the network input.
struct MlpDeltas {
  std::vector<Eigen::MatrixXd> delta;
  Eigen::MatrixXd input_grad;
};

MlpDeltas mlp_deltas(const Mlp& net, const MlpCache& cache, const Eigen::MatrixXd& output_grad);

struct MlpBackward {
  LayerGrads grads;            // summed over the batch
  Eigen::MatrixXd input_grad;  // per example
};

// `output_grad` is dLoss/dOutput for every batch column.
MlpBackward mlp_backward(const Mlp& net, const MlpCache& cache, const Eigen::MatrixXd& output_grad);

LayerGrads zeros_like(const Mlp& net);
Eigen::VectorXd flatten(const LayerGrads& g);
bool all_finite(const LayerGrads& g);

struct AdamState {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  LayerGrads m, v;
};

AdamState make_adam(const Mlp& net, double learning_rate);
// Bias-corrected Adam update. Throws TrainingError on non-finite gradients
// and DataError on shape mismatch; the network is untouched in either case.
void adam_step(Mlp& net, const LayerGrads& grads, AdamState& state);

// Binary checkpoint; layout documented in docs/checkpoint_format.md.
void write_mlp(std::ostream& out, const Mlp& net);
Mlp read_mlp(std::istream& in);

}  // namespace iwdd
