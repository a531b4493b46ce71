#include "iwdd/mlp.hpp"

#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "iwdd/error.hpp"
#include "iwdd/rng.hpp"

namespace iwdd {

namespace {

constexpr char kMlpMagic[8] = {'I', 'W', 'D', 'D', 'M', 'L', 'P', '\0'};
constexpr std::uint32_t kMlpVersion = 1;

Eigen::MatrixXd activate(const Eigen::MatrixXd& z, Activation a) {
  switch (a) {
    case Activation::SiLU:
      return z.array() / (1.0 + (-z.array()).exp());
    case Activation::Tanh:
      return z.array().tanh();
  }
  return z;
}

Eigen::MatrixXd activate_derivative(const Eigen::MatrixXd& z, Activation a) {
  switch (a) {
    case Activation::SiLU: {
      const Eigen::ArrayXXd s = 1.0 / (1.0 + (-z.array()).exp());
      return s * (1.0 + z.array() * (1.0 - s));
    }
    case Activation::Tanh:
      return 1.0 - z.array().tanh().square();
  }
  return Eigen::MatrixXd::Ones(z.rows(), z.cols());
}

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("truncated network checkpoint");
  return v;
}

}  // namespace

Mlp::Mlp(std::vector<std::size_t> widths, Activation activation)
    : widths_(std::move(widths)), activation_(activation) {
  if (widths_.size() < 2) throw DataError("Mlp needs at least input and output widths");
  for (auto w : widths_)
    if (w == 0) throw DataError("Mlp layer width must be positive");
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    const auto in = static_cast<Eigen::Index>(widths_[l]);
    const auto out = static_cast<Eigen::Index>(widths_[l + 1]);
    layers_.push_back({Eigen::MatrixXd::Zero(out, in), Eigen::VectorXd::Zero(out)});
  }
}

Mlp Mlp::uniform_init(std::vector<std::size_t> widths, std::uint64_t seed, Activation activation) {
  Mlp net(std::move(widths), activation);
  Rng rng(seed);
  for (auto& layer : net.layers_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.weight.cols()));
    for (Eigen::Index j = 0; j < layer.weight.cols(); ++j)
      for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) layer.weight(i, j) = rng.uniform(-bound, bound);
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = rng.uniform(-bound, bound);
  }
  return net;
}

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

Eigen::VectorXd Mlp::flatten() const { return iwdd::flatten(layers_); }

void Mlp::assign(const Eigen::VectorXd& flat) {
  if (static_cast<std::size_t>(flat.size()) != parameter_count())
    throw DataError("Mlp::assign: parameter vector has wrong length");
  ++revision_;
  Eigen::Index k = 0;
  for (auto& l : layers_) {
    l.weight = Eigen::Map<const Eigen::MatrixXd>(flat.data() + k, l.weight.rows(), l.weight.cols());
    k += l.weight.size();
    l.bias = flat.segment(k, l.bias.size());
    k += l.bias.size();
  }
}

bool Mlp::all_finite() const { return iwdd::all_finite(layers_); }

Eigen::MatrixXd mlp_forward(const Mlp& net, const Eigen::MatrixXd& input, MlpCache* cache) {
  if (static_cast<std::size_t>(input.rows()) != net.input_width())
    throw DataError("mlp_forward: input has " + std::to_string(input.rows()) + " rows, network expects " +
                    std::to_string(net.input_width()));
  const auto& layers = net.layers();
  if (cache) {
    cache->net = &net;
    cache->revision = net.revision();
    cache->inputs.clear();
    cache->preact.clear();
  }
  Eigen::MatrixXd a = input;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Eigen::MatrixXd z = layers[l].weight * a;
    z.colwise() += layers[l].bias;
    if (cache) cache->inputs.push_back(std::move(a));
    if (l + 1 == layers.size()) return z;
    a = activate(z, net.activation());
    if (cache) cache->preact.push_back(std::move(z));
  }
  return a;
}

MlpDeltas mlp_deltas(const Mlp& net, const MlpCache& cache, const Eigen::MatrixXd& output_grad) {
  const auto& layers = net.layers();
  if (cache.net != &net || cache.revision != net.revision() || cache.inputs.size() != layers.size())
    throw DataError("mlp_backward: cache does not belong to the current network parameters");
  const auto batch = cache.inputs.front().cols();
  if (output_grad.rows() != static_cast<Eigen::Index>(net.output_width()) || output_grad.cols() != batch)
    throw DataError("mlp_backward: output gradient shape mismatch");
  MlpDeltas out;
  out.delta.resize(layers.size());
  Eigen::MatrixXd delta = output_grad;
  for (std::size_t l = layers.size(); l-- > 0;) {
    Eigen::MatrixXd upstream = layers[l].weight.transpose() * delta;
    out.delta[l] = std::move(delta);
    if (l == 0) {
      out.input_grad = std::move(upstream);
      break;
    }
    delta = upstream.cwiseProduct(activate_derivative(cache.preact[l - 1], net.activation()));
  }
  return out;
}

MlpBackward mlp_backward(const Mlp& net, const MlpCache& cache, const Eigen::MatrixXd& output_grad) {
  auto d = mlp_deltas(net, cache, output_grad);
  MlpBackward out;
  out.grads.resize(net.layers().size());
  for (std::size_t l = 0; l < out.grads.size(); ++l) {
    out.grads[l].weight = d.delta[l] * cache.inputs[l].transpose();
    out.grads[l].bias = d.delta[l].rowwise().sum();
  }
  out.input_grad = std::move(d.input_grad);
  return out;
}

LayerGrads zeros_like(const Mlp& net) {
  LayerGrads g;
  for (const auto& l : net.layers())
    g.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()), Eigen::VectorXd::Zero(l.bias.size())});
  return g;
}

Eigen::VectorXd flatten(const LayerGrads& g) {
  Eigen::Index n = 0;
  for (const auto& l : g) n += l.weight.size() + l.bias.size();
  Eigen::VectorXd flat(n);
  Eigen::Index k = 0;
  for (const auto& l : g) {
    flat.segment(k, l.weight.size()) = Eigen::Map<const Eigen::VectorXd>(l.weight.data(), l.weight.size());
    k += l.weight.size();
    flat.segment(k, l.bias.size()) = l.bias;
    k += l.bias.size();
  }
  return flat;
}

bool all_finite(const LayerGrads& g) {
  for (const auto& l : g)
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  return true;
}

AdamState make_adam(const Mlp& net, double learning_rate) {
  AdamState s;
  s.learning_rate = learning_rate;
  s.m = zeros_like(net);
  s.v = zeros_like(net);
  return s;
}

void adam_step(Mlp& net, const LayerGrads& grads, AdamState& s) {
  const auto& layers = net.layers();
  if (grads.size() != layers.size() || s.m.size() != layers.size() || s.v.size() != layers.size())
    throw DataError("adam_step: layer count mismatch");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (grads[l].weight.rows() != layers[l].weight.rows() || grads[l].weight.cols() != layers[l].weight.cols() ||
        grads[l].bias.size() != layers[l].bias.size() || s.m[l].weight.size() != layers[l].weight.size() ||
        s.v[l].bias.size() != layers[l].bias.size())
      throw DataError("adam_step: shape mismatch at layer " + std::to_string(l));
  }
  if (!all_finite(grads)) throw TrainingError("adam_step: non-finite gradient");

  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
    m = s.beta1 * m + (1.0 - s.beta1) * g;
    v = s.beta2 * v + (1.0 - s.beta2) * g.cwiseProduct(g);
    param.array() -= s.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + s.epsilon);
  };
  auto& mut = net.mutable_layers();
  for (std::size_t l = 0; l < mut.size(); ++l) {
    update(mut[l].weight, s.m[l].weight, s.v[l].weight, grads[l].weight);
    update(mut[l].bias, s.m[l].bias, s.v[l].bias, grads[l].bias);
  }
}

void write_mlp(std::ostream& out, const Mlp& net) {
  out.write(kMlpMagic, sizeof(kMlpMagic));
  put(out, kMlpVersion);
  put(out, static_cast<std::uint32_t>(net.activation()));
  put(out, static_cast<std::uint32_t>(net.widths().size()));
  for (auto w : net.widths()) put(out, static_cast<std::uint64_t>(w));
  for (const auto& l : net.layers()) {
    for (Eigen::Index i = 0; i < l.weight.rows(); ++i)
      for (Eigen::Index j = 0; j < l.weight.cols(); ++j) put(out, l.weight(i, j));
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) put(out, l.bias[i]);
  }
  if (!out) throw DataError("failed writing network checkpoint");
}

Mlp read_mlp(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMlpMagic, sizeof(magic)) != 0) throw DataError("not a network checkpoint");
  const auto version = get<std::uint32_t>(in);
  if (version != kMlpVersion) throw DataError("unsupported network checkpoint version " + std::to_string(version));
  const auto act = get<std::uint32_t>(in);
  if (act > 1) throw DataError("unknown activation tag in checkpoint");
  const auto count = get<std::uint32_t>(in);
  if (count < 2 || count > 64) throw DataError("implausible layer count in checkpoint");
  std::vector<std::size_t> widths;
  for (std::uint32_t i = 0; i < count; ++i) widths.push_back(static_cast<std::size_t>(get<std::uint64_t>(in)));
  Mlp net(widths, static_cast<Activation>(act));
  for (auto& l : net.mutable_layers()) {
    for (Eigen::Index i = 0; i < l.weight.rows(); ++i)
      for (Eigen::Index j = 0; j < l.weight.cols(); ++j) l.weight(i, j) = get<double>(in);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = get<double>(in);
  }
  if (!net.all_finite()) throw DataError("checkpoint contains non-finite parameters");
  return net;
}

}  // namespace iwdd
