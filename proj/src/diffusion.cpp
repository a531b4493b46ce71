#include "iwdd/diffusion.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "iwdd/error.hpp"

namespace iwdd {

void NoiseSchedule::validate() const {
  if (!(sigma_min > 0.0 && sigma_min < sigma_max)) throw ConfigError("schedule: need 0 < sigma_min < sigma_max");
  if (!(rho > 0.0)) throw ConfigError("schedule: rho must be positive");
  if (!(sigma_data > 0.0)) throw ConfigError("schedule: sigma_data must be positive");
  if (!(t_max >= 0.0 && t_max <= 1000.0)) throw ConfigError("schedule: t_max must lie in [0, 1000]");
  if (!(p_std >= 0.0)) throw ConfigError("schedule: p_std must be non-negative");
}

double sigma_of_t(const NoiseSchedule& s, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DataError("sigma_of_t: t must lie in [0, 1]");
  if (t == 1.0) return s.sigma_max;
  if (t == 0.0) return s.sigma_min;
  const double hi = std::pow(s.sigma_max, 1.0 / s.rho);
  const double lo = std::pow(s.sigma_min, 1.0 / s.rho);
  return std::pow(hi + (1.0 - t) * (lo - hi), s.rho);
}

Preconditioning precondition_coeffs(const NoiseSchedule& s, double sigma) {
  if (!(sigma > 0.0)) throw DataError("precondition_coeffs: sigma must be positive");
  const double sd2 = s.sigma_data * s.sigma_data;
  const double norm = std::sqrt(sigma * sigma + sd2);
  return {sd2 / (sigma * sigma + sd2), sigma * s.sigma_data / norm, 1.0 / norm, std::log(sigma)};
}

double edm_loss_weight(const NoiseSchedule& s, double sigma) {
  const double prod = sigma * s.sigma_data;
  return (sigma * sigma + s.sigma_data * s.sigma_data) / (prod * prod);
}

double sample_training_sigma(const NoiseSchedule& s, Rng& rng) { return std::exp(s.p_mean + s.p_std * rng.normal()); }

Conditioning conditioning_for_rows(const Dataset& ds, std::span<const std::size_t> rows) {
  Conditioning c;
  const auto b = static_cast<Eigen::Index>(rows.size());
  c.x.resize(ds.covariates.cols(), b);
  c.z.resize(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    c.x.col(i) = ds.covariates.row(static_cast<Eigen::Index>(rows[i])).transpose();
    c.z[i] = ds.treatments[rows[i]];
  }
  return c;
}

Conditioning conditioning_for_row(const Dataset& ds, std::size_t row, std::uint8_t z, Eigen::Index copies) {
  Conditioning c;
  c.x = ds.covariates.row(static_cast<Eigen::Index>(row)).transpose().replicate(1, copies);
  c.z = Eigen::VectorXd::Constant(copies, z);
  return c;
}

Denoiser Denoiser::create(std::size_t covariate_dim, const std::vector<std::size_t>& hidden,
                          const NoiseSchedule& schedule, std::uint64_t seed) {
  schedule.validate();
  std::vector<std::size_t> widths{covariate_dim + 3};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(1);
  return {Mlp::uniform_init(widths, seed), schedule, covariate_dim};
}

void Denoiser::validate() const {
  if (net.input_width() != covariate_dim + 3 || net.output_width() != 1)
    throw DataError("denoiser network shape does not match covariate dimension");
  schedule.validate();
}

Eigen::VectorXd denoise(const Denoiser& den, const Eigen::VectorXd& y_t, const Eigen::VectorXd& sigma,
                        const Conditioning& cond, DenoisePass* pass) {
  const auto b = y_t.size();
  if (sigma.size() != b || cond.batch() != b || cond.x.cols() != b)
    throw DataError("denoise: batch sizes of y_t, sigma and conditioning differ");
  if (static_cast<std::size_t>(cond.x.rows()) != den.covariate_dim)
    throw DataError("denoise: covariate dimension mismatch");
  const auto d = static_cast<Eigen::Index>(den.covariate_dim);
  Eigen::VectorXd c_skip(b), c_out(b), c_in(b);
  Eigen::MatrixXd input(d + 3, b);
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto pc = precondition_coeffs(den.schedule, sigma[i]);
    c_skip[i] = pc.c_skip;
    c_out[i] = pc.c_out;
    c_in[i] = pc.c_in;
    input(0, i) = pc.c_in * y_t[i];
    input(1, i) = pc.c_noise;
  }
  input.middleRows(2, d) = cond.x;
  input.row(d + 2) = cond.z.transpose();
  const Eigen::MatrixXd f = mlp_forward(den.net, input, pass ? &pass->cache : nullptr);
  Eigen::VectorXd out = c_skip.cwiseProduct(y_t) + c_out.cwiseProduct(f.row(0).transpose());
  if (pass) {
    pass->c_skip = std::move(c_skip);
    pass->c_out = std::move(c_out);
    pass->c_in = std::move(c_in);
  }
  return out;
}

DenoiseGrad denoise_backward(const Denoiser& den, const DenoisePass& pass, const Eigen::VectorXd& upstream,
                             bool want_params) {
  if (upstream.size() != pass.c_out.size()) throw DataError("denoise_backward: gradient length mismatch");
  const Eigen::MatrixXd out_grad = upstream.cwiseProduct(pass.c_out).transpose();
  DenoiseGrad g;
  Eigen::MatrixXd input_grad;
  if (want_params) {
    auto back = mlp_backward(den.net, pass.cache, out_grad);
    g.params = std::move(back.grads);
    input_grad = std::move(back.input_grad);
  } else {
    input_grad = mlp_deltas(den.net, pass.cache, out_grad).input_grad;
  }
  g.d_input = upstream.cwiseProduct(pass.c_skip) + pass.c_in.cwiseProduct(input_grad.row(0).transpose());
  return g;
}

PretrainResult pretrain(Denoiser init, const Dataset& ds, const PretrainConfig& cfg) {
  ds.validate();
  init.validate();
  if (ds.dim() != init.covariate_dim) throw DataError("pretrain: dataset dimension differs from denoiser");
  if (cfg.batch == 0) throw ConfigError("pretrain: batch must be >= 1");
  PretrainResult result{std::move(init), {}};
  Denoiser& den = result.denoiser;
  const auto& sched = den.schedule;
  auto adam = make_adam(den.net, cfg.learning_rate);
  Rng rng(cfg.seed);
  const auto b = static_cast<Eigen::Index>(cfg.batch);
  std::vector<std::size_t> rows(cfg.batch);
  Eigen::VectorXd y(b), sigma(b), y_t(b), weight(b);
  double interval_sum = 0.0;
  std::size_t interval_count = 0;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (Eigen::Index i = 0; i < b; ++i) {
      rows[i] = rng.index(ds.size());
      y[i] = ds.outcomes[static_cast<Eigen::Index>(rows[i])];
      sigma[i] = sample_training_sigma(sched, rng);
      y_t[i] = y[i] + sigma[i] * rng.normal();
      weight[i] = edm_loss_weight(sched, sigma[i]);
    }
    const auto cond = conditioning_for_rows(ds, rows);
    DenoisePass pass;
    const Eigen::VectorXd out = denoise(den, y_t, sigma, cond, &pass);
    const Eigen::VectorXd resid = out - y;
    const double loss = weight.cwiseProduct(resid.cwiseAbs2()).mean();
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "pretrain: non-finite loss at step " << step << " (sigma range " << sigma.minCoeff() << ".."
          << sigma.maxCoeff() << ")";
      throw TrainingError(msg.str());
    }
    interval_sum += loss;
    ++interval_count;
    if (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) {
      result.log.push_back({step + 1, interval_sum / static_cast<double>(interval_count)});
      interval_sum = 0.0;
      interval_count = 0;
    }
    const Eigen::VectorXd upstream = 2.0 * weight.cwiseProduct(resid) / static_cast<double>(b);
    const auto grad = denoise_backward(den, pass, upstream, true);
    if (cfg.min_lr_fraction < 1.0) {
      const double progress = static_cast<double>(step) / static_cast<double>(cfg.steps);
      const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
      adam.learning_rate = cfg.learning_rate * (cfg.min_lr_fraction + (1.0 - cfg.min_lr_fraction) * cosine);
    }
    adam_step(den.net, grad.params, adam);
  }
  if (interval_count > 0 && cfg.log_every > 0)
    result.log.push_back({cfg.steps, interval_sum / static_cast<double>(interval_count)});
  return result;
}

double edm_loss(const Denoiser& den, const Dataset& ds, std::size_t draws_per_row, std::uint64_t seed) {
  Rng rng(seed);
  const auto n = ds.size() * draws_per_row;
  std::vector<std::size_t> rows(n);
  Eigen::VectorXd y(n), sigma(n), y_t(n), weight(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    rows[k] = k % ds.size();
    y[i] = ds.outcomes[static_cast<Eigen::Index>(rows[k])];
    sigma[i] = sample_training_sigma(den.schedule, rng);
    y_t[i] = y[i] + sigma[i] * rng.normal();
    weight[i] = edm_loss_weight(den.schedule, sigma[i]);
  }
  const Eigen::VectorXd out = denoise(den, y_t, sigma, conditioning_for_rows(ds, rows));
  return weight.cwiseProduct((out - y).cwiseAbs2()).mean();
}

std::vector<double> heun_sigmas(const NoiseSchedule& s, std::size_t steps) {
  if (steps == 0) throw DataError("sampler needs at least one step");
  std::vector<double> out;
  const double hi = std::pow(s.sigma_max, 1.0 / s.rho);
  const double lo = std::pow(s.sigma_min, 1.0 / s.rho);
  for (std::size_t i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    out.push_back(std::pow(hi + frac * (lo - hi), s.rho));
  }
  out.push_back(0.0);
  return out;
}

Eigen::VectorXd sample_reverse(const Denoiser& den, const Conditioning& cond, std::size_t steps,
                               const Eigen::VectorXd& start_noise) {
  const auto sigmas = heun_sigmas(den.schedule, steps);
  const auto b = cond.batch();
  if (start_noise.size() != b) throw DataError("sample_reverse: noise length differs from batch");
  Eigen::VectorXd y = sigmas.front() * start_noise;
  for (std::size_t i = 0; i + 1 < sigmas.size(); ++i) {
    const double cur = sigmas[i];
    const double next = sigmas[i + 1];
    const Eigen::VectorXd slope = (y - denoise(den, y, Eigen::VectorXd::Constant(b, cur), cond)) / cur;
    Eigen::VectorXd proposal = y + (next - cur) * slope;
    if (next > 0.0) {
      const Eigen::VectorXd slope2 =
          (proposal - denoise(den, proposal, Eigen::VectorXd::Constant(b, next), cond)) / next;
      proposal = y + (next - cur) * 0.5 * (slope + slope2);
    }
    y = std::move(proposal);
  }
  return y;
}

Eigen::VectorXd sample_reverse(const Denoiser& den, const Conditioning& cond, std::size_t steps, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::VectorXd noise(cond.batch());
  for (Eigen::Index i = 0; i < noise.size(); ++i) noise[i] = rng.normal();
  return sample_reverse(den, cond, steps, noise);
}

namespace {
constexpr char kDenMagic[8] = {'I', 'W', 'D', 'D', 'D', 'E', 'N', '\0'};
constexpr std::uint32_t kDenVersion = 1;
}  // namespace

void write_denoiser(std::ostream& out, const Denoiser& den) {
  out.write(kDenMagic, sizeof(kDenMagic));
  const std::uint32_t version = kDenVersion;
  const auto dim = static_cast<std::uint64_t>(den.covariate_dim);
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
  const auto& s = den.schedule;
  for (double v : {s.sigma_min, s.sigma_max, s.rho, s.sigma_data, s.t_max, s.p_mean, s.p_std})
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  write_mlp(out, den.net);
}

Denoiser read_denoiser(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kDenMagic, sizeof(magic)) != 0) throw DataError("not a denoiser checkpoint");
  std::uint32_t version = 0;
  std::uint64_t dim = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&dim), sizeof(dim));
  if (!in || version != kDenVersion) throw DataError("unsupported denoiser checkpoint version");
  Denoiser den;
  den.covariate_dim = static_cast<std::size_t>(dim);
  auto& s = den.schedule;
  for (double* v : {&s.sigma_min, &s.sigma_max, &s.rho, &s.sigma_data, &s.t_max, &s.p_mean, &s.p_std})
    in.read(reinterpret_cast<char*>(v), sizeof(double));
  if (!in) throw DataError("truncated denoiser checkpoint");
  den.net = read_mlp(in);
  den.validate();
  return den;
}

void save_denoiser(const std::filesystem::path& path, const Denoiser& den) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  write_denoiser(out, den);
}

Denoiser load_denoiser(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return read_denoiser(in);
}

}  // namespace iwdd
