#include "iwdd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "iwdd/error.hpp"

namespace iwdd {

OneStepGenerator make_generator(const Denoiser& teacher, double sigma_init) {
  if (!(sigma_init > teacher.schedule.sigma_min && sigma_init < teacher.schedule.sigma_max))
    throw ConfigError("sigma_init must lie strictly between sigma_min and sigma_max");
  return {teacher, sigma_init};
}

Eigen::VectorXd generator_forward(const OneStepGenerator& gen, const Conditioning& cond, const Eigen::VectorXd& eps,
                                  DenoisePass* pass) {
  const auto b = eps.size();
  return denoise(gen.net, gen.sigma_init * eps, Eigen::VectorXd::Constant(b, gen.sigma_init), cond, pass);
}

Conditioning randomization_adjust(const Eigen::MatrixXd& x_batch, Rng& rng) {
  const auto b = x_batch.cols();
  if (b == 0) throw DataError("randomization_adjust: empty batch");
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(b));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  Conditioning out;
  out.x.resize(x_batch.rows(), b);
  out.z.resize(b);
  for (Eigen::Index i = 0; i < b; ++i) out.x.col(i) = x_batch.col(perm[static_cast<std::size_t>(i)]);
  for (Eigen::Index i = 0; i < b; ++i) out.z[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  return out;
}

TimeDraw time_and_noise(const NoiseSchedule& s, Eigen::Index batch, Rng& rng) {
  TimeDraw td;
  td.t = rng.uniform() * (s.t_max / 1000.0);
  td.sigma = sigma_of_t(s, std::min(td.t, 1.0));
  td.eps_t.resize(batch);
  for (Eigen::Index i = 0; i < batch; ++i) td.eps_t[i] = rng.normal();
  return td;
}

LossWeight weight_wt(const Eigen::VectorXd& y_g, const Eigen::VectorXd& teacher_out, double c) {
  if (y_g.size() == 0 || y_g.size() != teacher_out.size()) throw DataError("weight_wt: empty or mismatched batch");
  const double denom = (y_g - teacher_out).cwiseAbs().mean();
  if (!(denom >= kWeightFloor)) return {c / kWeightFloor, true};
  return {c / denom, false};
}

GeneratorLossTerms generator_loss_terms(const Eigen::VectorXd& fake_out, const Eigen::VectorXd& teacher_out,
                                        const Eigen::VectorXd& y_g, double alpha, double w,
                                        const Eigen::VectorXd* example_weights) {
  const auto b = y_g.size();
  if (fake_out.size() != b || teacher_out.size() != b || (example_weights && example_weights->size() != b))
    throw DataError("generator_loss: shape mismatch");
  const Eigen::ArrayXd gap = (fake_out - teacher_out).array();  // f_psi - f_phi; the loss uses -gap
  const Eigen::ArrayXd to_sample = (fake_out - y_g).array();    // f_psi - y_g
  Eigen::ArrayXd scale = Eigen::ArrayXd::Constant(b, w / static_cast<double>(b));
  if (example_weights) scale *= example_weights->array();

  GeneratorLossTerms t;
  t.loss = (scale * (-gap * to_sample + (1.0 - alpha) * gap.square())).sum();
  t.d_fake = (scale * (-to_sample - gap + 2.0 * (1.0 - alpha) * gap)).matrix();
  t.d_teacher = (scale * (to_sample - 2.0 * (1.0 - alpha) * gap)).matrix();
  t.d_y_g = (scale * gap).matrix();
  return t;
}

GeneratorStep generator_loss(const OneStepGenerator& gen, const Denoiser& fake, const Denoiser& teacher,
                             const Conditioning& cond, const Eigen::VectorXd& eps, const TimeDraw& td, double alpha,
                             double weight_c, const Eigen::VectorXd* example_weights, std::optional<double> fixed_w) {
  const auto b = eps.size();
  if (td.eps_t.size() != b) throw DataError("generator_loss: noise batch mismatch");
  GeneratorStep step;
  DenoisePass gen_pass, fake_pass, teacher_pass;
  step.y_g = generator_forward(gen, cond, eps, &gen_pass);
  const Eigen::VectorXd y_t = step.y_g + td.sigma * td.eps_t;
  const Eigen::VectorXd sigma = Eigen::VectorXd::Constant(b, td.sigma);
  const Eigen::VectorXd f_fake = denoise(fake, y_t, sigma, cond, &fake_pass);
  const Eigen::VectorXd f_teacher = denoise(teacher, y_t, sigma, cond, &teacher_pass);
  step.w = fixed_w ? LossWeight{*fixed_w, false} : weight_wt(step.y_g, f_teacher, weight_c);

  const auto terms = generator_loss_terms(f_fake, f_teacher, step.y_g, alpha, step.w.value, example_weights);
  step.loss = terms.loss;
  const Eigen::VectorXd d_y_t = denoise_backward(fake, fake_pass, terms.d_fake, false).d_input +
                                denoise_backward(teacher, teacher_pass, terms.d_teacher, false).d_input;
  step.grads = denoise_backward(gen.net, gen_pass, terms.d_y_g + d_y_t, true).params;
  return step;
}

double fake_loss_value(const Eigen::VectorXd& fake_out, const Eigen::VectorXd& y_g, double gamma) {
  if (fake_out.size() != y_g.size() || y_g.size() == 0) throw DataError("fake_loss: shape mismatch");
  return gamma * (fake_out - y_g).squaredNorm() / static_cast<double>(y_g.size());
}

FakeStep fake_loss(const Denoiser& fake, const Denoiser& teacher, const Eigen::VectorXd& y_g, const TimeDraw& td,
                   const Conditioning& cond, double weight_c, std::optional<double> fixed_gamma) {
  const auto b = y_g.size();
  if (td.eps_t.size() != b) throw DataError("fake_loss: noise batch mismatch");
  const Eigen::VectorXd y_t = y_g + td.sigma * td.eps_t;
  const Eigen::VectorXd sigma = Eigen::VectorXd::Constant(b, td.sigma);
  FakeStep step;
  if (fixed_gamma) {
    step.gamma = {*fixed_gamma, false};
  } else {
    step.gamma = weight_wt(y_g, denoise(teacher, y_t, sigma, cond), weight_c);
  }
  DenoisePass pass;
  const Eigen::VectorXd f_fake = denoise(fake, y_t, sigma, cond, &pass);
  step.loss = fake_loss_value(f_fake, y_g, step.gamma.value);
  const Eigen::VectorXd upstream = 2.0 * step.gamma.value * (f_fake - y_g) / static_cast<double>(b);
  step.grads = denoise_backward(fake, pass, upstream, true).params;
  return step;
}

Eigen::VectorXd PropensityModel::logits(const Eigen::MatrixXd& x_cols) const {
  return mlp_forward(net, x_cols).row(0).transpose();
}

Eigen::VectorXd PropensityModel::predict(const Eigen::MatrixXd& x_cols) const {
  return (1.0 / (1.0 + (-logits(x_cols).array()).exp())).matrix();
}

PropensityModel propensity_fit(const Dataset& ds, const PropensityConfig& cfg) {
  ds.validate();
  if (cfg.batch == 0) throw ConfigError("propensity: batch must be >= 1");
  std::vector<std::size_t> widths{ds.dim()};
  widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
  widths.push_back(1);
  PropensityModel model{Mlp::uniform_init(widths, cfg.seed ^ 0x9e3779b97f4a7c15ULL)};
  auto adam = make_adam(model.net, cfg.learning_rate);
  Rng rng(cfg.seed);
  const auto b = static_cast<Eigen::Index>(cfg.batch);
  Eigen::MatrixXd x(ds.dim(), b);
  Eigen::RowVectorXd z(b);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (Eigen::Index i = 0; i < b; ++i) {
      const auto r = rng.index(ds.size());
      x.col(i) = ds.covariates.row(static_cast<Eigen::Index>(r)).transpose();
      z[i] = ds.treatments[r];
    }
    MlpCache cache;
    const Eigen::MatrixXd logit = mlp_forward(model.net, x, &cache);
    const Eigen::RowVectorXd p = (1.0 / (1.0 + (-logit.array()).exp())).matrix();
    // d mean-BCE / d logit = (p - z) / B
    const Eigen::MatrixXd grad = (p - z) / static_cast<double>(b);
    adam_step(model.net, mlp_backward(model.net, cache, grad).grads, adam);
  }
  return model;
}

double ipw_weight(double pi_hat, int z, std::optional<double> clip) {
  if (!(pi_hat > 0.0 && pi_hat < 1.0)) throw DataError("ipw_weight: propensity must lie in (0, 1)");
  double w = z == 1 ? 0.5 / pi_hat : 0.5 / (1.0 - pi_hat);
  if (clip) w = std::min(w, *clip);
  return w;
}

double ipw_weight_from_logit(double logit, int z, std::optional<double> clip) {
  // 1/pi = 1 + exp(-logit), 1/(1 - pi) = 1 + exp(logit)
  const double l = std::clamp(logit, -700.0, 700.0);
  double w = 0.5 * (1.0 + std::exp(z == 1 ? -l : l));
  if (clip) w = std::min(w, *clip);
  return w;
}

std::optional<std::string> DistillConfig::validate() const {
  if (batch < 2) throw ConfigError("distill: batch must be >= 2");
  if (!(lr_theta >= 0.0 && lr_psi >= 0.0)) throw ConfigError("distill: learning rates must be non-negative");
  if (!(weight_c > 0.0)) throw ConfigError("distill: weight constant C must be positive");
  if (ipw_clip && !(*ipw_clip > 0.0)) throw ConfigError("distill: ipw clip must be positive");
  if (!std::isfinite(alpha)) throw ConfigError("distill: alpha must be finite");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ConfigError("distill: adam_beta1 must lie in [0, 1)");
  if (alpha < 0.3 || alpha > 1.2) {
    std::ostringstream msg;
    msg << "alpha = " << alpha << " lies outside the ablated range [0.3, 1.2]";
    return msg.str();
  }
  return std::nullopt;
}

namespace {

DistillResult run_distillation(const Denoiser& teacher, const Dataset& ds, const DistillConfig& cfg,
                               const PropensityModel* propensity) {
  ds.validate();
  teacher.validate();
  cfg.validate();
  if (ds.dim() != teacher.covariate_dim) throw DataError("distill: dataset dimension differs from teacher");
  if (cfg.batch > ds.size()) throw ConfigError("distill: batch larger than the dataset");

  DistillResult res{make_generator(teacher, cfg.sigma_init), teacher, {}, 0, 0, 0.0, std::nullopt};
  auto adam_theta = make_adam(res.generator.net.net, cfg.lr_theta);
  auto adam_psi = make_adam(res.fake.net, cfg.lr_psi);
  adam_theta.beta1 = adam_psi.beta1 = cfg.adam_beta1;
  Rng rng(cfg.seed);
  const auto b = static_cast<Eigen::Index>(cfg.batch);
  std::vector<std::size_t> pool(ds.size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  std::vector<std::size_t> rows(cfg.batch);
  double sum_theta = 0.0, sum_psi = 0.0, sum_w = 0.0, sum_gamma = 0.0;
  std::size_t count = 0;

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    // mini-batch without replacement (partial Fisher-Yates)
    for (std::size_t i = 0; i < cfg.batch; ++i) {
      const auto j = i + rng.index(pool.size() - i);
      std::swap(pool[i], pool[j]);
      rows[i] = pool[i];
    }
    const Conditioning observed = conditioning_for_rows(ds, rows);
    Conditioning gen_cond;
    Eigen::VectorXd example_weights;
    if (cfg.mode == DistillMode::Marginal) {
      gen_cond = randomization_adjust(observed.x, rng);
    } else {
      gen_cond = observed;
    }
    if (cfg.mode == DistillMode::ExplicitIpw) {
      const Eigen::VectorXd logits = propensity->logits(observed.x);
      example_weights.resize(b);
      for (Eigen::Index i = 0; i < b; ++i) {
        example_weights[i] = ipw_weight_from_logit(logits[i], static_cast<int>(observed.z[i]), cfg.ipw_clip);
        res.max_example_weight = std::max(res.max_example_weight, example_weights[i]);
      }
    }
    Eigen::VectorXd eps(b);
    for (Eigen::Index i = 0; i < b; ++i) eps[i] = rng.normal();
    const TimeDraw td = time_and_noise(teacher.schedule, b, rng);

    // The fake network tracks the generator on observational pairs, so its
    // target sample is drawn at (x, z) with the pre-update theta.
    const Eigen::VectorXd y_g_observed =
        cfg.mode == DistillMode::Marginal ? generator_forward(res.generator, observed, eps) : Eigen::VectorXd{};

    const auto gen_step = generator_loss(res.generator, res.fake, teacher, gen_cond, eps, td, cfg.alpha, cfg.weight_c,
                                         cfg.mode == DistillMode::ExplicitIpw ? &example_weights : nullptr);
    const Eigen::VectorXd& fake_target = cfg.mode == DistillMode::Marginal ? y_g_observed : gen_step.y_g;
    const auto fake_step = fake_loss(res.fake, teacher, fake_target, td, observed, cfg.weight_c);

    if (!std::isfinite(gen_step.loss) || !std::isfinite(fake_step.loss) || !all_finite(gen_step.grads) ||
        !all_finite(fake_step.grads)) {
      std::ostringstream msg;
      msg << "distill: non-finite loss or gradient at iteration " << it << " (L_theta=" << gen_step.loss
          << ", L_psi=" << fake_step.loss << ", sigma_t=" << td.sigma << ")";
      res.failure = msg.str();
      return res;
    }
    res.clamped_weights += gen_step.w.clamped + fake_step.gamma.clamped;
    adam_step(res.generator.net.net, gen_step.grads, adam_theta);
    adam_step(res.fake.net, fake_step.grads, adam_psi);
    res.completed_iterations = it + 1;

    sum_theta += gen_step.loss;
    sum_psi += fake_step.loss;
    sum_w += gen_step.w.value;
    sum_gamma += fake_step.gamma.value;
    ++count;
    if (cfg.log_every > 0 && ((it + 1) % cfg.log_every == 0 || it + 1 == cfg.iterations)) {
      const double n = static_cast<double>(count);
      res.log.push_back({it + 1, sum_theta / n, sum_psi / n, sum_w / n, sum_gamma / n});
      sum_theta = sum_psi = sum_w = sum_gamma = 0.0;
      count = 0;
    }
  }
  return res;
}

constexpr char kGenMagic[8] = {'I', 'W', 'D', 'D', 'G', 'E', 'N', '\0'};

}  // namespace

DistillResult distill(const Denoiser& teacher, const Dataset& ds, const DistillConfig& cfg) {
  if (cfg.mode == DistillMode::ExplicitIpw) throw ConfigError("distill: explicit-ipw mode needs distill_ipw");
  return run_distillation(teacher, ds, cfg, nullptr);
}

DistillResult distill_ipw(const Denoiser& teacher, const Dataset& ds, const PropensityModel& propensity,
                          const DistillConfig& cfg) {
  if (cfg.mode != DistillMode::ExplicitIpw) throw ConfigError("distill_ipw: config mode must be explicit-ipw");
  if (propensity.net.input_width() != ds.dim()) throw DataError("distill_ipw: propensity model dimension mismatch");
  return run_distillation(teacher, ds, cfg, &propensity);
}

void save_generator(const std::filesystem::path& path, const OneStepGenerator& gen) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kGenMagic, sizeof(kGenMagic));
  out.write(reinterpret_cast<const char*>(&gen.sigma_init), sizeof(double));
  write_denoiser(out, gen.net);
}

OneStepGenerator load_generator(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kGenMagic, sizeof(magic)) != 0) throw DataError("not a generator checkpoint");
  OneStepGenerator gen;
  in.read(reinterpret_cast<char*>(&gen.sigma_init), sizeof(double));
  gen.net = read_denoiser(in);
  return gen;
}

void save_propensity(const std::filesystem::path& path, const PropensityModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  write_mlp(out, model.net);
}

PropensityModel load_propensity(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return {read_mlp(in)};
}

}  // namespace iwdd
