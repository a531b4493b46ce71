#include "iwdd/variance.hpp"

#include <cmath>
#include <exception>

#include "iwdd/error.hpp"

namespace iwdd {

GeneratorGradientSource::GeneratorGradientSource(const OneStepGenerator& gen, const Denoiser& fake,
                                                 const Denoiser& teacher, double alpha)
    : gen_(gen), fake_(fake), teacher_(teacher), alpha_(alpha) {}

std::size_t GeneratorGradientSource::dimension() const { return gen_.net.net.parameter_count(); }

ExampleNoise GeneratorGradientSource::draw_noise(Eigen::Index batch, Rng& rng) const {
  ExampleNoise n{Eigen::VectorXd(batch), Eigen::VectorXd(batch), Eigen::VectorXd(batch)};
  const auto& s = teacher_.schedule;
  for (Eigen::Index i = 0; i < batch; ++i) {
    n.eps[i] = rng.normal();
    n.sigma[i] = sigma_of_t(s, std::min(1.0, rng.uniform() * s.t_max / 1000.0));
    n.eps_t[i] = rng.normal();
  }
  return n;
}

void GeneratorGradientSource::accumulate(const Conditioning& cond, const ExampleNoise& noise,
                                         const Eigen::VectorXd& scale, Eigen::VectorXd& sum, Eigen::VectorXd& sum_sq,
                                         Eigen::VectorXd& sq_norm) const {
  const auto b = cond.batch();
  DenoisePass gen_pass, fake_pass, teacher_pass;
  const Eigen::VectorXd y_g = generator_forward(gen_, cond, noise.eps, &gen_pass);
  const Eigen::VectorXd y_t = y_g + noise.sigma.cwiseProduct(noise.eps_t);
  const Eigen::VectorXd f_fake = denoise(fake_, y_t, noise.sigma, cond, &fake_pass);
  const Eigen::VectorXd f_teacher = denoise(teacher_, y_t, noise.sigma, cond, &teacher_pass);
  // w = batch size undoes the batch mean, leaving single-example gradients.
  const auto terms = generator_loss_terms(f_fake, f_teacher, y_g, alpha_, static_cast<double>(b), &scale);
  const Eigen::VectorXd upstream = terms.d_y_g + denoise_backward(fake_, fake_pass, terms.d_fake, false).d_input +
                                   denoise_backward(teacher_, teacher_pass, terms.d_teacher, false).d_input;
  const auto deltas = mlp_deltas(gen_.net.net, gen_pass.cache, upstream.cwiseProduct(gen_pass.c_out).transpose());

  sq_norm = Eigen::VectorXd::Zero(b);
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < deltas.delta.size(); ++l) {
    const Eigen::MatrixXd& d = deltas.delta[l];
    const Eigen::MatrixXd& a = gen_pass.cache.inputs[l];
    const Eigen::MatrixXd d2 = d.cwiseAbs2();
    const Eigen::MatrixXd a2 = a.cwiseAbs2();
    const Eigen::Index wsize = d.rows() * a.rows();
    const Eigen::MatrixXd g1 = d * a.transpose();
    const Eigen::MatrixXd g2 = d2 * a2.transpose();
    sum.segment(k, wsize) += Eigen::Map<const Eigen::VectorXd>(g1.data(), wsize);
    sum_sq.segment(k, wsize) += Eigen::Map<const Eigen::VectorXd>(g2.data(), wsize);
    k += wsize;
    sum.segment(k, d.rows()) += d.rowwise().sum();
    sum_sq.segment(k, d.rows()) += d2.rowwise().sum();
    k += d.rows();
    sq_norm += (d2.colwise().sum().array() * (a2.colwise().sum().array() + 1.0)).matrix().transpose();
  }
}

ExampleNoise ConstantGradientSource::draw_noise(Eigen::Index batch, Rng&) const {
  return {Eigen::VectorXd::Zero(batch), Eigen::VectorXd::Zero(batch), Eigen::VectorXd::Zero(batch)};
}

void ConstantGradientSource::accumulate(const Conditioning&, const ExampleNoise&, const Eigen::VectorXd& scale,
                                        Eigen::VectorXd& sum, Eigen::VectorXd& sum_sq,
                                        Eigen::VectorXd& sq_norm) const {
  sum += scale.sum() * c_;
  sum_sq += scale.squaredNorm() * c_.cwiseAbs2();
  sq_norm = scale.cwiseAbs2() * c_.squaredNorm();
}

namespace {

struct BlockStats {
  Eigen::VectorXd s1_ipw, s2_ipw, s1_iwdd, s2_iwdd;
  std::size_t count = 0;
  std::vector<double> norms_ipw, norms_iwdd;
};

void run_block(const GradientSource& source, const CovariateSampler& sample_x, const PropensityFn& propensity,
               const VarianceConfig& cfg, std::size_t block, std::size_t count, BlockStats& out) {
  const auto p = static_cast<Eigen::Index>(source.dimension());
  out.s1_ipw = out.s2_ipw = out.s1_iwdd = out.s2_iwdd = Eigen::VectorXd::Zero(p);
  out.count = count;
  Rng rng(cfg.seed, block);
  Eigen::VectorXd norms;
  for (std::size_t done = 0; done < count;) {
    const auto c = static_cast<Eigen::Index>(std::min(cfg.chunk, count - done));
    Conditioning ipw, iwdd;
    Eigen::VectorXd w(c);
    for (Eigen::Index i = 0; i < c; ++i) {
      const Eigen::VectorXd x = sample_x(rng);
      if (i == 0) {
        ipw.x.resize(x.size(), c);
        iwdd.x.resize(x.size(), c);
        ipw.z.resize(c);
        iwdd.z.resize(c);
      }
      const double pi = propensity(x);
      if (!(pi > 0.0 && pi < 1.0)) throw DataError("grad_variance_experiment: overlap violated (pi outside (0,1))");
      const int z_obs = rng.uniform() < pi ? 1 : 0;
      const int z_rct = rng.bernoulli(0.5) ? 1 : 0;
      ipw.x.col(i) = x;
      iwdd.x.col(i) = x;
      ipw.z[i] = z_obs;
      iwdd.z[i] = z_rct;
      w[i] = ipw_weight(pi, z_obs);
    }
    const ExampleNoise noise = source.draw_noise(c, rng);
    source.accumulate(ipw, noise, w, out.s1_ipw, out.s2_ipw, norms);
    if (cfg.keep_norms)
      for (Eigen::Index i = 0; i < c; ++i) out.norms_ipw.push_back(std::sqrt(norms[i]));
    source.accumulate(iwdd, noise, Eigen::VectorXd::Ones(c), out.s1_iwdd, out.s2_iwdd, norms);
    if (cfg.keep_norms)
      for (Eigen::Index i = 0; i < c; ++i) out.norms_iwdd.push_back(std::sqrt(norms[i]));
    done += static_cast<std::size_t>(c);
  }
}

double trace_of(const Eigen::VectorXd& s1, const Eigen::VectorXd& s2, double n) {
  return ((s2.array() - s1.array().square() / n).sum()) / (n - 1.0);
}

void check_config(const GradientSource& source, const VarianceConfig& cfg) {
  if (cfg.n_mc < 100) throw ConfigError("grad_variance_experiment: n_mc must be >= 100");
  if (cfg.blocks < 2 || cfg.blocks > cfg.n_mc) throw ConfigError("grad_variance_experiment: need 2 <= blocks <= n_mc");
  if (cfg.chunk == 0) throw ConfigError("grad_variance_experiment: chunk must be >= 1");
  if (source.dimension() == 0) throw ConfigError("grad_variance_experiment: gradient dimension is zero");
}

std::size_t block_count(const VarianceConfig& cfg, std::size_t k) {
  return cfg.n_mc / cfg.blocks + (k < cfg.n_mc % cfg.blocks ? 1 : 0);
}

GradVarianceReport reduce(std::vector<BlockStats>& blocks, const VarianceConfig& cfg, std::string regime) {
  const auto p = blocks.front().s1_ipw.size();
  Eigen::VectorXd s1_ipw = Eigen::VectorXd::Zero(p), s2_ipw = s1_ipw, s1_iwdd = s1_ipw, s2_iwdd = s1_ipw;
  for (const auto& b : blocks) {
    s1_ipw += b.s1_ipw;
    s2_ipw += b.s2_ipw;
    s1_iwdd += b.s1_iwdd;
    s2_iwdd += b.s2_iwdd;
  }
  const double n = static_cast<double>(cfg.n_mc);
  GradVarianceReport r;
  r.n_mc = cfg.n_mc;
  r.propensity_regime = std::move(regime);
  r.trace_var_ipw = trace_of(s1_ipw, s2_ipw, n);
  r.trace_var_iwdd = trace_of(s1_iwdd, s2_iwdd, n);
  r.trace_gap = r.trace_var_ipw - r.trace_var_iwdd;

  const auto k = blocks.size();
  std::vector<double> jk_ipw(k), jk_iwdd(k), jk_gap(k);
  for (std::size_t i = 0; i < k; ++i) {
    const double m = n - static_cast<double>(blocks[i].count);
    jk_ipw[i] = trace_of(s1_ipw - blocks[i].s1_ipw, s2_ipw - blocks[i].s2_ipw, m);
    jk_iwdd[i] = trace_of(s1_iwdd - blocks[i].s1_iwdd, s2_iwdd - blocks[i].s2_iwdd, m);
    jk_gap[i] = jk_ipw[i] - jk_iwdd[i];
  }
  auto jackknife_se = [k](const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(k);
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::sqrt(static_cast<double>(k - 1) / static_cast<double>(k) * ss);
  };
  r.mc_std_errors = {jackknife_se(jk_ipw), jackknife_se(jk_iwdd), jackknife_se(jk_gap)};
  if (cfg.keep_norms) {
    for (auto& b : blocks) {
      r.norms_ipw.insert(r.norms_ipw.end(), b.norms_ipw.begin(), b.norms_ipw.end());
      r.norms_iwdd.insert(r.norms_iwdd.end(), b.norms_iwdd.begin(), b.norms_iwdd.end());
    }
  }
  return r;
}

}  // namespace

GradVarianceReport grad_variance_experiment(const GradientSource& source, const CovariateSampler& sample_x,
                                            const PropensityFn& propensity, const VarianceConfig& cfg,
                                            std::string regime) {
  check_config(source, cfg);
  std::vector<BlockStats> blocks(cfg.blocks);
  std::exception_ptr error;
  const auto nblocks = static_cast<std::int64_t>(cfg.blocks);
#pragma omp parallel for schedule(dynamic, 1)
  for (std::int64_t k = 0; k < nblocks; ++k) {
    try {
      const auto kb = static_cast<std::size_t>(k);
      run_block(source, sample_x, propensity, cfg, kb, block_count(cfg, kb), blocks[kb]);
    } catch (...) {
#pragma omp critical
      error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  return reduce(blocks, cfg, std::move(regime));
}

GradVarianceReport grad_variance_experiment_serial(const GradientSource& source, const CovariateSampler& sample_x,
                                                   const PropensityFn& propensity, const VarianceConfig& cfg,
                                                   std::string regime) {
  check_config(source, cfg);
  std::vector<BlockStats> blocks(cfg.blocks);
  for (std::size_t k = 0; k < cfg.blocks; ++k) run_block(source, sample_x, propensity, cfg, k, block_count(cfg, k), blocks[k]);
  return reduce(blocks, cfg, std::move(regime));
}

}  // namespace iwdd
