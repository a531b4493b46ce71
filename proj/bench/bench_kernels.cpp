// Serial reference kernels against their OpenMP counterparts.
// Set OMP_NUM_THREADS to control the parallel side.

#include <benchmark/benchmark.h>

#include "iwdd/analysis.hpp"
#include "iwdd/variance.hpp"

using namespace iwdd;

namespace {

struct Fixture {
  Denoiser teacher = Denoiser::create(1, {64, 64, 64}, NoiseSchedule{}, 1);
  OneStepGenerator gen = make_generator(teacher);
  Dataset ds = standardize(generate_synthetic(500, Domain::Test, 0.1, 2)).first;
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

void BM_predict_po_serial(benchmark::State& state) {
  const auto& f = fixture();
  const auto sampler = generator_sampler(f.gen);
  for (auto _ : state) benchmark::DoNotOptimize(predict_po_serial(sampler, f.ds, 20, 1).y0.sum());
}

void BM_predict_po_parallel(benchmark::State& state) {
  const auto& f = fixture();
  const auto sampler = generator_sampler(f.gen);
  for (auto _ : state) benchmark::DoNotOptimize(predict_po(sampler, f.ds, 20, 1).y0.sum());
}

void BM_teacher_predict_parallel(benchmark::State& state) {
  const auto& f = fixture();
  const auto sampler = teacher_sampler(f.teacher, 18);
  for (auto _ : state) benchmark::DoNotOptimize(predict_po(sampler, f.ds, 4, 1).y0.sum());
}

const VarianceConfig kVar{4000, 16, 250, 3, false};

Eigen::VectorXd normal_x(Rng& rng) { return Eigen::VectorXd::Constant(1, rng.normal()); }
double logistic3(const Eigen::VectorXd& x) { return 1.0 / (1.0 + std::exp(-3.0 * x[0])); }

void BM_variance_serial(benchmark::State& state) {
  const auto& f = fixture();
  const GeneratorGradientSource src(f.gen, f.teacher, f.teacher, 0.7);
  for (auto _ : state)
    benchmark::DoNotOptimize(grad_variance_experiment_serial(src, normal_x, logistic3, kVar).trace_gap);
}

void BM_variance_parallel(benchmark::State& state) {
  const auto& f = fixture();
  const GeneratorGradientSource src(f.gen, f.teacher, f.teacher, 0.7);
  for (auto _ : state) benchmark::DoNotOptimize(grad_variance_experiment(src, normal_x, logistic3, kVar).trace_gap);
}

}  // namespace

BENCHMARK(BM_predict_po_serial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_predict_po_parallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_teacher_predict_parallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_variance_serial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_variance_parallel)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
