#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace iwdd {

// Observational data: covariates x (n x d), binary treatment z, outcome y,
// plus oracle potential outcomes when the data are (semi-)synthetic.
struct Dataset {
  Eigen::MatrixXd covariates;            // n x d
  std::vector<std::uint8_t> treatments;  // 0 / 1
  Eigen::VectorXd outcomes;
  std::optional<Eigen::VectorXd> true_y0;
  std::optional<Eigen::VectorXd> true_y1;
  std::optional<Eigen::VectorXd> true_cate;

  std::size_t size() const { return treatments.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(covariates.cols()); }
  bool has_potential_outcomes() const { return true_y0.has_value() && true_y1.has_value(); }

  // Throws DataError when a Dataset invariant is violated.
  void validate() const;
};

struct StandardizationStats {
  Eigen::VectorXd mean_x;
  Eigen::VectorXd std_x;
  double mean_y = 0.0;
  double std_y = 1.0;
};

enum class Domain { Train, Test };

// x ~ N(0,1); z = 1{x < -1} (train) or Bernoulli(0.5) (test);
// y = sin(2x) + z exp(x) + eps, eps ~ N(0, noise_std^2).
// Oracle potential outcomes are the noiseless structural values.
Dataset generate_synthetic(std::size_t n, Domain domain, double noise_std, std::uint64_t seed);

// Column roles for CSV ingestion. Optional columns left empty are not read.
struct ColumnSpec {
  std::vector<std::string> covariates;
  std::string treatment = "z";
  std::string outcome = "y";
  std::string true_y0;
  std::string true_y1;
  std::string true_cate;
};

// Parses a header-row, comma-separated file. Errors name the offending
// column or the 1-based data row.
Dataset load_csv(const std::filesystem::path& path, const ColumnSpec& spec);
// Writes the columns named in `spec` (covariates, treatment, outcome, then any
// oracle columns that are present) using round-trip float formatting.
void write_csv(const Dataset& ds, const std::filesystem::path& path, const ColumnSpec& spec);
// Column spec used for files written from synthetic data: x0..x{d-1}, z, y, y0, y1, cate.
ColumnSpec default_columns(std::size_t dim, bool with_oracle);

// Population (1/n) moments. Constant columns keep std = 1.
StandardizationStats fit_standardization(const Dataset& ds);
Dataset apply_standardization(const Dataset& ds, const StandardizationStats& stats);
std::pair<Dataset, StandardizationStats> standardize(const Dataset& ds);
Eigen::VectorXd destandardize_y(const Eigen::VectorXd& values, const StandardizationStats& stats);

Dataset subset(const Dataset& ds, std::span<const std::size_t> rows);

// Random disjoint partition; the first part has round(n * fraction) rows.
std::pair<Dataset, Dataset> split(const Dataset& ds, double fraction, std::uint64_t seed);

double treated_fraction(const Dataset& ds);

}  // namespace iwdd
