#include "iwdd/tabular.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "iwdd/error.hpp"
#include "iwdd/rng.hpp"

namespace iwdd {

void Dataset::validate() const {
  const auto n = treatments.size();
  if (n == 0) throw DataError("dataset is empty");
  if (static_cast<std::size_t>(covariates.rows()) != n || static_cast<std::size_t>(outcomes.size()) != n)
    throw DataError("dataset columns have inconsistent lengths");
  for (std::size_t i = 0; i < n; ++i)
    if (treatments[i] > 1) throw DataError("treatment at row " + std::to_string(i) + " is not 0/1");
  for (const auto* col : {&true_y0, &true_y1, &true_cate})
    if (col->has_value() && static_cast<std::size_t>((*col)->size()) != n)
      throw DataError("oracle column length differs from dataset size");
  if (true_cate && has_potential_outcomes()) {
    const Eigen::VectorXd diff = *true_y1 - *true_y0;
    for (std::size_t i = 0; i < n; ++i) {
      const double tol = 1e-9 * std::max(1.0, std::abs(diff[i]));
      if (std::abs(diff[i] - (*true_cate)[i]) > tol)
        throw DataError("true_cate != true_y1 - true_y0 at row " + std::to_string(i));
    }
  }
}

Dataset generate_synthetic(std::size_t n, Domain domain, double noise_std, std::uint64_t seed) {
  if (n == 0) throw DataError("generate_synthetic: n must be >= 1");
  if (!(noise_std >= 0.0)) throw DataError("generate_synthetic: noise_std must be >= 0");
  Rng rng(seed);
  Dataset ds;
  ds.covariates.resize(n, 1);
  ds.treatments.resize(n);
  ds.outcomes.resize(n);
  Eigen::VectorXd y0(n), y1(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.normal();
    const bool z = domain == Domain::Train ? x < -1.0 : rng.bernoulli(0.5);
    const double eps = noise_std * rng.normal();
    y0[i] = std::sin(2.0 * x);
    y1[i] = std::sin(2.0 * x) + std::exp(x);
    ds.covariates(i, 0) = x;
    ds.treatments[i] = z ? 1 : 0;
    ds.outcomes[i] = (z ? y1[i] : y0[i]) + eps;
  }
  ds.true_cate = y1 - y0;
  ds.true_y0 = std::move(y0);
  ds.true_y1 = std::move(y1);
  return ds;
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') {
      quoted = !quoted;
    } else if (c == ',' && !quoted) {
      out.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  out.push_back(field);
  for (auto& f : out) {
    const auto b = f.find_first_not_of(" \t");
    const auto e = f.find_last_not_of(" \t");
    f = b == std::string::npos ? std::string{} : f.substr(b, e - b + 1);
  }
  return out;
}

double parse_number(const std::string& s, std::size_t row, const std::string& column) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || ptr != end || s.empty())
    throw DataError("unparseable number '" + s + "' in column '" + column + "' at row " + std::to_string(row));
  return v;
}

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, const ColumnSpec& spec) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open CSV file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("CSV file " + path.string() + " has no header");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = split_fields(line);
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < header.size(); ++i) index.emplace(header[i], i);
  auto column = [&](const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw DataError("missing column '" + name + "' in " + path.string());
    return it->second;
  };
  if (spec.covariates.empty()) throw DataError("column spec names no covariate columns");
  std::vector<std::size_t> xcols;
  for (const auto& c : spec.covariates) xcols.push_back(column(c));
  const auto zcol = column(spec.treatment);
  const auto ycol = column(spec.outcome);
  auto optional_column = [&](const std::string& name) -> std::optional<std::size_t> {
    if (name.empty()) return std::nullopt;
    return column(name);
  };
  const auto y0col = optional_column(spec.true_y0);
  const auto y1col = optional_column(spec.true_y1);
  const auto cate_col = optional_column(spec.true_cate);

  std::vector<std::vector<double>> xs;
  std::vector<std::uint8_t> zs;
  std::vector<double> ys, y0s, y1s, cates;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    ++row;
    const auto fields = split_fields(line);
    if (fields.size() != header.size())
      throw DataError("row " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                      " fields, header has " + std::to_string(header.size()));
    std::vector<double> x;
    for (std::size_t k = 0; k < xcols.size(); ++k) x.push_back(parse_number(fields[xcols[k]], row, spec.covariates[k]));
    xs.push_back(std::move(x));
    const double z = parse_number(fields[zcol], row, spec.treatment);
    if (z != 0.0 && z != 1.0)
      throw DataError("non-binary treatment value '" + fields[zcol] + "' at row " + std::to_string(row));
    zs.push_back(z == 1.0 ? 1 : 0);
    ys.push_back(parse_number(fields[ycol], row, spec.outcome));
    if (y0col) y0s.push_back(parse_number(fields[*y0col], row, spec.true_y0));
    if (y1col) y1s.push_back(parse_number(fields[*y1col], row, spec.true_y1));
    if (cate_col) cates.push_back(parse_number(fields[*cate_col], row, spec.true_cate));
  }
  if (row == 0) throw DataError("CSV file " + path.string() + " has no data rows");

  Dataset ds;
  const auto n = xs.size();
  ds.covariates.resize(n, xcols.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < xcols.size(); ++k) ds.covariates(i, k) = xs[i][k];
  ds.treatments = std::move(zs);
  ds.outcomes = Eigen::Map<Eigen::VectorXd>(ys.data(), n);
  if (y0col) ds.true_y0 = Eigen::Map<Eigen::VectorXd>(y0s.data(), n);
  if (y1col) ds.true_y1 = Eigen::Map<Eigen::VectorXd>(y1s.data(), n);
  if (cate_col) ds.true_cate = Eigen::Map<Eigen::VectorXd>(cates.data(), n);
  else if (ds.has_potential_outcomes()) ds.true_cate = *ds.true_y1 - *ds.true_y0;
  ds.validate();
  return ds;
}

void write_csv(const Dataset& ds, const std::filesystem::path& path, const ColumnSpec& spec) {
  if (spec.covariates.size() != ds.dim()) throw DataError("write_csv: covariate names do not match dimension");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write CSV file " + path.string());
  struct Extra {
    std::string name;
    const Eigen::VectorXd* values;
  };
  std::vector<Extra> extras;
  if (!spec.true_y0.empty() && ds.true_y0) extras.push_back({spec.true_y0, &*ds.true_y0});
  if (!spec.true_y1.empty() && ds.true_y1) extras.push_back({spec.true_y1, &*ds.true_y1});
  if (!spec.true_cate.empty() && ds.true_cate) extras.push_back({spec.true_cate, &*ds.true_cate});

  for (const auto& c : spec.covariates) out << c << ',';
  out << spec.treatment << ',' << spec.outcome;
  for (const auto& e : extras) out << ',' << e.name;
  out << '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t k = 0; k < ds.dim(); ++k) out << format_double(ds.covariates(i, k)) << ',';
    out << int(ds.treatments[i]) << ',' << format_double(ds.outcomes[i]);
    for (const auto& e : extras) out << ',' << format_double((*e.values)[i]);
    out << '\n';
  }
}

ColumnSpec default_columns(std::size_t dim, bool with_oracle) {
  ColumnSpec spec;
  for (std::size_t k = 0; k < dim; ++k) spec.covariates.push_back("x" + std::to_string(k));
  if (with_oracle) {
    spec.true_y0 = "y0";
    spec.true_y1 = "y1";
    spec.true_cate = "cate";
  }
  return spec;
}

StandardizationStats fit_standardization(const Dataset& ds) {
  if (ds.size() == 0) throw DataError("standardize: empty dataset");
  const double n = static_cast<double>(ds.size());
  StandardizationStats s;
  s.mean_x = ds.covariates.colwise().mean().transpose();
  s.std_x.resize(ds.dim());
  for (Eigen::Index k = 0; k < ds.covariates.cols(); ++k) {
    const double var = (ds.covariates.col(k).array() - s.mean_x[k]).square().sum() / n;
    s.std_x[k] = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  s.mean_y = ds.outcomes.mean();
  const double var_y = (ds.outcomes.array() - s.mean_y).square().sum() / n;
  s.std_y = var_y > 0.0 ? std::sqrt(var_y) : 1.0;
  return s;
}

Dataset apply_standardization(const Dataset& ds, const StandardizationStats& s) {
  if (static_cast<std::size_t>(s.mean_x.size()) != ds.dim())
    throw DataError("standardization stats do not match covariate dimension");
  Dataset out = ds;
  out.covariates = (ds.covariates.rowwise() - s.mean_x.transpose()).array().rowwise() / s.std_x.transpose().array();
  auto scale = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd { return (v.array() - s.mean_y) / s.std_y; };
  out.outcomes = scale(ds.outcomes);
  if (ds.true_y0) out.true_y0 = scale(*ds.true_y0);
  if (ds.true_y1) out.true_y1 = scale(*ds.true_y1);
  if (ds.true_cate) out.true_cate = *ds.true_cate / s.std_y;
  return out;
}

std::pair<Dataset, StandardizationStats> standardize(const Dataset& ds) {
  auto stats = fit_standardization(ds);
  return {apply_standardization(ds, stats), std::move(stats)};
}

Eigen::VectorXd destandardize_y(const Eigen::VectorXd& values, const StandardizationStats& s) {
  return (values.array() * s.std_y + s.mean_y).matrix();
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> rows) {
  Dataset out;
  const auto n = static_cast<Eigen::Index>(rows.size());
  out.covariates.resize(n, ds.covariates.cols());
  out.outcomes.resize(n);
  out.treatments.resize(rows.size());
  auto pick = [&](const std::optional<Eigen::VectorXd>& src) -> std::optional<Eigen::VectorXd> {
    if (!src) return std::nullopt;
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = (*src)[static_cast<Eigen::Index>(rows[i])];
    return v;
  };
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(rows[i]);
    if (rows[i] >= ds.size()) throw DataError("subset: row index out of range");
    out.covariates.row(i) = ds.covariates.row(r);
    out.outcomes[i] = ds.outcomes[r];
    out.treatments[i] = ds.treatments[rows[i]];
  }
  out.true_y0 = pick(ds.true_y0);
  out.true_y1 = pick(ds.true_y1);
  out.true_cate = pick(ds.true_cate);
  return out;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw DataError("split: fraction must lie in (0, 1)");
  const auto n = ds.size();
  if (n < 2) throw DataError("split: need at least two rows");
  auto first = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  first = std::clamp<std::size_t>(first, 1, n - 1);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  std::vector<std::size_t> a(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(first));
  std::vector<std::size_t> b(perm.begin() + static_cast<std::ptrdiff_t>(first), perm.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {subset(ds, a), subset(ds, b)};
}

double treated_fraction(const Dataset& ds) {
  if (ds.size() == 0) return 0.0;
  const auto treated = std::count(ds.treatments.begin(), ds.treatments.end(), std::uint8_t{1});
  return static_cast<double>(treated) / static_cast<double>(ds.size());
}

}  // namespace iwdd
