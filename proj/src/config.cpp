#include "iwdd/config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "iwdd/error.hpp"

namespace iwdd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return {buf, r.ptr};
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: '" + key + "' expects true or false, got '" + v + "'");
}

std::vector<std::size_t> parse_widths(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto w = parse_uint(key, trim(item));
    if (w == 0) throw ConfigError("config: '" + key + "' widths must be positive");
    out.push_back(static_cast<std::size_t>(w));
  }
  if (out.empty()) throw ConfigError("config: '" + key + "' needs at least one width");
  return out;
}

std::string fmt_widths(const std::vector<std::size_t>& w) {
  std::string out;
  for (std::size_t i = 0; i < w.size(); ++i) out += (i ? "," : "") + std::to_string(w[i]);
  return out;
}

const char* mode_name(DistillMode m) {
  switch (m) {
    case DistillMode::Marginal: return "marginal";
    case DistillMode::ExplicitIpw: return "ipw";
    case DistillMode::Joint: return "joint";
  }
  return "marginal";
}

DistillMode parse_mode(const std::string& v) {
  if (v == "marginal") return DistillMode::Marginal;
  if (v == "ipw") return DistillMode::ExplicitIpw;
  if (v == "joint") return DistillMode::Joint;
  throw ConfigError("config: distill.mode must be marginal, ipw or joint, got '" + v + "'");
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define IWDD_DOUBLE(name, member)                                                   \
  Field {                                                                           \
    name, [](const RunConfig& c) { return fmt_double(c.member); },                  \
        [](RunConfig& c, const std::string& v) { c.member = parse_double(name, v); } \
  }
#define IWDD_UINT(name, member)                                                                    \
  Field {                                                                                          \
    name, [](const RunConfig& c) { return std::to_string(c.member); },                             \
        [](RunConfig& c, const std::string& v) { c.member = static_cast<decltype(c.member)>(parse_uint(name, v)); } \
  }
#define IWDD_STRING(name, member) \
  Field { name, [](const RunConfig& c) { return c.member; }, [](RunConfig& c, const std::string& v) { c.member = v; } }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      IWDD_STRING("data", data),
      IWDD_STRING("data.train_csv", train_csv),
      IWDD_STRING("data.test_csv", test_csv),
      IWDD_UINT("data.n_train", n_train),
      IWDD_UINT("data.n_test", n_test),
      IWDD_DOUBLE("data.noise_std", noise_std),
      IWDD_UINT("data.covariate_dim", covariate_dim),
      Field{"model.hidden", [](const RunConfig& c) { return fmt_widths(c.hidden); },
            [](RunConfig& c, const std::string& v) { c.hidden = parse_widths("model.hidden", v); }},
      IWDD_DOUBLE("schedule.sigma_min", schedule.sigma_min),
      IWDD_DOUBLE("schedule.sigma_max", schedule.sigma_max),
      IWDD_DOUBLE("schedule.rho", schedule.rho),
      IWDD_DOUBLE("schedule.sigma_data", schedule.sigma_data),
      IWDD_DOUBLE("schedule.t_max", schedule.t_max),
      IWDD_DOUBLE("schedule.p_mean", schedule.p_mean),
      IWDD_DOUBLE("schedule.p_std", schedule.p_std),
      IWDD_UINT("pretrain.steps", pretrain.steps),
      IWDD_UINT("pretrain.batch", pretrain.batch),
      IWDD_DOUBLE("pretrain.lr", pretrain.learning_rate),
      IWDD_DOUBLE("pretrain.min_lr_fraction", pretrain.min_lr_fraction),
      IWDD_UINT("pretrain.log_every", pretrain.log_every),
      IWDD_DOUBLE("distill.alpha", distill.alpha),
      IWDD_DOUBLE("distill.lr_theta", distill.lr_theta),
      IWDD_DOUBLE("distill.lr_psi", distill.lr_psi),
      IWDD_DOUBLE("distill.adam_beta1", distill.adam_beta1),
      IWDD_UINT("distill.batch", distill.batch),
      IWDD_UINT("distill.iterations", distill.iterations),
      IWDD_DOUBLE("distill.sigma_init", distill.sigma_init),
      IWDD_DOUBLE("distill.weight_c", distill.weight_c),
      Field{"distill.mode", [](const RunConfig& c) { return std::string(mode_name(c.distill.mode)); },
            [](RunConfig& c, const std::string& v) { c.distill.mode = parse_mode(v); }},
      Field{"distill.ipw_clip",
            [](const RunConfig& c) { return c.distill.ipw_clip ? fmt_double(*c.distill.ipw_clip) : std::string("none"); },
            [](RunConfig& c, const std::string& v) {
              if (v == "none") c.distill.ipw_clip.reset();
              else c.distill.ipw_clip = parse_double("distill.ipw_clip", v);
            }},
      IWDD_UINT("distill.log_every", distill.log_every),
      IWDD_UINT("eval.samples", eval_samples),
      IWDD_UINT("eval.teacher_steps", teacher_steps),
      Field{"varcheck", [](const RunConfig& c) { return std::string(c.varcheck ? "true" : "false"); },
            [](RunConfig& c, const std::string& v) { c.varcheck = parse_bool("varcheck", v); }},
      IWDD_UINT("varcheck.n_mc", variance.n_mc),
      IWDD_UINT("varcheck.blocks", variance.blocks),
      IWDD_UINT("varcheck.chunk", variance.chunk),
      IWDD_DOUBLE("varcheck.slope", varcheck_slope),
      IWDD_UINT("seed", seed),
      IWDD_STRING("run_name", run_name),
  };
  return table;
}

#undef IWDD_DOUBLE
#undef IWDD_UINT
#undef IWDD_STRING

}  // namespace

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(cfg, trim(value));
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("config: override '" + assignment + "' is not key=value");
  apply_setting(cfg, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    try {
      apply_setting(base, trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string config_to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(cfg) + "\n";
  return out;
}

std::string config_hash(const RunConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char ch : config_to_text(cfg)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void validate(const RunConfig& cfg) {
  if (cfg.data != "synthetic" && cfg.data != "csv") throw ConfigError("config: data must be synthetic or csv");
  if (cfg.data == "csv" && (cfg.train_csv.empty() || cfg.test_csv.empty()))
    throw ConfigError("config: csv data needs data.train_csv and data.test_csv");
  if (cfg.data == "csv")
    for (const auto& f : {cfg.train_csv, cfg.test_csv})
      if (!std::filesystem::exists(f)) throw ConfigError("config: data file not found: " + f);
  if (cfg.data == "synthetic" && (cfg.n_train < 2 || cfg.n_test < 2))
    throw ConfigError("config: synthetic splits need at least 2 rows");
  if (cfg.covariate_dim == 0) throw ConfigError("config: data.covariate_dim must be >= 1");
  if (!(cfg.noise_std >= 0.0)) throw ConfigError("config: data.noise_std must be non-negative");
  if (cfg.hidden.empty()) throw ConfigError("config: model.hidden needs at least one width");
  cfg.schedule.validate();
  if (cfg.pretrain.batch == 0) throw ConfigError("config: pretrain.batch must be >= 1");
  if (!(cfg.pretrain.learning_rate > 0.0)) throw ConfigError("config: pretrain.lr must be positive");
  cfg.distill.validate();
  if (cfg.eval_samples == 0) throw ConfigError("config: eval.samples must be >= 1");
  if (cfg.teacher_steps == 0) throw ConfigError("config: eval.teacher_steps must be >= 1");
  if (cfg.run_name.empty() || cfg.run_name.find('/') != std::string::npos)
    throw ConfigError("config: run_name must be a plain directory name");
}

std::filesystem::path output_root() {
  if (const char* env = std::getenv("IWDD_OUTPUT_ROOT"); env && *env) return env;
  return "iwdd_runs";
}

}  // namespace iwdd
