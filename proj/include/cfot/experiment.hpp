#pragma once

// End-to-end runs: config file -> per-seed data, training, evaluation ->
// metrics.csv, table.csv and manifest.txt under the output directory.

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "cfot/coupling.hpp"
#include "cfot/dgp.hpp"
#include "cfot/error.hpp"
#include "cfot/field.hpp"
#include "cfot/inference.hpp"
#include "cfot/metrics.hpp"
#include "cfot/ode.hpp"
#include "cfot/rng.hpp"
#include "cfot/trainer.hpp"

namespace cfot {

inline constexpr std::string_view kToolVersion = "cfot 0.1.0";

enum class ModelKind { flow, ebm, ot_flow, ot_ebm };

inline std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::flow: return "flow";
    case ModelKind::ebm: return "ebm";
    case ModelKind::ot_flow: return "ot_flow";
    case ModelKind::ot_ebm: return "ot_ebm";
  }
  return "?";
}

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "flow") return ModelKind::flow;
  if (s == "ebm") return ModelKind::ebm;
  if (s == "ot_flow") return ModelKind::ot_flow;
  if (s == "ot_ebm") return ModelKind::ot_ebm;
  throw InputError("unknown model kind '" + std::string(s) + "'");
}

inline FieldKind field_kind(ModelKind k) {
  return k == ModelKind::ebm || k == ModelKind::ot_ebm ? FieldKind::energy : FieldKind::direct;
}

inline bool uses_ot(ModelKind k) { return k == ModelKind::ot_flow || k == ModelKind::ot_ebm; }

struct EvalConfig {
  std::vector<int> nfe{2, 10, 50};
  Solver solver = Solver::euler;
  int k_angles = 100;
  int n_cycles = 20;
  int test_rows = 1000;
  int monotonicity_pairs = 10000;
  int pushforward_n = 1000;
};

struct CurlConfig {
  bool enabled = true;
  int n = 50;
};

struct ExperimentConfig {
  dgp::DgpConfig dgp;
  ModelKind model_kind = ModelKind::ot_flow;
  std::optional<Scheme> scheme_override;
  int hidden_dim = 256;
  int n_blocks = 3;
  bool periodic_cond = false;
  TrainConfig train;
  double bin_width = 0.05;
  std::optional<int> mediator_steps;
  int val_rows = 256;
  int val_k_angles = 16;
  EvalConfig eval;
  CurlConfig curl;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string output_dir = "runs/default";

  Scheme scheme() const {
    if (scheme_override) return *scheme_override;
    return uses_ot(model_kind) ? Scheme::markovian_ot : Scheme::independent;
  }

  void validate() const {
    dgp.validate();
    const Scheme s = scheme();
    if (uses_ot(model_kind) && s == Scheme::independent)
      throw ConfigError("train.scheme", "OT model kinds need naive_ot or markovian_ot");
    if (!uses_ot(model_kind) && s != Scheme::independent)
      throw ConfigError("train.scheme", "flow/ebm train on independent pairs");
    if (hidden_dim < 1) throw ConfigError("model.hidden_dim", "must be >= 1");
    if (n_blocks < 0) throw ConfigError("model.n_blocks", "must be >= 0");
    train.validate();
    if (!(bin_width > 0 && bin_width <= dgp::kTwoPi)) throw ConfigError("train.bin_width", "must be in (0, 2*pi]");
    if (mediator_steps && *mediator_steps < 0) throw ConfigError("train.mediator_steps", "must be >= 0");
    if (mediator_steps && *mediator_steps > 0 && train.warmup_steps >= *mediator_steps)
      throw ConfigError("train.mediator_steps", "must exceed train.warmup_steps");
    if (val_rows < 1) throw ConfigError("train.val_rows", "must be >= 1");
    if (val_k_angles < 1) throw ConfigError("train.val_k_angles", "must be >= 1");
    if (eval.nfe.empty()) throw ConfigError("eval.nfe", "must list at least one value");
    for (int n : eval.nfe)
      if (n < 1) throw ConfigError("eval.nfe", "values must be >= 1");
    if (eval.k_angles < 1) throw ConfigError("eval.k_angles", "must be >= 1");
    if (eval.n_cycles < 1) throw ConfigError("eval.n_cycles", "must be >= 1");
    if (eval.test_rows < 1) throw ConfigError("eval.test_rows", "must be >= 1");
    if (eval.monotonicity_pairs < 0) throw ConfigError("eval.monotonicity_pairs", "must be >= 0");
    if (eval.pushforward_n < 0) throw ConfigError("eval.pushforward_n", "must be >= 0");
    if (curl.n < 3) throw ConfigError("curl.n", "must be >= 3");
    if (seeds.empty()) throw ConfigError("run.seeds", "must list at least one seed");
    const auto sizes = dgp::split_sizes(static_cast<std::size_t>(dgp.n_samples));
    if (sizes[0] < 1) throw ConfigError("dgp.n_samples", "too small for a training split");
    if (sizes[1] < 1) throw ConfigError("dgp.n_samples", "too small for a validation split");
    if (sizes[2] < 1) throw ConfigError("dgp.n_samples", "too small for a test split");
  }
};

// ---------------------------------------------------------------------------
// key=value config files

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <class T, class F>
T parse_field(const std::string& key, const std::string& value, F f) {
  try {
    return f(value);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(key, "cannot parse '" + value + "'");
  }
}

inline long long parse_int(const std::string& key, const std::string& v) {
  return parse_field<long long>(key, v, [](const std::string& s) {
    std::size_t pos = 0;
    const long long r = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return r;
  });
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  return parse_field<std::uint64_t>(key, v, [](const std::string& s) {
    if (s.empty() || s[0] == '-') throw std::invalid_argument(s);
    std::size_t pos = 0;
    const unsigned long long r = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return static_cast<std::uint64_t>(r);
  });
}

inline double parse_real(const std::string& key, const std::string& v) {
  return parse_field<double>(key, v, [](const std::string& s) {
    std::size_t pos = 0;
    const double r = std::stod(s, &pos);
    if (pos != s.size() || !std::isfinite(r)) throw std::invalid_argument(s);
    return r;
  });
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "expected true/false, got '" + v + "'");
}

inline int parse_int32(const std::string& key, const std::string& v) {
  const long long r = parse_int(key, v);
  if (r < INT32_MIN || r > INT32_MAX) throw ConfigError(key, "out of range");
  return static_cast<int>(r);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <class T, class F>
std::vector<T> parse_list(const std::string& key, const std::string& v, F f) {
  std::vector<T> out;
  for (const std::string& s : split_list(v)) {
    if (s.empty()) throw ConfigError(key, "empty list element");
    out.push_back(f(key, s));
  }
  return out;
}

}  // namespace detail

/// Applies one key=value assignment.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  auto enum_field = [&](auto parse) {
    try {
      return parse(v);
    } catch (const InputError& e) {
      throw ConfigError(key, e.what());
    }
  };
  if (key == "dgp.graph") c.dgp.graph = enum_field(dgp::parse_graph);
  else if (key == "dgp.prior") c.dgp.prior = enum_field(dgp::parse_prior);
  else if (key == "dgp.n_samples") c.dgp.n_samples = parse_int(key, v);
  else if (key == "model.kind") c.model_kind = enum_field(parse_model_kind);
  else if (key == "model.hidden_dim") c.hidden_dim = parse_int32(key, v);
  else if (key == "model.n_blocks") c.n_blocks = parse_int32(key, v);
  else if (key == "model.periodic_cond") c.periodic_cond = parse_bool(key, v);
  else if (key == "train.scheme") c.scheme_override = enum_field(parse_scheme);
  else if (key == "train.steps") c.train.steps = parse_int32(key, v);
  else if (key == "train.batch") c.train.batch = parse_int32(key, v);
  else if (key == "train.lr") c.train.adamw.lr = parse_real(key, v);
  else if (key == "train.weight_decay") c.train.adamw.weight_decay = parse_real(key, v);
  else if (key == "train.beta1") c.train.adamw.beta1 = parse_real(key, v);
  else if (key == "train.beta2") c.train.adamw.beta2 = parse_real(key, v);
  else if (key == "train.eps") c.train.adamw.eps = parse_real(key, v);
  else if (key == "train.warmup_steps") c.train.warmup_steps = parse_int32(key, v);
  else if (key == "train.eval_every") c.train.eval_every = parse_int32(key, v);
  else if (key == "train.nfe_eval") c.train.nfe_eval = parse_int32(key, v);
  else if (key == "train.log_every") c.train.log_every = parse_int32(key, v);
  else if (key == "train.ema_decay") c.train.ema_decay = parse_real(key, v);
  else if (key == "train.select") c.train.select = enum_field(parse_selection);
  else if (key == "train.prior") c.train.prior.kind = enum_field(parse_prior_kind);
  else if (key == "train.bin_width") c.bin_width = parse_real(key, v);
  else if (key == "train.mediator_steps") c.mediator_steps = parse_int32(key, v);
  else if (key == "train.val_rows") c.val_rows = parse_int32(key, v);
  else if (key == "train.val_k_angles") c.val_k_angles = parse_int32(key, v);
  else if (key == "eval.nfe") c.eval.nfe = parse_list<int>(key, v, parse_int32);
  else if (key == "eval.solver") c.eval.solver = enum_field(parse_solver);
  else if (key == "eval.k_angles") c.eval.k_angles = parse_int32(key, v);
  else if (key == "eval.n_cycles") c.eval.n_cycles = parse_int32(key, v);
  else if (key == "eval.test_rows") c.eval.test_rows = parse_int32(key, v);
  else if (key == "eval.monotonicity_pairs") c.eval.monotonicity_pairs = parse_int32(key, v);
  else if (key == "eval.pushforward_n") c.eval.pushforward_n = parse_int32(key, v);
  else if (key == "curl.enabled") c.curl.enabled = parse_bool(key, v);
  else if (key == "curl.n") c.curl.n = parse_int32(key, v);
  else if (key == "run.seeds") c.seeds = parse_list<std::uint64_t>(key, v, parse_u64);
  else if (key == "run.output_dir") c.output_dir = v;
  else throw ConfigError(key, "unknown key");
}

/// Lines are `key = value`; `#` starts a comment; blank lines are skipped.
inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno), "expected key=value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno), "empty key");
    set_config_value(c, key, value);
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot read config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

/// Every key in a fixed order, with resolved defaults.
inline std::string to_text(const ExperimentConfig& c) {
  using dgp::format_double;
  std::ostringstream os;
  auto join = [](const auto& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  os << "dgp.graph=" << dgp::to_string(c.dgp.graph) << '\n'
     << "dgp.prior=" << dgp::to_string(c.dgp.prior) << '\n'
     << "dgp.n_samples=" << c.dgp.n_samples << '\n'
     << "model.kind=" << to_string(c.model_kind) << '\n'
     << "model.hidden_dim=" << c.hidden_dim << '\n'
     << "model.n_blocks=" << c.n_blocks << '\n'
     << "model.periodic_cond=" << (c.periodic_cond ? "true" : "false") << '\n'
     << "train.scheme=" << to_string(c.scheme()) << '\n'
     << "train.steps=" << c.train.steps << '\n'
     << "train.batch=" << c.train.batch << '\n'
     << "train.lr=" << format_double(c.train.adamw.lr) << '\n'
     << "train.weight_decay=" << format_double(c.train.adamw.weight_decay) << '\n'
     << "train.beta1=" << format_double(c.train.adamw.beta1) << '\n'
     << "train.beta2=" << format_double(c.train.adamw.beta2) << '\n'
     << "train.eps=" << format_double(c.train.adamw.eps) << '\n'
     << "train.warmup_steps=" << c.train.warmup_steps << '\n'
     << "train.eval_every=" << c.train.eval_every << '\n'
     << "train.nfe_eval=" << c.train.nfe_eval << '\n'
     << "train.log_every=" << c.train.log_every << '\n'
     << "train.ema_decay=" << format_double(c.train.ema_decay) << '\n'
     << "train.select=" << to_string(c.train.select) << '\n'
     << "train.prior=" << to_string(c.train.prior.kind) << '\n'
     << "train.bin_width=" << format_double(c.bin_width) << '\n'
     << "train.mediator_steps=" << c.mediator_steps.value_or(c.train.steps) << '\n'
     << "train.val_rows=" << c.val_rows << '\n'
     << "train.val_k_angles=" << c.val_k_angles << '\n'
     << "eval.nfe=" << join(c.eval.nfe) << '\n'
     << "eval.solver=" << to_string(c.eval.solver) << '\n'
     << "eval.k_angles=" << c.eval.k_angles << '\n'
     << "eval.n_cycles=" << c.eval.n_cycles << '\n'
     << "eval.test_rows=" << c.eval.test_rows << '\n'
     << "eval.monotonicity_pairs=" << c.eval.monotonicity_pairs << '\n'
     << "eval.pushforward_n=" << c.eval.pushforward_n << '\n'
     << "curl.enabled=" << (c.curl.enabled ? "true" : "false") << '\n'
     << "curl.n=" << c.curl.n << '\n'
     << "run.seeds=" << join(c.seeds) << '\n'
     << "run.output_dir=" << c.output_dir << '\n';
  return os.str();
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

namespace detail {

inline std::string hash_lines(const ExperimentConfig& c, const std::function<bool(const std::string&)>& keep) {
  std::istringstream is(to_text(c));
  std::string line, kept;
  while (std::getline(is, line))
    if (keep(line)) kept += line + '\n';
  return hex64(fnv1a64(kept));
}

inline bool starts_with(const std::string& s, std::string_view p) { return s.rfind(p, 0) == 0; }

}  // namespace detail

/// Hash of everything that affects results (the output directory and seed
/// list excluded).
inline std::string config_hash(const ExperimentConfig& c) {
  return detail::hash_lines(c, [](const std::string& l) {
    return !detail::starts_with(l, "run.");
  });
}

/// Hash of the keys that determine trained weights for a given seed.
inline std::string train_hash(const ExperimentConfig& c) {
  return detail::hash_lines(c, [](const std::string& l) {
    return detail::starts_with(l, "dgp.") || detail::starts_with(l, "model.") || detail::starts_with(l, "train.");
  });
}

/// Hash of the evaluation settings; reports are only comparable when equal.
inline std::string eval_hash(const ExperimentConfig& c) {
  return detail::hash_lines(c, [](const std::string& l) { return detail::starts_with(l, "eval."); });
}

// ---------------------------------------------------------------------------
// Per-seed pieces

using Model = VectorFieldModel<float>;

struct SeedData {
  dgp::DgpConfig dgp;
  dgp::Dataset dataset;
  std::vector<dgp::Sample> train_rows;
  UnitBatch val, test;
};

inline UnitBatch head_units(const std::vector<dgp::Sample>& rows, int n) {
  std::vector<dgp::Sample> r(rows.begin(), rows.begin() + std::min<std::ptrdiff_t>(n, static_cast<std::ptrdiff_t>(rows.size())));
  return UnitBatch::from_samples(r);
}

inline SeedData make_seed_data(const ExperimentConfig& c, std::uint64_t seed) {
  SeedData d;
  d.dgp = c.dgp;
  d.dgp.seed = seed;
  d.dataset = dgp::gen_dataset(d.dgp);
  d.train_rows = d.dataset.rows(dgp::Split::train);
  d.val = head_units(d.dataset.rows(dgp::Split::val), c.val_rows);
  d.test = head_units(d.dataset.rows(dgp::Split::test), c.eval.test_rows);
  return d;
}

/// The outcome flow (x given parents, or x given m for frontdoor) and the
/// frontdoor mediator flow.
struct SeedModels {
  Model outcome;
  std::optional<Model> mediator;
};

inline CondMode cond_mode(dgp::GraphVariant g) { return g == dgp::GraphVariant::backdoor ? CondMode::pa_z : CondMode::pa; }

inline Task outcome_task(dgp::GraphVariant g) {
  switch (g) {
    case dgp::GraphVariant::markovian: return Task::markovian;
    case dgp::GraphVariant::backdoor: return Task::backdoor;
    case dgp::GraphVariant::frontdoor: return Task::frontdoor_outcome;
  }
  return Task::markovian;
}

/// Engine over the models at the given solver settings. The models must
/// outlive the engine.
inline std::unique_ptr<CfEngine> make_engine(dgp::GraphVariant g, const SeedModels& m, const OdeConfig& ode) {
  if (g == dgp::GraphVariant::frontdoor) {
    if (!m.mediator) throw ContractViolation("frontdoor engine needs a mediator flow");
    return std::make_unique<FrontdoorEngine<float>>(*m.mediator, m.outcome, ode);
  }
  return std::make_unique<FlowEngine<float>>(m.outcome, cond_mode(g), ode);
}

inline OdeConfig eval_ode(const ExperimentConfig& c, int nfe) {
  OdeConfig o;
  o.solver = c.eval.solver;
  o.nfe = nfe;
  return o;
}

/// 100 * mean |m* - m*_true| over units and k target angles.
inline double mediator_error(const Model& med, const UnitBatch& units, int k, const OdeConfig& ode) {
  const Eigen::MatrixXd w = abduct(med, units.m, units.pa, ode);
  double sum = 0;
  for (int j = 0; j < k; ++j) {
    const double a = dgp::target_angle(j, k);
    const Eigen::MatrixXd ms = predict(med, w, Eigen::MatrixXd::Constant(1, units.size(), a), ode);
    Eigen::MatrixXd truth(2, units.size());
    for (Eigen::Index i = 0; i < units.size(); ++i) truth.col(i) = dgp::mediator(a, units.eps_m(0, i), units.eps_m(1, i));
    sum += 100.0 * (ms - truth).cwiseAbs().mean();
  }
  return sum / k;
}

struct TrainOutcome {
  std::optional<SeedModels> best;
  bool diverged = false;
  std::string failure;
};

namespace detail {

inline FieldArch arch_for(const ExperimentConfig& c, Task task) {
  FieldArch a;
  a.kind = field_kind(c.model_kind);
  a.x_dim = 2;
  a.cond_dim = cond_dim(task);
  a.periodic_cond = c.periodic_cond && task != Task::frontdoor_outcome;
  a.hidden_dim = c.hidden_dim;
  a.n_blocks = c.n_blocks;
  return a;
}

inline TrainedModel<float> train_task(const ExperimentConfig& c, const SeedData& d, Task task, int steps,
                                      const Validator<float>& validate, std::uint64_t seed, std::uint64_t slot) {
  const SeedStream seeds(seed);
  const RowPool pool = make_pool(task, d.train_rows);
  std::unique_ptr<ConditionalSource> source;
  if (c.scheme() == Scheme::markovian_ot) {
    source = online_source(task, d.dgp);
    if (!source) source = std::make_unique<BinnedSource>(pool, c.bin_width);
  }
  const BatchSource bs{c.scheme(), &pool, source.get()};
  Engine init_rng = seeds.stream(tag::kInit, slot);
  const Model init = init_field<float>(arch_for(c, task), init_rng);
  TrainConfig tc = c.train;
  tc.steps = steps;
  return train(tc, bs, init, validate, seeds.key(tag::kBatch, slot));
}

}  // namespace detail

/// Trains the seed's models and writes checkpoints and logs into `dir`.
/// When `dir/train.done` holds the current train hash, loads instead.
inline TrainOutcome train_seed(const ExperimentConfig& c, const SeedData& d, std::uint64_t seed,
                               const std::filesystem::path& dir, std::vector<std::string>* artifacts = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const bool fd = c.dgp.graph == dgp::GraphVariant::frontdoor;
  const std::string th = train_hash(c);
  auto note = [&](const fs::path& p) {
    if (artifacts) artifacts->push_back(p.string());
  };
  auto ckpt = [&](const std::string& stem, const char* which) { return dir / (stem + "." + which + ".ckpt"); };

  TrainOutcome out;
  const fs::path done = dir / "train.done";
  if (fs::exists(done)) {
    std::ifstream is(done);
    std::string h;
    std::getline(is, h);
    if (h == th) {
      std::optional<Model> med;
      if (fd) med = load_field<float>(ckpt("mediator", "best").string());
      out.best = SeedModels{load_field<float>(ckpt("model", "best").string()), std::move(med)};
      for (const char* w : {"best", "final", "ema"}) {
        note(ckpt("model", w));
        if (fd) note(ckpt("mediator", w));
      }
      note(dir / "train_log.csv");
      if (fd) note(dir / "mediator_log.csv");
      note(done);
      return out;
    }
  }

  const OdeConfig val_ode = eval_ode(c, c.train.nfe_eval);
  auto persist = [&](const std::string& stem, const TrainedModel<float>& r, const std::string& log) {
    save_field(ckpt(stem, "best").string(), r.best);
    save_field(ckpt(stem, "final").string(), r.final);
    save_field(ckpt(stem, "ema").string(), r.ema);
    write_train_log((dir / log).string(), r.log);
    for (const char* w : {"best", "final", "ema"}) note(ckpt(stem, w));
    note(dir / log);
  };

  std::optional<Model> med_best;
  if (fd) {
    const Validator<float> vm = [&](const Model& m) { return mediator_error(m, d.val, c.val_k_angles, val_ode); };
    const TrainedModel<float> med = detail::train_task(c, d, Task::frontdoor_mediator,
                                                       c.mediator_steps.value_or(c.train.steps), vm, seed, 1);
    persist("mediator", med, "mediator_log.csv");
    med_best = med.best;
    if (med.diverged) {
      out.diverged = true;
      out.failure = "mediator " + med.failure;
      return out;
    }
  }

  const OracleEngine oracle(c.dgp.graph);
  const Validator<float> vx = [&](const Model& m) {
    SeedModels sm{m, med_best};
    return mu_ape(*make_engine(c.dgp.graph, sm, val_ode), oracle, d.val, c.val_k_angles);
  };
  const TrainedModel<float> r = detail::train_task(c, d, outcome_task(c.dgp.graph), c.train.steps, vx, seed, 0);
  persist("model", r, "train_log.csv");
  out.best = SeedModels{r.best, med_best};
  if (r.diverged) {
    out.diverged = true;
    out.failure = r.failure;
    return out;
  }
  std::ofstream(done) << th << '\n';
  note(done);
  return out;
}

/// Metrics at one nfe. Monotonicity needs a single-parent mechanism and the
/// push-forward distance needs the Markovian simulator, so those are NaN
/// elsewhere.
inline MetricsReport evaluate_seed(const ExperimentConfig& c, const SeedData& d, const SeedModels& m,
                                   std::uint64_t seed, int nfe) {
  const SeedStream seeds(seed);
  const OdeConfig ode = eval_ode(c, nfe);
  const auto engine = make_engine(c.dgp.graph, m, ode);
  const OracleEngine oracle(c.dgp.graph);
  MetricsReport r;
  r.scheme = to_string(c.scheme());
  r.model_kind = to_string(c.model_kind);
  r.graph = dgp::to_string(c.dgp.graph);
  r.prior = dgp::to_string(c.dgp.prior);
  r.nfe = nfe;
  r.seed = seed;
  r.mu_ape_percent = mu_ape(*engine, oracle, d.test, c.eval.k_angles);
  r.composition_mae = composition_mae(*engine, d.test, c.eval.n_cycles);
  Engine cycle_rng = seeds.stream(tag::kEval, 1);
  r.reversibility_mae = reversibility_mae(*engine, d.test, draw_angles(cycle_rng, d.test.size()), c.eval.n_cycles);
  if (c.dgp.graph != dgp::GraphVariant::frontdoor && c.eval.monotonicity_pairs > 0) {
    Engine probe_rng = seeds.stream(tag::kProbe, 0);
    r.monotonicity_violation_rate =
        monotonicity_violation_rate(*engine, make_monotonicity_probe(d.test, c.eval.monotonicity_pairs, probe_rng));
  }
  if (c.dgp.graph == dgp::GraphVariant::markovian && c.eval.pushforward_n > 0) {
    Engine pf_rng = seeds.stream(tag::kProbe, 1);
    const double pa = uniform(pf_rng, 0.0, dgp::kTwoPi);
    r.pushforward_energy_distance =
        pushforward_distance(m.outcome, pa, d.dgp, c.train.prior, c.eval.pushforward_n, ode, pf_rng);
  }
  return r;
}

inline const std::array<double, 4> kCurlTimes{0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0};

/// Grid covering the 1st to 99th percentile of the training targets.
inline GridSpec curl_grid(const RowPool& pool, int n) {
  auto range = [&](int row) {
    std::vector<double> v(static_cast<std::size_t>(pool.size()));
    for (Eigen::Index i = 0; i < pool.size(); ++i) v[static_cast<std::size_t>(i)] = pool.x(row, i);
    std::sort(v.begin(), v.end());
    const auto at = [&](double q) { return v[static_cast<std::size_t>(q * static_cast<double>(v.size() - 1))]; };
    double lo = at(0.01), hi = at(0.99);
    if (!(hi > lo)) hi = lo + 1.0;
    return std::pair{lo, hi};
  };
  GridSpec g;
  std::tie(g.x0_min, g.x0_max) = range(0);
  std::tie(g.x1_min, g.x1_max) = range(1);
  g.n0 = g.n1 = n;
  return g;
}

/// Curl maps of the outcome flow at t in {0, 1/3, 2/3, 1}, conditioned on the
/// first test unit.
inline std::vector<std::string> write_curl_maps(const ExperimentConfig& c, const SeedData& d, const Model& m,
                                                const std::filesystem::path& dir) {
  const Task task = outcome_task(c.dgp.graph);
  const GridSpec grid = curl_grid(make_pool(task, d.train_rows), c.curl.n);
  Eigen::VectorXd cond;
  if (task == Task::frontdoor_outcome) cond = d.test.m.col(0);
  else cond = conditioning(cond_mode(c.dgp.graph), d.test).col(0);
  std::vector<std::string> paths;
  for (std::size_t i = 0; i < kCurlTimes.size(); ++i) {
    const std::filesystem::path p = dir / ("curl_t" + std::to_string(i) + ".csv");
    write_curl_map(p.string(), curl(m, grid, cond, kCurlTimes[i]));
    paths.push_back(p.string());
    paths.push_back(curl_sidecar_path(p.string()));
  }
  return paths;
}

inline void write_metrics(const std::string& path, const std::vector<MetricsReport>& rows) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path);
  os << kMetricsHeader << '\n';
  for (const MetricsReport& r : rows) os << to_csv_row(r) << '\n';
}

inline std::vector<MetricsReport> read_metrics(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot read " + path);
  std::string line;
  if (!std::getline(is, line) || line != kMetricsHeader) throw InputError(path + ": unexpected header");
  std::vector<MetricsReport> out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = dgp::split_csv_line(line);
    if (f.size() != 11) throw InputError(path + ":" + std::to_string(lineno) + ": expected 11 fields");
    auto num = [&](std::size_t i) {
      return f[i].empty() ? NAN : dgp::parse_double(f[i], path + ":" + std::to_string(lineno));
    };
    MetricsReport r;
    r.scheme = f[0];
    r.model_kind = f[1];
    r.graph = f[2];
    r.prior = f[3];
    r.nfe = static_cast<int>(num(4));
    r.seed = detail::parse_u64("seed", f[5]);
    r.mu_ape_percent = num(6);
    r.composition_mae = num(7);
    r.reversibility_mae = num(8);
    r.monotonicity_violation_rate = num(9);
    r.pushforward_energy_distance = num(10);
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests and tables

struct RunManifest {
  std::string tool_version{kToolVersion};
  std::string config_hash, eval_hash;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> artifacts;  // relative to the output directory
  std::vector<std::string> failures;
  std::string output_dir;

  bool ok() const { return failures.empty(); }
};

inline void write_manifest(const std::string& path, const RunManifest& m) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path);
  os << "tool_version=" << m.tool_version << '\n'
     << "config_hash=" << m.config_hash << '\n'
     << "eval_hash=" << m.eval_hash << '\n'
     << "status=" << (m.ok() ? "ok" : "failed") << '\n'
     << "seeds=";
  for (std::size_t i = 0; i < m.seeds.size(); ++i) os << (i ? "," : "") << m.seeds[i];
  os << '\n';
  for (const auto& f : m.failures) os << "failure=" << f << '\n';
  for (const auto& a : m.artifacts) os << "artifact=" << a << '\n';
}

inline RunManifest read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot read " + path);
  RunManifest m;
  m.output_dir = std::filesystem::path(path).parent_path().string();
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InputError(path + ": malformed line '" + line + "'");
    const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k == "tool_version") m.tool_version = v;
    else if (k == "config_hash") m.config_hash = v;
    else if (k == "eval_hash") m.eval_hash = v;
    else if (k == "seeds") m.seeds = detail::parse_list<std::uint64_t>(k, v, detail::parse_u64);
    else if (k == "failure") m.failures.push_back(v);
    else if (k == "artifact") m.artifacts.push_back(v);
  }
  return m;
}

struct TableRow {
  std::string graph, prior, scheme, model_kind;
  int nfe = 0;
  int n_seeds = 0;
  std::array<double, 5> mean{}, std{};
};

inline constexpr std::array<std::string_view, 5> kMetricNames{
    "mu_ape_percent", "composition_mae", "reversibility_mae", "monotonicity_violation_rate",
    "pushforward_energy_distance"};

inline std::array<double, 5> metric_values(const MetricsReport& r) {
  return {r.mu_ape_percent, r.composition_mae, r.reversibility_mae, r.monotonicity_violation_rate,
          r.pushforward_energy_distance};
}

/// Mean and sample standard deviation (0 for a single seed) per
/// (graph, prior, scheme, model_kind, nfe), in first-seen order.
inline std::vector<TableRow> aggregate(const std::vector<MetricsReport>& rows) {
  std::vector<TableRow> out;
  std::vector<std::vector<std::array<double, 5>>> values;
  for (const MetricsReport& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const TableRow& t) {
      return t.graph == r.graph && t.prior == r.prior && t.scheme == r.scheme && t.model_kind == r.model_kind &&
             t.nfe == r.nfe;
    });
    if (it == out.end()) {
      out.push_back({r.graph, r.prior, r.scheme, r.model_kind, r.nfe, 0, {}, {}});
      values.emplace_back();
      it = out.end() - 1;
    }
    values[static_cast<std::size_t>(it - out.begin())].push_back(metric_values(r));
  }
  for (std::size_t g = 0; g < out.size(); ++g) {
    const auto& v = values[g];
    out[g].n_seeds = static_cast<int>(v.size());
    for (std::size_t k = 0; k < 5; ++k) {
      double s = 0;
      for (const auto& x : v) s += x[k];
      const double mean = s / static_cast<double>(v.size());
      double ss = 0;
      for (const auto& x : v) ss += (x[k] - mean) * (x[k] - mean);
      out[g].mean[k] = mean;
      out[g].std[k] = std::isnan(mean) ? NAN : v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    }
  }
  return out;
}

inline std::string table_csv(const std::vector<TableRow>& rows) {
  std::ostringstream os;
  os << "graph,prior,scheme,model_kind,nfe,n_seeds";
  for (auto n : kMetricNames) os << ',' << n << "_mean," << n << "_std";
  os << '\n';
  for (const TableRow& r : rows) {
    os << r.graph << ',' << r.prior << ',' << r.scheme << ',' << r.model_kind << ',' << r.nfe << ',' << r.n_seeds;
    for (std::size_t k = 0; k < 5; ++k) os << ',' << format_metric(r.mean[k]) << ',' << format_metric(r.std[k]);
    os << '\n';
  }
  return os.str();
}

/// Table over several runs. Runs must share evaluation settings.
inline std::string emit_table(const std::vector<RunManifest>& manifests) {
  if (manifests.empty()) throw InputError("emit_table: no manifests");
  std::vector<MetricsReport> rows;
  for (const RunManifest& m : manifests) {
    if (m.eval_hash != manifests.front().eval_hash)
      throw InputError("emit_table: runs in " + manifests.front().output_dir + " and " + m.output_dir +
                       " used different evaluation settings");
    const auto r = read_metrics((std::filesystem::path(m.output_dir) / "metrics.csv").string());
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return table_csv(aggregate(rows));
}

// ---------------------------------------------------------------------------

/// Progress callback: one human-readable line per stage.
using Progress = std::function<void(const std::string&)>;

inline RunManifest run_experiment(const ExperimentConfig& c, const Progress& progress = {}) {
  namespace fs = std::filesystem;
  c.validate();
  const fs::path root(c.output_dir);
  fs::create_directories(root);
  auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };
  RunManifest man;
  man.config_hash = config_hash(c);
  man.eval_hash = eval_hash(c);
  man.seeds = c.seeds;
  man.output_dir = root.string();
  std::vector<std::string> abs_artifacts;
  std::ofstream(root / "config.txt") << to_text(c);
  abs_artifacts.push_back((root / "config.txt").string());

  std::vector<MetricsReport> all;
  for (std::uint64_t seed : c.seeds) {
    const fs::path dir = root / ("seed_" + std::to_string(seed));
    say("seed " + std::to_string(seed) + ": data");
    const SeedData d = make_seed_data(c, seed);
    fs::create_directories(dir);
    dgp::write_csv(d.dataset, (dir / "data.csv").string());
    abs_artifacts.push_back((dir / "data.csv").string());
    abs_artifacts.push_back(dgp::noise_sidecar_path((dir / "data.csv").string()));
    say("seed " + std::to_string(seed) + ": train");
    TrainOutcome t;
    try {
      t = train_seed(c, d, seed, dir, &abs_artifacts);
    } catch (const NumericalError& e) {
      t.diverged = true;
      t.failure = e.what();
    }
    if (t.diverged) {
      man.failures.push_back("seed " + std::to_string(seed) + ": " + t.failure);
      say("seed " + std::to_string(seed) + ": training failed: " + t.failure);
      continue;
    }
    std::vector<MetricsReport> rows;
    try {
      for (int nfe : c.eval.nfe) {
        say("seed " + std::to_string(seed) + ": eval nfe=" + std::to_string(nfe));
        rows.push_back(evaluate_seed(c, d, *t.best, seed, nfe));
      }
      if (c.curl.enabled) {
        const auto p = write_curl_maps(c, d, t.best->outcome, dir);
        abs_artifacts.insert(abs_artifacts.end(), p.begin(), p.end());
      }
    } catch (const NumericalError& e) {
      man.failures.push_back("seed " + std::to_string(seed) + ": evaluation: " + e.what());
      continue;
    }
    write_metrics((dir / "metrics.csv").string(), rows);
    abs_artifacts.push_back((dir / "metrics.csv").string());
    all.insert(all.end(), rows.begin(), rows.end());
  }
  write_metrics((root / "metrics.csv").string(), all);
  abs_artifacts.push_back((root / "metrics.csv").string());
  std::ofstream(root / "table.csv") << table_csv(aggregate(all));
  abs_artifacts.push_back((root / "table.csv").string());
  for (const auto& a : abs_artifacts) man.artifacts.push_back(fs::relative(a, root).generic_string());
  std::sort(man.artifacts.begin(), man.artifacts.end());
  man.artifacts.erase(std::unique(man.artifacts.begin(), man.artifacts.end()), man.artifacts.end());
  write_manifest((root / "manifest.txt").string(), man);
  return man;
}

}  // namespace cfot
