// Acceptance runner: trains (or reloads) every model the criteria need under
// --work, then prints one PASS/FAIL line per criterion. Exit code 0 only if
// every selected criterion passes.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "../oracles.hpp"
#include "cfot/assignment.hpp"
#include "cfot/closedform.hpp"
#include "cfot/experiment.hpp"

using namespace cfot;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---------------------------------------------------------------------------
// Trained arms

struct Options {
  fs::path work;
  int steps = -1;  // >= 0: smoke run with this budget and a reduced evaluation
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

struct Arm {
  std::string name;
  std::string overrides;
  bool all_seeds = true;
};

// Shared evaluation: 20 soundness cycles with 50-step Euler, 10^4 probe pairs.
const char* kEvalBase =
    "eval.solver=euler\neval.n_cycles=20\neval.k_angles=100\neval.test_rows=1000\n"
    "eval.pushforward_n=0\ncurl.enabled=false\n";

const std::map<std::string, Arm> kArms = {
    {"ot_flow", {"ot_flow", "model.kind=ot_flow\neval.nfe=50,2\neval.monotonicity_pairs=10000\n"}},
    {"flow", {"flow", "model.kind=flow\neval.nfe=50,2\neval.monotonicity_pairs=10000\n"}},
    {"naive", {"naive", "model.kind=ot_flow\ntrain.scheme=naive_ot\neval.nfe=50\neval.monotonicity_pairs=0\n"}},
    {"frontdoor", {"frontdoor", "model.kind=ot_flow\ndgp.graph=frontdoor\neval.nfe=50\n"}},
    {"backdoor", {"backdoor", "model.kind=ot_flow\ndgp.graph=backdoor\neval.nfe=50\neval.monotonicity_pairs=0\n"}},
    {"ot_flow_bimodal", {"ot_flow_bimodal", "model.kind=ot_flow\ndgp.prior=bimodal\neval.nfe=50\neval.monotonicity_pairs=0\n"}},
    {"ot_flow_multimodal",
     {"ot_flow_multimodal", "model.kind=ot_flow\ndgp.prior=multimodal\neval.nfe=50\neval.monotonicity_pairs=0\n"}},
    {"flow_bimodal", {"flow_bimodal", "model.kind=flow\ndgp.prior=bimodal\neval.nfe=50\neval.monotonicity_pairs=0\n"}},
    {"flow_multimodal",
     {"flow_multimodal", "model.kind=flow\ndgp.prior=multimodal\neval.nfe=50\neval.monotonicity_pairs=0\n"}},
    {"ot_ebm", {"ot_ebm", "model.kind=ot_ebm\neval.nfe=50\neval.monotonicity_pairs=0\n", false}},
};

ExperimentConfig arm_config(const Options& o, const Arm& arm) {
  std::string text = std::string(kEvalBase) + arm.overrides;
  if (o.steps >= 0) {
    text += "train.steps=" + std::to_string(o.steps) + "\n";
    text += "train.warmup_steps=" + std::to_string(std::min(2000, o.steps / 10)) + "\n";
    text += "train.eval_every=" + std::to_string(std::max(1, o.steps / 10)) + "\n";
    text += "dgp.n_samples=3000\ntrain.val_rows=32\ntrain.val_k_angles=4\neval.k_angles=8\neval.test_rows=100\n";
    if (arm.overrides.find("monotonicity_pairs=10000") != std::string::npos) text += "eval.monotonicity_pairs=500\n";
  }
  ExperimentConfig c = parse_config(text);
  c.seeds = arm.all_seeds ? o.seeds : std::vector<std::uint64_t>{o.seeds.front()};
  c.output_dir = (o.work / arm.name).string();
  c.validate();
  return c;
}

struct ArmResult {
  ExperimentConfig config;
  std::vector<MetricsReport> rows;
  std::vector<std::string> failures;
  std::optional<double> seconds;  // wall time when trained in this invocation
};

class ArmCache {
 public:
  explicit ArmCache(Options o) : opt_(std::move(o)) {}

  const ArmResult& get(const std::string& name) {
    if (auto it = done_.find(name); it != done_.end()) return it->second;
    const ExperimentConfig c = arm_config(opt_, kArms.at(name));
    ArmResult r{c, {}, {}, std::nullopt};
    const fs::path root(c.output_dir);
    bool cached = false;
    if (fs::exists(root / "manifest.txt")) {
      const RunManifest m = read_manifest((root / "manifest.txt").string());
      cached = m.ok() && m.config_hash == config_hash(c);
    }
    if (!cached) {
      std::fprintf(stderr, "[acceptance] %s: training/evaluating into %s\n", name.c_str(), root.string().c_str());
      const auto t0 = Clock::now();
      const RunManifest m = run_experiment(c, [&](const std::string& s) {
        std::fprintf(stderr, "[acceptance] %s: %s\n", name.c_str(), s.c_str());
      });
      r.seconds = seconds_since(t0);
      r.failures = m.failures;
    }
    r.rows = read_metrics((root / "metrics.csv").string());
    return done_.emplace(name, std::move(r)).first->second;
  }

  Model model(const std::string& name, std::uint64_t seed) {
    const ArmResult& r = get(name);
    return load_field<float>((fs::path(r.config.output_dir) / ("seed_" + std::to_string(seed)) / "model.best.ckpt").string());
  }

  const Options& options() const { return opt_; }

 private:
  Options opt_;
  std::map<std::string, ArmResult> done_;
};

std::vector<double> metric_at(const ArmResult& r, int nfe, double MetricsReport::*field) {
  std::vector<double> v;
  for (const auto& row : r.rows)
    if (row.nfe == nfe) v.push_back(row.*field);
  return v;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double seed_mean(const ArmResult& r, int nfe, double MetricsReport::*field) { return mean_of(metric_at(r, nfe, field)); }

std::string complete(const ArmResult& r, const std::string& name, std::size_t seeds) {
  if (!r.failures.empty()) return name + " failed: " + r.failures.front();
  std::set<std::uint64_t> s;
  for (const auto& row : r.rows) s.insert(row.seed);
  if (s.size() != seeds) return name + ": metrics for " + std::to_string(s.size()) + " of " + std::to_string(seeds) + " seeds";
  return "";
}

std::string timing(const ArmResult& r) {
  if (!r.seconds) return "";
  return fmt(" [%.0f min", *r.seconds / 60.0) + fmt(" for %.0f seed(s)]", static_cast<double>(r.config.seeds.size()));
}

// ---------------------------------------------------------------------------
// Criteria

Verdict closed_form_fixture() {
  using namespace closedform;
  const auto t0 = Clock::now();
  const double tol = 1e-15;
  const double a = cf_1d(Mechanism1D::t1, 0, 0.8, 1), b = cf_1d(Mechanism1D::t2, 0, 0.8, 1),
               c = cf_1d(Mechanism1D::t3, 0, 0.8, 1);
  const double r1 = rank_1d(Mechanism1D::t3, 0, 0.8), r2 = rank_1d(Mechanism1D::t3, 1, c);
  const double secs = seconds_since(t0);
  const bool ok = std::abs(a - 1.8) <= tol && std::abs(b - 1.8) <= tol && std::abs(c - 1.2) <= tol &&
                  std::abs(r1 - 0.8) <= tol && std::abs(r2 - 0.2) <= tol && secs < 1.0;
  std::ostringstream os;
  os.precision(17);
  os << "cf = " << a << " / " << b << " / " << c << ", ranks " << r1 << " -> " << r2 << ", " << fmt("%.3g s", secs);
  return {ok, os.str()};
}

Verdict assignment_oracle() {
  const auto t0 = Clock::now();
  Engine rng(20240601);
  int exact = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int m = 2 + static_cast<int>(uniform_index(rng, 6));
    Eigen::MatrixXd c(m, m);
    // Half the matrices are small integers so ties are common.
    for (Eigen::Index i = 0; i < c.size(); ++i)
      c.data()[i] = trial % 2 ? uniform(rng, -5, 5) : static_cast<double>(uniform_index(rng, 5));
    const Permutation p = solve_assignment(c);
    const auto bf = oracle::brute_force_assignment(c);
    if (is_permutation(p) && assignment_cost(c, p) == assignment_cost(c, bf)) ++exact;
  }
  const double secs = seconds_since(t0);
  return {exact == 100 && secs < 10.0, std::to_string(exact) + "/100 exact, " + fmt("%.3g s", secs)};
}

// Gradients of scalar probes of the default-width field in double precision.
// Relative error is |a - b| / max(|a|, |b|, 1e-6 * max|gradient|).
Verdict gradient_checks() {
  const auto t0 = Clock::now();
  const double h = 1e-5;
  Engine rng(77);
  double worst_field = 0, worst_energy_train = 0, worst_direct_train = 0;

  dgp::DgpConfig dc;
  dc.n_samples = 100;
  const dgp::Dataset ds = dgp::gen_dataset(dc);
  const int b = 6;
  Eigen::MatrixXd x(2, b), u(2, b), cond(1, b);
  Eigen::RowVectorXd t(b);
  for (int j = 0; j < b; ++j) {
    const auto& s = ds.samples[static_cast<std::size_t>(j)];
    x.col(j) << s.x[0], s.x[1];
    cond(0, j) = s.pa;
    u.col(j) << uniform01(rng), uniform01(rng);
    t[j] = uniform01(rng);
  }
  const Eigen::MatrixXd xt = u.array().rowwise() * (1.0 - t.array()) + x.array().rowwise() * t.array();

  auto rel = [](double a, double b2, double scale) { return oracle::rel_err(a, b2, 1e-6 * scale); };
  auto pick = [&](Eigen::Index n) {
    std::vector<Eigen::Index> idx;
    for (int k = 0; k < 20; ++k) idx.push_back(static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n))));
    return idx;
  };

  for (FieldKind kind : {FieldKind::direct, FieldKind::energy}) {
    FieldArch a;
    a.kind = kind;
    auto m = init_field<double>(a, rng);
    for (Eigen::Index i = 0; i < m.params.size(); ++i) m.params.mutable_values()[i] += 0.02 * standard_normal(rng);
    const Eigen::MatrixXd cot = Eigen::MatrixXd::Random(2, b);

    // Parameter gradient of <v, cot>.
    auto probe = [&](const VectorFieldModel<double>& q) { return eval_field(q, xt, cond, t).cwiseProduct(cot).sum(); };
    nn::Vec<double> gp;
    const nn::Mat<double> in = assemble_input(m, xt, cond, t);
    if (kind == FieldKind::direct) {
      gp = nn::backward_params(nn::forward(m.params, in), nn::Mat<double>(cot));
    } else {
      nn::Mat<double> dir = nn::Mat<double>::Zero(in.rows(), b);
      dir.topRows(2) = cot;
      gp = nn::backward_dual_params(nn::forward_dual(m.params, in, dir), nn::Mat<double>(nn::Mat<double>::Zero(2, b)),
                                    mean_cotangent<double>(2, b));
    }
    const double gp_scale = gp.cwiseAbs().maxCoeff();
    for (Eigen::Index i : pick(m.params.size())) {
      const double fd = oracle::central_difference(
          [&](double v) {
            auto q = m;
            q.params.mutable_values()[i] = v;
            return probe(q);
          },
          m.params.values()[i], h);
      worst_field = std::max(worst_field, rel(gp[i], fd, gp_scale));
    }

    // Input gradient: of <v, cot> for the direct field; of the energy (which is v) for the energy field.
    Eigen::MatrixXd gi;
    std::function<double(const Eigen::MatrixXd&)> scalar;
    if (kind == FieldKind::direct) {
      gi = nn::backward_input(nn::forward(m.params, in), nn::Mat<double>(cot)).topRows(2);
      scalar = [&](const Eigen::MatrixXd& y) { return eval_field(m, y, cond, t).cwiseProduct(cot).sum(); };
    } else {
      gi = eval_field(m, xt, cond, t);
      scalar = [&](const Eigen::MatrixXd& y) { return energy(m, y, cond, t).sum(); };
    }
    const double gi_scale = gi.cwiseAbs().maxCoeff();
    for (Eigen::Index i : pick(gi.size())) {
      const double fd = oracle::central_difference(
          [&](double v) {
            Eigen::MatrixXd y = xt;
            y.data()[i] = v;
            return scalar(y);
          },
          xt.data()[i], h);
      worst_field = std::max(worst_field, rel(gi.data()[i], fd, gi_scale));
    }

    // Training-loss gradient.
    const PairedBatch batch{u, x, cond};
    const LossAndGrad<double> lg = fm_loss(m, batch, t);
    const double gl_scale = lg.grad.cwiseAbs().maxCoeff();
    double& worst = kind == FieldKind::energy ? worst_energy_train : worst_direct_train;
    for (Eigen::Index i : pick(m.params.size())) {
      const double fd = oracle::central_difference(
          [&](double v) {
            auto q = m;
            q.params.mutable_values()[i] = v;
            return fm_loss(q, batch, t).loss;
          },
          m.params.values()[i], h);
      worst = std::max(worst, rel(lg.grad[i], fd, gl_scale));
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = worst_field < 1e-4 && worst_direct_train < 1e-4 && worst_energy_train < 1e-3 && secs < 30.0;
  return {ok, fmt("param/input worst rel err %.2e", worst_field) + fmt(", direct loss grad %.2e", worst_direct_train) +
                  fmt(", energy loss grad %.2e", worst_energy_train) + fmt(", %.1f s", secs)};
}

Field2D rotation_field() {
  return [](const Eigen::MatrixXd& x) {
    Eigen::MatrixXd v(2, x.cols());
    v.row(0) = x.row(1);
    v.row(1) = -x.row(0);
    return v;
  };
}

// Gradient fields with zero true curl whose finite-difference curl, relative
// to their peak speed, calibrates the noise floor on a grid.
std::vector<Field2D> gradient_fixtures(const GridSpec& g) {
  const double c0 = 0.5 * (g.x0_min + g.x0_max), c1 = 0.5 * (g.x1_min + g.x1_max);
  const double s0 = 0.25 * (g.x0_max - g.x0_min), s1 = 0.25 * (g.x1_max - g.x1_min);
  const double k0 = 2 * std::numbers::pi / (g.x0_max - g.x0_min), k1 = 2 * std::numbers::pi / (g.x1_max - g.x1_min);
  std::vector<Field2D> out;
  out.push_back([](const Eigen::MatrixXd& x) { return Eigen::MatrixXd(x); });
  // grad of exp(-((x0-c0)^2/s0^2 + (x1-c1)^2/s1^2) / 2)
  out.push_back([=](const Eigen::MatrixXd& x) {
    Eigen::MatrixXd v(2, x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double d0 = x(0, j) - c0, d1 = x(1, j) - c1;
      const double e = std::exp(-0.5 * (d0 * d0 / (s0 * s0) + d1 * d1 / (s1 * s1)));
      v(0, j) = -d0 / (s0 * s0) * e;
      v(1, j) = -d1 / (s1 * s1) * e;
    }
    return v;
  });
  // grad of sin(k0 x0) cos(k1 x1)
  out.push_back([=](const Eigen::MatrixXd& x) {
    Eigen::MatrixXd v(2, x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      v(0, j) = k0 * std::cos(k0 * x(0, j)) * std::cos(k1 * x(1, j));
      v(1, j) = -k1 * std::sin(k0 * x(0, j)) * std::sin(k1 * x(1, j));
    }
    return v;
  });
  return out;
}

double peak_speed(const Field2D& f, const GridSpec& g) {
  Eigen::MatrixXd pts(2, static_cast<Eigen::Index>(g.n0) * g.n1);
  for (int i = 0; i < g.n0; ++i)
    for (int j = 0; j < g.n1; ++j) pts.col(static_cast<Eigen::Index>(i) * g.n1 + j) << g.x0(i), g.x1(j);
  return f(pts).colwise().norm().maxCoeff();
}

Verdict curl_identity(ArmCache& arms) {
  GridSpec unit;
  unit.x0_min = unit.x1_min = -2.0;
  unit.x0_max = unit.x1_max = 2.0;
  unit.n0 = unit.n1 = 50;
  const double rot_err = (curl(rotation_field(), unit, Eigen::VectorXd::Zero(1), 0.0).values.array() + 2.0).abs().maxCoeff();
  const double id_err = curl(gradient_fixtures(unit)[0], unit, Eigen::VectorXd::Zero(1), 0.0).max_abs();

  const ArmResult& ebm = arms.get("ot_ebm");
  const ArmResult& flow = arms.get("ot_flow");
  if (auto e = complete(ebm, "ot_ebm", 1); !e.empty()) return {false, e};
  if (!flow.failures.empty()) return {false, "ot_flow failed: " + flow.failures.front()};
  const std::uint64_t seed = arms.options().seeds.front();
  const Model me = arms.model("ot_ebm", seed), md = arms.model("ot_flow", seed);

  const auto t0 = Clock::now();
  const SeedData d = make_seed_data(ebm.config, seed);
  const GridSpec grid = curl_grid(make_pool(Task::markovian, d.train_rows), 50);
  // Energy networks of the trained architecture at fresh initializations are
  // curl-free by construction and share the model's function class.
  std::vector<Model> nets;
  for (std::uint64_t k = 1; k <= 4; ++k) {
    FieldArch a;
    a.kind = FieldKind::energy;
    a.cond_dim = me.cond_dim;
    a.periodic_cond = me.periodic_cond;
    a.hidden_dim = me.params.spec().hidden_dim;
    a.n_blocks = me.params.spec().n_blocks;
    Engine rng(1000 + k);
    nets.push_back(init_field<float>(a, rng));
  }
  auto model_field = [](const Model& m, const Eigen::VectorXd& cond, double t) -> Field2D {
    return [&m, cond, t](const Eigen::MatrixXd& x) { return eval_field(m, x, cond.replicate(1, x.cols()), t); };
  };

  double worst_energy = 0, best_direct = 0, worst_floor = 0;
  for (double t : kCurlTimes)
    for (Eigen::Index k = 0; k < 4; ++k) {
      const Eigen::VectorXd cond = d.test.pa.col(k);
      std::vector<Field2D> fixtures = gradient_fixtures(grid);
      for (const Model& n : nets) fixtures.push_back(model_field(n, cond, t));
      double rel_floor = 0;
      for (const Field2D& f : fixtures)
        rel_floor = std::max(rel_floor, curl(f, grid, cond, t).max_abs() / peak_speed(f, grid));
      worst_floor = std::max(worst_floor, rel_floor);
      for (const Model* m : {&me, &md}) {
        const double floor = rel_floor * peak_speed(model_field(*m, cond, t), grid);
        const double ratio = curl(*m, grid, cond, t).max_abs() / floor;
        if (m == &me) worst_energy = std::max(worst_energy, ratio);
        else best_direct = std::max(best_direct, ratio);
      }
    }
  const double secs = seconds_since(t0);
  // Not part of the verdict: finite-difference curl of a gradient field
  // shrinks like h^2 under refinement, a rotational component does not.
  std::string refine;
  for (const Model* m : {&me, &md}) {
    refine += m == &me ? "; refined max|curl| energy" : ", direct";
    for (int n : {50, 100, 200}) {
      GridSpec g = grid;
      g.n0 = g.n1 = n;
      double worst = 0;
      for (double t : kCurlTimes) worst = std::max(worst, curl(*m, g, d.test.pa.col(0), t).max_abs());
      refine += fmt(n == 50 ? " %.3g" : "/%.3g", worst);
    }
  }
  refine += " (n = 50/100/200)";
  const bool ok = rot_err < 1e-8 && id_err < 1e-8 && worst_energy < 1.0 && best_direct >= 10.0 && secs < 60.0;
  return {ok, fmt("fixtures |err| %.1e", std::max(rot_err, id_err)) + fmt(", floor <= %.2e x peak speed", worst_floor) +
                  fmt(", energy max/floor %.3f", worst_energy) + fmt(", direct max/floor %.1f", best_direct) +
                  fmt(", %.1f s", secs) + refine};
}

Verdict markovian_reproduction(ArmCache& arms) {
  const ArmResult& ot = arms.get("ot_flow");
  const ArmResult& fl = arms.get("flow");
  const std::size_t n = arms.options().seeds.size();
  for (auto e : {complete(ot, "ot_flow", n), complete(fl, "flow", n)})
    if (!e.empty()) return {false, e};
  const double ot50 = seed_mean(ot, 50, &MetricsReport::mu_ape_percent), ot2 = seed_mean(ot, 2, &MetricsReport::mu_ape_percent);
  const double fl50 = seed_mean(fl, 50, &MetricsReport::mu_ape_percent), fl2 = seed_mean(fl, 2, &MetricsReport::mu_ape_percent);
  const bool ok = ot50 <= 5.0 && ot2 <= 5.0 && fl50 <= 5.0 && fl2 >= 3.0 * ot2;
  return {ok, fmt("OT-Flow %.2f%% @50", ot50) + fmt(", %.2f%% @2", ot2) + fmt("; Flow %.2f%% @50", fl50) +
                  fmt(", %.2f%% @2", fl2) + fmt(" (%.1fx)", fl2 / ot2) + timing(ot) + timing(fl)};
}

Verdict markovianity_ablation(ArmCache& arms) {
  const ArmResult& ot = arms.get("ot_flow");
  const ArmResult& nv = arms.get("naive");
  const std::size_t n = arms.options().seeds.size();
  for (auto e : {complete(ot, "ot_flow", n), complete(nv, "naive", n)})
    if (!e.empty()) return {false, e};
  const double a = seed_mean(nv, 50, &MetricsReport::mu_ape_percent), b = seed_mean(ot, 50, &MetricsReport::mu_ape_percent);
  return {a >= 10.0 * b, fmt("naive %.2f%%", a) + fmt(" vs markovian %.2f%%", b) + fmt(" (%.1fx)", a / b) + timing(nv)};
}

Verdict soundness_separation(ArmCache& arms) {
  const ArmResult& ot = arms.get("ot_flow");
  const ArmResult& fl = arms.get("flow");
  const std::size_t n = arms.options().seeds.size();
  for (auto e : {complete(ot, "ot_flow", n), complete(fl, "flow", n)})
    if (!e.empty()) return {false, e};
  const double oc = seed_mean(ot, 50, &MetricsReport::composition_mae), fc = seed_mean(fl, 50, &MetricsReport::composition_mae);
  const double orv = seed_mean(ot, 50, &MetricsReport::reversibility_mae),
               frv = seed_mean(fl, 50, &MetricsReport::reversibility_mae);
  return {5.0 * oc <= fc && 5.0 * orv <= frv,
          fmt("composition %.3f", oc) + fmt(" vs %.3f", fc) + fmt(" (%.1fx)", fc / oc) + fmt(", reversibility %.3f", orv) +
              fmt(" vs %.3f", frv) + fmt(" (%.1fx)", frv / orv)};
}

Verdict confounded_graphs(ArmCache& arms) {
  const ArmResult& fd = arms.get("frontdoor");
  const ArmResult& bd = arms.get("backdoor");
  const std::size_t n = arms.options().seeds.size();
  for (auto e : {complete(fd, "frontdoor", n), complete(bd, "backdoor", n)})
    if (!e.empty()) return {false, e};
  const double a = seed_mean(fd, 50, &MetricsReport::mu_ape_percent), b = seed_mean(bd, 50, &MetricsReport::mu_ape_percent);
  return {a <= 5.0 && b <= 5.0, fmt("frontdoor %.2f%%", a) + fmt(", backdoor %.2f%%", b) + timing(fd) + timing(bd)};
}

Verdict monotonicity_audit(ArmCache& arms) {
  const ArmResult& ot = arms.get("ot_flow");
  const ArmResult& fl = arms.get("flow");
  const std::size_t n = arms.options().seeds.size();
  for (auto e : {complete(ot, "ot_flow", n), complete(fl, "flow", n)})
    if (!e.empty()) return {false, e};
  bool ok = true;
  std::string detail;
  for (std::uint64_t s : arms.options().seeds) {
    double a = NAN, b = NAN;
    for (const auto& r : ot.rows)
      if (r.seed == s && r.nfe == 50) a = r.monotonicity_violation_rate;
    for (const auto& r : fl.rows)
      if (r.seed == s && r.nfe == 50) b = r.monotonicity_violation_rate;
    ok = ok && a < b;
    detail += (detail.empty() ? "" : ", ") + std::string("seed ") + std::to_string(s) + fmt(" %.4f", a) + fmt(" vs %.4f", b);
  }
  return {ok, detail + " (OT-Flow vs Flow)"};
}

Verdict pushforward_property(ArmCache& arms) {
  const ArmResult& ot = arms.get("ot_flow");
  if (!ot.failures.empty()) return {false, "ot_flow failed: " + ot.failures.front()};
  const std::uint64_t seed = arms.options().seeds.front();
  const Model m = arms.model("ot_flow", seed);
  dgp::DgpConfig dc = ot.config.dgp;
  dc.seed = seed;
  OdeConfig ode;
  ode.solver = Solver::euler;
  ode.nfe = 250;
  Engine rng = SeedStream(seed).stream(tag::kProbe, 7);
  int passed = 0;
  std::string ps;
  std::vector<double> excess;
  for (int k = 0; k < 10; ++k) {
    const double pa = uniform(rng, 0.0, dgp::kTwoPi);
    const EnergyTest et = pushforward_test(m, pa, dc, ot.config.train.prior, 1000, ode, 500, 0.01, rng);
    if (!et.rejects(0.01)) ++passed;
    ps += fmt(k ? ",%.3f" : "%.3f", et.p_value);
    excess.push_back(et.statistic / et.critical_value);
  }
  std::nth_element(excess.begin(), excess.begin() + 5, excess.end());
  return {passed >= 9, std::to_string(passed) + "/10 draws not rejected at 1% (p = " + ps +
                           fmt("; median statistic/critical %.1f)", excess[5])};
}

Verdict prior_ablation(ArmCache& arms) {
  const std::size_t n = arms.options().seeds.size();
  bool ok = true;
  std::string detail;
  for (std::string kind : {"ot_flow", "flow"}) {
    double v[3];
    int i = 0;
    for (std::string suffix : {"", "_bimodal", "_multimodal"}) {
      const ArmResult& r = arms.get(kind + suffix);
      if (auto e = complete(r, kind + suffix, n); !e.empty()) return {false, e};
      v[i++] = seed_mean(r, 50, &MetricsReport::mu_ape_percent);
    }
    ok = ok && v[0] <= v[1] && v[1] <= v[2];
    detail += (detail.empty() ? "" : "; ") + kind + fmt(" %.2f", v[0]) + fmt(" <= %.2f", v[1]) + fmt(" <= %.2f", v[2]);
  }
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria runner"};
  std::string work = "acceptance_runs";
  std::vector<int> only;
  Options opt;
  app.add_option("--work", work, "directory holding trained arms (reused across invocations)");
  app.add_option("--criteria", only, "run only these criteria (1-11)")->delimiter(',');
  app.add_option("--steps", opt.steps, "smoke run: this training budget and a reduced evaluation");
  app.add_option("--seeds", opt.seeds, "seeds for multi-seed criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  opt.work = work;
  if (opt.seeds.empty()) opt.seeds = {0};
  fs::create_directories(opt.work);
  ArmCache arms(opt);

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"closed-form 1-D fixture", closed_form_fixture},
      {"assignment solver vs brute force", assignment_oracle},
      {"gradient checks", gradient_checks},
      {"curl identity", [&] { return curl_identity(arms); }},
      {"markovian ellipse reproduction", [&] { return markovian_reproduction(arms); }},
      {"markovianity-violation ablation", [&] { return markovianity_ablation(arms); }},
      {"soundness-axiom separation", [&] { return soundness_separation(arms); }},
      {"frontdoor and backdoor", [&] { return confounded_graphs(arms); }},
      {"monotonicity audit", [&] { return monotonicity_audit(arms); }},
      {"push-forward property", [&] { return pushforward_property(arms); }},
      {"complex-prior ablation", [&] { return prior_ablation(arms); }},
  };
  if (opt.steps >= 0) std::printf("NOTE: smoke run (%d training steps, reduced evaluation); results are not acceptance-grade\n", opt.steps);
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("criterion %2d %s  %s: %s\n", id, v.pass ? "PASS" : "FAIL", criteria[i].first.c_str(), v.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
