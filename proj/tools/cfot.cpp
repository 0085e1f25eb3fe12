// cfot command-line front end. Exit codes: 0 ok, 1 config/usage error,
// 2 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "cfot/closedform.hpp"
#include "cfot/experiment.hpp"

namespace fs = std::filesystem;
using namespace cfot;

namespace {

struct ConfigArgs {
  std::string config;
  std::vector<std::string> set;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out;
  std::vector<int> nfe;
};

void add_config_args(CLI::App* app, ConfigArgs& a, bool need_out) {
  app->add_option("--config", a.config, "key=value config file");
  app->add_option("--set", a.set, "override a config key, e.g. --set train.steps=1000");
  app->add_option("--seed", a.seed, "run a single seed");
  auto* out = app->add_option("--out", a.out, "output directory");
  if (need_out) out->required();
  app->add_option("--nfe", a.nfe, "comma-separated NFE list")->delimiter(',');
}

ExperimentConfig resolve(const ConfigArgs& a, const CLI::App* app) {
  std::string text;
  if (!a.config.empty()) {
    std::ifstream is(a.config);
    if (!is) throw ConfigError("--config", "cannot read " + a.config);
    std::stringstream ss;
    ss << is.rdbuf();
    text = ss.str();
  }
  for (const std::string& kv : a.set) text += "\n" + kv;
  ExperimentConfig c = parse_config(text);
  if (app->count("--seed")) c.seeds = {a.seed};
  if (!a.out.empty()) c.output_dir = a.out;
  if (!a.nfe.empty()) c.eval.nfe = a.nfe;
  c.validate();
  return c;
}

void progress(const std::string& s) { std::cerr << "[cfot] " << s << '\n'; }

int cmd_gen_data(const ConfigArgs& a, const CLI::App* app) {
  const ExperimentConfig c = resolve(a, app);
  dgp::DgpConfig d = c.dgp;
  d.seed = c.seeds.front();
  const dgp::Dataset ds = dgp::gen_dataset(d);
  const fs::path p(a.out);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  dgp::write_csv(ds, p.string());
  std::cout << "wrote " << ds.size() << " rows to " << p.string() << " (+ " << dgp::noise_sidecar_path(p.string())
            << ")\n";
  return 0;
}

int cmd_train(const ConfigArgs& a, const CLI::App* app) {
  const ExperimentConfig c = resolve(a, app);
  int rc = 0;
  for (std::uint64_t seed : c.seeds) {
    const fs::path dir = fs::path(c.output_dir) / ("seed_" + std::to_string(seed));
    progress("seed " + std::to_string(seed) + ": train");
    const SeedData d = make_seed_data(c, seed);
    const TrainOutcome t = train_seed(c, d, seed, dir);
    if (t.diverged) {
      std::cerr << "training diverged for seed " << seed << ": " << t.failure << '\n';
      rc = 2;
    } else {
      std::cout << "checkpoints in " << dir.string() << '\n';
    }
  }
  return rc;
}

int cmd_eval(const ConfigArgs& a, const CLI::App* app) {
  const ExperimentConfig c = resolve(a, app);
  std::vector<MetricsReport> rows;
  for (std::uint64_t seed : c.seeds) {
    const fs::path dir = fs::path(c.output_dir) / ("seed_" + std::to_string(seed));
    const SeedData d = make_seed_data(c, seed);
    std::optional<Model> med;
    if (c.dgp.graph == dgp::GraphVariant::frontdoor) med = load_field<float>((dir / "mediator.best.ckpt").string());
    const SeedModels m{load_field<float>((dir / "model.best.ckpt").string()), med};
    for (int nfe : c.eval.nfe) {
      progress("seed " + std::to_string(seed) + ": eval nfe=" + std::to_string(nfe));
      rows.push_back(evaluate_seed(c, d, m, seed, nfe));
    }
  }
  write_metrics((fs::path(c.output_dir) / "metrics.csv").string(), rows);
  std::cout << kMetricsHeader << '\n';
  for (const auto& r : rows) std::cout << to_csv_row(r) << '\n';
  return 0;
}

int cmd_cf(const std::string& model_path, const std::string& queries, const std::string& out, int nfe,
           const std::string& solver) {
  const Model m = load_field<float>(model_path);
  if (m.cond_dim != 1) throw InputError(model_path + ": batch queries need a model conditioned on pa alone");
  OdeConfig ode;
  ode.solver = parse_solver(solver);
  ode.nfe = nfe;
  const CfQueries q = read_queries(queries);
  const Eigen::MatrixXd xs = counterfactual(m, q.x, q.pa, q.pa_star, ode);
  write_answers(out, q, xs);
  std::cout << "answered " << q.x.cols() << " queries into " << out << '\n';
  return 0;
}

int cmd_curl(const std::string& model_path, const std::string& out, const std::vector<double>& cond, double t,
             const std::vector<double>& bounds, int n) {
  const Model m = load_field<float>(model_path);
  if (m.x_dim != 2) throw InputError("curl-map: model is not 2-D");
  if (static_cast<int>(cond.size()) != m.cond_dim)
    throw InputError("curl-map: --cond needs " + std::to_string(m.cond_dim) + " value(s)");
  GridSpec g;
  g.x0_min = bounds[0];
  g.x0_max = bounds[1];
  g.x1_min = bounds[2];
  g.x1_max = bounds[3];
  g.n0 = g.n1 = n;
  const CurlMap map = curl(m, g, Eigen::Map<const Eigen::VectorXd>(cond.data(), static_cast<Eigen::Index>(cond.size())), t);
  write_curl_map(out, map);
  std::cout << "max |curl| = " << dgp::format_double(map.max_abs()) << '\n';
  return 0;
}

int cmd_quantile_demo() {
  using namespace closedform;
  std::printf("mechanism  pa  x    pa*  u      x*     rank(x|pa)  rank(x*|pa*)\n");
  for (Mechanism1D m : {Mechanism1D::t1, Mechanism1D::t2, Mechanism1D::t3}) {
    const double x = 0.8;
    const double u = abduct(m, 0, x);
    const double xs = cf_1d(m, 0, x, 1);
    std::printf("%-9s  0   %.1f  1    %.1f    %.1f    %.1f         %.1f\n", std::string(name(m)).c_str(), x, u, xs,
                rank_1d(m, 0, x), rank_1d(m, 1, xs));
  }
  std::printf("quantile transport: %.1f\n", quantile_cf(0, 0.8, 1));
  return 0;
}

int cmd_run(const ConfigArgs& a, const CLI::App* app) {
  const ExperimentConfig c = resolve(a, app);
  const RunManifest m = run_experiment(c, progress);
  std::cout << "config_hash=" << m.config_hash << "\nmanifest=" << (fs::path(c.output_dir) / "manifest.txt").string()
            << '\n';
  if (!m.ok()) {
    for (const auto& f : m.failures) std::cerr << "failed: " << f << '\n';
    return 2;
  }
  return 0;
}

int cmd_table(const std::vector<std::string>& runs, const std::string& out) {
  std::vector<RunManifest> ms;
  for (const std::string& r : runs) ms.push_back(read_manifest((fs::path(r) / "manifest.txt").string()));
  const std::string csv = emit_table(ms);
  if (out.empty()) {
    std::cout << csv;
  } else {
    std::ofstream(out) << csv;
    std::cout << "wrote " << out << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual flows with Markovian batch-OT coupling on the ellipse SCM"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  ConfigArgs gen_a, train_a, eval_a, run_a;
  auto* gen = app.add_subcommand("gen-data", "generate a dataset CSV (+ .noise sidecar)");
  add_config_args(gen, gen_a, true);
  auto* tr = app.add_subcommand("train", "train models for each seed into <out>/seed_<s>/");
  add_config_args(tr, train_a, false);
  auto* ev = app.add_subcommand("eval", "evaluate trained checkpoints, writing <out>/metrics.csv");
  add_config_args(ev, eval_a, false);
  auto* run = app.add_subcommand("run", "generate, train, evaluate and tabulate every seed");
  add_config_args(run, run_a, false);

  std::string cf_model, cf_queries, cf_out, cf_solver = "euler";
  int cf_nfe = 50;
  auto* cf = app.add_subcommand("cf", "answer counterfactual queries (pa,x0,x1,pa_star) with a trained flow");
  cf->add_option("--model", cf_model, "checkpoint")->required();
  cf->add_option("--queries", cf_queries, "query CSV")->required();
  cf->add_option("--out", cf_out, "answer CSV")->required();
  cf->add_option("--nfe", cf_nfe, "field evaluations per leg")->check(CLI::PositiveNumber);
  cf->add_option("--solver", cf_solver, "euler | rk4 | adaptive_rk45");

  std::string cm_model, cm_out;
  std::vector<double> cm_cond, cm_bounds;
  double cm_t = 0.5;
  int cm_n = 50;
  auto* cm = app.add_subcommand("curl-map", "finite-difference curl of a 2-D field on a grid");
  cm->add_option("--model", cm_model, "checkpoint")->required();
  cm->add_option("--out", cm_out, "CSV path (metadata goes to <out>.meta)")->required();
  cm->add_option("--cond", cm_cond, "conditioning values")->delimiter(',')->required();
  cm->add_option("--t", cm_t, "time in [0,1]")->check(CLI::Range(0.0, 1.0));
  cm->add_option("--bounds", cm_bounds, "x0min,x0max,x1min,x1max")->delimiter(',')->expected(4)->required();
  cm->add_option("--n", cm_n, "grid points per axis")->check(CLI::Range(3, 100000));

  auto* qd = app.add_subcommand("quantile-demo", "print the 1-D rank-preservation example");

  std::vector<std::string> tb_runs;
  std::string tb_out;
  auto* tb = app.add_subcommand("table", "aggregate run directories into one table");
  tb->add_option("runs", tb_runs, "run directories")->required();
  tb->add_option("--out", tb_out, "output CSV (stdout if omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen_data(gen_a, gen);
    if (*tr) return cmd_train(train_a, tr);
    if (*ev) return cmd_eval(eval_a, ev);
    if (*run) return cmd_run(run_a, run);
    if (*cf) return cmd_cf(cf_model, cf_queries, cf_out, cf_nfe, cf_solver);
    if (*cm) return cmd_curl(cm_model, cm_out, cm_cond, cm_t, cm_bounds, cm_n);
    if (*qd) return cmd_quantile_demo();
    if (*tb) return cmd_table(tb_runs, tb_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
