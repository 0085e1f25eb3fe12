#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>
#include <string>
#include <vector>

#include "cfot/coupling.hpp"
#include "cfot/dgp.hpp"
#include "cfot/error.hpp"
#include "cfot/inference.hpp"
#include "cfot/rng.hpp"

namespace cfot {

inline constexpr double kApeFloor = 1e-8;

/// 100 * |pred - truth| / max(|truth|, 1e-8), averaged over every entry.
inline double mean_ape(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth) {
  require(pred.rows() == truth.rows() && pred.cols() == truth.cols(), "mean_ape: shape mismatch");
  require(pred.size() > 0, "mean_ape: empty input");
  return 100.0 * ((pred - truth).array().abs() / truth.array().abs().max(kApeFloor)).mean();
}

/// Abducts each unit once, then predicts at k target angles 2*pi*j/k and
/// compares with the ground-truth counterfactual.
inline double mu_ape(const CfEngine& model, const CfEngine& truth, const UnitBatch& units, int k_angles) {
  require(units.size() > 0, "mu_ape: empty test set");
  require(k_angles >= 1, "mu_ape: k_angles must be >= 1");
  const Eigen::MatrixXd lat = model.abduct(units);
  const Eigen::MatrixXd lat_true = truth.abduct(units);
  double sum = 0.0;
  for (int j = 0; j < k_angles; ++j) {
    const Eigen::RowVectorXd pa_star = Eigen::RowVectorXd::Constant(units.size(), dgp::target_angle(j, k_angles));
    sum += mean_ape(model.predict(lat, units, pa_star).x, truth.predict(lat_true, units, pa_star).x);
  }
  return sum / k_angles;
}

/// Mean L1 distance per unit.
inline double mean_l1(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().colwise().sum().mean();
}

/// n-fold null intervention T_pa T^-1_pa applied to the observed x.
inline double composition_mae(const CfEngine& model, const UnitBatch& units, int n_cycles) {
  require(n_cycles >= 1, "composition_mae: n_cycles must be >= 1");
  UnitBatch cur = units;
  for (int c = 0; c < n_cycles; ++c) cur = model.counterfactual(cur, units.pa);
  return mean_l1(cur.x, units.x);
}

/// n cycles pa -> pa* -> pa, ending on the factual side.
inline UnitBatch reverse_cycle(const CfEngine& model, const UnitBatch& units, const Eigen::RowVectorXd& pa_star,
                               int n_cycles) {
  require(n_cycles >= 1, "reverse_cycle: n_cycles must be >= 1");
  UnitBatch cur = units;
  for (int c = 0; c < n_cycles; ++c) cur = model.counterfactual(model.counterfactual(cur, pa_star), units.pa);
  return cur;
}

inline double reversibility_mae(const CfEngine& model, const UnitBatch& units, const Eigen::RowVectorXd& pa_star,
                                int n_cycles) {
  return mean_l1(reverse_cycle(model, units, pa_star, n_cycles).x, units.x);
}

inline Eigen::RowVectorXd draw_angles(Engine& rng, Eigen::Index n) {
  Eigen::RowVectorXd a(n);
  for (Eigen::Index i = 0; i < n; ++i) a[i] = uniform(rng, 0.0, dgp::kTwoPi);
  return a;
}

/// Probe pairs for the monotonicity audit. Each pair shares the parents of a
/// random test unit and a uniform pa*; its two points are that unit's
/// mechanism applied to the exogenous noise of two distinct random test units.
struct MonotonicityProbe {
  UnitBatch first, second;
  Eigen::RowVectorXd pa_star;
};

inline MonotonicityProbe make_monotonicity_probe(const UnitBatch& test, Eigen::Index n_pairs, Engine& rng) {
  if (n_pairs < 1) throw ContractViolation("monotonicity: empty probe set");
  require(test.size() > 1 && !test.has_mediator(), "monotonicity: needs at least two markovian/backdoor units");
  MonotonicityProbe p;
  p.first.pa.resize(n_pairs);
  p.first.z.resize(n_pairs);
  p.first.x.resize(2, n_pairs);
  p.second = p.first;
  p.pa_star.resize(n_pairs);
  const auto n = static_cast<std::size_t>(test.size());
  for (Eigen::Index k = 0; k < n_pairs; ++k) {
    const auto a = static_cast<Eigen::Index>(uniform_index(rng, n));
    const auto i = static_cast<Eigen::Index>(uniform_index(rng, n));
    auto j = static_cast<Eigen::Index>(uniform_index(rng, n - 1));
    if (j >= i) ++j;
    p.pa_star[k] = uniform(rng, 0.0, dgp::kTwoPi);
    const double pa = test.pa[a];
    p.first.pa[k] = p.second.pa[k] = pa;
    p.first.z[k] = p.second.z[k] = test.z[a];
    p.first.x.col(k) = dgp::mechanism(pa, dgp::true_abduct(test.pa[i], test.x.col(i)));
    p.second.x.col(k) = dgp::mechanism(pa, dgp::true_abduct(test.pa[j], test.x.col(j)));
  }
  return p;
}

/// Fraction of pairs with <T*(x1) - T*(x2), x1 - x2> <= 0.
inline double monotonicity_violation_rate(const CfEngine& model, const MonotonicityProbe& p) {
  const Eigen::MatrixXd t1 = model.counterfactual(p.first, p.pa_star).x;
  const Eigen::MatrixXd t2 = model.counterfactual(p.second, p.pa_star).x;
  const Eigen::RowVectorXd inner = ((t1 - t2).cwiseProduct(p.first.x - p.second.x)).colwise().sum();
  return static_cast<double>((inner.array() <= 0.0).count()) / static_cast<double>(inner.size());
}

// ---------------------------------------------------------------------------
// Energy distance between samples (columns), with a permutation test.

struct EnergyTest {
  double statistic = 0;
  double critical_value = 0;  // (1 - alpha) quantile of the permutation distribution
  double p_value = 1;
  int permutations = 0;

  bool rejects(double alpha) const { return p_value <= alpha; }
};

/// V-statistic: 2 E|X-Y| - E|X-X'| - E|Y-Y'|.
inline double energy_distance(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  require(x.cols() > 0 && y.cols() > 0 && x.rows() == y.rows(), "energy_distance: bad samples");
  auto mean_dist = [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    double s = 0;
    for (Eigen::Index j = 0; j < b.cols(); ++j)
      for (Eigen::Index i = 0; i < a.cols(); ++i) s += (a.col(i) - b.col(j)).norm();
    return s / (static_cast<double>(a.cols()) * static_cast<double>(b.cols()));
  };
  return 2.0 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y);
}

inline EnergyTest energy_test(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, int permutations, double alpha,
                              Engine& rng) {
  require(x.cols() > 0 && y.cols() > 0 && x.rows() == y.rows(), "energy_test: bad samples");
  require(permutations >= 1, "energy_test: need at least one permutation");
  const Eigen::Index n = x.cols(), m = y.cols(), N = n + m;
  Eigen::MatrixXd z(x.rows(), N);
  z << x, y;
  Eigen::MatrixXd d(N, N);
  for (Eigen::Index j = 0; j < N; ++j) {
    d(j, j) = 0.0;
    for (Eigen::Index i = j + 1; i < N; ++i) d(i, j) = d(j, i) = (z.col(i) - z.col(j)).norm();
  }
  const Eigen::VectorXd row_sum = d.rowwise().sum();
  const double total = row_sum.sum();
  const double dn = static_cast<double>(n), dm = static_cast<double>(m);
  // With a the indicator of the first group: S_aa = a'Da, S_bb = total - 2 a'r + S_aa.
  auto stat = [&](const Eigen::VectorXd& a) {
    const double s_aa = a.dot(d * a);
    const double a_r = a.dot(row_sum);
    const double s_bb = total - 2.0 * a_r + s_aa;
    const double s_ab = a_r - s_aa;
    return 2.0 * s_ab / (dn * dm) - s_aa / (dn * dn) - s_bb / (dm * dm);
  };
  Eigen::VectorXd a = Eigen::VectorXd::Zero(N);
  a.head(n).setOnes();
  EnergyTest out;
  out.statistic = stat(a);
  out.permutations = permutations;
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(N));
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<double> perm_stats;
  perm_stats.reserve(static_cast<std::size_t>(permutations));
  int at_least = 0;
  for (int p = 0; p < permutations; ++p) {
    for (Eigen::Index i = N - 1; i > 0; --i) std::swap(idx[static_cast<std::size_t>(i)], idx[uniform_index(rng, static_cast<std::size_t>(i + 1))]);
    a.setZero();
    for (Eigen::Index i = 0; i < n; ++i) a[idx[static_cast<std::size_t>(i)]] = 1.0;
    const double s = stat(a);
    perm_stats.push_back(s);
    if (s >= out.statistic) ++at_least;
  }
  std::sort(perm_stats.begin(), perm_stats.end());
  const auto q = static_cast<std::size_t>(std::ceil((1.0 - alpha) * permutations)) - 1;
  out.critical_value = perm_stats[std::min(q, perm_stats.size() - 1)];
  out.p_value = (1.0 + at_least) / (1.0 + permutations);
  return out;
}

/// n prior draws pushed through the flow at a fixed pa, and n fresh
/// conditional draws from the simulator.
template <class S>
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> pushforward_samples(const VectorFieldModel<S>& model, double pa,
                                                                const dgp::DgpConfig& dgp_cfg, const PriorConfig& prior,
                                                                Eigen::Index n, const OdeConfig& ode, Engine& rng) {
  require(dgp_cfg.graph == dgp::GraphVariant::markovian, "pushforward: markovian graph only");
  require(n >= 1, "pushforward: n must be >= 1");
  const Eigen::MatrixXd u = prior.sample(rng, n);
  Eigen::MatrixXd pushed = predict(model, u, Eigen::MatrixXd::Constant(1, n, pa), ode);
  Eigen::MatrixXd fresh(2, n);
  for (Eigen::Index j = 0; j < n; ++j) fresh.col(j) = dgp::mechanism(pa, dgp::draw_u(dgp_cfg, rng));
  return {std::move(pushed), std::move(fresh)};
}

template <class S>
double pushforward_distance(const VectorFieldModel<S>& model, double pa, const dgp::DgpConfig& dgp_cfg,
                            const PriorConfig& prior, Eigen::Index n, const OdeConfig& ode, Engine& rng) {
  const auto [pushed, fresh] = pushforward_samples(model, pa, dgp_cfg, prior, n, ode, rng);
  return energy_distance(pushed, fresh);
}

template <class S>
EnergyTest pushforward_test(const VectorFieldModel<S>& model, double pa, const dgp::DgpConfig& dgp_cfg,
                            const PriorConfig& prior, Eigen::Index n, const OdeConfig& ode, int permutations,
                            double alpha, Engine& rng) {
  const auto [pushed, fresh] = pushforward_samples(model, pa, dgp_cfg, prior, n, ode, rng);
  return energy_test(pushed, fresh, permutations, alpha, rng);
}

/// Distance correlation (V-statistic) between paired samples in columns.
inline double distance_correlation(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  require(x.cols() == y.cols() && x.cols() > 1, "distance_correlation: need paired samples");
  auto centered = [](const Eigen::MatrixXd& s) {
    const Eigen::Index n = s.cols();
    Eigen::MatrixXd d(n, n);
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < n; ++i) d(i, j) = (s.col(i) - s.col(j)).norm();
    const Eigen::VectorXd rm = d.rowwise().mean();
    const Eigen::RowVectorXd cm = d.colwise().mean();
    const double gm = d.mean();
    d.colwise() -= rm;
    d.rowwise() -= cm;
    d.array() += gm;
    return d;
  };
  const Eigen::MatrixXd a = centered(x), b = centered(y);
  const double vxy = (a.cwiseProduct(b)).mean();
  const double vxx = (a.cwiseProduct(a)).mean();
  const double vyy = (b.cwiseProduct(b)).mean();
  if (vxx <= 0.0 || vyy <= 0.0) return 0.0;
  return std::sqrt(std::max(0.0, vxy) / std::sqrt(vxx * vyy));
}

/// One row of the per-run report.
struct MetricsReport {
  std::string scheme, model_kind, graph, prior;
  int nfe = 0;
  std::uint64_t seed = 0;
  double mu_ape_percent = NAN;
  double composition_mae = NAN;
  double reversibility_mae = NAN;
  double monotonicity_violation_rate = NAN;
  double pushforward_energy_distance = NAN;
};

inline constexpr std::string_view kMetricsHeader =
    "scheme,model_kind,graph,prior,nfe,seed,mu_ape_percent,composition_mae,reversibility_mae,"
    "monotonicity_violation_rate,pushforward_energy_distance";

inline std::string format_metric(double v) { return std::isnan(v) ? std::string() : dgp::format_double(v); }

inline std::string to_csv_row(const MetricsReport& r) {
  return r.scheme + ',' + r.model_kind + ',' + r.graph + ',' + r.prior + ',' + std::to_string(r.nfe) + ',' +
         std::to_string(r.seed) + ',' + format_metric(r.mu_ape_percent) + ',' + format_metric(r.composition_mae) + ',' +
         format_metric(r.reversibility_mae) + ',' + format_metric(r.monotonicity_violation_rate) + ',' +
         format_metric(r.pushforward_energy_distance);
}

}  // namespace cfot
