#pragma once

// Training pairs (u, x, cond) for flow matching. `markovian_ot` holds the
// conditioning fixed within a batch and solves OT between prior draws and
// conditional data draws; `naive_ot` solves OT across a joint batch of rows,
// so each u inherits whatever conditioning its partner had.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "cfot/assignment.hpp"
#include "cfot/dgp.hpp"
#include "cfot/error.hpp"
#include "cfot/rng.hpp"

namespace cfot {

enum class Scheme { independent, naive_ot, markovian_ot };

inline std::string_view to_string(Scheme s) {
  switch (s) {
    case Scheme::independent: return "independent";
    case Scheme::naive_ot: return "naive_ot";
    case Scheme::markovian_ot: return "markovian_ot";
  }
  return "?";
}

inline Scheme parse_scheme(std::string_view s) {
  if (s == "independent") return Scheme::independent;
  if (s == "naive_ot") return Scheme::naive_ot;
  if (s == "markovian_ot") return Scheme::markovian_ot;
  throw InputError("unknown coupling scheme '" + std::string(s) + "'");
}

enum class PriorKind { uniform_unit_box, standard_gaussian };

inline std::string_view to_string(PriorKind k) {
  return k == PriorKind::uniform_unit_box ? "uniform_unit_box" : "standard_gaussian";
}

inline PriorKind parse_prior_kind(std::string_view s) {
  if (s == "uniform_unit_box" || s == "uniform") return PriorKind::uniform_unit_box;
  if (s == "standard_gaussian" || s == "gaussian") return PriorKind::standard_gaussian;
  throw InputError("unknown prior kind '" + std::string(s) + "'");
}

struct PriorConfig {
  PriorKind kind = PriorKind::uniform_unit_box;
  int dim = 2;

  Eigen::MatrixXd sample(Engine& rng, Eigen::Index m) const {
    Eigen::MatrixXd u(dim, m);
    for (Eigen::Index j = 0; j < m; ++j)
      for (int i = 0; i < dim; ++i) u(i, j) = kind == PriorKind::uniform_unit_box ? uniform01(rng) : standard_normal(rng);
    return u;
  }
};

struct PairedBatch {
  Eigen::MatrixXd u, x, cond;  // d x m, d x m, k x m
  Eigen::Index size() const { return u.cols(); }
};

struct CouplingPlan {
  Permutation assignment;  // u column i is paired with data column assignment[i]
  double cost = 0;
  Scheme scheme = Scheme::independent;
};

inline Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd c(a.cols(), b.cols());
  for (Eigen::Index j = 0; j < b.cols(); ++j)
    for (Eigen::Index i = 0; i < a.cols(); ++i) c(i, j) = (a.col(i) - b.col(j)).squaredNorm();
  return c;
}

inline double pairing_cost(const Eigen::MatrixXd& u, const Eigen::MatrixXd& x, const Permutation& p) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (u.col(static_cast<Eigen::Index>(i)) - x.col(p[i])).squaredNorm();
  return s;
}

inline Eigen::MatrixXd gather_cols(const Eigen::MatrixXd& m, const Permutation& p) {
  Eigen::MatrixXd out(m.rows(), static_cast<Eigen::Index>(p.size()));
  for (std::size_t i = 0; i < p.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = m.col(p[i]);
  return out;
}

/// What a flow learns: target variable and conditioning, per graph.
enum class Task { markovian, backdoor, frontdoor_mediator, frontdoor_outcome };

inline std::string_view to_string(Task t) {
  switch (t) {
    case Task::markovian: return "markovian";
    case Task::backdoor: return "backdoor";
    case Task::frontdoor_mediator: return "frontdoor_mediator";
    case Task::frontdoor_outcome: return "frontdoor_outcome";
  }
  return "?";
}

inline int cond_dim(Task t) { return t == Task::markovian || t == Task::frontdoor_mediator ? 1 : 2; }

/// Training rows of a dataset as (target, conditioning) columns.
struct RowPool {
  Eigen::MatrixXd x, cond;
  Eigen::Index size() const { return x.cols(); }
};

inline RowPool make_pool(Task task, const std::vector<dgp::Sample>& rows) {
  const auto n = static_cast<Eigen::Index>(rows.size());
  RowPool p{Eigen::MatrixXd(2, n), Eigen::MatrixXd(cond_dim(task), n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const dgp::Sample& s = rows[static_cast<std::size_t>(i)];
    if ((task == Task::frontdoor_mediator || task == Task::frontdoor_outcome) && !s.m)
      throw InputError("make_pool: frontdoor task on rows without a mediator");
    switch (task) {
      case Task::markovian: p.x.col(i) = s.x; p.cond(0, i) = s.pa; break;
      case Task::backdoor: p.x.col(i) = s.x; p.cond.col(i) << s.pa, s.z; break;
      case Task::frontdoor_mediator: p.x.col(i) = *s.m; p.cond(0, i) = s.pa; break;
      case Task::frontdoor_outcome: p.x.col(i) = s.x; p.cond.col(i) = *s.m; break;
    }
  }
  return p;
}

/// m target draws sharing (approximately, for binned sources) one conditioning value.
struct ConditionalDraw {
  Eigen::MatrixXd x, cond;
};

class ConditionalSource {
 public:
  virtual ~ConditionalSource() = default;
  virtual ConditionalDraw draw(Engine& rng, Eigen::Index m) const = 0;
};

namespace detail {

/// Parent draw from the DGP: (z, pa) with fresh noise.
inline std::pair<double, double> draw_parent(const dgp::DgpConfig& cfg, Engine& rng) {
  const double z = uniform(rng, -0.5, 0.5);
  return {z, dgp::pa_mechanism(cfg.graph, z, dgp::draw_pa_noise(cfg.graph, rng))};
}

}  // namespace detail

/// x | pa from the simulator: one pa, m fresh units.
class OnlineMarkovianSource : public ConditionalSource {
 public:
  explicit OnlineMarkovianSource(dgp::DgpConfig cfg) : cfg_(cfg) {}
  ConditionalDraw draw(Engine& rng, Eigen::Index m) const override {
    const double pa = detail::draw_parent(cfg_, rng).second;
    ConditionalDraw d{Eigen::MatrixXd(2, m), Eigen::MatrixXd::Constant(1, m, pa)};
    for (Eigen::Index j = 0; j < m; ++j) d.x.col(j) = dgp::mechanism(pa, dgp::draw_u(cfg_, rng));
    return d;
  }

 private:
  dgp::DgpConfig cfg_;
};

/// x | (pa, z): U is redrawn given the shared z.
class OnlineBackdoorSource : public ConditionalSource {
 public:
  explicit OnlineBackdoorSource(dgp::DgpConfig cfg) : cfg_(cfg) {}
  ConditionalDraw draw(Engine& rng, Eigen::Index m) const override {
    const auto [z, pa] = detail::draw_parent(cfg_, rng);
    ConditionalDraw d{Eigen::MatrixXd(2, m), Eigen::MatrixXd(2, m)};
    d.cond.row(0).setConstant(pa);
    d.cond.row(1).setConstant(z);
    for (Eigen::Index j = 0; j < m; ++j) d.x.col(j) = dgp::mechanism(pa, dgp::draw_u_given_z(cfg_, z, rng));
    return d;
  }

 private:
  dgp::DgpConfig cfg_;
};

/// m | pa for the frontdoor mediator.
class OnlineMediatorSource : public ConditionalSource {
 public:
  explicit OnlineMediatorSource(dgp::DgpConfig cfg) : cfg_(cfg) {}
  ConditionalDraw draw(Engine& rng, Eigen::Index m) const override {
    const double pa = detail::draw_parent(cfg_, rng).second;
    ConditionalDraw d{Eigen::MatrixXd(2, m), Eigen::MatrixXd::Constant(1, m, pa)};
    for (Eigen::Index j = 0; j < m; ++j) {
      const double e0 = dgp::coef::kMediatorNoiseStd * standard_normal(rng);
      const double e1 = dgp::coef::kMediatorNoiseStd * standard_normal(rng);
      d.x.col(j) = dgp::mediator(pa, e0, e1);
    }
    return d;
  }

 private:
  dgp::DgpConfig cfg_;
};

/// Angle of each pool row's conditioning, used as the bin key: pa itself for
/// scalar conditioning, the mediator's angle atan2(m0, m1) for 2-D.
inline std::vector<double> bin_keys(const RowPool& pool) {
  std::vector<double> k(static_cast<std::size_t>(pool.size()));
  for (Eigen::Index i = 0; i < pool.size(); ++i)
    k[static_cast<std::size_t>(i)] = pool.cond.rows() == 1 ? dgp::wrap_angle(pool.cond(0, i))
                                                          : dgp::wrap_angle(std::atan2(pool.cond(0, i), pool.cond(1, i)));
  return k;
}

/// Fixed-dataset conditional draws: pick an anchor row, then draw rows whose
/// key angle lies within width/2 of the anchor's (circular). Each row keeps
/// its own conditioning.
class BinnedSource : public ConditionalSource {
 public:
  BinnedSource(RowPool pool, double width) : pool_(std::move(pool)), width_(width) {
    if (pool_.size() < 1) throw ContractViolation("BinnedSource: empty pool");
    if (!(width_ > 0.0)) throw ContractViolation("BinnedSource: width must be > 0");
    keys_ = bin_keys(pool_);
    order_.resize(keys_.size());
    std::iota(order_.begin(), order_.end(), 0);
    std::stable_sort(order_.begin(), order_.end(), [&](std::size_t a, std::size_t b) { return keys_[a] < keys_[b]; });
    sorted_.resize(keys_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) sorted_[i] = keys_[order_[i]];
  }

  /// Pool rows in the window around `center`.
  std::vector<std::size_t> window(double center) const {
    std::vector<std::size_t> rows;
    const double half = 0.5 * width_;
    auto take = [&](double lo, double hi) {
      auto a = std::lower_bound(sorted_.begin(), sorted_.end(), lo);
      auto b = std::upper_bound(sorted_.begin(), sorted_.end(), hi);
      for (auto it = a; it < b; ++it) rows.push_back(order_[static_cast<std::size_t>(it - sorted_.begin())]);
    };
    const double lo = center - half, hi = center + half;
    take(std::max(lo, 0.0), std::min(hi, dgp::kTwoPi));
    if (lo < 0.0) take(lo + dgp::kTwoPi, dgp::kTwoPi);
    if (hi > dgp::kTwoPi) take(0.0, hi - dgp::kTwoPi);
    std::sort(rows.begin(), rows.end());
    rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
    return rows;
  }

  ConditionalDraw draw(Engine& rng, Eigen::Index m) const override {
    const std::size_t anchor = uniform_index(rng, keys_.size());
    const std::vector<std::size_t> rows = window(keys_[anchor]);
    ConditionalDraw d{Eigen::MatrixXd(pool_.x.rows(), m), Eigen::MatrixXd(pool_.cond.rows(), m)};
    for (Eigen::Index j = 0; j < m; ++j) {
      const auto r = static_cast<Eigen::Index>(rows[uniform_index(rng, rows.size())]);
      d.x.col(j) = pool_.x.col(r);
      d.cond.col(j) = pool_.cond.col(r);
    }
    return d;
  }

 private:
  RowPool pool_;
  double width_;
  std::vector<double> keys_, sorted_;
  std::vector<std::size_t> order_;
};

/// Online source for a task, or nullptr when the task has no simulator route.
inline std::unique_ptr<ConditionalSource> online_source(Task task, const dgp::DgpConfig& cfg) {
  switch (task) {
    case Task::markovian: return std::make_unique<OnlineMarkovianSource>(cfg);
    case Task::backdoor: return std::make_unique<OnlineBackdoorSource>(cfg);
    case Task::frontdoor_mediator: return std::make_unique<OnlineMediatorSource>(cfg);
    case Task::frontdoor_outcome: return nullptr;  // x | m needs the confounder's posterior
  }
  return nullptr;
}

inline std::pair<PairedBatch, CouplingPlan> markovian_batch(Engine& rng, Eigen::Index m, const ConditionalSource* source,
                                                            const PriorConfig& prior) {
  if (m < 1) throw ContractViolation("markovian_batch: m must be >= 1");
  if (source == nullptr) throw ContractViolation("markovian_batch: no conditional source (simulator or binned dataset)");
  const Eigen::MatrixXd u = prior.sample(rng, m);
  ConditionalDraw d = source->draw(rng, m);
  if (d.x.rows() != prior.dim) throw ContractViolation("markovian_batch: prior dim != data dim");
  CouplingPlan plan;
  plan.scheme = Scheme::markovian_ot;
  plan.assignment = solve_assignment(squared_distances(u, d.x));
  plan.cost = pairing_cost(u, d.x, plan.assignment);
  PairedBatch b{u, gather_cols(d.x, plan.assignment), gather_cols(d.cond, plan.assignment)};
  return {std::move(b), std::move(plan)};
}

namespace detail {

inline Permutation draw_rows(Engine& rng, Eigen::Index m, const RowPool& pool) {
  if (pool.size() < 1) throw ContractViolation("batch: empty dataset");
  Permutation rows(static_cast<std::size_t>(m));
  for (auto& r : rows) r = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(pool.size())));
  return rows;
}

}  // namespace detail

inline std::pair<PairedBatch, CouplingPlan> naive_batch(Engine& rng, Eigen::Index m, const RowPool& pool,
                                                        const PriorConfig& prior) {
  if (m < 1) throw ContractViolation("naive_batch: m must be >= 1");
  const Eigen::MatrixXd u = prior.sample(rng, m);
  const Permutation rows = detail::draw_rows(rng, m, pool);
  const Eigen::MatrixXd x = gather_cols(pool.x, rows), cond = gather_cols(pool.cond, rows);
  CouplingPlan plan;
  plan.scheme = Scheme::naive_ot;
  plan.assignment = solve_assignment(squared_distances(u, x));
  plan.cost = pairing_cost(u, x, plan.assignment);
  PairedBatch b{u, gather_cols(x, plan.assignment), gather_cols(cond, plan.assignment)};
  return {std::move(b), std::move(plan)};
}

inline std::pair<PairedBatch, CouplingPlan> independent_batch(Engine& rng, Eigen::Index m, const RowPool& pool,
                                                              const PriorConfig& prior) {
  if (m < 1) throw ContractViolation("independent_batch: m must be >= 1");
  const Eigen::MatrixXd u = prior.sample(rng, m);
  const Permutation rows = detail::draw_rows(rng, m, pool);
  CouplingPlan plan;
  plan.scheme = Scheme::independent;
  plan.assignment.resize(static_cast<std::size_t>(m));
  std::iota(plan.assignment.begin(), plan.assignment.end(), 0);
  PairedBatch b{u, gather_cols(pool.x, rows), gather_cols(pool.cond, rows)};
  plan.cost = pairing_cost(b.u, b.x, plan.assignment);
  return {std::move(b), std::move(plan)};
}

}  // namespace cfot
