#pragma once

// Counterfactuals by integrating a learned field: abduct by solving backwards
// from x at t=1 to a latent at t=0, predict by solving forwards from the latent
// under the counterfactual conditioning.

#include <Eigen/Core>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "cfot/dgp.hpp"
#include "cfot/error.hpp"
#include "cfot/field.hpp"
#include "cfot/ode.hpp"

namespace cfot {

template <class S>
VelocityFn velocity(const VectorFieldModel<S>& m, const Eigen::MatrixXd& cond) {
  return [&m, cond](const Eigen::MatrixXd& x, double t) { return eval_field(m, x, cond, t); };
}

template <class S>
Eigen::MatrixXd integrate(const VectorFieldModel<S>& m, const Eigen::MatrixXd& x0, const Eigen::MatrixXd& cond,
                          const OdeConfig& cfg) {
  return integrate(velocity(m, cond), x0, cfg);
}

template <class S>
Eigen::MatrixXd abduct(const VectorFieldModel<S>& m, const Eigen::MatrixXd& x, const Eigen::MatrixXd& cond,
                       OdeConfig cfg) {
  cfg.direction = Direction::backward;
  return integrate(m, x, cond, cfg);
}

template <class S>
Eigen::MatrixXd predict(const VectorFieldModel<S>& m, const Eigen::MatrixXd& u, const Eigen::MatrixXd& cond_star,
                        OdeConfig cfg) {
  cfg.direction = Direction::forward;
  return integrate(m, u, cond_star, cfg);
}

/// predict(abduct(x, cond), cond_star); both legs share cfg.
template <class S>
Eigen::MatrixXd counterfactual(const VectorFieldModel<S>& m, const Eigen::MatrixXd& x, const Eigen::MatrixXd& cond,
                               const Eigen::MatrixXd& cond_star, const OdeConfig& cfg) {
  return predict(m, abduct(m, x, cond, cfg), cond_star, cfg);
}

/// n_cycles of x -> T_{cond*} T^-1_{cond} -> T_{cond} T^-1_{cond*}; returns the
/// final factual-side point.
template <class S>
Eigen::MatrixXd reverse_cycle(const VectorFieldModel<S>& m, const Eigen::MatrixXd& x, const Eigen::MatrixXd& cond,
                              const Eigen::MatrixXd& cond_star, int n_cycles, const OdeConfig& cfg) {
  require(n_cycles >= 1, "reverse_cycle: n_cycles must be >= 1");
  Eigen::MatrixXd cur = x;
  for (int c = 0; c < n_cycles; ++c) {
    const Eigen::MatrixXd xs = counterfactual(m, cur, cond, cond_star, cfg);
    cur = counterfactual(m, xs, cond_star, cond, cfg);
  }
  return cur;
}

struct FrontdoorResult {
  Eigen::MatrixXd m_star, x_star;
};

/// Two-stage frontdoor counterfactual: the mediator flow maps m given pa, the
/// outcome flow maps x given m.
template <class S>
FrontdoorResult frontdoor_counterfactual(const VectorFieldModel<S>& mediator_model,
                                         const VectorFieldModel<S>& outcome_model, const Eigen::RowVectorXd& pa,
                                         const Eigen::MatrixXd& m, const Eigen::MatrixXd& x,
                                         const Eigen::RowVectorXd& pa_star, const OdeConfig& cfg) {
  const Eigen::MatrixXd w = abduct(mediator_model, m, pa, cfg);
  const Eigen::MatrixXd u = abduct(outcome_model, x, m, cfg);
  FrontdoorResult r;
  r.m_star = predict(mediator_model, w, pa_star, cfg);
  r.x_star = predict(outcome_model, u, r.m_star, cfg);
  return r;
}

// ---------------------------------------------------------------------------
// Unit-level view used by the metrics: a batch of observed units and engines
// that map them to counterfactual worlds.

struct UnitBatch {
  Eigen::RowVectorXd pa, z;
  Eigen::MatrixXd m;      // 2 x B, frontdoor only
  Eigen::MatrixXd x;      // 2 x B
  Eigen::MatrixXd eps_m;  // 2 x B mediator noise, needed only by the frontdoor oracle

  Eigen::Index size() const { return x.cols(); }
  bool has_mediator() const { return m.size() > 0; }

  static UnitBatch from_samples(const std::vector<dgp::Sample>& rows) {
    const auto b = static_cast<Eigen::Index>(rows.size());
    UnitBatch u;
    u.pa.resize(b);
    u.z.resize(b);
    u.x.resize(2, b);
    const bool med = !rows.empty() && rows.front().m.has_value();
    if (med) {
      u.m.resize(2, b);
      u.eps_m.resize(2, b);
    }
    for (Eigen::Index i = 0; i < b; ++i) {
      const dgp::Sample& s = rows[static_cast<std::size_t>(i)];
      u.pa[i] = s.pa;
      u.z[i] = s.z;
      u.x.col(i) = s.x;
      if (med) {
        u.m.col(i) = *s.m;
        u.eps_m.col(i) << s.noise.eps_m0, s.noise.eps_m1;
      }
    }
    return u;
  }

  UnitBatch with_pa(const Eigen::RowVectorXd& p) const {
    UnitBatch c = *this;
    c.pa = p;
    return c;
  }
};

/// How a single flow is conditioned.
enum class CondMode { pa, pa_z };

inline Eigen::MatrixXd conditioning(CondMode mode, const UnitBatch& u) {
  if (mode == CondMode::pa) return u.pa;
  Eigen::MatrixXd c(2, u.size());
  c.row(0) = u.pa;
  c.row(1) = u.z;
  return c;
}

class CfEngine {
 public:
  virtual ~CfEngine() = default;
  virtual Eigen::MatrixXd abduct(const UnitBatch& units) const = 0;
  /// The units' world under do(PA = pa_star), from their abducted latents.
  virtual UnitBatch predict(const Eigen::MatrixXd& latent, const UnitBatch& units,
                            const Eigen::RowVectorXd& pa_star) const = 0;

  UnitBatch counterfactual(const UnitBatch& units, const Eigen::RowVectorXd& pa_star) const {
    return predict(abduct(units), units, pa_star);
  }
};

/// One flow for x given pa (markovian) or (pa, z) (backdoor).
template <class S>
class FlowEngine : public CfEngine {
 public:
  FlowEngine(const VectorFieldModel<S>& model, CondMode mode, OdeConfig cfg) : model_(model), mode_(mode), cfg_(cfg) {}

  Eigen::MatrixXd abduct(const UnitBatch& u) const override {
    return cfot::abduct(model_, u.x, conditioning(mode_, u), cfg_);
  }
  UnitBatch predict(const Eigen::MatrixXd& latent, const UnitBatch& u, const Eigen::RowVectorXd& pa_star) const override {
    UnitBatch out = u.with_pa(pa_star);
    out.x = cfot::predict(model_, latent, conditioning(mode_, out), cfg_);
    return out;
  }

 private:
  const VectorFieldModel<S>& model_;
  CondMode mode_;
  OdeConfig cfg_;
};

/// Mediator flow (m given pa) composed with outcome flow (x given m).
/// The latent stacks the mediator latent over the outcome latent.
template <class S>
class FrontdoorEngine : public CfEngine {
 public:
  FrontdoorEngine(const VectorFieldModel<S>& mediator, const VectorFieldModel<S>& outcome, OdeConfig cfg)
      : mediator_(mediator), outcome_(outcome), cfg_(cfg) {}

  Eigen::MatrixXd abduct(const UnitBatch& u) const override {
    if (!u.has_mediator()) throw ContractViolation("FrontdoorEngine: units carry no mediator");
    Eigen::MatrixXd lat(4, u.size());
    lat.topRows(2) = cfot::abduct(mediator_, u.m, u.pa, cfg_);
    lat.bottomRows(2) = cfot::abduct(outcome_, u.x, u.m, cfg_);
    return lat;
  }
  UnitBatch predict(const Eigen::MatrixXd& latent, const UnitBatch& u, const Eigen::RowVectorXd& pa_star) const override {
    UnitBatch out = u.with_pa(pa_star);
    out.m = cfot::predict(mediator_, latent.topRows(2), pa_star, cfg_);
    out.x = cfot::predict(outcome_, latent.bottomRows(2), out.m, cfg_);
    return out;
  }

 private:
  const VectorFieldModel<S>& mediator_;
  const VectorFieldModel<S>& outcome_;
  OdeConfig cfg_;
};

/// Ground truth from the structural equations.
class OracleEngine : public CfEngine {
 public:
  explicit OracleEngine(dgp::GraphVariant graph) : graph_(graph) {}

  Eigen::MatrixXd abduct(const UnitBatch& u) const override {
    const bool fd = graph_ == dgp::GraphVariant::frontdoor;
    if (fd && u.eps_m.cols() != u.size()) throw ContractViolation("OracleEngine: frontdoor units need mediator noise");
    Eigen::MatrixXd lat(fd ? 4 : 2, u.size());
    for (Eigen::Index i = 0; i < u.size(); ++i) {
      if (fd) {
        lat.col(i).head<2>() = dgp::true_abduct_mediator(u.m.col(i), u.x.col(i));
        lat.col(i).tail<2>() = u.eps_m.col(i);
      } else {
        lat.col(i) = dgp::true_abduct(u.pa[i], u.x.col(i));
      }
    }
    return lat;
  }
  UnitBatch predict(const Eigen::MatrixXd& latent, const UnitBatch& u, const Eigen::RowVectorXd& pa_star) const override {
    UnitBatch out = u.with_pa(pa_star);
    for (Eigen::Index i = 0; i < u.size(); ++i) {
      const dgp::Vec2 uu = latent.col(i).head<2>();
      if (graph_ == dgp::GraphVariant::frontdoor) {
        const dgp::Vec2 ms = dgp::mediator(pa_star[i], latent(2, i), latent(3, i));
        out.m.col(i) = ms;
        out.x.col(i) = dgp::mechanism_mediator(ms, uu);
      } else {
        out.x.col(i) = dgp::mechanism(pa_star[i], uu);
      }
    }
    return out;
  }

 private:
  dgp::GraphVariant graph_;
};

/// Predicts the origin for every query; the 100% reference for mu_ape.
class ZeroEngine : public CfEngine {
 public:
  Eigen::MatrixXd abduct(const UnitBatch& u) const override { return Eigen::MatrixXd::Zero(2, u.size()); }
  UnitBatch predict(const Eigen::MatrixXd&, const UnitBatch& u, const Eigen::RowVectorXd& pa_star) const override {
    UnitBatch out = u.with_pa(pa_star);
    out.x.setZero();
    return out;
  }
};

// ---------------------------------------------------------------------------
// Batch query files: `pa,x0,x1,pa_star` in, `pa,x0,x1,pa_star,xs0,xs1` out.

struct CfQueries {
  Eigen::RowVectorXd pa, pa_star;
  Eigen::MatrixXd x;
};

inline CfQueries read_queries(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line != "pa,x0,x1,pa_star") throw InputError(path + ": expected header pa,x0,x1,pa_star");
  std::vector<std::array<double, 4>> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = dgp::split_csv_line(line);
    if (f.size() != 4) throw InputError(path + ":" + std::to_string(lineno) + ": expected 4 fields");
    std::array<double, 4> r{};
    for (std::size_t k = 0; k < 4; ++k) r[k] = dgp::parse_double(f[k], path + ":" + std::to_string(lineno));
    rows.push_back(r);
  }
  CfQueries q;
  const auto n = static_cast<Eigen::Index>(rows.size());
  q.pa.resize(n);
  q.pa_star.resize(n);
  q.x.resize(2, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    q.pa[i] = r[0];
    q.x.col(i) << r[1], r[2];
    q.pa_star[i] = r[3];
  }
  return q;
}

inline void write_answers(const std::string& path, const CfQueries& q, const Eigen::MatrixXd& x_star) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path);
  os << "pa,x0,x1,pa_star,xs0,xs1\n";
  for (Eigen::Index i = 0; i < q.x.cols(); ++i) {
    os << dgp::format_double(q.pa[i]) << ',' << dgp::format_double(q.x(0, i)) << ',' << dgp::format_double(q.x(1, i))
       << ',' << dgp::format_double(q.pa_star[i]) << ',' << dgp::format_double(x_star(0, i)) << ','
       << dgp::format_double(x_star(1, i)) << '\n';
  }
}

}  // namespace cfot
