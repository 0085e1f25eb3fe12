#pragma once

// Batched ODE integration over t in [0, 1]. States are d x B matrices; all
// columns share the step sequence.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <string_view>

#include "cfot/error.hpp"

namespace cfot {

enum class Solver { euler, rk4, adaptive_rk45 };
enum class Direction { forward, backward };

inline std::string_view to_string(Solver s) {
  switch (s) {
    case Solver::euler: return "euler";
    case Solver::rk4: return "rk4";
    case Solver::adaptive_rk45: return "adaptive_rk45";
  }
  return "?";
}

inline Solver parse_solver(std::string_view s) {
  if (s == "euler") return Solver::euler;
  if (s == "rk4") return Solver::rk4;
  if (s == "adaptive_rk45" || s == "rk45") return Solver::adaptive_rk45;
  throw InputError("unknown solver '" + std::string(s) + "'");
}

/// For fixed-step solvers `nfe` is the evaluation budget per leg: euler takes
/// nfe steps, rk4 takes max(1, nfe / 4).
struct OdeConfig {
  Solver solver = Solver::euler;
  int nfe = 50;
  double rtol = 1e-5;
  double atol = 1e-5;
  Direction direction = Direction::forward;
  int max_steps = 100000;

  void validate() const {
    if (solver != Solver::adaptive_rk45 && nfe < 1) throw ContractViolation("OdeConfig: nfe must be >= 1");
    if (solver == Solver::adaptive_rk45 && !(rtol > 0 && atol > 0))
      throw ContractViolation("OdeConfig: tolerances must be > 0");
  }

  OdeConfig reversed() const {
    OdeConfig c = *this;
    c.direction = direction == Direction::forward ? Direction::backward : Direction::forward;
    return c;
  }
};

inline OdeConfig euler(int nfe, Direction d = Direction::forward) {
  OdeConfig c;
  c.nfe = nfe;
  c.direction = d;
  return c;
}

/// v(x, t) for a batch of states.
using VelocityFn = std::function<Eigen::MatrixXd(const Eigen::MatrixXd& x, double t)>;

struct OdeStats {
  int steps = 0;
  int evaluations = 0;
  int rejected = 0;
};

namespace detail {

inline void check_state(const Eigen::MatrixXd& x, int step) {
  if (!x.allFinite()) throw NumericalError("integrate: non-finite state at step " + std::to_string(step));
}

inline Eigen::MatrixXd integrate_euler(const VelocityFn& f, Eigen::MatrixXd x, int steps, OdeStats& st) {
  const double h = 1.0 / steps;
  for (int k = 0; k < steps; ++k) {
    x += h * f(x, k * h);
    ++st.evaluations;
    ++st.steps;
    check_state(x, k + 1);
  }
  return x;
}

inline Eigen::MatrixXd integrate_rk4(const VelocityFn& f, Eigen::MatrixXd x, int steps, OdeStats& st) {
  const double h = 1.0 / steps;
  for (int k = 0; k < steps; ++k) {
    const double t = k * h;
    const Eigen::MatrixXd k1 = f(x, t);
    const Eigen::MatrixXd k2 = f(x + 0.5 * h * k1, t + 0.5 * h);
    const Eigen::MatrixXd k3 = f(x + 0.5 * h * k2, t + 0.5 * h);
    const Eigen::MatrixXd k4 = f(x + h * k3, std::min(1.0, t + h));
    x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    st.evaluations += 4;
    ++st.steps;
    check_state(x, k + 1);
  }
  return x;
}

/// Dormand-Prince 5(4) with FSAL and a PI step-size controller.
inline Eigen::MatrixXd integrate_dopri(const VelocityFn& f, Eigen::MatrixXd x, const OdeConfig& cfg, OdeStats& st) {
  constexpr double a21 = 1.0 / 5;
  constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                   a65 = -5103.0 / 18656;
  constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                   e6 = 22.0 / 525, e7 = -1.0 / 40;
  constexpr double beta = 0.04, alpha = 0.2 - 0.75 * beta, safety = 0.9;

  double t = 0.0;
  Eigen::MatrixXd k1 = f(x, t);
  st.evaluations += 1;
  double h = 0.01;
  double err_prev = 1e-4;
  while (t < 1.0) {
    if (st.steps + st.rejected >= cfg.max_steps) throw NumericalError("integrate: adaptive solver exceeded max_steps");
    h = std::min(h, 1.0 - t);
    const Eigen::MatrixXd k2 = f(x + h * (a21 * k1), t + h / 5);
    const Eigen::MatrixXd k3 = f(x + h * (a31 * k1 + a32 * k2), t + 3 * h / 10);
    const Eigen::MatrixXd k4 = f(x + h * (a41 * k1 + a42 * k2 + a43 * k3), t + 4 * h / 5);
    const Eigen::MatrixXd k5 = f(x + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4), t + 8 * h / 9);
    const Eigen::MatrixXd k6 = f(x + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5), std::min(1.0, t + h));
    const Eigen::MatrixXd xn = x + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
    const double tn = (t + h >= 1.0 - 1e-15) ? 1.0 : t + h;
    const Eigen::MatrixXd k7 = f(xn, tn);
    st.evaluations += 6;
    const Eigen::MatrixXd errv = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
    const Eigen::ArrayXXd scale = cfg.atol + cfg.rtol * x.array().abs().max(xn.array().abs());
    const double err = std::sqrt((errv.array() / scale).square().mean());
    if (!std::isfinite(err)) throw NumericalError("integrate: non-finite error estimate at step " + std::to_string(st.steps));
    if (err <= 1.0) {
      x = xn;
      k1 = k7;
      t = tn;
      ++st.steps;
      check_state(x, st.steps);
      const double fac = err == 0.0 ? 5.0 : safety * std::pow(err, -alpha) * std::pow(err_prev, beta);
      h *= std::clamp(fac, 0.2, 5.0);
      err_prev = std::max(err, 1e-4);
    } else {
      ++st.rejected;
      h *= std::max(0.2, safety * std::pow(err, -alpha));
    }
  }
  return x;
}

}  // namespace detail

/// Forward: solve dx/dt = v(x, t) from t=0 to 1. Backward: start at t=1 and
/// integrate dy/ds = -v(y, 1 - s) over s in [0, 1].
inline Eigen::MatrixXd integrate(const VelocityFn& v, const Eigen::MatrixXd& x0, const OdeConfig& cfg,
                                 OdeStats* stats = nullptr) {
  cfg.validate();
  if (!x0.allFinite()) throw ContractViolation("integrate: non-finite initial state");
  OdeStats local;
  OdeStats& st = stats ? *stats : local;
  st = {};
  VelocityFn f = v;
  if (cfg.direction == Direction::backward)
    f = [&v](const Eigen::MatrixXd& y, double s) -> Eigen::MatrixXd { return -v(y, 1.0 - s); };
  switch (cfg.solver) {
    case Solver::euler: return detail::integrate_euler(f, x0, cfg.nfe, st);
    case Solver::rk4: return detail::integrate_rk4(f, x0, std::max(1, cfg.nfe / 4), st);
    case Solver::adaptive_rk45: return detail::integrate_dopri(f, x0, cfg, st);
  }
  return x0;
}

}  // namespace cfot
