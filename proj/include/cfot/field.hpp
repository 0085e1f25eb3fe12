#pragma once

// Conditional velocity fields v_t(x; c). The network sees concat(x, c, t).
// `direct` uses the network output as the velocity; `energy` uses the
// x-gradient of E = mean(network output), which is curl-free by construction.

#include <Eigen/Core>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <string>
#include <string_view>

#include "cfot/error.hpp"
#include "cfot/nn.hpp"

namespace cfot {

enum class FieldKind { direct, energy };

inline std::string_view to_string(FieldKind k) { return k == FieldKind::direct ? "direct" : "energy"; }

inline FieldKind parse_field_kind(std::string_view s) {
  if (s == "direct") return FieldKind::direct;
  if (s == "energy") return FieldKind::energy;
  throw InputError("unknown field kind '" + std::string(s) + "'");
}

template <class S>
struct VectorFieldModel {
  FieldKind kind = FieldKind::direct;
  nn::Params<S> params;
  int x_dim = 2;
  int cond_dim = 1;
  bool periodic_cond = false;  // feed (sin c, cos c) instead of raw c

  int feature_dim() const { return periodic_cond ? 2 * cond_dim : cond_dim; }

  template <class T>
  VectorFieldModel<T> cast() const {
    return {kind, params.template cast<T>(), x_dim, cond_dim, periodic_cond};
  }
};

struct FieldArch {
  FieldKind kind = FieldKind::direct;
  int x_dim = 2;
  int cond_dim = 1;
  bool periodic_cond = false;
  int hidden_dim = 256;
  int n_blocks = 3;
};

inline nn::NetworkSpec field_network_spec(const FieldArch& a) {
  if (a.x_dim < 1 || a.cond_dim < 0) throw ContractViolation("field: bad dims");
  nn::NetworkSpec s;
  s.input_dim = a.x_dim + (a.periodic_cond ? 2 * a.cond_dim : a.cond_dim) + 1;
  s.hidden_dim = a.hidden_dim;
  s.n_blocks = a.n_blocks;
  s.output_dim = a.x_dim;
  return s;
}

template <class S>
VectorFieldModel<S> init_field(const FieldArch& a, Engine& rng) {
  return {a.kind, nn::init_params<S>(field_network_spec(a), rng), a.x_dim, a.cond_dim, a.periodic_cond};
}

template <class S>
void check_model(const VectorFieldModel<S>& m) {
  const nn::NetworkSpec& s = m.params.spec();
  if (s.input_dim != m.x_dim + m.feature_dim() + 1 || s.output_dim != m.x_dim)
    throw ContractViolation("field: network spec does not match model dims");
}

/// Network input for a batch: rows are x, conditioning features, t.
template <class S>
nn::Mat<S> assemble_input(const VectorFieldModel<S>& m, const Eigen::MatrixXd& x, const Eigen::MatrixXd& cond,
                          const Eigen::RowVectorXd& t) {
  const Eigen::Index b = x.cols();
  if (x.rows() != m.x_dim) throw ContractViolation("eval_field: x has wrong dimension");
  if (cond.rows() != m.cond_dim || cond.cols() != b || t.size() != b)
    throw ContractViolation("eval_field: conditioning/time shape mismatch");
  nn::Mat<S> in(m.x_dim + m.feature_dim() + 1, b);
  in.topRows(m.x_dim) = x.cast<S>();
  if (m.periodic_cond) {
    for (int k = 0; k < m.cond_dim; ++k) {
      in.row(m.x_dim + 2 * k) = cond.row(k).array().sin().matrix().cast<S>();
      in.row(m.x_dim + 2 * k + 1) = cond.row(k).array().cos().matrix().cast<S>();
    }
  } else {
    in.middleRows(m.x_dim, m.cond_dim) = cond.cast<S>();
  }
  in.bottomRows(1) = t.cast<S>();
  return in;
}

/// Cotangent that turns backward_input into the gradient of mean(output).
template <class S>
nn::Mat<S> mean_cotangent(int out_dim, Eigen::Index b) {
  return nn::Mat<S>::Constant(out_dim, b, S(1) / static_cast<S>(out_dim));
}

inline constexpr Eigen::Index kEvalChunk = 2048;

/// Velocities for a batch (columns), one time per column.
template <class S>
Eigen::MatrixXd eval_field(const VectorFieldModel<S>& m, const Eigen::MatrixXd& x, const Eigen::MatrixXd& cond,
                           const Eigen::RowVectorXd& t) {
  check_model(m);
  if ((t.array() < 0.0).any() || (t.array() > 1.0).any()) throw ContractViolation("eval_field: t outside [0,1]");
  const Eigen::Index b = x.cols();
  Eigen::MatrixXd v(m.x_dim, b);
  for (Eigen::Index c0 = 0; c0 < b; c0 += kEvalChunk) {
    const Eigen::Index n = std::min(kEvalChunk, b - c0);
    const nn::Mat<S> in = assemble_input(m, x.middleCols(c0, n), cond.middleCols(c0, n), t.segment(c0, n));
    if (m.kind == FieldKind::direct) {
      v.middleCols(c0, n) = nn::evaluate(m.params, in).template cast<double>();
    } else {
      const nn::Tape<S> tape = nn::forward(m.params, in);
      const nn::Mat<S> g = nn::backward_input(tape, mean_cotangent<S>(m.params.spec().output_dim, n));
      v.middleCols(c0, n) = g.topRows(m.x_dim).template cast<double>();
    }
  }
  if (!v.allFinite()) throw NumericalError("eval_field: non-finite velocity (diverged parameters?)");
  return v;
}

template <class S>
Eigen::MatrixXd eval_field(const VectorFieldModel<S>& m, const Eigen::MatrixXd& x, const Eigen::MatrixXd& cond,
                           double t) {
  return eval_field(m, x, cond, Eigen::RowVectorXd::Constant(x.cols(), t));
}

/// E(x, c, t) = mean of the network output, per column.
template <class S>
Eigen::RowVectorXd energy(const VectorFieldModel<S>& m, const Eigen::MatrixXd& x, const Eigen::MatrixXd& cond,
                          const Eigen::RowVectorXd& t) {
  check_model(m);
  const nn::Mat<S> y = nn::evaluate(m.params, assemble_input(m, x, cond, t));
  return y.template cast<double>().colwise().mean();
}

// Checkpoints carry the field metadata next to the network spec.

template <class S>
void save_field(const std::string& path, const VectorFieldModel<S>& m) {
  nn::save_checkpoint(path, m.params,
                      {{"kind", std::string(to_string(m.kind))},
                       {"x_dim", std::to_string(m.x_dim)},
                       {"cond_dim", std::to_string(m.cond_dim)},
                       {"periodic_cond", m.periodic_cond ? "1" : "0"}});
}

template <class S>
VectorFieldModel<S> load_field(const std::string& path) {
  const nn::Checkpoint ck = nn::load_checkpoint(path);
  auto get = [&](const char* key) {
    auto it = ck.meta.find(key);
    if (it == ck.meta.end()) throw InputError(path + ": missing field metadata '" + key + "'");
    return it->second;
  };
  VectorFieldModel<S> m{parse_field_kind(get("kind")), ck.params<S>(), std::stoi(get("x_dim")),
                        std::stoi(get("cond_dim")), get("periodic_cond") == "1"};
  try {
    check_model(m);
  } catch (const ContractViolation& e) {
    throw InputError(path + ": " + e.what());
  }
  return m;
}

// Curl diagnostics for 2-D fields.

struct GridSpec {
  double x0_min = 0, x0_max = 1, x1_min = 0, x1_max = 1;
  int n0 = 50, n1 = 50;

  void validate() const {
    if (n0 < 3 || n1 < 3) throw ContractViolation("curl: grid needs at least 3 points per axis");
    if (!(x0_max > x0_min) || !(x1_max > x1_min)) throw ContractViolation("curl: grid bounds must be increasing");
  }
  double h0() const { return (x0_max - x0_min) / (n0 - 1); }
  double h1() const { return (x1_max - x1_min) / (n1 - 1); }
  double x0(int i) const { return x0_min + i * h0(); }
  double x1(int j) const { return x1_min + j * h1(); }
};

struct CurlMap {
  GridSpec grid;
  Eigen::MatrixXd values;  // n0 x n1, values(i, j) at (x0(i), x1(j))
  double t = 0;
  Eigen::VectorXd cond;

  double max_abs() const { return values.cwiseAbs().maxCoeff(); }
};

/// Batched 2-D field: columns of points in, columns of velocities out.
using Field2D = std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)>;

namespace detail {

/// Derivative along one axis of samples f[0..n) with spacing h: central in
/// the interior, second-order one-sided at the ends.
template <class Get>
double axis_diff(Get f, int i, int n, double h) {
  if (i == 0) return (-3.0 * f(0) + 4.0 * f(1) - f(2)) / (2.0 * h);
  if (i == n - 1) return (3.0 * f(n - 1) - 4.0 * f(n - 2) + f(n - 3)) / (2.0 * h);
  return (f(i + 1) - f(i - 1)) / (2.0 * h);
}

}  // namespace detail

/// curl(i, j) = dv1/dx0 - dv0/dx1 on the lattice.
inline CurlMap curl(const Field2D& field, const GridSpec& grid, const Eigen::VectorXd& cond, double t) {
  grid.validate();
  const int n0 = grid.n0, n1 = grid.n1;
  Eigen::MatrixXd pts(2, static_cast<Eigen::Index>(n0) * n1);
  for (int i = 0; i < n0; ++i)
    for (int j = 0; j < n1; ++j) pts.col(static_cast<Eigen::Index>(i) * n1 + j) << grid.x0(i), grid.x1(j);
  const Eigen::MatrixXd v = field(pts);
  if (v.rows() != 2 || v.cols() != pts.cols()) throw ContractViolation("curl: field must map 2 x N to 2 x N");
  auto at = [&](int comp, int i, int j) { return v(comp, static_cast<Eigen::Index>(i) * n1 + j); };
  CurlMap out{grid, Eigen::MatrixXd(n0, n1), t, cond};
  for (int i = 0; i < n0; ++i) {
    for (int j = 0; j < n1; ++j) {
      const double dv1_dx0 = detail::axis_diff([&](int k) { return at(1, k, j); }, i, n0, grid.h0());
      const double dv0_dx1 = detail::axis_diff([&](int k) { return at(0, i, k); }, j, n1, grid.h1());
      out.values(i, j) = dv1_dx0 - dv0_dx1;
    }
  }
  if (!out.values.allFinite()) throw NumericalError("curl: non-finite values");
  return out;
}

template <class S>
CurlMap curl(const VectorFieldModel<S>& m, const GridSpec& grid, const Eigen::VectorXd& cond, double t) {
  if (m.x_dim != 2) throw ContractViolation("curl: field must be 2-D");
  if (cond.size() != m.cond_dim) throw ContractViolation("curl: conditioning size mismatch");
  return curl([&](const Eigen::MatrixXd& x) { return eval_field(m, x, cond.replicate(1, x.cols()), t); }, grid, cond,
              t);
}

inline std::string curl_sidecar_path(const std::string& csv) { return csv + ".meta"; }

inline void write_curl_map(const std::string& path, const CurlMap& c) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path);
  os << std::setprecision(17) << "x0,x1,curl\n";
  for (int i = 0; i < c.grid.n0; ++i)
    for (int j = 0; j < c.grid.n1; ++j) os << c.grid.x0(i) << ',' << c.grid.x1(j) << ',' << c.values(i, j) << '\n';
  std::ofstream ms(curl_sidecar_path(path));
  if (!ms) throw InputError("cannot write " + curl_sidecar_path(path));
  ms << std::setprecision(17) << "t=" << c.t << '\n';
  for (Eigen::Index k = 0; k < c.cond.size(); ++k) ms << "cond" << k << '=' << c.cond[k] << '\n';
  ms << "x0_min=" << c.grid.x0_min << "\nx0_max=" << c.grid.x0_max << "\nx1_min=" << c.grid.x1_min
     << "\nx1_max=" << c.grid.x1_max << "\nn0=" << c.grid.n0 << "\nn1=" << c.grid.n1 << "\nh0=" << c.grid.h0()
     << "\nh1=" << c.grid.h1() << "\nmax_abs_curl=" << c.max_abs() << '\n';
}

}  // namespace cfot
