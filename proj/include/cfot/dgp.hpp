#pragma once

// Ellipse worlds: U are the semi-axes of an axis-aligned ellipse, PA an angle
// on it and X the cartesian point. Three graph variants share the U mechanism:
//
//   backdoor   Z -> PA, Z -> U, (PA, U) -> X           (confounded through Z)
//   markovian  PA ~ Uniform(0, 2pi) independent of U
//   frontdoor  PA -> M -> X with M on the unit circle, Z -> U nonlinearly
//
// The module doubles as the ground-truth counterfactual oracle.

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cfot/error.hpp"
#include "cfot/rng.hpp"

namespace cfot::dgp {

using Vec2 = Eigen::Vector2d;

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

enum class GraphVariant { markovian, backdoor, frontdoor };
enum class PriorVariant { original, bimodal, multimodal };
enum class Split { train, val, test };

inline std::string_view to_string(GraphVariant g) {
  switch (g) {
    case GraphVariant::markovian: return "markovian";
    case GraphVariant::backdoor: return "backdoor";
    case GraphVariant::frontdoor: return "frontdoor";
  }
  return "?";
}

inline std::string_view to_string(PriorVariant p) {
  switch (p) {
    case PriorVariant::original: return "original";
    case PriorVariant::bimodal: return "bimodal";
    case PriorVariant::multimodal: return "multimodal";
  }
  return "?";
}

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline GraphVariant parse_graph(std::string_view s) {
  if (s == "markovian") return GraphVariant::markovian;
  if (s == "backdoor") return GraphVariant::backdoor;
  if (s == "frontdoor") return GraphVariant::frontdoor;
  throw ConfigError("dgp.graph", "unknown graph variant '" + std::string(s) + "'");
}

inline PriorVariant parse_prior(std::string_view s) {
  if (s == "original") return PriorVariant::original;
  if (s == "bimodal") return PriorVariant::bimodal;
  if (s == "multimodal") return PriorVariant::multimodal;
  throw ConfigError("dgp.prior", "unknown prior variant '" + std::string(s) + "'");
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw InputError("unknown split '" + std::string(s) + "'");
}

struct DgpConfig {
  GraphVariant graph = GraphVariant::markovian;
  PriorVariant prior = PriorVariant::original;
  std::int64_t n_samples = 50000;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_samples <= 0) throw ConfigError("dgp.n_samples", "must be positive");
  }
};

/// Mechanism coefficients.
namespace coef {
inline constexpr double kPaSlope = 1.44254843;
inline constexpr double kPaOffset = 0.59701923;
inline constexpr double kU0Slope = 1.64985274;
inline constexpr double kU0Offset = 0.2656131;
inline constexpr double kU1Slope = 1.61323358;
inline constexpr double kU1Offset = -0.18070237;
/// Standard deviation of the mediator noise (variance 1e-4).
inline constexpr double kMediatorNoiseStd = 0.01;
}  // namespace coef

/// Every random draw behind one sample. Regenerating from these reproduces the
/// sample bit-for-bit.
struct NoiseDraws {
  double eps_z = 0.0;   // Uniform(-0.5, 0.5)
  double eps_pa = 0.0;  // N(0,1) for confounded variants; Uniform(0,1) for markovian
  double eps_u0 = 0.0;  // Beta(1,1)
  double eps_u1 = 0.0;  // Exponential(1)
  double eps_m0 = 0.0;  // N(0, std^2), frontdoor only
  double eps_m1 = 0.0;
  double shift = 0.0;   // prior-variant shift mu, 0 for the original prior
};

struct Sample {
  double z = 0.0;
  double pa = 0.0;
  Vec2 u = Vec2::Zero();
  std::optional<Vec2> m;
  Vec2 x = Vec2::Zero();
  NoiseDraws noise;
};

// ---------------------------------------------------------------------------
// Mechanisms

inline double wrap_angle(double a) {
  double r = std::fmod(a, kTwoPi);
  if (r < 0.0) r += kTwoPi;
  return r;
}

inline Vec2 mechanism(double pa, const Vec2& u) {
  return {u[0] * (2.0 + std::sin(pa)), u[1] * (2.0 + std::cos(pa))};
}

inline Vec2 mechanism_mediator(const Vec2& m, const Vec2& u) {
  return {u[0] * (2.0 + m[0]), u[1] * (2.0 + m[1])};
}

inline Vec2 true_abduct(double pa, const Vec2& x) {
  return {x[0] / (2.0 + std::sin(pa)), x[1] / (2.0 + std::cos(pa))};
}

inline Vec2 true_abduct_mediator(const Vec2& m, const Vec2& x) {
  return {x[0] / (2.0 + m[0]), x[1] / (2.0 + m[1])};
}

inline Vec2 true_counterfactual(double pa, const Vec2& x, double pa_star) {
  return mechanism(pa_star, true_abduct(pa, x));
}

inline Vec2 true_counterfactual_mediator(const Vec2& m, const Vec2& x, const Vec2& m_star) {
  return mechanism_mediator(m_star, true_abduct_mediator(m, x));
}

/// Projects the noised angle point back onto the unit circle.
inline Vec2 mediator(double pa, double eps0, double eps1) {
  const double a = std::sin(pa) + eps0;
  const double b = std::cos(pa) + eps1;
  const double beta = 1.0 / std::sqrt(a * a + b * b);
  return {beta * a, beta * b};
}

/// Ground-truth counterfactual mediator under do(PA = pa_star), keeping the
/// unit's mediator noise.
inline Vec2 mediator_counterfactual(const NoiseDraws& n, double pa_star) {
  return mediator(pa_star, n.eps_m0, n.eps_m1);
}

/// Ground-truth points X* for k target angles 2*pi*j/k, j = 0..k-1.
inline std::vector<Vec2> ellipse_points(double pa, const Vec2& x, int k) {
  require(k >= 1, "ellipse_points: k must be >= 1");
  const Vec2 u = true_abduct(pa, x);
  std::vector<Vec2> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) out.push_back(mechanism(kTwoPi * j / k, u));
  return out;
}

inline double target_angle(int j, int k) { return kTwoPi * j / k; }

// ---------------------------------------------------------------------------
// Sampling primitives

inline double draw_shift(PriorVariant prior, Engine& rng) {
  switch (prior) {
    case PriorVariant::original: return 0.0;
    case PriorVariant::bimodal: return uniform01(rng) < 0.5 ? -2.0 : 2.0;
    case PriorVariant::multimodal: {
      const double r = uniform01(rng);
      if (r < 0.3) return -4.0;
      if (r < 0.5) return -2.0;
      if (r < 0.7) return 2.0;
      return 4.0;
    }
  }
  return 0.0;
}

/// U given Z from recorded draws. The frontdoor variant uses z^2 in both
/// exponents; prior variants add their shift to U0 between the exponential
/// term and the Beta noise, which makes U0 negative for part of the mass.
inline Vec2 u_mechanism(GraphVariant graph, double z, double shift, double eps_u0, double eps_u1) {
  const double zz = graph == GraphVariant::frontdoor ? z * z : z;
  const double u0 = std::exp(coef::kU0Slope * zz + coef::kU0Offset) + shift + eps_u0;
  const double u1 = u0 * (1.0 + eps_u1 * std::exp(coef::kU1Slope * zz + coef::kU1Offset));
  return {u0, u1};
}

inline double pa_mechanism(GraphVariant graph, double z, double eps_pa) {
  if (graph == GraphVariant::markovian) return kTwoPi * eps_pa;
  return wrap_angle(coef::kPaSlope * z + coef::kPaOffset + eps_pa);
}

inline Sample regenerate(const DgpConfig& cfg, const NoiseDraws& n) {
  Sample s;
  s.noise = n;
  s.z = n.eps_z;
  s.pa = pa_mechanism(cfg.graph, s.z, n.eps_pa);
  s.u = u_mechanism(cfg.graph, s.z, n.shift, n.eps_u0, n.eps_u1);
  if (cfg.graph == GraphVariant::frontdoor) {
    s.m = mediator(s.pa, n.eps_m0, n.eps_m1);
    s.x = mechanism_mediator(*s.m, s.u);
  } else {
    s.x = mechanism(s.pa, s.u);
  }
  return s;
}

inline double draw_pa_noise(GraphVariant graph, Engine& rng) {
  return graph == GraphVariant::markovian ? uniform01(rng) : standard_normal(rng);
}

inline NoiseDraws draw_noise(const DgpConfig& cfg, Engine& rng) {
  NoiseDraws n;
  n.eps_z = uniform(rng, -0.5, 0.5);
  n.eps_pa = draw_pa_noise(cfg.graph, rng);
  n.shift = draw_shift(cfg.prior, rng);
  n.eps_u0 = uniform01(rng);
  n.eps_u1 = exponential1(rng);
  if (cfg.graph == GraphVariant::frontdoor) {
    n.eps_m0 = coef::kMediatorNoiseStd * standard_normal(rng);
    n.eps_m1 = coef::kMediatorNoiseStd * standard_normal(rng);
  }
  return n;
}

inline Sample draw_sample(const DgpConfig& cfg, Engine& rng) { return regenerate(cfg, draw_noise(cfg, rng)); }

/// Fresh exogenous U given a fixed confounder value.
inline Vec2 draw_u_given_z(const DgpConfig& cfg, double z, Engine& rng) {
  const double shift = draw_shift(cfg.prior, rng);
  const double e0 = uniform01(rng);
  const double e1 = exponential1(rng);
  return u_mechanism(cfg.graph, z, shift, e0, e1);
}

/// Fresh U from its marginal.
inline Vec2 draw_u(const DgpConfig& cfg, Engine& rng) {
  return draw_u_given_z(cfg, uniform(rng, -0.5, 0.5), rng);
}

// ---------------------------------------------------------------------------
// Dataset

struct Dataset {
  DgpConfig config;
  std::vector<Sample> samples;
  std::vector<Split> split;
  bool has_noise = true;  // false when loaded from CSV without a noise sidecar

  std::size_t size() const { return samples.size(); }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == s) out.push_back(i);
    return out;
  }

  std::vector<Sample> rows(Split s) const {
    std::vector<Sample> out;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == s) out.push_back(samples[i]);
    return out;
  }
};

/// (train, val, test) sizes for n rows under a 70/10/20 split.
inline std::array<std::size_t, 3> split_sizes(std::size_t n) {
  const auto train = static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(n)));
  const auto val = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
  return {train, val, n - train - val};
}

/// Samples are i.i.d. given their per-index streams, so the split assigns
/// consecutive blocks of indices.
inline Dataset gen_dataset(const DgpConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  const auto n = static_cast<std::size_t>(cfg.n_samples);
  ds.samples.reserve(n);
  const SeedStream seeds(cfg.seed);
  for (std::size_t i = 0; i < n; ++i) {
    Engine rng = seeds.stream(tag::kData, i);
    ds.samples.push_back(draw_sample(cfg, rng));
  }
  const auto sizes = split_sizes(n);
  ds.split.resize(n, Split::test);
  for (std::size_t i = 0; i < n; ++i) {
    if (i < sizes[0]) ds.split[i] = Split::train;
    else if (i < sizes[0] + sizes[1]) ds.split[i] = Split::val;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// CSV persistence. The main file carries the observed/latent columns; the
// noise draws go to a sidecar so that frontdoor ground truth survives a round
// trip.

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string noise_sidecar_path(const std::string& path) { return path + ".noise"; }

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw InputError("trailing characters in " + what + ": '" + s + "'");
    return v;
  } catch (const std::invalid_argument&) {
    throw InputError("not a number in " + what + ": '" + s + "'");
  } catch (const std::out_of_range&) {
    throw InputError("out of range in " + what + ": '" + s + "'");
  }
}

inline constexpr std::string_view kDatasetHeader = "z,pa,u0,u1,m0,m1,x0,x1,split";
inline constexpr std::string_view kNoiseHeader = "eps_z,eps_pa,eps_u0,eps_u1,eps_m0,eps_m1,shift";

inline void write_csv(const Dataset& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot open " + path + " for writing");
  os << kDatasetHeader << '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Sample& s = ds.samples[i];
    os << format_double(s.z) << ',' << format_double(s.pa) << ',' << format_double(s.u[0]) << ','
       << format_double(s.u[1]) << ',';
    if (s.m) os << format_double((*s.m)[0]) << ',' << format_double((*s.m)[1]) << ',';
    else os << ",,";
    os << format_double(s.x[0]) << ',' << format_double(s.x[1]) << ',' << to_string(ds.split[i]) << '\n';
  }
  if (!ds.has_noise) return;
  std::ofstream ns(noise_sidecar_path(path));
  if (!ns) throw InputError("cannot open " + noise_sidecar_path(path) + " for writing");
  ns << kNoiseHeader << '\n';
  for (const Sample& s : ds.samples) {
    const NoiseDraws& n = s.noise;
    ns << format_double(n.eps_z) << ',' << format_double(n.eps_pa) << ',' << format_double(n.eps_u0) << ','
       << format_double(n.eps_u1) << ',' << format_double(n.eps_m0) << ',' << format_double(n.eps_m1) << ','
       << format_double(n.shift) << '\n';
  }
}

inline Dataset read_csv(const std::string& path, const DgpConfig& cfg) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line.substr(0, kDatasetHeader.size()) != kDatasetHeader)
    throw InputError(path + ": expected header '" + std::string(kDatasetHeader) + "'");
  Dataset ds;
  ds.config = cfg;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    const std::string where = path + ":" + std::to_string(lineno);
    if (f.size() != 9) throw InputError(where + ": expected 9 columns");
    Sample s;
    s.z = parse_double(f[0], where);
    s.pa = parse_double(f[1], where);
    s.u = {parse_double(f[2], where), parse_double(f[3], where)};
    if (!f[4].empty() || !f[5].empty()) s.m = Vec2{parse_double(f[4], where), parse_double(f[5], where)};
    s.x = {parse_double(f[6], where), parse_double(f[7], where)};
    ds.samples.push_back(s);
    ds.split.push_back(parse_split(f[8]));
  }
  ds.config.n_samples = static_cast<std::int64_t>(ds.samples.size());

  std::ifstream ns(noise_sidecar_path(path));
  ds.has_noise = static_cast<bool>(ns);
  if (!ds.has_noise) return ds;
  if (!std::getline(ns, line) || line.substr(0, kNoiseHeader.size()) != kNoiseHeader)
    throw InputError(noise_sidecar_path(path) + ": bad header");
  std::size_t i = 0;
  while (std::getline(ns, line)) {
    if (line.empty()) continue;
    if (i >= ds.samples.size()) throw InputError(noise_sidecar_path(path) + ": more rows than dataset");
    const auto f = split_csv_line(line);
    if (f.size() != 7) throw InputError(noise_sidecar_path(path) + ": expected 7 columns");
    NoiseDraws& n = ds.samples[i].noise;
    const std::string where = noise_sidecar_path(path);
    n.eps_z = parse_double(f[0], where);
    n.eps_pa = parse_double(f[1], where);
    n.eps_u0 = parse_double(f[2], where);
    n.eps_u1 = parse_double(f[3], where);
    n.eps_m0 = parse_double(f[4], where);
    n.eps_m1 = parse_double(f[5], where);
    n.shift = parse_double(f[6], where);
    ++i;
  }
  if (i != ds.samples.size()) throw InputError(noise_sidecar_path(path) + ": row count mismatch");
  return ds;
}

}  // namespace cfot::dgp
