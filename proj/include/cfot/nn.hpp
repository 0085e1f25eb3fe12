#pragma once

// Residual MLP with hand-written reverse mode.
//
//   h = W_p x + b_p
//   h = h + W_2 act(W_1 LN(h) + b_1) + b_2      (n_blocks times)
//   y = W_o LN(h) + b_o
//
// Inputs are batched column-wise (input_dim x B). Besides first-order
// gradients there is a forward-mode tangent pass and its reverse, which gives
// parameter gradients of <J_x y . r, c>; the energy-kind loss needs exactly that.

#include <Eigen/Core>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cfot/error.hpp"
#include "cfot/rng.hpp"

namespace cfot::nn {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using Row = Eigen::Matrix<S, 1, Eigen::Dynamic>;

inline constexpr double kLayerNormEps = 1e-5;

enum class Activation { silu, identity };

struct NetworkSpec {
  int input_dim = 4;
  int hidden_dim = 256;
  int n_blocks = 3;
  int output_dim = 2;
  Activation activation = Activation::silu;

  void validate() const {
    if (input_dim < 1 || hidden_dim < 1 || output_dim < 1) throw ContractViolation("NetworkSpec: dims must be >= 1");
    if (n_blocks < 0) throw ContractViolation("NetworkSpec: n_blocks must be >= 0");
  }
  bool operator==(const NetworkSpec&) const = default;
};

struct LinearSlot {
  Eigen::Index w = 0, b = 0;
  int rows = 0, cols = 0;
};

struct NormSlot {
  Eigen::Index gain = 0, bias = 0;
  int dim = 0;
};

struct BlockSlots {
  NormSlot norm;
  LinearSlot fc1, fc2;
};

/// Offsets of every tensor inside the flat parameter vector, in declaration order.
struct Layout {
  LinearSlot proj;
  std::vector<BlockSlots> blocks;
  NormSlot head_norm;
  LinearSlot out;
  Eigen::Index size = 0;

  explicit Layout(const NetworkSpec& spec) {
    spec.validate();
    const int h = spec.hidden_dim;
    proj = linear(h, spec.input_dim);
    blocks.resize(static_cast<std::size_t>(spec.n_blocks));
    for (auto& b : blocks) {
      b.norm = norm(h);
      b.fc1 = linear(h, h);
      b.fc2 = linear(h, h);
    }
    head_norm = norm(h);
    out = linear(spec.output_dim, h);
  }

 private:
  LinearSlot linear(int rows, int cols) {
    LinearSlot s{size, size + static_cast<Eigen::Index>(rows) * cols, rows, cols};
    size = s.b + rows;
    return s;
  }
  NormSlot norm(int dim) {
    NormSlot s{size, size + dim, dim};
    size = s.bias + dim;
    return s;
  }
};

struct TensorInfo {
  std::string name;
  Eigen::Index offset;
  Eigen::Index size;
};

inline std::vector<TensorInfo> tensor_table(const NetworkSpec& spec) {
  const Layout l(spec);
  std::vector<TensorInfo> t;
  auto lin = [&](const std::string& name, const LinearSlot& s) {
    t.push_back({name + ".weight", s.w, static_cast<Eigen::Index>(s.rows) * s.cols});
    t.push_back({name + ".bias", s.b, s.rows});
  };
  auto nrm = [&](const std::string& name, const NormSlot& s) {
    t.push_back({name + ".gain", s.gain, s.dim});
    t.push_back({name + ".bias", s.bias, s.dim});
  };
  lin("proj", l.proj);
  for (std::size_t i = 0; i < l.blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i);
    nrm(p + ".norm", l.blocks[i].norm);
    lin(p + ".fc1", l.blocks[i].fc1);
    lin(p + ".fc2", l.blocks[i].fc2);
  }
  nrm("head.norm", l.head_norm);
  lin("head.out", l.out);
  return t;
}

inline std::uint64_t next_stamp() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

/// Flat parameter vector plus shape information. Every mutation takes a new
/// stamp so tapes recorded against older values are detected.
template <class S>
class Params {
 public:
  using Scalar = S;

  explicit Params(const NetworkSpec& spec) : spec_(spec), layout_(spec), values_(Vec<S>::Zero(layout_.size)) {}

  Params(const Params& o) : spec_(o.spec_), layout_(o.layout_), values_(o.values_) {}
  Params& operator=(const Params& o) {
    spec_ = o.spec_;
    layout_ = o.layout_;
    values_ = o.values_;
    stamp_ = next_stamp();
    return *this;
  }

  const NetworkSpec& spec() const { return spec_; }
  const Layout& layout() const { return layout_; }
  Eigen::Index size() const { return layout_.size; }
  const Vec<S>& values() const { return values_; }
  Vec<S>& mutable_values() {
    stamp_ = next_stamp();
    return values_;
  }
  std::uint64_t stamp() const { return stamp_; }

  template <class T>
  Params<T> cast() const {
    Params<T> p(spec_);
    p.mutable_values() = values_.template cast<T>();
    return p;
  }

  auto weight(const LinearSlot& s) const { return Eigen::Map<const Mat<S>>(values_.data() + s.w, s.rows, s.cols); }
  auto bias(const LinearSlot& s) const { return Eigen::Map<const Vec<S>>(values_.data() + s.b, s.rows); }
  auto gain(const NormSlot& s) const { return Eigen::Map<const Vec<S>>(values_.data() + s.gain, s.dim); }
  auto bias(const NormSlot& s) const { return Eigen::Map<const Vec<S>>(values_.data() + s.bias, s.dim); }

 private:
  NetworkSpec spec_;
  Layout layout_;
  Vec<S> values_;
  std::uint64_t stamp_ = next_stamp();
};

/// Mutable views into a flat gradient vector laid out like Params.
template <class S>
struct GradView {
  Vec<S>& g;
  auto weight(const LinearSlot& s) { return Eigen::Map<Mat<S>>(g.data() + s.w, s.rows, s.cols); }
  auto bias(const LinearSlot& s) { return Eigen::Map<Vec<S>>(g.data() + s.b, s.rows); }
  auto gain(const NormSlot& s) { return Eigen::Map<Vec<S>>(g.data() + s.gain, s.dim); }
  auto bias(const NormSlot& s) { return Eigen::Map<Vec<S>>(g.data() + s.bias, s.dim); }
};

/// Weights ~ U(-a, a) with a = sqrt(1/fan_in); biases zero; norm gains one.
template <class S>
Params<S> init_params(const NetworkSpec& spec, Engine& rng) {
  Params<S> p(spec);
  Vec<S>& v = p.mutable_values();
  const Layout& l = p.layout();
  auto lin = [&](const LinearSlot& s) {
    const double a = std::sqrt(1.0 / s.cols);
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(s.rows) * s.cols; ++i) v[s.w + i] = static_cast<S>(uniform(rng, -a, a));
  };
  auto nrm = [&](const NormSlot& s) { v.segment(s.gain, s.dim).setOnes(); };
  lin(l.proj);
  for (const auto& b : l.blocks) {
    nrm(b.norm);
    lin(b.fc1);
    lin(b.fc2);
  }
  nrm(l.head_norm);
  lin(l.out);
  return p;
}

namespace detail {

template <class S>
void layer_norm(const Mat<S>& h, Mat<S>& hhat, Row<S>& sigma) {
  const S inv_n = S(1) / static_cast<S>(h.rows());
  const Row<S> mu = h.colwise().sum() * inv_n;
  hhat = h.rowwise() - mu;
  sigma = ((hhat.array().square().colwise().sum() * inv_n) + static_cast<S>(kLayerNormEps)).sqrt().matrix();
  hhat.array().rowwise() /= sigma.array();
}

/// Jacobian of the normalization (before gain/bias) applied to q. It is
/// symmetric, so this serves both tangent propagation and the adjoint.
template <class S>
Mat<S> layer_norm_jvp(const Mat<S>& hhat, const Row<S>& sigma, const Mat<S>& q) {
  const S inv_n = S(1) / static_cast<S>(q.rows());
  const Row<S> mq = q.colwise().sum() * inv_n;
  const Row<S> mqh = q.cwiseProduct(hhat).colwise().sum() * inv_n;
  Mat<S> out = q.rowwise() - mq;
  out.noalias() -= hhat * mqh.asDiagonal();
  out.array().rowwise() /= sigma.array();
  return out;
}

template <class S>
void activate(Activation act, const Mat<S>& z, Mat<S>& s, Mat<S>& a) {
  if (act == Activation::identity) {
    s.setOnes(z.rows(), z.cols());
    a = z;
    return;
  }
  s = (S(1) + (-z.array()).exp()).inverse().matrix();
  a = z.cwiseProduct(s);
}

/// act'(z) from z and sigmoid(z).
template <class S>
Mat<S> act_d1(Activation act, const Mat<S>& z, const Mat<S>& s) {
  if (act == Activation::identity) return Mat<S>::Ones(z.rows(), z.cols());
  return (s.array() * (S(1) + z.array() * (S(1) - s.array()))).matrix();
}

template <class S>
Mat<S> act_d2(Activation act, const Mat<S>& z, const Mat<S>& s) {
  if (act == Activation::identity) return Mat<S>::Zero(z.rows(), z.cols());
  return (s.array() * (S(1) - s.array()) * (S(2) + z.array() * (S(1) - S(2) * s.array()))).matrix();
}

}  // namespace detail

template <class S>
struct BlockRecord {
  Mat<S> hhat, n, z, s, a;
  Row<S> sigma;
};

/// Intermediates of one batched forward pass.
template <class S>
struct Tape {
  const Params<S>* params = nullptr;
  std::uint64_t stamp = 0;
  Mat<S> input;
  std::vector<BlockRecord<S>> blocks;
  Mat<S> head_hhat, head_n;
  Row<S> head_sigma;
  Mat<S> output;

  Eigen::Index batch() const { return input.cols(); }
};

template <class S>
void check_input(const Params<S>& p, const Mat<S>& input) {
  if (input.rows() != p.spec().input_dim) throw ContractViolation("forward: input rows != input_dim");
  if (input.cols() < 1) throw ContractViolation("forward: empty batch");
}

template <class S>
Tape<S> forward(const Params<S>& p, const Mat<S>& input) {
  check_input(p, input);
  const Layout& l = p.layout();
  const Activation act = p.spec().activation;
  Tape<S> t;
  t.params = &p;
  t.stamp = p.stamp();
  t.input = input;
  Mat<S> h = p.weight(l.proj) * input;
  h.colwise() += p.bias(l.proj);
  t.blocks.resize(l.blocks.size());
  for (std::size_t i = 0; i < l.blocks.size(); ++i) {
    const BlockSlots& b = l.blocks[i];
    BlockRecord<S>& r = t.blocks[i];
    detail::layer_norm(h, r.hhat, r.sigma);
    r.n = p.gain(b.norm).asDiagonal() * r.hhat;
    r.n.colwise() += p.bias(b.norm);
    r.z.noalias() = p.weight(b.fc1) * r.n;
    r.z.colwise() += p.bias(b.fc1);
    detail::activate(act, r.z, r.s, r.a);
    h.noalias() += p.weight(b.fc2) * r.a;
    h.colwise() += p.bias(b.fc2);
  }
  detail::layer_norm(h, t.head_hhat, t.head_sigma);
  t.head_n = p.gain(l.head_norm).asDiagonal() * t.head_hhat;
  t.head_n.colwise() += p.bias(l.head_norm);
  t.output.noalias() = p.weight(l.out) * t.head_n;
  t.output.colwise() += p.bias(l.out);
  return t;
}

/// Output only; no intermediates are kept.
template <class S>
Mat<S> evaluate(const Params<S>& p, const Mat<S>& input) {
  check_input(p, input);
  const Layout& l = p.layout();
  const Activation act = p.spec().activation;
  Mat<S> h = p.weight(l.proj) * input;
  h.colwise() += p.bias(l.proj);
  Mat<S> hhat, n, z, s, a;
  Row<S> sigma;
  for (const BlockSlots& b : l.blocks) {
    detail::layer_norm(h, hhat, sigma);
    n = p.gain(b.norm).asDiagonal() * hhat;
    n.colwise() += p.bias(b.norm);
    z.noalias() = p.weight(b.fc1) * n;
    z.colwise() += p.bias(b.fc1);
    detail::activate(act, z, s, a);
    h.noalias() += p.weight(b.fc2) * a;
    h.colwise() += p.bias(b.fc2);
  }
  detail::layer_norm(h, hhat, sigma);
  n = p.gain(l.head_norm).asDiagonal() * hhat;
  n.colwise() += p.bias(l.head_norm);
  Mat<S> y = p.weight(l.out) * n;
  y.colwise() += p.bias(l.out);
  return y;
}

template <class S>
void check_tape(const Tape<S>& t, const Mat<S>& cot) {
  if (t.params == nullptr) throw ContractViolation("backward: empty tape");
  if (t.params->stamp() != t.stamp) throw ContractViolation("backward: stale tape (params changed since forward)");
  if (cot.rows() != t.output.rows() || cot.cols() != t.output.cols()) throw ContractViolation("backward: cotangent shape mismatch");
}

/// Reverse pass for <output, cot>. Either destination may be null.
template <class S>
void backward(const Tape<S>& t, const Mat<S>& cot, Vec<S>* grad_params, Mat<S>* grad_input) {
  check_tape(t, cot);
  const Params<S>& p = *t.params;
  const Layout& l = p.layout();
  const Activation act = p.spec().activation;
  Vec<S> scratch;
  if (grad_params == nullptr) grad_params = &scratch;
  grad_params->setZero(l.size);
  GradView<S> g{*grad_params};

  g.weight(l.out).noalias() = cot * t.head_n.transpose();
  g.bias(l.out) = cot.rowwise().sum();
  Mat<S> nb = p.weight(l.out).transpose() * cot;
  g.gain(l.head_norm) = nb.cwiseProduct(t.head_hhat).rowwise().sum();
  g.bias(l.head_norm) = nb.rowwise().sum();
  Mat<S> hb = detail::layer_norm_jvp<S>(t.head_hhat, t.head_sigma, p.gain(l.head_norm).asDiagonal() * nb);

  for (std::size_t k = l.blocks.size(); k-- > 0;) {
    const BlockSlots& b = l.blocks[k];
    const BlockRecord<S>& r = t.blocks[k];
    g.weight(b.fc2).noalias() = hb * r.a.transpose();
    g.bias(b.fc2) = hb.rowwise().sum();
    Mat<S> zb = p.weight(b.fc2).transpose() * hb;
    zb.array() *= detail::act_d1(act, r.z, r.s).array();
    g.weight(b.fc1).noalias() = zb * r.n.transpose();
    g.bias(b.fc1) = zb.rowwise().sum();
    nb.noalias() = p.weight(b.fc1).transpose() * zb;
    g.gain(b.norm) = nb.cwiseProduct(r.hhat).rowwise().sum();
    g.bias(b.norm) = nb.rowwise().sum();
    hb += detail::layer_norm_jvp<S>(r.hhat, r.sigma, p.gain(b.norm).asDiagonal() * nb);
  }

  g.weight(l.proj).noalias() = hb * t.input.transpose();
  g.bias(l.proj) = hb.rowwise().sum();
  if (grad_input != nullptr) grad_input->noalias() = p.weight(l.proj).transpose() * hb;
}

template <class S>
Vec<S> backward_params(const Tape<S>& t, const Mat<S>& cot) {
  Vec<S> g;
  backward(t, cot, &g, static_cast<Mat<S>*>(nullptr));
  return g;
}

/// Gradient w.r.t. every input row; callers slice out the x rows.
template <class S>
Mat<S> backward_input(const Tape<S>& t, const Mat<S>& cot) {
  Mat<S> gi;
  backward(t, cot, static_cast<Vec<S>*>(nullptr), &gi);
  return gi;
}

template <class S>
struct DualBlockRecord {
  BlockRecord<S> primal;
  Mat<S> hhat_dot, n_dot, z_dot, a_dot;
  Row<S> h_dot_hhat;  // column sums of h_dot * hhat
};

/// Forward pass carrying an input tangent alongside the primal values.
template <class S>
struct DualTape {
  const Params<S>* params = nullptr;
  std::uint64_t stamp = 0;
  Mat<S> input, input_dot;
  std::vector<DualBlockRecord<S>> blocks;
  Mat<S> head_hhat, head_n, head_hhat_dot, head_n_dot;
  Row<S> head_sigma, head_h_dot_hhat;
  Mat<S> output, output_dot;
};

namespace detail {

template <class S>
void dual_layer_norm(const Mat<S>& h, const Mat<S>& h_dot, Mat<S>& hhat, Row<S>& sigma, Mat<S>& hhat_dot,
                     Row<S>& h_dot_hhat) {
  layer_norm(h, hhat, sigma);
  h_dot_hhat = h_dot.cwiseProduct(hhat).colwise().sum();
  hhat_dot = layer_norm_jvp<S>(hhat, sigma, h_dot);
}

/// Adjoint of (h, h_dot) -> (hhat, hhat_dot) given adjoints (qp, q) of the outputs.
template <class S>
void dual_layer_norm_adjoint(const Mat<S>& hhat, const Row<S>& sigma, const Mat<S>& hhat_dot, const Row<S>& h_dot_hhat,
                             const Mat<S>& qp, const Mat<S>& q, Mat<S>& hb, Mat<S>& hdb) {
  const S inv_n = S(1) / static_cast<S>(hhat.rows());
  const Mat<S> jq = layer_norm_jvp<S>(hhat, sigma, q);
  const Row<S> f = q.cwiseProduct(hhat_dot).colwise().sum();
  const Row<S> bq = q.cwiseProduct(hhat).colwise().sum();
  const Row<S> scale = (sigma.array().inverse() * inv_n).matrix();
  hb += layer_norm_jvp<S>(hhat, sigma, qp);
  hb.noalias() -= hhat * (f.cwiseProduct(scale)).asDiagonal();
  hb.noalias() -= jq * (h_dot_hhat.cwiseProduct(scale)).asDiagonal();
  hb.noalias() -= hhat_dot * (bq.cwiseProduct(scale)).asDiagonal();
  hdb += jq;
}

}  // namespace detail

template <class S>
DualTape<S> forward_dual(const Params<S>& p, const Mat<S>& input, const Mat<S>& input_dot) {
  check_input(p, input);
  if (input_dot.rows() != input.rows() || input_dot.cols() != input.cols())
    throw ContractViolation("forward_dual: tangent shape mismatch");
  const Layout& l = p.layout();
  const Activation act = p.spec().activation;
  DualTape<S> t;
  t.params = &p;
  t.stamp = p.stamp();
  t.input = input;
  t.input_dot = input_dot;
  Mat<S> h = p.weight(l.proj) * input;
  h.colwise() += p.bias(l.proj);
  Mat<S> h_dot = p.weight(l.proj) * input_dot;
  t.blocks.resize(l.blocks.size());
  for (std::size_t i = 0; i < l.blocks.size(); ++i) {
    const BlockSlots& b = l.blocks[i];
    DualBlockRecord<S>& r = t.blocks[i];
    BlockRecord<S>& pr = r.primal;
    detail::dual_layer_norm(h, h_dot, pr.hhat, pr.sigma, r.hhat_dot, r.h_dot_hhat);
    pr.n = p.gain(b.norm).asDiagonal() * pr.hhat;
    pr.n.colwise() += p.bias(b.norm);
    r.n_dot = p.gain(b.norm).asDiagonal() * r.hhat_dot;
    pr.z.noalias() = p.weight(b.fc1) * pr.n;
    pr.z.colwise() += p.bias(b.fc1);
    r.z_dot.noalias() = p.weight(b.fc1) * r.n_dot;
    detail::activate(act, pr.z, pr.s, pr.a);
    r.a_dot = detail::act_d1(act, pr.z, pr.s).cwiseProduct(r.z_dot);
    h.noalias() += p.weight(b.fc2) * pr.a;
    h.colwise() += p.bias(b.fc2);
    h_dot.noalias() += p.weight(b.fc2) * r.a_dot;
  }
  detail::dual_layer_norm(h, h_dot, t.head_hhat, t.head_sigma, t.head_hhat_dot, t.head_h_dot_hhat);
  t.head_n = p.gain(l.head_norm).asDiagonal() * t.head_hhat;
  t.head_n.colwise() += p.bias(l.head_norm);
  t.head_n_dot = p.gain(l.head_norm).asDiagonal() * t.head_hhat_dot;
  t.output.noalias() = p.weight(l.out) * t.head_n;
  t.output.colwise() += p.bias(l.out);
  t.output_dot.noalias() = p.weight(l.out) * t.head_n_dot;
  return t;
}

/// Parameter gradient of <output, cot> + <output_dot, cot_dot> through the
/// dual pass, with the input and its tangent held fixed.
template <class S>
Vec<S> backward_dual_params(const DualTape<S>& t, const Mat<S>& cot, const Mat<S>& cot_dot) {
  if (t.params == nullptr) throw ContractViolation("backward_dual_params: empty tape");
  if (t.params->stamp() != t.stamp) throw ContractViolation("backward_dual_params: stale tape (params changed since forward)");
  if (cot.rows() != t.output.rows() || cot.cols() != t.output.cols() || cot_dot.rows() != cot.rows() ||
      cot_dot.cols() != cot.cols())
    throw ContractViolation("backward_dual_params: cotangent shape mismatch");
  const Params<S>& p = *t.params;
  const Layout& l = p.layout();
  const Activation act = p.spec().activation;
  Vec<S> grad = Vec<S>::Zero(l.size);
  GradView<S> g{grad};

  g.weight(l.out).noalias() = cot * t.head_n.transpose();
  g.weight(l.out).noalias() += cot_dot * t.head_n_dot.transpose();
  g.bias(l.out) = cot.rowwise().sum();
  Mat<S> nb = p.weight(l.out).transpose() * cot;
  Mat<S> ndb = p.weight(l.out).transpose() * cot_dot;
  g.gain(l.head_norm) = (nb.cwiseProduct(t.head_hhat) + ndb.cwiseProduct(t.head_hhat_dot)).rowwise().sum();
  g.bias(l.head_norm) = nb.rowwise().sum();
  const int hd = p.spec().hidden_dim;
  Mat<S> hb = Mat<S>::Zero(hd, cot.cols());
  Mat<S> hdb = Mat<S>::Zero(hd, cot.cols());
  detail::dual_layer_norm_adjoint<S>(t.head_hhat, t.head_sigma, t.head_hhat_dot, t.head_h_dot_hhat,
                                     p.gain(l.head_norm).asDiagonal() * nb, p.gain(l.head_norm).asDiagonal() * ndb, hb,
                                     hdb);

  for (std::size_t k = l.blocks.size(); k-- > 0;) {
    const BlockSlots& b = l.blocks[k];
    const DualBlockRecord<S>& r = t.blocks[k];
    const BlockRecord<S>& pr = r.primal;
    g.weight(b.fc2).noalias() = hb * pr.a.transpose();
    g.weight(b.fc2).noalias() += hdb * r.a_dot.transpose();
    g.bias(b.fc2) = hb.rowwise().sum();
    const Mat<S> ab = p.weight(b.fc2).transpose() * hb;
    const Mat<S> adb = p.weight(b.fc2).transpose() * hdb;
    const Mat<S> d1 = detail::act_d1(act, pr.z, pr.s);
    const Mat<S> zb = (d1.array() * ab.array() + detail::act_d2(act, pr.z, pr.s).array() * r.z_dot.array() * adb.array()).matrix();
    const Mat<S> zdb = d1.cwiseProduct(adb);
    g.weight(b.fc1).noalias() = zb * pr.n.transpose();
    g.weight(b.fc1).noalias() += zdb * r.n_dot.transpose();
    g.bias(b.fc1) = zb.rowwise().sum();
    nb.noalias() = p.weight(b.fc1).transpose() * zb;
    ndb.noalias() = p.weight(b.fc1).transpose() * zdb;
    g.gain(b.norm) = (nb.cwiseProduct(pr.hhat) + ndb.cwiseProduct(r.hhat_dot)).rowwise().sum();
    g.bias(b.norm) = nb.rowwise().sum();
    detail::dual_layer_norm_adjoint<S>(pr.hhat, pr.sigma, r.hhat_dot, r.h_dot_hhat, p.gain(b.norm).asDiagonal() * nb,
                                       p.gain(b.norm).asDiagonal() * ndb, hb, hdb);
  }

  g.weight(l.proj).noalias() = hb * t.input.transpose();
  g.weight(l.proj).noalias() += hdb * t.input_dot.transpose();
  g.bias(l.proj) = hb.rowwise().sum();
  return grad;
}

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class S>
struct AdamState {
  Vec<S> m, v;
  std::int64_t step = 0;

  explicit AdamState(Eigen::Index n = 0) : m(Vec<S>::Zero(n)), v(Vec<S>::Zero(n)) {}
};

/// Decoupled weight decay, then the bias-corrected Adam step. `lr` overrides
/// cfg.lr (warmup). A non-finite gradient leaves params and state untouched.
template <class S>
void adamw_step(Params<S>& p, const Vec<S>& grad, AdamState<S>& st, const AdamWConfig& cfg, double lr) {
  if (grad.size() != p.size() || st.m.size() != p.size() || st.v.size() != p.size())
    throw ContractViolation("adamw_step: shape mismatch");
  if (!grad.allFinite()) throw NumericalError("adamw_step: non-finite gradient, step rejected");
  st.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  st.m = b1 * st.m + (S(1) - b1) * grad;
  st.v = b2 * st.v + (S(1) - b2) * grad.cwiseProduct(grad);
  const S step_size = static_cast<S>(lr / bc1);
  const S inv_sqrt_bc2 = static_cast<S>(1.0 / std::sqrt(bc2));
  const S eps = static_cast<S>(cfg.eps);
  Vec<S>& theta = p.mutable_values();
  theta *= static_cast<S>(1.0 - lr * cfg.weight_decay);
  theta.array() -= step_size * st.m.array() / (st.v.array().sqrt() * inv_sqrt_bc2 + eps);
}

template <class S>
void adamw_step(Params<S>& p, const Vec<S>& grad, AdamState<S>& st, const AdamWConfig& cfg) {
  adamw_step(p, grad, st, cfg, cfg.lr);
}

template <class S>
struct Ema {
  Params<S> shadow;
  double decay = 0.9999;

  Ema(const Params<S>& init, double d) : shadow(init), decay(d) {}

  void update(const Params<S>& p) {
    if (p.size() != shadow.size()) throw ContractViolation("ema_update: shape mismatch");
    const S d = static_cast<S>(decay);
    shadow.mutable_values() = d * shadow.values() + (S(1) - d) * p.values();
  }
};

// Checkpoints: text header, `params=<count>`, then raw little-endian float64.

inline constexpr std::string_view kCheckpointMagic = "cfot-ckpt v1";

struct Checkpoint {
  NetworkSpec spec;
  std::map<std::string, std::string> meta;
  Vec<double> values;

  template <class S>
  Params<S> params() const {
    Params<S> p(spec);
    if (values.size() != p.size()) throw InputError("checkpoint: parameter count does not match spec");
    p.mutable_values() = values.template cast<S>();
    return p;
  }
};

inline std::string_view to_string(Activation a) { return a == Activation::silu ? "silu" : "identity"; }

template <class S>
void save_checkpoint(const std::string& path, const Params<S>& p, const std::map<std::string, std::string>& meta = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write checkpoint " + path);
  const NetworkSpec& s = p.spec();
  os << kCheckpointMagic << '\n'
     << "input_dim=" << s.input_dim << '\n'
     << "hidden_dim=" << s.hidden_dim << '\n'
     << "n_blocks=" << s.n_blocks << '\n'
     << "output_dim=" << s.output_dim << '\n'
     << "activation=" << to_string(s.activation) << '\n';
  for (const auto& [k, v] : meta) os << k << '=' << v << '\n';
  os << "params=" << p.size() << '\n';
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    auto bits = std::bit_cast<std::uint64_t>(static_cast<double>(p.values()[i]));
    char buf[8];
    for (int b = 0; b < 8; ++b) buf[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    os.write(buf, 8);
  }
  if (!os) throw InputError("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint " + path);
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointMagic) throw InputError(path + ": not a cfot checkpoint");
  Checkpoint ck;
  std::map<std::string, std::string> kv;
  long long count = -1;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InputError(path + ": malformed header line '" + line + "'");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "params") {
      count = std::stoll(val);
      break;
    }
    kv[key] = val;
  }
  if (count < 0) throw InputError(path + ": missing params line");
  auto take_int = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw InputError(path + ": missing " + key);
    const int v = std::stoi(it->second);
    kv.erase(it);
    return v;
  };
  ck.spec.input_dim = take_int("input_dim");
  ck.spec.hidden_dim = take_int("hidden_dim");
  ck.spec.n_blocks = take_int("n_blocks");
  ck.spec.output_dim = take_int("output_dim");
  if (auto it = kv.find("activation"); it != kv.end()) {
    if (it->second == "identity")
      ck.spec.activation = Activation::identity;
    else if (it->second != "silu")
      throw InputError(path + ": unknown activation " + it->second);
    kv.erase(it);
  }
  ck.meta = std::move(kv);
  if (Layout(ck.spec).size != count) throw InputError(path + ": params count does not match spec");
  ck.values.resize(count);
  for (long long i = 0; i < count; ++i) {
    unsigned char buf[8];
    if (!is.read(reinterpret_cast<char*>(buf), 8)) throw InputError(path + ": truncated parameter block");
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
    ck.values[i] = std::bit_cast<double>(bits);
  }
  if (!ck.values.allFinite()) throw InputError(path + ": non-finite parameter");
  return ck;
}

}  // namespace cfot::nn
