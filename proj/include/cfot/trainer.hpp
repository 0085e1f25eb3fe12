#pragma once

// Flow-matching regression on coupled batches: x_t = (1-t) u + t x, target
// velocity x - u, one uniform t per pair.

#include <Eigen/Core>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cfot/coupling.hpp"
#include "cfot/error.hpp"
#include "cfot/field.hpp"
#include "cfot/nn.hpp"
#include "cfot/rng.hpp"

namespace cfot {

enum class Selection { val_mu_ape, ema_loss };

inline std::string_view to_string(Selection s) { return s == Selection::val_mu_ape ? "val_mu_ape" : "ema_loss"; }

inline Selection parse_selection(std::string_view s) {
  if (s == "val_mu_ape") return Selection::val_mu_ape;
  if (s == "ema_loss") return Selection::ema_loss;
  throw InputError("unknown selection '" + std::string(s) + "'");
}

struct TrainConfig {
  int steps = 50000;
  int batch = 256;
  nn::AdamWConfig adamw;
  int warmup_steps = 2000;
  Scheme scheme = Scheme::markovian_ot;
  PriorConfig prior;
  int eval_every = 5000;
  int nfe_eval = 50;
  int log_every = 100;
  double ema_decay = 0.9999;
  Selection select = Selection::val_mu_ape;

  void validate() const {
    if (steps < 0) throw ConfigError("train.steps", "must be >= 0");
    if (batch < 1) throw ConfigError("train.batch", "must be >= 1");
    if (warmup_steps < 0) throw ConfigError("train.warmup_steps", "must be >= 0");
    if (steps > 0 && warmup_steps >= steps) throw ConfigError("train.warmup_steps", "must be < train.steps");
    if (eval_every < 1) throw ConfigError("train.eval_every", "must be >= 1");
    if (nfe_eval < 1) throw ConfigError("train.nfe_eval", "must be >= 1");
    if (log_every < 1) throw ConfigError("train.log_every", "must be >= 1");
    if (!(adamw.lr > 0)) throw ConfigError("train.lr", "must be > 0");
    if (adamw.weight_decay < 0) throw ConfigError("train.weight_decay", "must be >= 0");
    if (!(adamw.beta1 >= 0 && adamw.beta1 < 1)) throw ConfigError("train.beta1", "must be in [0, 1)");
    if (!(adamw.beta2 >= 0 && adamw.beta2 < 1)) throw ConfigError("train.beta2", "must be in [0, 1)");
    if (!(adamw.eps > 0)) throw ConfigError("train.eps", "must be > 0");
    if (!(ema_decay >= 0 && ema_decay <= 1)) throw ConfigError("train.ema_decay", "must be in [0, 1]");
  }
};

template <class S>
struct LossAndGrad {
  double loss = 0;
  nn::Vec<S> grad;
};

/// Mean over pairs of |v(x_t; cond, t) - (x - u)|^2 and its parameter gradient.
template <class S>
LossAndGrad<S> fm_loss(const VectorFieldModel<S>& model, const PairedBatch& batch, const Eigen::RowVectorXd& t) {
  const Eigen::Index b = batch.size();
  if (b < 1) throw ContractViolation("fm_loss: empty batch");
  if (t.size() != b) throw ContractViolation("fm_loss: one t per pair required");
  if ((t.array() < 0.0).any() || (t.array() > 1.0).any()) throw ContractViolation("fm_loss: t outside [0,1]");
  const Eigen::MatrixXd xt = batch.u.array().rowwise() * (1.0 - t.array()) + batch.x.array().rowwise() * t.array();
  const nn::Mat<S> target = (batch.x - batch.u).cast<S>();
  const nn::Mat<S> in = assemble_input(model, xt, batch.cond, t);
  const int out_dim = model.params.spec().output_dim;
  const S inv_b = S(1) / static_cast<S>(b);
  LossAndGrad<S> r;

  auto finish = [&](const nn::Mat<S>& resid) {
    const Eigen::Matrix<S, 1, Eigen::Dynamic> per_pair = resid.colwise().squaredNorm();
    for (Eigen::Index i = 0; i < b; ++i)
      if (!std::isfinite(static_cast<double>(per_pair[i])))
        throw NumericalError("fm_loss: non-finite loss at pair " + std::to_string(i));
    r.loss = per_pair.template cast<double>().mean();
  };

  if (model.kind == FieldKind::direct) {
    const nn::Tape<S> tape = nn::forward(model.params, in);
    const nn::Mat<S> resid = tape.output - target;
    finish(resid);
    r.grad = nn::backward_params(tape, nn::Mat<S>(S(2) * inv_b * resid));
    return r;
  }
  // Energy kind: v = grad_x E. With r = v - target held fixed, dL/dtheta is
  // (2/B) sum_b d/dtheta <grad_x E_b, r_b>, the parameter gradient of the
  // output tangent along input direction r.
  const nn::Tape<S> tape = nn::forward(model.params, in);
  const nn::Mat<S> gx = nn::backward_input(tape, mean_cotangent<S>(out_dim, b));
  const nn::Mat<S> resid = gx.topRows(model.x_dim) - target;
  finish(resid);
  nn::Mat<S> dir = nn::Mat<S>::Zero(in.rows(), b);
  dir.topRows(model.x_dim) = resid;
  const nn::DualTape<S> dual = nn::forward_dual(model.params, in, dir);
  const nn::Mat<S> cot = nn::Mat<S>::Zero(out_dim, b);
  const nn::Mat<S> cot_dot = nn::Mat<S>::Constant(out_dim, b, S(2) * inv_b / static_cast<S>(out_dim));
  r.grad = nn::backward_dual_params(dual, cot, cot_dot);
  return r;
}

/// Where training batches come from.
struct BatchSource {
  Scheme scheme = Scheme::independent;
  const RowPool* pool = nullptr;                  // independent, naive_ot
  const ConditionalSource* conditional = nullptr;  // markovian_ot

  PairedBatch draw(Engine& rng, Eigen::Index m, const PriorConfig& prior) const {
    switch (scheme) {
      case Scheme::independent:
        if (!pool) throw ContractViolation("BatchSource: independent scheme needs a row pool");
        return independent_batch(rng, m, *pool, prior).first;
      case Scheme::naive_ot:
        if (!pool) throw ContractViolation("BatchSource: naive_ot scheme needs a row pool");
        return naive_batch(rng, m, *pool, prior).first;
      case Scheme::markovian_ot: return markovian_batch(rng, m, conditional, prior).first;
    }
    throw ContractViolation("BatchSource: unknown scheme");
  }
};

struct LogRow {
  int step = 0;
  double loss = 0;
  std::optional<double> val;
};

template <class S>
struct TrainedModel {
  VectorFieldModel<S> best, final, ema;
  std::vector<LogRow> log;
  double best_score = std::numeric_limits<double>::infinity();
  int best_step = 0;
  bool diverged = false;
  std::string failure;
};

/// Validation score for a candidate model (lower is better).
template <class S>
using Validator = std::function<double(const VectorFieldModel<S>&)>;

template <class S>
TrainedModel<S> train(const TrainConfig& cfg, const BatchSource& source, const VectorFieldModel<S>& init,
                      const Validator<S>& validate, std::uint64_t seed) {
  cfg.validate();
  const SeedStream seeds(seed);
  TrainedModel<S> out{init, init, init, {}, std::numeric_limits<double>::infinity(), 0, false, {}};
  VectorFieldModel<S>& model = out.final;
  nn::AdamState<S> opt(model.params.size());
  nn::Ema<S> ema(init.params, cfg.ema_decay);
  double window_sum = 0;
  int window_n = 0;
  double smoothed = std::numeric_limits<double>::quiet_NaN();
  const double smooth_rate = 0.01;

  for (int step = 1; step <= cfg.steps; ++step) {
    const nn::Params<S> last_good = model.params;
    try {
      Engine brng = seeds.stream(tag::kBatch, static_cast<std::uint64_t>(step));
      const PairedBatch batch = source.draw(brng, cfg.batch, cfg.prior);
      Engine trng = seeds.stream(tag::kTime, static_cast<std::uint64_t>(step));
      Eigen::RowVectorXd t(batch.size());
      for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = uniform01(trng);
      const LossAndGrad<S> lg = fm_loss(model, batch, t);
      const double warm = cfg.warmup_steps > 0 ? std::min(1.0, static_cast<double>(step) / cfg.warmup_steps) : 1.0;
      nn::adamw_step(model.params, lg.grad, opt, cfg.adamw, cfg.adamw.lr * warm);
      if (!model.params.values().allFinite()) throw NumericalError("train: parameters became non-finite");
      ema.update(model.params);
      window_sum += lg.loss;
      ++window_n;
      smoothed = std::isnan(smoothed) ? lg.loss : (1 - smooth_rate) * smoothed + smooth_rate * lg.loss;
    } catch (const NumericalError& e) {
      model.params = last_good;
      out.diverged = true;
      out.failure = "step " + std::to_string(step) + ": " + e.what();
      break;
    }

    const bool eval_now = step % cfg.eval_every == 0 || step == cfg.steps;
    if (step % cfg.log_every == 0 || eval_now) {
      LogRow row{step, window_sum / std::max(1, window_n), std::nullopt};
      window_sum = 0;
      window_n = 0;
      if (eval_now) {
        double score;
        try {
          score = cfg.select == Selection::val_mu_ape ? validate(model) : smoothed;
        } catch (const NumericalError& e) {
          score = std::numeric_limits<double>::infinity();
        }
        row.val = score;
        if (score < out.best_score || out.best_step == 0) {
          out.best_score = score;
          out.best_step = step;
          out.best = model;
        }
      }
      out.log.push_back(row);
    }
  }
  out.ema = {init.kind, ema.shadow, init.x_dim, init.cond_dim, init.periodic_cond};
  return out;
}

inline void write_train_log(const std::string& path, const std::vector<LogRow>& log) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path);
  os << "step,loss,val_mu_ape\n";
  for (const LogRow& r : log)
    os << r.step << ',' << dgp::format_double(r.loss) << ',' << (r.val ? dgp::format_double(*r.val) : "") << '\n';
}

}  // namespace cfot
