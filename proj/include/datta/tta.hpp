#pragma once

// Online test-time adaptation of BN affine parameters.
//
// Per batch: one forward pass yields logits (predictions are taken here, before the update)
// and the batch-averaged channel statistics of the DA layers. The alignment loss pulls those
// statistics toward the source references; the entropy loss sharpens confident predictions.
// Only gamma/beta move; normalization statistics are fixed after the initial blend.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "datta/autodiff.hpp"
#include "datta/detector.hpp"
#include "datta/errors.hpp"
#include "datta/model.hpp"
#include "datta/ops.hpp"
#include "datta/source_prep.hpp"

namespace datta {

enum class Variant { Source, TTBN, EMOnly, DAOnly, DAEM };
enum class LayerSelection { All, LowHalf, HighHalf };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& name);
std::string to_string(LayerSelection s);
LayerSelection layer_selection_from_string(const std::string& name);

inline bool uses_da(Variant v) { return v == Variant::DAOnly || v == Variant::DAEM; }
inline bool uses_em(Variant v) { return v == Variant::EMOnly || v == Variant::DAEM; }
inline bool updates_parameters(Variant v) { return uses_da(v) || uses_em(v); }

struct MethodConfig {
  Variant variant = Variant::DAEM;
  double alpha = 0.9;     ///< weight of population statistics in the initial blend
  double theta = 0.9;     ///< max-softmax-probability threshold for the entropy term
  double lr = 1e-3;
  double momentum = 0.9;
  LayerSelection da_layer_selection = LayerSelection::All;
  CapturePoint capture_point = CapturePoint::PostAffine;

  /// Throws ConfigError with a "method.<field>" path.
  void validate() const;
};

struct LossReport {
  double l_da = 0.0;
  double l_em = 0.0;
  double l_final = 0.0;
  Index n_confident = 0;
};

/// BN layers that receive alignment supervision under a selection. LowHalf takes the first
/// ceil(n/2) layers, HighHalf the remaining ones (or the last layer when n == 1).
std::vector<std::size_t> select_da_layers(const std::vector<std::size_t>& bn_layers, LayerSelection sel);

// ---------------------------------------------------------------------------
// Losses

/// Mean over captured layers of (1/C) sum_j |m_j - m_bar_j| + |d2_j - d2_bar_j|.
template <typename Scalar>
Var<Scalar> da_loss(const ChannelStatsCapture<Scalar>& captured, const SourceStats<Scalar>& ref) {
  if (captured.layers.empty()) throw ShapeError("da_loss needs at least one captured layer");
  Tape<Scalar>& tape = *captured.layers.front().mean.tape;
  Var<Scalar> total;
  for (std::size_t k = 0; k < captured.layers.size(); ++k) {
    const auto& cap = captured.layers[k];
    const auto& r = ref.reference(cap.layer);
    if (r.m_bar.shape() != cap.mean.shape() || r.d2_bar.shape() != cap.variance.shape()) {
      throw ShapeError("da_loss channel mismatch at layer " + std::to_string(cap.layer) + ": captured " +
                       shape_string(cap.mean.shape()) + ", reference " + shape_string(r.m_bar.shape()));
    }
    Var<Scalar> layer_loss = add(mean(abs(sub(cap.mean, tape.constant(r.m_bar)))),
                                 mean(abs(sub(cap.variance, tape.constant(r.d2_bar)))));
    total = k == 0 ? layer_loss : add(total, layer_loss);
  }
  return scale(total, 1.0 / double(captured.layers.size()));
}

template <typename Scalar>
struct EntropyLoss {
  Var<Scalar> loss;
  Index n_confident = 0;
};

/// Sum over samples whose max softmax probability exceeds theta of the prediction entropy
/// (natural log). Other samples contribute neither value nor gradient.
template <typename Scalar>
EntropyLoss<Scalar> em_loss(Var<Scalar> logits, double theta) {
  if (logits.value().rank() != 2) throw ShapeError("em_loss expects [batch, classes] logits");
  Tape<Scalar>& tape = *logits.tape;
  Var<Scalar> p = softmax(logits);
  const auto& pv = p.value();
  const Index m = pv.dim(0), n = pv.dim(1);
  Tensor<Scalar> mask({m});
  Index confident = 0;
  for (Index i = 0; i < m; ++i) {
    Scalar best = pv.at(i, 0);
    for (Index j = 1; j < n; ++j) best = std::max(best, pv.at(i, j));
    if (double(best) > theta) {
      mask[i] = Scalar(1);
      ++confident;
    }
  }
  Var<Scalar> entropy = scale(row_sum(mul(p, log_softmax(logits))), -1.0);
  return {sum(mul(entropy, tape.constant(std::move(mask)))), confident};
}

// ---------------------------------------------------------------------------
// Adaptation state

template <typename Scalar>
struct AdaptationState {
  ModelGraph<Scalar> model;
  std::vector<ParamRef> affine;                 ///< gamma/beta of every BN layer
  std::vector<Tensor<Scalar>> initial_affine;   ///< snapshot taken at construction
  std::vector<Tensor<Scalar>> velocity;
  bool initialized = false;

  explicit AdaptationState(ModelGraph<Scalar> m) : model(std::move(m)) {
    for (const auto& p : model.parameters()) {
      if (!is_affine(p.kind)) continue;
      affine.push_back(p);
      initial_affine.push_back(model.parameter(p));
      velocity.push_back(Tensor<Scalar>::like(model.parameter(p)));
    }
  }

  std::size_t slot(const ParamRef& p) const {
    for (std::size_t k = 0; k < affine.size(); ++k)
      if (affine[k] == p) return k;
    throw std::logic_error("not an affine parameter: " + param_name(p));
  }
};

/// Re-estimates normalization statistics from `batch` (alpha-blend with population).
template <typename Scalar>
void reblend(AdaptationState<Scalar>& state, const Tensor<Scalar>& batch, double alpha) {
  Tape<Scalar> tape;
  forward_blend(state.model, tape, batch, alpha);
}

/// One-time setup before the first adapt_step. TTBN switches every BN layer to batch
/// statistics; other adaptive variants blend population and first-batch statistics.
template <typename Scalar>
void init_adaptation(AdaptationState<Scalar>& state, const Tensor<Scalar>& first_batch, const MethodConfig& method) {
  if (state.initialized) throw std::logic_error("init_adaptation called twice");
  if (method.variant == Variant::Source) throw std::logic_error("the Source variant does not adapt");
  if (first_batch.rank() != 4 || first_batch.dim(0) == 0) throw ShapeError("init_adaptation needs a non-empty batch");
  if (method.variant == Variant::TTBN) {
    state.model.set_mode(NormMode::BatchStats);
  } else {
    reblend(state, first_batch, method.alpha);
  }
  state.initialized = true;
}

template <typename Scalar>
struct LossEvaluation {
  Tensor<Scalar> logits;
  LossReport report;
  std::vector<Tensor<Scalar>> grads;  ///< aligned with AdaptationState::affine; empty unless requested
};

/// Forward pass plus variant-specific losses on the model as it stands. With
/// `want_grads` the gradients of L_final w.r.t. every gamma/beta are returned as well.
template <typename Scalar>
LossEvaluation<Scalar> evaluate_losses(const AdaptationState<Scalar>& state, const Tensor<Scalar>& images,
                                       const MethodConfig& method, const SourceStats<Scalar>& ref, bool want_grads) {
  const auto& model = state.model;
  LossEvaluation<Scalar> out;
  if (!updates_parameters(method.variant)) {
    Tape<Scalar> tape;
    out.logits = forward(model, tape, images).logits.value();
    return out;
  }
  const auto layers = select_da_layers(model.da_layers, method.da_layer_selection);
  Tape<Scalar> tape;
  ForwardOptions opt;
  opt.capture = uses_da(method.variant);
  opt.capture_point = method.capture_point;
  opt.grads = GradScope::Affine;
  opt.capture_layers = &layers;
  auto pass = forward(model, tape, images, opt);
  out.logits = pass.logits.value();

  Var<Scalar> final_loss;
  bool have = false;
  if (uses_da(method.variant)) {
    Var<Scalar> l = da_loss(*pass.stats, ref);
    out.report.l_da = double(l.value()[0]);
    final_loss = l;
    have = true;
  }
  if (uses_em(method.variant)) {
    auto em = em_loss(pass.logits, method.theta);
    out.report.l_em = double(em.loss.value()[0]);
    out.report.n_confident = em.n_confident;
    final_loss = have ? add(final_loss, em.loss) : em.loss;
  }
  out.report.l_final = out.report.l_da + out.report.l_em;
  if (!std::isfinite(double(final_loss.value()[0])) || !std::isfinite(out.report.l_final)) throw NonFiniteError("non-finite adaptation loss");

  if (want_grads) {
    std::vector<Var<Scalar>> vars;
    std::vector<std::size_t> slots;
    for (const auto& b : pass.params) {
      vars.push_back(b.var);
      slots.push_back(state.slot(b.ref));
    }
    auto grads = tape.gradients(final_loss, vars);
    out.grads.resize(state.affine.size());
    for (std::size_t k = 0; k < grads.size(); ++k) {
      if (!grads[k].all_finite()) throw NonFiniteError("non-finite gradient for " + param_name(pass.params[k].ref));
      out.grads[slots[k]] = std::move(grads[k]);
    }
  }
  return out;
}

template <typename Scalar>
struct StepResult {
  std::vector<int> predictions;
  LossReport report;
};

/// Predict, then take one SGD-with-momentum step on the affine parameters. A non-finite
/// loss or gradient throws NumericAbort and leaves the state untouched.
template <typename Scalar>
StepResult<Scalar> adapt_step(AdaptationState<Scalar>& state, const Tensor<Scalar>& images, const MethodConfig& method,
                              const SourceStats<Scalar>& ref) {
  if (method.variant != Variant::Source && !state.initialized) {
    throw std::logic_error("adapt_step before init_adaptation");
  }
  LossEvaluation<Scalar> eval;
  try {
    eval = evaluate_losses(state, images, method, ref, updates_parameters(method.variant));
  } catch (const NonFiniteError& e) {
    throw NumericAbort(std::string("adaptation step aborted: ") + e.what());
  }
  StepResult<Scalar> out{argmax_rows(eval.logits), eval.report};
  if (!updates_parameters(method.variant)) return out;

  for (std::size_t k = 0; k < state.affine.size(); ++k) {
    auto& w = state.model.parameter(state.affine[k]);
    auto& v = state.velocity[k];
    const auto& g = eval.grads[k];
    for (Index i = 0; i < w.size(); ++i) {
      v[i] = static_cast<Scalar>(method.momentum * double(v[i]) + double(g[i]));
      w[i] = static_cast<Scalar>(double(w[i]) - method.lr * double(v[i]));
    }
  }
  return out;
}

/// Domain-shift response: restore gamma/beta from the snapshot, zero the optimizer,
/// re-blend normalization statistics treating `batch` as the first batch, and reset the
/// detector (which starts its cooldown).
template <typename Scalar>
void on_shift(AdaptationState<Scalar>& state, ShiftDetector& detector, const Tensor<Scalar>& batch, double alpha) {
  for (std::size_t k = 0; k < state.affine.size(); ++k) {
    state.model.parameter(state.affine[k]) = state.initial_affine[k];
    state.velocity[k].fill(Scalar(0));
  }
  reblend(state, batch, alpha);
  detector.reset();
}

}  // namespace datta
