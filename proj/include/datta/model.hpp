#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "datta/autodiff.hpp"
#include "datta/ops.hpp"
#include "datta/tensor.hpp"

namespace datta {

/// Which statistics a BN layer normalizes with.
enum class NormMode { FixedStats, BatchStats };

struct ConvBlockSpec {
  Index out_channels = 16;
  Index kernel = 3;
  Index stride = 1;
  Index padding = 1;

  friend bool operator==(const ConvBlockSpec&, const ConvBlockSpec&) = default;
};

/// Conv-BN-ReLU blocks, then AvgPool, Flatten, Linear.
struct ArchSpec {
  Index in_channels = 3;
  Index height = 16;
  Index width = 16;
  std::vector<ConvBlockSpec> blocks{{16, 3, 1, 1}, {32, 3, 2, 1}};
  Index pool = 4;
  Index num_classes = 10;
  double bn_epsilon = 1e-5;

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

template <typename Scalar>
struct Conv2dLayer {
  Tensor<Scalar> weight;  ///< [C_out, C_in, k, k]
  Index stride = 1;
  Index padding = 0;
};

template <typename Scalar>
struct LinearLayer {
  Tensor<Scalar> weight;  ///< [in, out]
  Tensor<Scalar> bias;    ///< [out]
};

template <typename Scalar>
struct BatchNormLayer {
  Tensor<Scalar> gamma, beta;              ///< trainable affine
  Tensor<Scalar> mu_norm, sigma2_norm;     ///< used in FixedStats mode
  Tensor<Scalar> mu_popu, sigma2_popu;     ///< running (population) statistics from training
  double epsilon = 1e-5;
  NormMode mode = NormMode::FixedStats;

  Index channels() const { return gamma.size(); }
};

struct ReluLayer {};
struct AvgPoolLayer {
  Index kernel = 2;
};
struct FlattenLayer {};

template <typename Scalar>
using Layer = std::variant<Conv2dLayer<Scalar>, BatchNormLayer<Scalar>, ReluLayer, AvgPoolLayer, FlattenLayer,
                           LinearLayer<Scalar>>;

enum class ParamKind { ConvWeight, LinearWeight, LinearBias, Gamma, Beta };

inline bool is_affine(ParamKind k) { return k == ParamKind::Gamma || k == ParamKind::Beta; }

struct ParamRef {
  std::size_t layer = 0;
  ParamKind kind = ParamKind::Gamma;
  friend bool operator==(const ParamRef&, const ParamRef&) = default;
};

inline std::string param_name(const ParamRef& p) {
  static constexpr const char* names[] = {"conv.weight", "linear.weight", "linear.bias", "bn.gamma", "bn.beta"};
  return "layer" + std::to_string(p.layer) + "." + names[static_cast<int>(p.kind)];
}

template <typename Scalar>
struct ModelGraph {
  ArchSpec arch;
  std::vector<Layer<Scalar>> layers;
  std::vector<std::size_t> da_layers;  ///< indices into `layers`, each a BatchNormLayer

  std::vector<std::size_t> bn_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (std::holds_alternative<BatchNormLayer<Scalar>>(layers[i])) out.push_back(i);
    return out;
  }

  BatchNormLayer<Scalar>& bn(std::size_t layer) { return std::get<BatchNormLayer<Scalar>>(layers.at(layer)); }
  const BatchNormLayer<Scalar>& bn(std::size_t layer) const {
    return std::get<BatchNormLayer<Scalar>>(layers.at(layer));
  }

  /// Every parameter in layer order; affine ones are the trainable set, the rest are frozen.
  std::vector<ParamRef> parameters() const {
    std::vector<ParamRef> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (std::holds_alternative<Conv2dLayer<Scalar>>(layers[i])) out.push_back({i, ParamKind::ConvWeight});
      if (std::holds_alternative<BatchNormLayer<Scalar>>(layers[i])) {
        out.push_back({i, ParamKind::Gamma});
        out.push_back({i, ParamKind::Beta});
      }
      if (std::holds_alternative<LinearLayer<Scalar>>(layers[i])) {
        out.push_back({i, ParamKind::LinearWeight});
        out.push_back({i, ParamKind::LinearBias});
      }
    }
    return out;
  }

  Tensor<Scalar>& parameter(const ParamRef& p) { return const_cast<Tensor<Scalar>&>(std::as_const(*this).parameter(p)); }
  const Tensor<Scalar>& parameter(const ParamRef& p) const {
    const auto& layer = layers.at(p.layer);
    switch (p.kind) {
      case ParamKind::ConvWeight: return std::get<Conv2dLayer<Scalar>>(layer).weight;
      case ParamKind::LinearWeight: return std::get<LinearLayer<Scalar>>(layer).weight;
      case ParamKind::LinearBias: return std::get<LinearLayer<Scalar>>(layer).bias;
      case ParamKind::Gamma: return std::get<BatchNormLayer<Scalar>>(layer).gamma;
      case ParamKind::Beta: return std::get<BatchNormLayer<Scalar>>(layer).beta;
    }
    throw std::logic_error("unknown parameter kind");
  }

  void set_mode(NormMode mode) {
    for (auto i : bn_layers()) bn(i).mode = mode;
  }

  /// Throws std::logic_error if da_layers names a non-BN layer or a BN state is invalid.
  void validate() const {
    for (auto i : da_layers) {
      if (i >= layers.size() || !std::holds_alternative<BatchNormLayer<Scalar>>(layers[i]))
        throw std::logic_error("da_layers entry " + std::to_string(i) + " is not a batch-norm layer");
    }
    for (auto i : bn_layers()) {
      const auto& b = bn(i);
      if (!(b.epsilon > 0.0)) throw std::logic_error("batch-norm epsilon must be positive");
      for (Scalar v : b.sigma2_norm.data())
        if (!(v >= Scalar(0))) throw std::logic_error("batch-norm sigma2_norm must be non-negative");
    }
  }

  template <typename Other>
  ModelGraph<Other> cast() const {
    ModelGraph<Other> out{arch, {}, da_layers};
    for (const auto& layer : layers) {
      std::visit(
          [&](const auto& l) {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, Conv2dLayer<Scalar>>) {
              out.layers.push_back(Conv2dLayer<Other>{l.weight.template cast<Other>(), l.stride, l.padding});
            } else if constexpr (std::is_same_v<L, LinearLayer<Scalar>>) {
              out.layers.push_back(LinearLayer<Other>{l.weight.template cast<Other>(), l.bias.template cast<Other>()});
            } else if constexpr (std::is_same_v<L, BatchNormLayer<Scalar>>) {
              out.layers.push_back(BatchNormLayer<Other>{
                  l.gamma.template cast<Other>(), l.beta.template cast<Other>(), l.mu_norm.template cast<Other>(),
                  l.sigma2_norm.template cast<Other>(), l.mu_popu.template cast<Other>(),
                  l.sigma2_popu.template cast<Other>(), l.epsilon, l.mode});
            } else {
              out.layers.push_back(l);
            }
          },
          layer);
    }
    return out;
  }
};

using ModelF = ModelGraph<float>;
using ModelD = ModelGraph<double>;

/// Builds the reference CNN with He-normal weights, identity affine, and unit population
/// statistics. Every BN layer is a DA layer.
template <typename Scalar>
ModelGraph<Scalar> build_model(const ArchSpec& arch, std::uint64_t seed) {
  if (arch.blocks.empty()) throw std::invalid_argument("architecture needs at least one conv block");
  std::mt19937_64 rng(seed);
  auto he = [&](Shape shape, Index fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(fan_in)));
    Tensor<Scalar> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<Scalar>(dist(rng));
    return t;
  };

  ModelGraph<Scalar> g{arch, {}, {}};
  Index channels = arch.in_channels, h = arch.height, w = arch.width;
  for (const auto& blk : arch.blocks) {
    g.layers.push_back(Conv2dLayer<Scalar>{he({blk.out_channels, channels, blk.kernel, blk.kernel},
                                              channels * blk.kernel * blk.kernel),
                                           blk.stride, blk.padding});
    const Index c = blk.out_channels;
    g.layers.push_back(BatchNormLayer<Scalar>{Tensor<Scalar>({c}, Scalar(1)), Tensor<Scalar>({c}, Scalar(0)),
                                              Tensor<Scalar>({c}, Scalar(0)), Tensor<Scalar>({c}, Scalar(1)),
                                              Tensor<Scalar>({c}, Scalar(0)), Tensor<Scalar>({c}, Scalar(1)),
                                              arch.bn_epsilon, NormMode::FixedStats});
    g.da_layers.push_back(g.layers.size() - 1);
    g.layers.push_back(ReluLayer{});
    channels = c;
    h = (h + 2 * blk.padding - blk.kernel) / blk.stride + 1;
    w = (w + 2 * blk.padding - blk.kernel) / blk.stride + 1;
  }
  if (arch.pool < 1 || arch.pool > h || arch.pool > w) throw std::invalid_argument("pool window exceeds feature map");
  g.layers.push_back(AvgPoolLayer{arch.pool});
  g.layers.push_back(FlattenLayer{});
  const Index features = channels * (h / arch.pool) * (w / arch.pool);
  g.layers.push_back(LinearLayer<Scalar>{he({features, arch.num_classes}, features), Tensor<Scalar>({arch.num_classes})});
  return g;
}

// ---------------------------------------------------------------------------
// Forward pass

/// Where DA statistics are measured relative to a BN layer.
enum class CapturePoint { PostAffine, PreNorm };

/// Which parameters get gradient-tracking leaves on the tape.
enum class GradScope { None, Affine, All };

struct ForwardOptions {
  bool capture = false;
  CapturePoint capture_point = CapturePoint::PostAffine;
  GradScope grads = GradScope::None;
  /// Layers to capture; nullptr means the model's da_layers.
  const std::vector<std::size_t>* capture_layers = nullptr;
};

template <typename Scalar>
struct LayerStats {
  std::size_t layer = 0;
  Var<Scalar> sample_mean;      ///< [b,C] per-sample spatial means
  Var<Scalar> sample_variance;  ///< [b,C] per-sample spatial variances
  Var<Scalar> mean;             ///< [C] batch average of sample_mean
  Var<Scalar> variance;         ///< [C] batch average of sample_variance
};

/// Test statistics for every DA layer, batch-averaged.
template <typename Scalar>
struct ChannelStatsCapture {
  std::vector<LayerStats<Scalar>> layers;
};

template <typename Scalar>
struct ParamBinding {
  ParamRef ref;
  Var<Scalar> var;
};

template <typename Scalar>
struct ForwardPass {
  Var<Scalar> logits;
  std::optional<ChannelStatsCapture<Scalar>> stats;
  std::vector<ParamBinding<Scalar>> params;  ///< only those with gradient tracking
};

/// Side effects a forward pass may apply to BN statistics.
enum class StatsUpdate {
  None,
  RunningAverage,  ///< training: mu_popu <- (1-m) mu_popu + m mu_B (BatchStats layers)
  BlendInit,       ///< mu_norm <- a mu_popu + (1-a) mu_B, layer by layer, then normalize with it
};

namespace detail {

template <typename Scalar>
ForwardPass<Scalar> forward_impl(const ModelGraph<Scalar>& g, ModelGraph<Scalar>* mut, Tape<Scalar>& tape,
                                 const Tensor<Scalar>& batch, const ForwardOptions& opt, StatsUpdate update,
                                 double factor) {
  const Shape expect{batch.rank() == 4 ? batch.dim(0) : 0, g.arch.in_channels, g.arch.height, g.arch.width};
  if (batch.rank() != 4 || batch.shape() != expect)
    throw ShapeError("batch shape " + shape_string(batch.shape()) + " does not match input [b," +
                     std::to_string(g.arch.in_channels) + "," + std::to_string(g.arch.height) + "," +
                     std::to_string(g.arch.width) + "]");
  if (batch.dim(0) == 0) throw ShapeError("empty batch");

  ForwardPass<Scalar> out;
  auto bind = [&](std::size_t layer, ParamKind kind, const Tensor<Scalar>& t) {
    const bool track = opt.grads == GradScope::All || (opt.grads == GradScope::Affine && is_affine(kind));
    Var<Scalar> v = tape.leaf(t, track);
    if (track) out.params.push_back({{layer, kind}, v});
    return v;
  };

  if (opt.capture) out.stats.emplace();
  Var<Scalar> x = tape.constant(batch);
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const auto& layer = g.layers[i];
    if (const auto* conv = std::get_if<Conv2dLayer<Scalar>>(&layer)) {
      x = conv2d(x, bind(i, ParamKind::ConvWeight, conv->weight), conv->stride, conv->padding);
    } else if (const auto* bn = std::get_if<BatchNormLayer<Scalar>>(&layer)) {
      const auto& wanted = opt.capture_layers ? *opt.capture_layers : g.da_layers;
      const bool is_da = std::find(wanted.begin(), wanted.end(), i) != wanted.end();
      auto capture = [&](Var<Scalar> feat) {
        auto s = channel_stats(feat);
        out.stats->layers.push_back({i, s.mean, s.variance, mean_rows(s.mean), mean_rows(s.variance)});
      };
      if (opt.capture && is_da && opt.capture_point == CapturePoint::PreNorm) capture(x);

      Var<Scalar> gamma = bind(i, ParamKind::Gamma, bn->gamma);
      Var<Scalar> beta = bind(i, ParamKind::Beta, bn->beta);
      if (update == StatsUpdate::BlendInit) {
        const auto batch_stats = batch_moments(x.value());
        auto& target = mut->bn(i);
        for (Index c = 0; c < bn->channels(); ++c) {
          target.mu_norm[c] = static_cast<Scalar>(factor * bn->mu_popu[c] + (1.0 - factor) * batch_stats.mean[c]);
          target.sigma2_norm[c] =
              static_cast<Scalar>(factor * bn->sigma2_popu[c] + (1.0 - factor) * batch_stats.var[c]);
        }
        // `factor` == 1 must reproduce the population statistics bit-exactly.
        if (factor == 1.0) {
          target.mu_norm = bn->mu_popu;
          target.sigma2_norm = bn->sigma2_popu;
        } else if (factor == 0.0) {
          target.mu_norm = batch_stats.mean;
          target.sigma2_norm = batch_stats.var;
        }
        target.mode = NormMode::FixedStats;
        const Moments<Scalar> fixed{target.mu_norm, target.sigma2_norm};
        x = batch_norm(x, gamma, beta, &fixed, bn->epsilon);
      } else if (bn->mode == NormMode::FixedStats) {
        const Moments<Scalar> fixed{bn->mu_norm, bn->sigma2_norm};
        x = batch_norm(x, gamma, beta, &fixed, bn->epsilon);
      } else {
        Moments<Scalar> seen;
        x = batch_norm<Scalar>(x, gamma, beta, nullptr, bn->epsilon, &seen);
        if (update == StatsUpdate::RunningAverage) {
          auto& target = mut->bn(i);
          for (Index c = 0; c < bn->channels(); ++c) {
            target.mu_popu[c] = static_cast<Scalar>((1.0 - factor) * target.mu_popu[c] + factor * seen.mean[c]);
            target.sigma2_popu[c] = static_cast<Scalar>((1.0 - factor) * target.sigma2_popu[c] + factor * seen.var[c]);
          }
        }
      }
      if (opt.capture && is_da && opt.capture_point == CapturePoint::PostAffine) capture(x);
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      x = relu(x);
    } else if (const auto* pool = std::get_if<AvgPoolLayer>(&layer)) {
      x = avgpool2d(x, pool->kernel);
    } else if (std::holds_alternative<FlattenLayer>(layer)) {
      x = flatten(x);
    } else if (const auto* lin = std::get_if<LinearLayer<Scalar>>(&layer)) {
      x = add_bias(matmul(x, bind(i, ParamKind::LinearWeight, lin->weight)), bind(i, ParamKind::LinearBias, lin->bias));
    }
  }
  out.logits = x;
  return out;
}

}  // namespace detail

/// Inference/adaptation forward pass; never mutates the graph.
template <typename Scalar>
ForwardPass<Scalar> forward(const ModelGraph<Scalar>& g, Tape<Scalar>& tape, const Tensor<Scalar>& batch,
                            const ForwardOptions& opt = {}) {
  return detail::forward_impl<Scalar>(g, nullptr, tape, batch, opt, StatsUpdate::None, 0.0);
}

/// Training-mode pass: BatchStats layers fold the batch moments into the population
/// statistics with the given momentum.
template <typename Scalar>
ForwardPass<Scalar> forward_train(ModelGraph<Scalar>& g, Tape<Scalar>& tape, const Tensor<Scalar>& batch,
                                  const ForwardOptions& opt, double momentum) {
  return detail::forward_impl(g, &g, tape, batch, opt, StatsUpdate::RunningAverage, momentum);
}

/// Single pass that re-estimates every BN layer's normalization statistics as
/// alpha * population + (1 - alpha) * this batch, feeding each layer's blended output
/// forward so deeper layers see the blended activations. Leaves all BN layers in FixedStats.
template <typename Scalar>
ForwardPass<Scalar> forward_blend(ModelGraph<Scalar>& g, Tape<Scalar>& tape, const Tensor<Scalar>& batch,
                                  double alpha, const ForwardOptions& opt = {}) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("blend alpha must lie in [0,1]");
  return detail::forward_impl(g, &g, tape, batch, opt, StatsUpdate::BlendInit, alpha);
}

template <typename Scalar>
std::vector<int> argmax_rows(const Tensor<Scalar>& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.dim(0)));
  for (Index i = 0; i < logits.dim(0); ++i) {
    Index best = 0;
    for (Index j = 1; j < logits.dim(1); ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

/// Class predictions without gradient tracking.
template <typename Scalar>
std::vector<int> predict(const ModelGraph<Scalar>& g, const Tensor<Scalar>& batch) {
  Tape<Scalar> tape;
  return argmax_rows(forward(g, tape, batch).logits.value());
}

}  // namespace datta
