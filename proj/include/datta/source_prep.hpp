#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "datta/dataset.hpp"
#include "datta/model.hpp"

namespace datta {

/// Reference feature statistics for one DA layer: averages of per-sample spatial means and
/// variances over the source set.
template <typename Scalar>
struct LayerReference {
  std::size_t layer = 0;
  Tensor<Scalar> m_bar;
  Tensor<Scalar> d2_bar;
};

template <typename Scalar>
struct PopulationStats {
  std::size_t layer = 0;
  Tensor<Scalar> mu;
  Tensor<Scalar> sigma2;
};

template <typename Scalar>
struct SourceStats {
  std::vector<LayerReference<Scalar>> layers;         ///< one per DA layer, in model order
  std::vector<PopulationStats<Scalar>> population;    ///< one per BN layer

  std::vector<std::size_t> layer_ids() const {
    std::vector<std::size_t> out;
    for (const auto& l : layers) out.push_back(l.layer);
    return out;
  }

  const LayerReference<Scalar>& reference(std::size_t layer) const {
    for (const auto& l : layers)
      if (l.layer == layer) return l;
    throw ShapeError("no source reference for layer " + std::to_string(layer));
  }

  template <typename Other>
  SourceStats<Other> cast() const {
    SourceStats<Other> out;
    for (const auto& l : layers) out.layers.push_back({l.layer, l.m_bar.template cast<Other>(), l.d2_bar.template cast<Other>()});
    for (const auto& p : population) out.population.push_back({p.layer, p.mu.template cast<Other>(), p.sigma2.template cast<Other>()});
    return out;
  }
};

using SourceStatsF = SourceStats<float>;

struct TrainConfig {
  int epochs = 8;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  Index batch_size = 64;
  double bn_momentum = 0.1;  ///< EMA factor for population statistics
  std::uint64_t seed = 0;
};

/// Cross-entropy SGD on every parameter with BN in BatchStats mode; population statistics
/// follow an EMA of batch moments. Returns the model in FixedStats mode with
/// mu_norm/sigma2_norm set to the population statistics.
ModelF train_source(const Dataset& data, const ArchSpec& arch, const TrainConfig& cfg);

/// Averages per-sample channel statistics of every DA layer over the whole dataset with
/// BN normalizing by the population statistics.
SourceStatsF compute_source_stats(const ModelF& model, const Dataset& data, Index batch_size);

/// Fraction of samples classified correctly with the model as-is.
double evaluate_accuracy(const ModelF& model, const Dataset& data, Index batch_size);

/// Stats files reuse the record format; names are "source.layer<i>.m_bar",
/// "source.layer<i>.d2_bar", "popu.layer<i>.mu", "popu.layer<i>.sigma2".
void save_stats(const SourceStatsF& stats, const std::filesystem::path& path);
SourceStatsF load_stats(const std::filesystem::path& path);

/// Throws FormatError::LayerMismatch unless the reference layers equal model.da_layers and
/// channel counts agree.
void check_stats_match(const SourceStatsF& stats, const ModelF& model);
SourceStatsF load_stats(const std::filesystem::path& path, const ModelF& model);

}  // namespace datta
