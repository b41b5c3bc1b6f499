#include "datta/source_prep.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <random>
#include <regex>

#include "datta/errors.hpp"
#include "datta/record_io.hpp"

namespace datta {

ModelF train_source(const Dataset& data, const ArchSpec& arch, const TrainConfig& cfg) {
  if (data.size() == 0) throw std::invalid_argument("train_source: empty dataset");
  if (data.num_classes < 2) throw std::invalid_argument("train_source: need at least two classes");
  if (data.num_classes > arch.num_classes) throw std::invalid_argument("train_source: labels exceed architecture classes");
  if (cfg.batch_size < 1) throw std::invalid_argument("train_source: batch_size must be positive");

  ModelF model = build_model<float>(arch, cfg.seed);
  model.set_mode(NormMode::BatchStats);

  std::mt19937_64 rng(cfg.seed ^ 0x5eed5eedULL);
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});
  const auto params = model.parameters();
  std::vector<TensorF> velocity;
  for (const auto& p : params) velocity.push_back(TensorF::like(model.parameter(p)));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Index start = 0; start < data.size(); start += cfg.batch_size) {
      const Index end = std::min(data.size(), start + cfg.batch_size);
      if (end - start < 2) continue;  // batch statistics need at least two samples
      std::span<const Index> idx(order.data() + start, static_cast<std::size_t>(end - start));
      Tape<float> tape;
      auto pass = forward_train(model, tape, data.gather(idx), {.grads = GradScope::All}, cfg.bn_momentum);
      auto loss = scale(mean(gather_rows(log_softmax(pass.logits), data.gather_labels(idx))), -1.0);
      if (!std::isfinite(loss.value()[0])) {
        throw NumericAbort("train_source diverged at epoch " + std::to_string(epoch));
      }
      std::vector<Var<float>> vars;
      for (const auto& b : pass.params) vars.push_back(b.var);
      const auto grads = tape.gradients(loss, vars);
      for (std::size_t k = 0; k < pass.params.size(); ++k) {
        const auto& ref = pass.params[k].ref;
        const std::size_t slot = static_cast<std::size_t>(std::find(params.begin(), params.end(), ref) - params.begin());
        auto& w = model.parameter(ref);
        auto& v = velocity[slot];
        const double decay = is_affine(ref.kind) ? 0.0 : cfg.weight_decay;
        for (Index i = 0; i < w.size(); ++i) {
          const double g = double(grads[k][i]) + decay * double(w[i]);
          v[i] = static_cast<float>(cfg.momentum * double(v[i]) + g);
          w[i] = static_cast<float>(double(w[i]) - cfg.lr * double(v[i]));
        }
        if (!w.all_finite()) throw NumericAbort("train_source diverged at epoch " + std::to_string(epoch));
      }
    }
  }

  for (auto i : model.bn_layers()) {
    auto& bn = model.bn(i);
    bn.mu_norm = bn.mu_popu;
    bn.sigma2_norm = bn.sigma2_popu;
    bn.mode = NormMode::FixedStats;
  }
  return model;
}

SourceStatsF compute_source_stats(const ModelF& trained, const Dataset& data, Index batch_size) {
  if (data.size() == 0) throw std::invalid_argument("compute_source_stats: empty dataset");
  if (batch_size < 1) throw std::invalid_argument("compute_source_stats: batch_size must be positive");
  if (data.images.dim(1) != trained.arch.in_channels) {
    throw ShapeError("compute_source_stats: dataset has " + std::to_string(data.images.dim(1)) +
                     " channels, model expects " + std::to_string(trained.arch.in_channels));
  }
  ModelF model = trained;
  for (auto i : model.bn_layers()) {
    auto& bn = model.bn(i);
    bn.mu_norm = bn.mu_popu;
    bn.sigma2_norm = bn.sigma2_popu;
    bn.mode = NormMode::FixedStats;
  }

  std::map<std::size_t, std::pair<std::vector<double>, std::vector<double>>> sums;
  for (auto l : model.da_layers) {
    const auto c = static_cast<std::size_t>(model.bn(l).channels());
    sums[l] = {std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  }
  for (Index start = 0; start < data.size(); start += batch_size) {
    const Index end = std::min(data.size(), start + batch_size);
    std::vector<Index> idx(static_cast<std::size_t>(end - start));
    std::iota(idx.begin(), idx.end(), start);
    Tape<float> tape;
    auto pass = forward(model, tape, data.gather(idx), {.capture = true});
    for (const auto& ls : pass.stats->layers) {
      auto& [ms, ds] = sums[ls.layer];
      const auto& m = ls.sample_mean.value();
      const auto& d = ls.sample_variance.value();
      for (Index n = 0; n < m.dim(0); ++n)
        for (Index c = 0; c < m.dim(1); ++c) {
          ms[static_cast<std::size_t>(c)] += m.at(n, c);
          ds[static_cast<std::size_t>(c)] += d.at(n, c);
        }
    }
  }

  SourceStatsF out;
  const double n = double(data.size());
  for (auto l : model.da_layers) {
    const auto& [ms, ds] = sums[l];
    LayerReference<float> ref{l, TensorF({static_cast<Index>(ms.size())}), TensorF({static_cast<Index>(ds.size())})};
    for (std::size_t c = 0; c < ms.size(); ++c) {
      ref.m_bar[static_cast<Index>(c)] = static_cast<float>(ms[c] / n);
      ref.d2_bar[static_cast<Index>(c)] = static_cast<float>(ds[c] / n);
    }
    out.layers.push_back(std::move(ref));
  }
  for (auto l : model.bn_layers()) out.population.push_back({l, model.bn(l).mu_popu, model.bn(l).sigma2_popu});
  return out;
}

double evaluate_accuracy(const ModelF& model, const Dataset& data, Index batch_size) {
  if (data.size() == 0) return 0.0;
  Index correct = 0;
  for (Index start = 0; start < data.size(); start += batch_size) {
    const Index end = std::min(data.size(), start + batch_size);
    std::vector<Index> idx(static_cast<std::size_t>(end - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto pred = predict(model, data.gather(idx));
    for (std::size_t k = 0; k < idx.size(); ++k) correct += pred[k] == data.labels[static_cast<std::size_t>(idx[k])];
  }
  return double(correct) / double(data.size());
}

void save_stats(const SourceStatsF& stats, const std::filesystem::path& path) {
  std::vector<NamedTensor> recs;
  for (const auto& l : stats.layers) {
    recs.push_back({"source.layer" + std::to_string(l.layer) + ".m_bar", l.m_bar});
    recs.push_back({"source.layer" + std::to_string(l.layer) + ".d2_bar", l.d2_bar});
  }
  for (const auto& p : stats.population) {
    recs.push_back({"popu.layer" + std::to_string(p.layer) + ".mu", p.mu});
    recs.push_back({"popu.layer" + std::to_string(p.layer) + ".sigma2", p.sigma2});
  }
  write_records(path, recs);
}

SourceStatsF load_stats(const std::filesystem::path& path) {
  const auto recs = read_records(path);
  const std::string src = path.string();
  static const std::regex pattern(R"((source|popu)\.layer(\d+)\.(m_bar|d2_bar|mu|sigma2))");
  std::map<std::size_t, LayerReference<float>> refs;
  std::map<std::size_t, PopulationStats<float>> popu;
  for (const auto& r : recs) {
    std::smatch m;
    if (!std::regex_match(r.name, m, pattern)) {
      throw FormatError(FormatError::Kind::MissingTensor, src + ": unexpected tensor '" + r.name + "' in stats file");
    }
    if (r.tensor.rank() != 1) {
      throw FormatError(FormatError::Kind::DimensionMismatch, src + ": tensor '" + r.name + "' must be rank 1");
    }
    const auto layer = static_cast<std::size_t>(std::stoul(m[2].str()));
    const std::string field = m[3].str();
    if (m[1] == "source" && (field == "m_bar" || field == "d2_bar")) {
      auto& ref = refs[layer];
      ref.layer = layer;
      (field == "m_bar" ? ref.m_bar : ref.d2_bar) = r.tensor;
    } else if (m[1] == "popu" && (field == "mu" || field == "sigma2")) {
      auto& p = popu[layer];
      p.layer = layer;
      (field == "mu" ? p.mu : p.sigma2) = r.tensor;
    } else {
      throw FormatError(FormatError::Kind::MissingTensor, src + ": unexpected tensor '" + r.name + "' in stats file");
    }
  }
  SourceStatsF out;
  for (auto& [layer, ref] : refs) {
    if (ref.m_bar.empty() || ref.d2_bar.empty() || ref.m_bar.shape() != ref.d2_bar.shape()) {
      throw FormatError(FormatError::Kind::MissingTensor, src + ": incomplete source statistics for layer " + std::to_string(layer));
    }
    out.layers.push_back(std::move(ref));
  }
  for (auto& [layer, p] : popu) {
    if (p.mu.empty() || p.sigma2.empty() || p.mu.shape() != p.sigma2.shape()) {
      throw FormatError(FormatError::Kind::MissingTensor, src + ": incomplete population statistics for layer " + std::to_string(layer));
    }
    out.population.push_back(std::move(p));
  }
  return out;
}

void check_stats_match(const SourceStatsF& stats, const ModelF& model) {
  if (stats.layer_ids() != model.da_layers) {
    std::string got, want;
    for (auto l : stats.layer_ids()) got += std::to_string(l) + " ";
    for (auto l : model.da_layers) want += std::to_string(l) + " ";
    throw FormatError(FormatError::Kind::LayerMismatch,
                      "source statistics cover layers { " + got + "} but the model's DA layers are { " + want + "}");
  }
  for (const auto& l : stats.layers) {
    if (l.m_bar.size() != model.bn(l.layer).channels()) {
      throw FormatError(FormatError::Kind::LayerMismatch, "source statistics for layer " + std::to_string(l.layer) +
                                                              " have " + std::to_string(l.m_bar.size()) + " channels, model has " +
                                                              std::to_string(model.bn(l.layer).channels()));
    }
  }
}

SourceStatsF load_stats(const std::filesystem::path& path, const ModelF& model) {
  auto stats = load_stats(path);
  check_stats_match(stats, model);
  return stats;
}

}  // namespace datta
