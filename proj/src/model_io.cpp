#include "datta/model_io.hpp"

#include <cmath>
#include <string>

#include "datta/errors.hpp"

namespace datta {

namespace {

std::string bn_name(std::size_t layer, const char* field) {
  return "layer" + std::to_string(layer) + ".bn." + field;
}

}  // namespace

std::vector<NamedTensor> model_records(const ModelF& model) {
  std::vector<NamedTensor> out;
  for (const auto& p : model.parameters()) out.push_back({param_name(p), model.parameter(p)});
  for (auto i : model.bn_layers()) {
    const auto& bn = model.bn(i);
    out.push_back({bn_name(i, "mu_norm"), bn.mu_norm});
    out.push_back({bn_name(i, "sigma2_norm"), bn.sigma2_norm});
    out.push_back({bn_name(i, "mu_popu"), bn.mu_popu});
    out.push_back({bn_name(i, "sigma2_popu"), bn.sigma2_popu});
    out.push_back({bn_name(i, "mode"), TensorF({1}, bn.mode == NormMode::FixedStats ? 0.0f : 1.0f)});
  }
  TensorF da({static_cast<Index>(model.da_layers.size())});
  for (std::size_t k = 0; k < model.da_layers.size(); ++k) da[static_cast<Index>(k)] = static_cast<float>(model.da_layers[k]);
  out.push_back({"model.da_layers", da});
  return out;
}

ModelF model_from_records(const std::vector<NamedTensor>& records, const ArchSpec& arch, const std::string& source) {
  ModelF model = build_model<float>(arch, 0);
  auto take = [&](const std::string& name, TensorF& dst) {
    const TensorF& src = find_record(records, name, source);
    if (src.shape() != dst.shape()) {
      throw FormatError(FormatError::Kind::DimensionMismatch, source + ": tensor '" + name + "' has shape " +
                                                                  shape_string(src.shape()) + ", architecture expects " +
                                                                  shape_string(dst.shape()));
    }
    dst = src;
  };
  for (const auto& p : model.parameters()) take(param_name(p), model.parameter(p));
  for (auto i : model.bn_layers()) {
    auto& bn = model.bn(i);
    take(bn_name(i, "mu_norm"), bn.mu_norm);
    take(bn_name(i, "sigma2_norm"), bn.sigma2_norm);
    take(bn_name(i, "mu_popu"), bn.mu_popu);
    take(bn_name(i, "sigma2_popu"), bn.sigma2_popu);
    TensorF mode({1});
    take(bn_name(i, "mode"), mode);
    bn.mode = mode[0] == 0.0f ? NormMode::FixedStats : NormMode::BatchStats;
  }
  const TensorF& da = find_record(records, "model.da_layers", source);
  if (da.rank() != 1) throw FormatError(FormatError::Kind::DimensionMismatch, source + ": model.da_layers must be rank 1");
  model.da_layers.clear();
  const auto bns = model.bn_layers();
  for (float v : da.data()) {
    const auto idx = static_cast<std::size_t>(v);
    if (v < 0.0f || std::floor(v) != v || std::find(bns.begin(), bns.end(), idx) == bns.end()) {
      throw FormatError(FormatError::Kind::DimensionMismatch,
                        source + ": model.da_layers entry " + std::to_string(v) + " is not a batch-norm layer");
    }
    model.da_layers.push_back(idx);
  }
  return model;
}

void save_weights(const ModelF& model, const std::filesystem::path& path) { write_records(path, model_records(model)); }

ModelF load_weights(const std::filesystem::path& path, const ArchSpec& arch) {
  return model_from_records(read_records(path), arch, path.string());
}

}  // namespace datta
