#include "datta/tta.hpp"

#include <cmath>

namespace datta {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Source: return "source";
    case Variant::TTBN: return "ttbn";
    case Variant::EMOnly: return "em_only";
    case Variant::DAOnly: return "da_only";
    case Variant::DAEM: return "da_em";
  }
  return "unknown";
}

Variant variant_from_string(const std::string& name) {
  for (auto v : {Variant::Source, Variant::TTBN, Variant::EMOnly, Variant::DAOnly, Variant::DAEM})
    if (to_string(v) == name) return v;
  throw ConfigError("method.variant", "unknown variant '" + name + "'");
}

std::string to_string(LayerSelection s) {
  switch (s) {
    case LayerSelection::All: return "all";
    case LayerSelection::LowHalf: return "low_half";
    case LayerSelection::HighHalf: return "high_half";
  }
  return "unknown";
}

LayerSelection layer_selection_from_string(const std::string& name) {
  for (auto s : {LayerSelection::All, LayerSelection::LowHalf, LayerSelection::HighHalf})
    if (to_string(s) == name) return s;
  throw ConfigError("method.da_layer_selection", "unknown selection '" + name + "'");
}

void MethodConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("method.alpha", "must lie in [0,1]");
  if (!(theta >= 0.0 && theta <= 1.0)) throw ConfigError("method.theta", "must lie in [0,1]");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("method.lr", "must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("method.momentum", "must lie in [0,1)");
}

std::vector<std::size_t> select_da_layers(const std::vector<std::size_t>& bn_layers, LayerSelection sel) {
  if (bn_layers.empty()) throw ShapeError("model has no DA layers");
  const std::size_t low = (bn_layers.size() + 1) / 2;
  switch (sel) {
    case LayerSelection::All:
      return bn_layers;
    case LayerSelection::LowHalf:
      return {bn_layers.begin(), bn_layers.begin() + static_cast<std::ptrdiff_t>(low)};
    case LayerSelection::HighHalf:
      if (bn_layers.size() == 1) return bn_layers;
      return {bn_layers.begin() + static_cast<std::ptrdiff_t>(low), bn_layers.end()};
  }
  return bn_layers;
}

}  // namespace datta
