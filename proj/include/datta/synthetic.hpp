#pragma once

#include <cstdint>

#include "datta/dataset.hpp"

namespace datta {

/// Procedural K-class image set: each class is an oriented sinusoidal grating with its own
/// orientation, spatial frequency, and color mix; samples jitter phase, angle, frequency,
/// amplitude, and brightness, plus mild pixel noise.
struct SyntheticSpec {
  int num_classes = 10;
  Index channels = 3;
  Index height = 16;
  Index width = 16;
  Index samples = 2000;
  std::uint64_t seed = 0;
};

/// Labels are balanced (sample i has class i mod K before a seeded shuffle).
Dataset generate_dataset(const SyntheticSpec& spec);

}  // namespace datta
