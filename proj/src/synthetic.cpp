#include "datta/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>

namespace datta {

namespace {

struct ClassStyle {
  double angle;
  double frequency;  ///< cycles per pixel
  double color[3];
};

ClassStyle class_style(int k, int num_classes) {
  // Orientation cycles through five directions; frequency doubles for the second group.
  const int groups = std::max(1, (num_classes + 4) / 5);
  const int dir = k % 5;
  const int group = k / 5;
  ClassStyle s{};
  s.angle = std::numbers::pi * double(dir) / 5.0;
  s.frequency = 0.09 + 0.1 * double(group) / double(std::max(1, groups - 1));
  // distinct but overlapping color mixes
  s.color[0] = 0.55 + 0.45 * std::cos(2.0 * std::numbers::pi * double(k) / double(num_classes));
  s.color[1] = 0.55 + 0.45 * std::cos(2.0 * std::numbers::pi * double(k) / double(num_classes) + 2.1);
  s.color[2] = 0.55 + 0.45 * std::cos(2.0 * std::numbers::pi * double(k) / double(num_classes) + 4.2);
  return s;
}

}  // namespace

Dataset generate_dataset(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw std::invalid_argument("synthetic dataset needs at least two classes");
  if (spec.samples < 1 || spec.channels < 1 || spec.height < 1 || spec.width < 1)
    throw std::invalid_argument("synthetic dataset extents must be positive");
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> pixel_noise(0.0, 0.02);

  Dataset out;
  out.num_classes = spec.num_classes;
  out.labels.resize(static_cast<std::size_t>(spec.samples));
  for (Index i = 0; i < spec.samples; ++i) out.labels[static_cast<std::size_t>(i)] = static_cast<int>(i % spec.num_classes);
  std::shuffle(out.labels.begin(), out.labels.end(), rng);

  out.images = TensorF({spec.samples, spec.channels, spec.height, spec.width});
  const double cy = 0.5 * double(spec.height - 1), cx = 0.5 * double(spec.width - 1);
  for (Index n = 0; n < spec.samples; ++n) {
    const ClassStyle st = class_style(out.labels[static_cast<std::size_t>(n)], spec.num_classes);
    const double angle = st.angle + (u(rng) - 0.5) * 0.2;
    const double freq = st.frequency * (0.9 + 0.2 * u(rng));
    const double phase = 2.0 * std::numbers::pi * u(rng);
    const double amp = 0.25 + 0.15 * u(rng);
    const double bright = 0.5 + (u(rng) - 0.5) * 0.1;
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (Index c = 0; c < spec.channels; ++c) {
      const double tint = st.color[c % 3];
      for (Index y = 0; y < spec.height; ++y)
        for (Index x = 0; x < spec.width; ++x) {
          const double t = (double(x) - cx) * ca + (double(y) - cy) * sa;
          const double v = bright + (tint - 0.55) * 0.3 + amp * tint * std::sin(2.0 * std::numbers::pi * freq * t + phase) +
                           pixel_noise(rng);
          out.images.at(n, c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
  }
  return out;
}

}  // namespace datta
