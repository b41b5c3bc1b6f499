#include "datta/stream.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "datta/errors.hpp"

namespace datta {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined key
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

float clip01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

void box_blur_pass(TensorF& img, int k) {
  if (k <= 1) return;
  const Index c = img.dim(0), h = img.dim(1), w = img.dim(2), r = k / 2;
  TensorF tmp = img;
  auto at = [&](TensorF& t, Index ch, Index y, Index x) -> float& { return t[(ch * h + y) * w + x]; };
  // horizontal then vertical, edges replicated
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        double s = 0.0;
        for (Index d = -r; d <= r; ++d) s += at(img, ch, y, std::clamp<Index>(x + d, 0, w - 1));
        at(tmp, ch, y, x) = static_cast<float>(s / double(k));
      }
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        double s = 0.0;
        for (Index d = -r; d <= r; ++d) s += at(tmp, ch, std::clamp<Index>(y + d, 0, h - 1), x);
        at(img, ch, y, x) = static_cast<float>(s / double(k));
      }
}

}  // namespace

std::string to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::None: return "none";
    case CorruptionKind::GaussianNoise: return "gaussian_noise";
    case CorruptionKind::ImpulseNoise: return "impulse_noise";
    case CorruptionKind::Contrast: return "contrast";
    case CorruptionKind::BoxBlur: return "box_blur";
    case CorruptionKind::Brightness: return "brightness";
  }
  return "unknown";
}

CorruptionKind corruption_from_string(const std::string& name) {
  for (auto k : {CorruptionKind::None, CorruptionKind::GaussianNoise, CorruptionKind::ImpulseNoise,
                 CorruptionKind::Contrast, CorruptionKind::BoxBlur, CorruptionKind::Brightness}) {
    if (to_string(k) == name) return k;
  }
  throw StreamError("unknown corruption kind '" + name + "'");
}

const SeverityTable& default_severity_table() {
  static const SeverityTable table;
  return table;
}

TensorF gaussian_noise_field(const Shape& shape, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  TensorF out(shape);
  for (auto& v : out.data()) v = static_cast<float>(noise(rng));
  return out;
}

TensorF corrupt(const TensorF& image, const CorruptionSpec& spec, const SeverityTable& table) {
  if (image.rank() != 3) throw ShapeError("corrupt expects a [C,H,W] image, got " + shape_string(image.shape()));
  for (float v : image.data())
    if (!(v >= 0.0f && v <= 1.0f)) throw StreamError("corrupt: pixel values must lie in [0,1]");
  if (spec.kind != CorruptionKind::None && (spec.severity < 1 || spec.severity > 5))
    throw StreamError("corruption severity must be in 1..5, got " + std::to_string(spec.severity));
  const std::size_t s = static_cast<std::size_t>(std::max(spec.severity, 1) - 1);
  std::mt19937_64 rng(spec.seed);
  TensorF out = image;
  switch (spec.kind) {
    case CorruptionKind::None:
      break;
    case CorruptionKind::GaussianNoise: {
      const TensorF noise = gaussian_noise_field(image.shape(), table.gaussian_sigma[s], spec.seed);
      for (Index i = 0; i < out.size(); ++i) out[i] = clip01(double(out[i]) + double(noise[i]));
      break;
    }
    case CorruptionKind::ImpulseNoise: {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (auto& v : out.data()) {
        const double r = u(rng);
        if (r < table.impulse_fraction[s]) v = r < 0.5 * table.impulse_fraction[s] ? 0.0f : 1.0f;
      }
      break;
    }
    case CorruptionKind::Contrast: {
      const double c = table.contrast_factor[s];
      for (auto& v : out.data()) v = clip01((double(v) - 0.5) * c + 0.5);
      break;
    }
    case CorruptionKind::BoxBlur:
      for (int p = 0; p < table.blur_passes[s]; ++p) box_blur_pass(out, table.blur_kernel[s]);
      for (auto& v : out.data()) v = clip01(v);
      break;
    case CorruptionKind::Brightness: {
      const double b = table.brightness_shift[s];
      for (auto& v : out.data()) v = clip01(double(v) + b);
      break;
    }
  }
  return out;
}

TensorF corrupt_batch(const TensorF& images, const CorruptionSpec& spec, std::span<const Index> keys,
                      const SeverityTable& table) {
  if (images.rank() != 4 || static_cast<Index>(keys.size()) != images.dim(0))
    throw ShapeError("corrupt_batch expects [N,C,H,W] and one key per image");
  TensorF out(images.shape());
  const Index n = images.size() / std::max<Index>(images.dim(0), 1);
  const Shape one{images.dim(1), images.dim(2), images.dim(3)};
  for (Index i = 0; i < images.dim(0); ++i) {
    TensorF img(one, std::vector<float>(images.data().begin() + i * n, images.data().begin() + (i + 1) * n));
    CorruptionSpec local = spec;
    local.seed = mix(spec.seed, static_cast<std::uint64_t>(keys[static_cast<std::size_t>(i)]));
    const TensorF c = corrupt(img, local, table);
    std::copy(c.data().begin(), c.data().end(), out.data().begin() + i * n);
  }
  return out;
}

std::string to_string(Ordering o) {
  switch (o) {
    case Ordering::Iid: return "iid";
    case Ordering::Dirichlet: return "dirichlet";
    case Ordering::Sorted: return "sorted";
  }
  return "unknown";
}

Ordering ordering_from_string(const std::string& name) {
  if (name == "iid") return Ordering::Iid;
  if (name == "dirichlet") return Ordering::Dirichlet;
  if (name == "sorted") return Ordering::Sorted;
  throw StreamError("unknown ordering '" + name + "'");
}

std::vector<Index> order_samples(const std::vector<int>& labels, int num_classes, Index budget, Ordering ordering,
                                 double delta, Index batch_size, std::uint64_t seed) {
  const Index n = static_cast<Index>(labels.size());
  if (budget < 1 || budget > n)
    throw StreamError("budget " + std::to_string(budget) + " outside 1.." + std::to_string(n));
  if (batch_size < 1 || batch_size > budget)
    throw StreamError("batch size " + std::to_string(batch_size) + " outside 1..budget (" + std::to_string(budget) + ")");
  if (ordering == Ordering::Dirichlet && !(delta > 0.0 && std::isfinite(delta)))
    throw StreamError("Dirichlet delta must be positive and finite");

  std::mt19937_64 rng(seed);
  std::vector<Index> pool(static_cast<std::size_t>(n));
  std::iota(pool.begin(), pool.end(), Index{0});
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(static_cast<std::size_t>(budget));

  switch (ordering) {
    case Ordering::Iid:
      return pool;
    case Ordering::Sorted:
      std::stable_sort(pool.begin(), pool.end(),
                       [&](Index a, Index b) { return labels[static_cast<std::size_t>(a)] < labels[static_cast<std::size_t>(b)]; });
      return pool;
    case Ordering::Dirichlet:
      break;
  }

  const Index slots = (budget + batch_size - 1) / batch_size;
  std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(std::max(num_classes, 1)));
  for (Index i : pool) {
    const int l = labels[static_cast<std::size_t>(i)];
    if (l < 0 || l >= num_classes) throw StreamError("label " + std::to_string(l) + " outside class range");
    by_class[static_cast<std::size_t>(l)].push_back(i);
  }
  std::vector<std::vector<Index>> slot_items(static_cast<std::size_t>(slots));
  std::gamma_distribution<double> gamma(delta, 1.0);
  for (auto& members : by_class) {
    std::vector<double> w(static_cast<std::size_t>(slots));
    double total = 0.0;
    for (auto& x : w) total += (x = gamma(rng));
    if (!(total > 0.0)) {
      // every draw underflowed: all mass on one slot
      std::uniform_int_distribution<Index> pick(0, slots - 1);
      std::fill(w.begin(), w.end(), 0.0);
      w[static_cast<std::size_t>(pick(rng))] = 1.0;
    }
    std::discrete_distribution<Index> slot_of(w.begin(), w.end());
    for (Index i : members) slot_items[static_cast<std::size_t>(slot_of(rng))].push_back(i);
  }
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(budget));
  for (auto& items : slot_items) {
    std::shuffle(items.begin(), items.end(), rng);
    out.insert(out.end(), items.begin(), items.end());
  }
  return out;
}

std::vector<Batch> make_stream(const Dataset& data, const StreamSpec& spec) {
  if (spec.domains.empty()) throw StreamError("stream needs at least one domain");
  if (spec.batch_size < 1) throw StreamError("batch size must be at least 1");
  std::vector<Batch> out;
  Index batch_index = 0;
  for (std::size_t d = 0; d < spec.domains.size(); ++d) {
    const auto& dom = spec.domains[d];
    if (dom.budget > data.size())
      throw StreamError("domain " + std::to_string(d) + " budget " + std::to_string(dom.budget) + " exceeds dataset size " +
                        std::to_string(data.size()));
    const auto order = order_samples(data.labels, data.num_classes, dom.budget, spec.ordering, spec.delta,
                                     spec.batch_size, mix(spec.seed, d));
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(spec.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(spec.batch_size));
      std::span<const Index> ids(order.data() + start, end - start);
      Batch b;
      b.images = corrupt_batch(data.gather(ids), dom.corruption, ids);
      b.truth.labels = data.gather_labels(ids);
      b.domain_id = static_cast<int>(d);
      b.batch_index = batch_index++;
      b.sample_ids.assign(ids.begin(), ids.end());
      out.push_back(std::move(b));
    }
  }
  return out;
}

double shannon_label_entropy(std::span<const int> labels) {
  if (labels.empty()) throw StreamError("label entropy of an empty batch");
  std::map<int, Index> counts;
  for (int l : labels) ++counts[l];
  double h = 0.0;
  const double n = double(labels.size());
  for (const auto& [label, c] : counts) {
    const double p = double(c) / n;
    h -= p * std::log(p);
  }
  return h;
}

double max_class_fraction(std::span<const int> labels) {
  if (labels.empty()) throw StreamError("class fraction of an empty batch");
  std::map<int, Index> counts;
  Index best = 0;
  for (int l : labels) best = std::max(best, ++counts[l]);
  return double(best) / double(labels.size());
}

}  // namespace datta
