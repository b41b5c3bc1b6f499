#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "datta/dataset.hpp"
#include "datta/tensor.hpp"

namespace datta {

// ---------------------------------------------------------------------------
// Corruptions

enum class CorruptionKind { None, GaussianNoise, ImpulseNoise, Contrast, BoxBlur, Brightness };

std::string to_string(CorruptionKind kind);
/// Throws StreamError for unknown names.
CorruptionKind corruption_from_string(const std::string& name);

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::GaussianNoise;
  int severity = 5;  ///< 1..5
  std::uint64_t seed = 0;

  friend bool operator==(const CorruptionSpec&, const CorruptionSpec&) = default;
};

/// Per-severity parameters; index 0 is severity 1.
struct SeverityTable {
  std::array<double, 5> gaussian_sigma{0.04, 0.08, 0.12, 0.18, 0.26};
  std::array<double, 5> impulse_fraction{0.01, 0.03, 0.06, 0.10, 0.17};
  std::array<double, 5> contrast_factor{0.75, 0.6, 0.45, 0.3, 0.2};
  std::array<int, 5> blur_kernel{1, 3, 3, 5, 5};
  std::array<int, 5> blur_passes{1, 1, 2, 2, 3};
  std::array<double, 5> brightness_shift{0.05, 0.1, 0.15, 0.2, 0.3};
};

const SeverityTable& default_severity_table();

/// The additive field gaussian_noise corruption applies (before clipping) for a given seed.
TensorF gaussian_noise_field(const Shape& shape, double sigma, std::uint64_t seed);

/// Corrupts one [C,H,W] image with values in [0,1]; output is clipped to [0,1].
/// Deterministic in (kind, severity, seed, image).
TensorF corrupt(const TensorF& image, const CorruptionSpec& spec, const SeverityTable& table = default_severity_table());

/// Corrupts each image of an [N,C,H,W] stack; image k uses seed mix(spec.seed, key[k]).
TensorF corrupt_batch(const TensorF& images, const CorruptionSpec& spec, std::span<const Index> keys,
                      const SeverityTable& table = default_severity_table());

// ---------------------------------------------------------------------------
// Streams

enum class Ordering { Iid, Dirichlet, Sorted };

std::string to_string(Ordering o);
Ordering ordering_from_string(const std::string& name);

struct DomainSpec {
  CorruptionSpec corruption;
  Index budget = 0;  ///< samples drawn from the dataset for this domain
};

struct StreamSpec {
  Ordering ordering = Ordering::Dirichlet;
  double delta = 0.1;  ///< Dirichlet concentration
  Index batch_size = 64;
  std::vector<DomainSpec> domains;
  std::uint64_t seed = 0;
};

/// Ground truth for a batch; only the metrics path reads it.
struct BatchLabels {
  std::vector<int> labels;
};

struct Batch {
  TensorF images;  ///< [b,C,H,W]; the only part adaptation sees
  BatchLabels truth;
  int domain_id = 0;
  Index batch_index = 0;
  std::vector<Index> sample_ids;  ///< dataset indices, in batch order
};

/// Sample order for one domain (dataset indices, length = budget).
std::vector<Index> order_samples(const std::vector<int>& labels, int num_classes, Index budget, Ordering ordering,
                                 double delta, Index batch_size, std::uint64_t seed);

/// Realizes the full stream: domains back-to-back, each ordered and corrupted, then cut into
/// consecutive batches (the last batch of a domain may be short). Throws StreamError.
std::vector<Batch> make_stream(const Dataset& data, const StreamSpec& spec);

/// Shannon entropy (nats) of a label multiset. Throws StreamError when empty.
double shannon_label_entropy(std::span<const int> labels);

/// Largest single-class share of a label multiset.
double max_class_fraction(std::span<const int> labels);

}  // namespace datta
