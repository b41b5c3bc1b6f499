#pragma once
// The desk-scale setup shared by the end-to-end tests: a 10-class synthetic set, the
// reference CNN trained on it, and its source statistics. Built once per process.

#include <filesystem>
#include <random>
#include <string>

#include "datta/experiment.hpp"

namespace datta::testing {

struct Desk {
  Dataset train;
  Dataset test;
  ModelF model;
  SourceStatsF stats;
};

inline constexpr Index kDeskTrainSamples = 2000;
inline constexpr Index kDeskTestSamples = 10000;

inline const Desk& desk() {
  static const Desk d = [] {
    Desk out;
    SyntheticSpec spec;
    spec.samples = kDeskTrainSamples;
    spec.seed = 1;
    out.train = generate_dataset(spec);
    spec.samples = kDeskTestSamples;
    spec.seed = 2;
    out.test = generate_dataset(spec);
    out.model = train_source(out.train, ArchSpec{}, TrainConfig{});
    out.stats = compute_source_stats(out.model, out.train, 128);
    return out;
  }();
  return d;
}

/// Method settings for the stream experiments. The entropy threshold is raised from the
/// library default because the synthetic source model is close to saturated confidence.
inline MethodConfig desk_method(Variant v) {
  MethodConfig m;
  m.variant = v;
  m.theta = 0.995;
  return m;
}

inline StreamSpec single_domain(Ordering ordering, CorruptionKind kind, Index budget, std::uint64_t seed) {
  StreamSpec s;
  s.ordering = ordering;
  s.delta = 0.1;
  s.batch_size = 64;
  s.seed = seed;
  DomainSpec d;
  d.corruption.kind = kind;
  d.corruption.severity = 5;
  d.corruption.seed = seed * 1000 + 7;
  d.budget = budget;
  s.domains = {d};
  return s;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  std::random_device rd;
  auto dir = std::filesystem::temp_directory_path() / ("datta_" + name + "_" + std::to_string(rd()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace datta::testing
