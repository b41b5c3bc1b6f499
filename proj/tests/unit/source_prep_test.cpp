#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "datta/model_io.hpp"
#include "datta/source_prep.hpp"
#include "datta/synthetic.hpp"
#include "../support/desk.hpp"
#include "../support/oracles.hpp"

using namespace datta;
using namespace datta::testing;

namespace {

ArchSpec small_arch(Index classes = 10) {
  ArchSpec a;
  a.height = a.width = 8;
  a.pool = 2;
  a.num_classes = classes;
  return a;
}

Dataset small_data(Index n, std::uint64_t seed) {
  SyntheticSpec s;
  s.height = s.width = 8;
  s.samples = n;
  s.seed = seed;
  return generate_dataset(s);
}

ModelF trained_small() {
  static const ModelF m = [] {
    TrainConfig cfg;
    cfg.epochs = 2;
    return train_source(small_data(300, 1), small_arch(), cfg);
  }();
  return m;
}

void expect_stats_near(const SourceStatsF& a, const SourceStatsF& b, double tol) {
  ASSERT_EQ(a.layer_ids(), b.layer_ids());
  for (std::size_t k = 0; k < a.layers.size(); ++k) {
    EXPECT_LT(max_abs_diff(a.layers[k].m_bar, b.layers[k].m_bar), tol);
    EXPECT_LT(max_abs_diff(a.layers[k].d2_bar, b.layers[k].d2_bar), tol);
  }
}

}  // namespace

TEST(SourceStats, SingleSampleEqualsItsChannelStats) {
  const auto model = trained_small();
  const auto data = small_data(1, 5);
  const auto stats = compute_source_stats(model, data, 128);
  const auto acts = naive_activations(model, data.images);
  for (const auto& l : stats.layers) {
    const auto ref = naive_channel_stats(acts[l.layer + 1]);
    for (Index j = 0; j < l.m_bar.size(); ++j) {
      EXPECT_NEAR(l.m_bar[j], ref.mean[j], 1e-5);
      EXPECT_NEAR(l.d2_bar[j], ref.var[j], 1e-5);
    }
  }
}

TEST(SourceStats, DuplicatedDatasetGivesSameStats) {
  const auto model = trained_small();
  const auto data = small_data(40, 6);
  std::vector<Index> twice;
  for (Index i = 0; i < data.size(); ++i) twice.insert(twice.end(), {i, i});
  const Dataset doubled{data.gather(twice), data.gather_labels(twice), data.num_classes};
  expect_stats_near(compute_source_stats(model, data, 16), compute_source_stats(model, doubled, 16), 1e-6);
}

TEST(SourceStats, IndependentOfBatching) {
  const auto model = trained_small();
  const auto data = small_data(100, 7);
  expect_stats_near(compute_source_stats(model, data, 100), compute_source_stats(model, data, 7), 1e-5);
}

TEST(SourceStats, PopulationStatisticsCopied) {
  const auto model = trained_small();
  const auto stats = compute_source_stats(model, small_data(10, 8), 4);
  ASSERT_EQ(stats.population.size(), model.bn_layers().size());
  for (const auto& p : stats.population) {
    EXPECT_EQ(p.mu, model.bn(p.layer).mu_popu);
    EXPECT_EQ(p.sigma2, model.bn(p.layer).sigma2_popu);
  }
}

TEST(SourceStats, ChannelMismatch) {
  const auto model = trained_small();
  SyntheticSpec s;
  s.channels = 1;
  s.height = s.width = 8;
  s.samples = 4;
  EXPECT_THROW(compute_source_stats(model, generate_dataset(s), 4), ShapeError);
}

TEST(Training, ZeroEpochsReturnsInitialization) {
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto model = train_source(small_data(50, 9), small_arch(), cfg);
  const auto init = build_model<float>(small_arch(), cfg.seed);
  for (const auto& p : init.parameters()) EXPECT_EQ(model.parameter(p), init.parameter(p));
  for (auto i : init.bn_layers()) {
    EXPECT_EQ(model.bn(i).mu_popu, TensorF({model.bn(i).channels()}, 0.0f));
    EXPECT_EQ(model.bn(i).sigma2_popu, TensorF({model.bn(i).channels()}, 1.0f));
    EXPECT_EQ(model.bn(i).mode, NormMode::FixedStats);
  }
}

TEST(Training, SameSeedSameWeightFile) {
  TrainConfig cfg;
  cfg.epochs = 1;
  const auto data = small_data(120, 10);
  const auto a = encode_records(model_records(train_source(data, small_arch(), cfg)));
  const auto b = encode_records(model_records(train_source(data, small_arch(), cfg)));
  EXPECT_EQ(a, b);
}

TEST(Training, SeparableTwoClassToy) {
  // Class 0 dark, class 1 bright, with noise that never bridges the gap.
  const Index n = 200;
  Dataset data{TensorF({n, 3, 8, 8}), {}, 2};
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> noise(-0.15f, 0.15f);
  for (Index i = 0; i < n; ++i) {
    const int label = int(i % 2);
    data.labels.push_back(label);
    for (Index k = 0; k < 3 * 64; ++k) data.images[i * 192 + k] = (label ? 0.75f : 0.25f) + noise(rng);
  }
  TrainConfig cfg;
  cfg.epochs = 5;
  const auto model = train_source(data, small_arch(2), cfg);
  EXPECT_GT(evaluate_accuracy(model, data, 64), 0.95);
}

TEST(StatsFile, RoundTripIsBitExact) {
  const auto model = trained_small();
  const auto stats = compute_source_stats(model, small_data(30, 11), 8);
  const auto dir = scratch_dir("stats");
  save_stats(stats, dir / "s.datt");
  const auto back = load_stats(dir / "s.datt", model);
  ASSERT_EQ(back.layers.size(), stats.layers.size());
  for (std::size_t k = 0; k < stats.layers.size(); ++k) {
    EXPECT_EQ(back.layers[k].layer, stats.layers[k].layer);
    EXPECT_EQ(back.layers[k].m_bar, stats.layers[k].m_bar);
    EXPECT_EQ(back.layers[k].d2_bar, stats.layers[k].d2_bar);
  }
  for (std::size_t k = 0; k < stats.population.size(); ++k) {
    EXPECT_EQ(back.population[k].mu, stats.population[k].mu);
    EXPECT_EQ(back.population[k].sigma2, stats.population[k].sigma2);
  }
  std::filesystem::remove_all(dir);
}

TEST(StatsFile, LayerSetMismatch) {
  const auto model = trained_small();
  auto stats = compute_source_stats(model, small_data(10, 12), 8);
  stats.layers.pop_back();
  const auto dir = scratch_dir("stats_mismatch");
  save_stats(stats, dir / "s.datt");
  try {
    load_stats(dir / "s.datt", model);
    FAIL() << "no error";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatError::Kind::LayerMismatch);
  }
  std::filesystem::remove_all(dir);
}

TEST(StatsFile, HandBuiltTwoChannelFile) {
  // Record layout written out byte by byte rather than through the encoder.
  std::string bytes = "DATT";
  auto u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(char((v >> (8 * i)) & 0xff));
  };
  auto f32 = [&](float v) { u32(std::bit_cast<std::uint32_t>(v)); };
  auto record = [&](const std::string& name, float a, float b) {
    u32(std::uint32_t(name.size()));
    bytes += name;
    u32(1);
    u32(2);
    f32(a);
    f32(b);
  };
  u32(1);
  u32(4);
  record("source.layer1.m_bar", 0.5f, -1.25f);
  record("source.layer1.d2_bar", 2.0f, 0.125f);
  record("popu.layer1.mu", 0.0f, 3.0f);
  record("popu.layer1.sigma2", 1.0f, 4.5f);
  const auto dir = scratch_dir("stats_hand");
  {
    std::ofstream f(dir / "s.datt", std::ios::binary);
    f << bytes;
  }
  const auto stats = load_stats(dir / "s.datt");
  ASSERT_EQ(stats.layers.size(), 1u);
  EXPECT_EQ(stats.layers[0].layer, 1u);
  EXPECT_EQ(stats.layers[0].m_bar, TensorF({2}, std::vector<float>{0.5f, -1.25f}));
  EXPECT_EQ(stats.layers[0].d2_bar, TensorF({2}, std::vector<float>{2.0f, 0.125f}));
  ASSERT_EQ(stats.population.size(), 1u);
  EXPECT_EQ(stats.population[0].mu, TensorF({2}, std::vector<float>{0.0f, 3.0f}));
  EXPECT_EQ(stats.population[0].sigma2, TensorF({2}, std::vector<float>{1.0f, 4.5f}));
  std::filesystem::remove_all(dir);
}
