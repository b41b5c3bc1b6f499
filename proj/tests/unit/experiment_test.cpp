#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

#include <gtest/gtest.h>

#include "datta/errors.hpp"
#include "datta/experiment.hpp"
#include "../support/desk.hpp"

using namespace datta;
using namespace datta::testing;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << s;
}

std::string config_error_path(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.path();
  }
  return "<none>";
}

// Small on-disk setup: 8x8 images, one training epoch.
struct MiniSetup {
  std::filesystem::path dir;
  std::string config;

  MiniSetup() : dir(scratch_dir("mini")) {
    SyntheticSpec s;
    s.height = s.width = 8;
    s.samples = 300;
    s.seed = 1;
    save_dataset(generate_dataset(s), dir / "train");
    s.seed = 2;
    save_dataset(generate_dataset(s), dir / "test");
    config = R"({
      // comments are allowed
      "seed": 3,
      "architecture": {"height": 8, "width": 8, "pool": 2},
      "data": {"train_dir": "train", "test_dir": "test"},
      "source": {"weights": "w.datt", "stats": "s.datt", "epochs": 1, "auto_prepare": true},
      "method": {"variant": "da_em"},
      "stream": {"ordering": "dirichlet", "delta": 0.1, "batch_size": 32,
                 "domains": [{"corruption": "gaussian_noise", "budget": 150},
                             {"corruption": "contrast", "budget": 150}]},
      "detector": {"short_window": 2, "long_window": 4, "warmup": 4, "cooldown": 2}
    })";
  }
  ~MiniSetup() { std::filesystem::remove_all(dir); }

  ExperimentConfig load(const std::string& out) const {
    auto cfg = parse_config(config, dir);
    cfg.output_dir = dir / out;
    return cfg;
  }
};

double offline_error(const ModelF& model, const std::vector<Batch>& stream) {
  Index wrong = 0, total = 0;
  for (const auto& b : stream) {
    const auto pred = predict(model, b.images);
    for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != b.truth.labels[i];
    total += Index(pred.size());
  }
  return 100.0 * double(wrong) / double(total);
}

}  // namespace

TEST(Config, DefaultsAndOverrides) {
  const auto cfg = parse_config(R"({"method": {"variant": "da_only", "alpha": 0.5}, "stream": {"domains": [{"budget": 64}]}})");
  EXPECT_EQ(cfg.method.variant, Variant::DAOnly);
  EXPECT_EQ(cfg.method.alpha, 0.5);
  EXPECT_EQ(cfg.method.theta, 0.9);
  EXPECT_EQ(cfg.stream.domains.size(), 1u);
  EXPECT_EQ(cfg.stream.domains[0].corruption.severity, 5);
  EXPECT_FALSE(cfg.detector.has_value());
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_EQ(config_error_path(R"({"method": {"thta": 0.5}})"), "method.thta");
  EXPECT_EQ(config_error_path(R"({"method": {"variant": "magic"}})"), "method.variant");
  EXPECT_EQ(config_error_path(R"({"method": {"theta": "high"}})"), "method.theta");
  EXPECT_EQ(config_error_path(R"({"stream": {"batch_size": 64, "domains": [{"budget": 10}]}})"), "stream.domains[0].budget");
  EXPECT_EQ(config_error_path(R"({"stream": {"domains": [{"budget": 100}]}, "detector": {}})"), "detector");
  EXPECT_EQ(config_error_path(R"({"detector": {"tau": 0.5}, "stream": {"domains": [{"budget": 100}, {"budget": 100}]}})"),
            "detector.tau");
  EXPECT_EQ(config_error_path("{ not json"), "<root>");
}

TEST(Csv, NumberFormat) {
  EXPECT_EQ(format_number(12.5), "12.5");
  EXPECT_EQ(format_number(1.0 / 3.0), "0.333333");
  EXPECT_EQ(format_number(1234567.0), "1.23457e+06");
  EXPECT_EQ(format_number(0.0), "0");
}

TEST(Experiment, SameConfigSameBytes) {
  const MiniSetup mini;
  for (const char* run : {"a", "b"}) run_experiment(mini.load(run));
  for (const char* f : {"batches.csv", "domains.csv", "summary.csv"}) {
    const auto a = slurp(mini.dir / "a" / f);
    EXPECT_FALSE(a.empty());
    EXPECT_EQ(a, slurp(mini.dir / "b" / f)) << f;
  }
  EXPECT_EQ(slurp(mini.dir / "a" / "summary.csv").substr(0, 24), "method,ordering,delta,n_");
}

TEST(Experiment, CompareSelfGivesIdenticalRows) {
  const MiniSetup mini;
  run_experiment(mini.load("a"));
  const auto table = compare_traces({mini.dir / "a", mini.dir / "a"});
  ASSERT_EQ(table.rows.size(), 2u);
  EXPECT_EQ(table.rows[0].domain_error_pct, table.rows[1].domain_error_pct);
  EXPECT_EQ(table.rows[0].mean_error_pct, table.rows[1].mean_error_pct);
  EXPECT_EQ(table.domains, (std::vector<std::string>{"0:gaussian_noise-5", "1:contrast-5"}));
  const auto csv = render_comparison_csv(table);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "method,0:gaussian_noise-5,1:contrast-5,mean");
}

TEST(Experiment, CompareMalformedCsvNamesFileAndLine) {
  const MiniSetup mini;
  run_experiment(mini.load("a"));
  std::filesystem::copy(mini.dir / "a", mini.dir / "bad");
  auto text = slurp(mini.dir / "bad" / "domains.csv");
  const auto second_row = text.find('\n', text.find('\n') + 1) + 1;
  text.replace(text.rfind(',') , std::string::npos, ",oops\n");
  ASSERT_GT(text.size(), second_row);
  spit(mini.dir / "bad" / "domains.csv", text);
  try {
    compare_traces({mini.dir / "a", mini.dir / "bad"});
    FAIL() << "no error";
  } catch (const CsvError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("domains.csv:3"), std::string::npos) << what;
  }
}

TEST(Experiment, CompareRejectsDifferentStreams) {
  const MiniSetup mini;
  run_experiment(mini.load("a"));
  auto cfg = mini.load("short");
  cfg.stream.domains.pop_back();
  cfg.detector.reset();
  run_experiment(cfg);
  EXPECT_THROW(compare_traces({mini.dir / "a", mini.dir / "short"}), StreamError);
}

TEST(Experiment, SourceEqualsOfflineEvaluation) {
  const auto& d = desk();
  const auto spec = single_domain(Ordering::Dirichlet, CorruptionKind::GaussianNoise, 1000, 7);
  const auto stream = make_stream(d.test, spec);
  const auto trace = run_stream(d.model, d.stats, stream, spec, desk_method(Variant::Source), std::nullopt);
  EXPECT_EQ(trace.error_pct, offline_error(d.model, stream));
}

TEST(Experiment, TtbnOnSortedBatchesIsNearChance) {
  const auto& d = desk();
  const auto spec = single_domain(Ordering::Sorted, CorruptionKind::GaussianNoise, 2000, 8);
  const auto trace = run_stream(d.model, d.stats, make_stream(d.test, spec), spec, desk_method(Variant::TTBN), std::nullopt);
  // 2000 samples over 10 classes: chance is 90% error, binomial sd about 0.7 points.
  EXPECT_NEAR(trace.error_pct, 90.0, 5.0);
}

TEST(Experiment, TtbnNoWorseThanSourceOnIid) {
  const auto& d = desk();
  const auto spec = single_domain(Ordering::Iid, CorruptionKind::GaussianNoise, 2000, 9);
  const auto stream = make_stream(d.test, spec);
  const auto source = run_stream(d.model, d.stats, stream, spec, desk_method(Variant::Source), std::nullopt);
  const auto ttbn = run_stream(d.model, d.stats, stream, spec, desk_method(Variant::TTBN), std::nullopt);
  EXPECT_LE(ttbn.error_pct, source.error_pct);
}

#ifdef DATTA_CLI_PATH
TEST(Cli, ExitCodes) {
  const auto dir = scratch_dir("cli");
  auto status = [&](const std::string& args) {
    const int rc = std::system((std::string(DATTA_CLI_PATH) + " " + args + " > /dev/null 2>&1").c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  };
  spit(dir / "bad.json", R"({"method": {"unknown_field": 1}})");
  EXPECT_EQ(status("run-tta --config " + (dir / "bad.json").string()), 2);
  spit(dir / "noweights.json", R"({"data": {"test_dir": "missing"}, "source": {"weights": "w", "stats": "s"},
                                   "stream": {"domains": [{"budget": 64}]}})");
  EXPECT_EQ(status("run-tta --config " + (dir / "noweights.json").string()), 2);
  EXPECT_EQ(status("compare " + (dir / "x").string() + " " + (dir / "y").string()), 1);
  spit(dir / "gen.json", R"({"data": {"train_samples": 20, "test_samples": 20}})");
  EXPECT_EQ(status("gen-dataset --config " + (dir / "gen.json").string() + " --out " + (dir / "d").string()), 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "d" / "train" / "images.datt"));
  std::filesystem::remove_all(dir);
}
#endif
