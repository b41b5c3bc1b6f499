// datta: experiment driver for distribution-alignment test-time adaptation.
//
//   datta gen-dataset   --config cfg.json [--seed N] [--out DIR]
//   datta train-source  --config cfg.json [--seed N] [--out DIR]
//   datta extract-stats --config cfg.json [--out DIR]
//   datta run-tta       --config cfg.json [--seed N] [--out DIR]
//   datta compare       DIR DIR [DIR...] [--out FILE]
//
// Exit status: 0 success, 1 other failure, 2 configuration error, 3 numeric abort.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "datta/errors.hpp"
#include "datta/experiment.hpp"
#include "datta/model_io.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

datta::ExperimentConfig load(const CommonArgs& args) {
  auto cfg = datta::load_config(args.config);
  if (args.seed) datta::apply_seed(cfg, *args.seed);
  return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool with_seed) {
  cmd->add_option("--config", args.config, "experiment config file")->required()->check(CLI::ExistingFile);
  if (with_seed) cmd->add_option("--seed", args.seed, "overrides the config seed");
  cmd->add_option("--out", args.out, "output directory");
}

int gen_dataset(const CommonArgs& args) {
  auto cfg = load(args);
  std::filesystem::path train = cfg.data.train_dir, test = cfg.data.test_dir;
  if (!args.out.empty()) {
    train = std::filesystem::path(args.out) / "train";
    test = std::filesystem::path(args.out) / "test";
  }
  if (train.empty() || test.empty()) throw datta::ConfigError("data", "train_dir and test_dir are required (or pass --out)");
  auto spec = cfg.data.synthetic;
  if (args.seed) spec.seed = *args.seed;
  spec.samples = cfg.data.train_samples;
  datta::save_dataset(datta::generate_dataset(spec), train);
  spec.samples = cfg.data.test_samples;
  spec.seed = spec.seed * 2 + 1;  // disjoint draw for the test split
  datta::save_dataset(datta::generate_dataset(spec), test);
  std::cout << "wrote " << cfg.data.train_samples << " training samples to " << train.string() << " and "
            << cfg.data.test_samples << " test samples to " << test.string() << "\n";
  return kExitOk;
}

int train_source(const CommonArgs& args) {
  auto cfg = load(args);
  if (cfg.data.train_dir.empty()) throw datta::ConfigError("data.train_dir", "required");
  auto weights = args.out.empty() ? cfg.source.weights : std::filesystem::path(args.out) / "weights.datt";
  if (weights.empty()) throw datta::ConfigError("source.weights", "required (or pass --out)");
  const auto data = datta::load_dataset(cfg.data.train_dir);
  const auto model = datta::train_source(data, cfg.arch, cfg.source.train);
  if (weights.has_parent_path()) std::filesystem::create_directories(weights.parent_path());
  datta::save_weights(model, weights);
  std::cout << "training accuracy " << datta::format_number(100.0 * datta::evaluate_accuracy(model, data, 256))
            << "%, weights written to " << weights.string() << "\n";
  return kExitOk;
}

int extract_stats(const CommonArgs& args) {
  auto cfg = load(args);
  if (cfg.data.train_dir.empty()) throw datta::ConfigError("data.train_dir", "required");
  auto stats_path = args.out.empty() ? cfg.source.stats : std::filesystem::path(args.out) / "stats.datt";
  if (stats_path.empty()) throw datta::ConfigError("source.stats", "required (or pass --out)");
  const auto model = datta::load_weights(cfg.source.weights, cfg.arch);
  const auto stats = datta::compute_source_stats(model, datta::load_dataset(cfg.data.train_dir), cfg.source.stats_batch_size);
  if (stats_path.has_parent_path()) std::filesystem::create_directories(stats_path.parent_path());
  datta::save_stats(stats, stats_path);
  std::cout << "source statistics for " << stats.layers.size() << " layers written to " << stats_path.string() << "\n";
  return kExitOk;
}

int run_tta(const CommonArgs& args) {
  auto cfg = load(args);
  if (!args.out.empty()) cfg.output_dir = args.out;
  const auto trace = datta::run_experiment(cfg);
  if (trace.aborted) {
    std::cerr << "numeric abort: " << trace.abort_reason << " (partial trace in " << cfg.output_dir.string() << ")\n";
    return kExitNumeric;
  }
  std::cout << trace.method << ": error " << datta::format_number(trace.error_pct) << "% over " << trace.n_samples
            << " samples, " << trace.n_shifts << " shift(s) detected; CSV written to " << cfg.output_dir.string() << "\n";
  return kExitOk;
}

int compare(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<std::filesystem::path> paths(dirs.begin(), dirs.end());
  const std::string csv = datta::render_comparison_csv(datta::compare_traces(paths));
  if (out.empty()) {
    std::cout << csv;
  } else {
    std::ofstream f(out, std::ios::binary | std::ios::trunc);
    f << csv;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distribution-alignment test-time adaptation bench"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, stats_args, run_args;
  auto* gen = app.add_subcommand("gen-dataset", "generate the synthetic train/test sets");
  add_common(gen, gen_args, true);
  auto* train = app.add_subcommand("train-source", "train the source model");
  add_common(train, train_args, true);
  auto* stats = app.add_subcommand("extract-stats", "compute source reference statistics");
  add_common(stats, stats_args, false);
  auto* run = app.add_subcommand("run-tta", "adapt online over the configured stream");
  add_common(run, run_args, true);

  std::vector<std::string> compare_dirs;
  std::string compare_out;
  auto* cmp = app.add_subcommand("compare", "tabulate error rates of several traces");
  cmp->add_option("traces", compare_dirs, "trace directories")->required()->expected(2, -1);
  cmp->add_option("--out", compare_out, "write the table here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return gen_dataset(gen_args);
    if (*train) return train_source(train_args);
    if (*stats) return extract_stats(stats_args);
    if (*run) return run_tta(run_args);
    if (*cmp) return compare(compare_dirs, compare_out);
  } catch (const datta::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const datta::NumericAbort& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
