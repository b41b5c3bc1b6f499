#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "datta/dataset.hpp"
#include "datta/detector.hpp"
#include "datta/model.hpp"
#include "datta/source_prep.hpp"
#include "datta/stream.hpp"
#include "datta/synthetic.hpp"
#include "datta/tta.hpp"

namespace datta {

struct DataConfig {
  std::filesystem::path train_dir;
  std::filesystem::path test_dir;
  SyntheticSpec synthetic;  ///< gen-dataset template; `samples` is overridden per split
  Index train_samples = 2000;
  Index test_samples = 2000;
};

struct SourceConfig {
  std::filesystem::path weights;
  std::filesystem::path stats;
  TrainConfig train;
  Index stats_batch_size = 128;
  bool auto_prepare = false;  ///< run-tta trains/extracts when the files are missing
};

/// One experiment of record. A detector section switches on continual mode.
struct ExperimentConfig {
  ArchSpec arch;
  DataConfig data;
  SourceConfig source;
  MethodConfig method;
  StreamSpec stream;
  std::optional<DetectorConfig> detector;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";

  /// Throws ConfigError naming the offending field path.
  void validate() const;
};

/// Reads the config file (JSON, comments allowed). Relative paths resolve against the
/// file's directory. Unknown keys are rejected.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = ".");

/// Replaces the experiment seed and every seed derived from it.
void apply_seed(ExperimentConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Metrics

struct BatchRecord {
  Index batch_index = 0;
  int domain_id = 0;
  Index n_samples = 0;
  Index n_correct = 0;
  LossReport loss;
  bool shift_detected = false;
};

struct DomainRecord {
  int domain_id = 0;
  std::string corruption;
  int severity = 0;
  Index n_samples = 0;
  Index n_correct = 0;
  double error_pct = 0.0;
};

struct MetricsTrace {
  std::string method;
  std::vector<BatchRecord> batches;
  std::vector<DomainRecord> domains;
  Index n_samples = 0;
  Index n_correct = 0;
  double error_pct = 0.0;              ///< 100 (1 - correct / samples) over the whole stream
  double mean_domain_error_pct = 0.0;  ///< unweighted mean of the per-domain rates
  Index n_shifts = 0;
  bool aborted = false;
  std::string abort_reason;
};

/// Recomputes per-domain and overall rates from the batch records.
void finalize_trace(MetricsTrace& trace, const StreamSpec& spec);

/// Adapts online over a realized stream. Adaptation sees only `Batch::images`; labels are
/// read afterwards for scoring. With a detector, shifts trigger on_shift on the current batch.
/// A NumericAbort is caught: the trace is returned with `aborted` set.
MetricsTrace run_stream(const ModelF& model, const SourceStatsF& ref, const std::vector<Batch>& stream,
                        const StreamSpec& spec, const MethodConfig& method,
                        const std::optional<DetectorConfig>& detector);

/// Full pipeline from a config: load (or prepare) model and stats, realize the stream, adapt,
/// write batches.csv / domains.csv / summary.csv into output_dir.
MetricsTrace run_experiment(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// CSV

/// "%.6g" with '.' decimal point.
std::string format_number(double v);

void write_trace_csv(const MetricsTrace& trace, const StreamSpec& spec, const std::filesystem::path& dir);

struct ComparisonRow {
  std::string method;
  std::vector<double> domain_error_pct;
  double mean_error_pct = 0.0;
};

struct ComparisonTable {
  std::vector<std::string> domains;  ///< column labels "<id>:<corruption>"
  std::vector<ComparisonRow> rows;
};

/// Loads trace directories written by run_experiment and aligns them by domain. Throws
/// CsvError for malformed files and StreamError when the traces cover different streams.
ComparisonTable compare_traces(const std::vector<std::filesystem::path>& dirs);
std::string render_comparison_csv(const ComparisonTable& table);

}  // namespace datta
