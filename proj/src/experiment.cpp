#include "datta/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "datta/errors.hpp"
#include "datta/model_io.hpp"

namespace datta {

// ---------------------------------------------------------------------------
// Online loop

void finalize_trace(MetricsTrace& trace, const StreamSpec& spec) {
  trace.domains.clear();
  for (std::size_t d = 0; d < spec.domains.size(); ++d) {
    trace.domains.push_back({static_cast<int>(d), to_string(spec.domains[d].corruption.kind),
                             spec.domains[d].corruption.severity, 0, 0, 0.0});
  }
  trace.n_samples = trace.n_correct = trace.n_shifts = 0;
  for (const auto& b : trace.batches) {
    auto& dom = trace.domains.at(static_cast<std::size_t>(b.domain_id));
    dom.n_samples += b.n_samples;
    dom.n_correct += b.n_correct;
    trace.n_samples += b.n_samples;
    trace.n_correct += b.n_correct;
    trace.n_shifts += b.shift_detected ? 1 : 0;
  }
  double sum = 0.0;
  Index counted = 0;
  for (auto& dom : trace.domains) {
    if (dom.n_samples == 0) continue;
    dom.error_pct = 100.0 * (1.0 - double(dom.n_correct) / double(dom.n_samples));
    sum += dom.error_pct;
    ++counted;
  }
  trace.mean_domain_error_pct = counted ? sum / double(counted) : 0.0;
  trace.error_pct = trace.n_samples ? 100.0 * (1.0 - double(trace.n_correct) / double(trace.n_samples)) : 0.0;
}

namespace {

/// The adaptation side of the loop. It only ever receives images.
class OnlineAdapter {
 public:
  OnlineAdapter(const ModelF& model, const SourceStatsF& ref, const MethodConfig& method,
                const std::optional<DetectorConfig>& detector)
      : state_(model), ref_(ref), method_(method) {
    if (detector) detector_.emplace(*detector);
  }

  struct Outcome {
    std::vector<int> predictions;
    LossReport loss;
    bool shift = false;
  };

  Outcome step(const TensorF& images) {
    if (method_.variant != Variant::Source && !state_.initialized) init_adaptation(state_, images, method_);
    auto r = adapt_step(state_, images, method_, ref_);
    Outcome out{std::move(r.predictions), r.report, false};
    if (detector_ && detector_->observe(out.loss.l_da) == ShiftDecision::ShiftDetected) {
      on_shift(state_, *detector_, images, method_.alpha);
      out.shift = true;
    }
    return out;
  }

 private:
  AdaptationState<float> state_;
  const SourceStatsF& ref_;
  MethodConfig method_;
  std::optional<ShiftDetector> detector_;
};

Index count_correct(const std::vector<int>& predictions, const BatchLabels& truth) {
  Index c = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) c += predictions[i] == truth.labels.at(i);
  return c;
}

}  // namespace

MetricsTrace run_stream(const ModelF& model, const SourceStatsF& ref, const std::vector<Batch>& stream,
                        const StreamSpec& spec, const MethodConfig& method,
                        const std::optional<DetectorConfig>& detector) {
  method.validate();
  MetricsTrace trace;
  trace.method = to_string(method.variant);
  OnlineAdapter adapter(model, ref, method, detector);
  for (const auto& batch : stream) {
    OnlineAdapter::Outcome outcome;
    try {
      outcome = adapter.step(batch.images);
    } catch (const NumericAbort& e) {
      trace.aborted = true;
      trace.abort_reason = std::string(e.what()) + " (batch " + std::to_string(batch.batch_index) + ")";
      break;
    }
    trace.batches.push_back({batch.batch_index, batch.domain_id, static_cast<Index>(batch.truth.labels.size()),
                             count_correct(outcome.predictions, batch.truth), outcome.loss, outcome.shift});
  }
  finalize_trace(trace, spec);
  return trace;
}

MetricsTrace run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.data.test_dir.empty()) throw ConfigError("data.test_dir", "required for run-tta");
  if (cfg.source.weights.empty()) throw ConfigError("source.weights", "required for run-tta");
  if (cfg.source.stats.empty()) throw ConfigError("source.stats", "required for run-tta");

  ModelF model;
  if (std::filesystem::exists(cfg.source.weights)) {
    model = load_weights(cfg.source.weights, cfg.arch);
  } else if (cfg.source.auto_prepare) {
    if (cfg.data.train_dir.empty()) throw ConfigError("data.train_dir", "required to train the source model");
    model = train_source(load_dataset(cfg.data.train_dir), cfg.arch, cfg.source.train);
    save_weights(model, cfg.source.weights);
  } else {
    throw ConfigError("source.weights", "file not found: " + cfg.source.weights.string());
  }

  SourceStatsF stats;
  if (std::filesystem::exists(cfg.source.stats)) {
    stats = load_stats(cfg.source.stats, model);
  } else if (cfg.source.auto_prepare) {
    if (cfg.data.train_dir.empty()) throw ConfigError("data.train_dir", "required to extract source statistics");
    stats = compute_source_stats(model, load_dataset(cfg.data.train_dir), cfg.source.stats_batch_size);
    save_stats(stats, cfg.source.stats);
  } else {
    throw ConfigError("source.stats", "file not found: " + cfg.source.stats.string());
  }

  const Dataset test = load_dataset(cfg.data.test_dir);
  std::vector<Batch> stream;
  try {
    stream = make_stream(test, cfg.stream);
  } catch (const StreamError& e) {
    throw ConfigError("stream", e.what());
  }
  MetricsTrace trace = run_stream(model, stats, stream, cfg.stream, cfg.method, cfg.detector);
  write_trace_csv(trace, cfg.stream, cfg.output_dir);
  return trace;
}

// ---------------------------------------------------------------------------
// CSV

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  std::string s(buf);
  for (auto& ch : s)
    if (ch == ',') ch = '.';  // locale guard
  return s == "-0" ? "0" : s;
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error(path.string() + ": cannot open for writing");
  f << text;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const std::filesystem::path& path, const std::vector<std::string>& expect_header) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CsvError(path.string() + ":0: cannot open");
  CsvTable t;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto cells = split_csv_line(line);
    if (line_no == 1) {
      if (cells != expect_header) throw CsvError(path.string() + ":1: unexpected header '" + line + "'");
      t.header = std::move(cells);
      continue;
    }
    if (line.empty()) continue;
    if (cells.size() != t.header.size()) {
      throw CsvError(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(t.header.size()) +
                     " fields, got " + std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  if (line_no == 0) throw CsvError(path.string() + ":1: empty file");
  return t;
}

double parse_number(const std::string& s, const std::filesystem::path& path, std::size_t row) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw CsvError(path.string() + ":" + std::to_string(row + 2) + ": not a number '" + s + "'");
}

const std::vector<std::string> kBatchHeader{"batch_index", "domain_id", "n_samples", "n_correct",  "l_da",
                                            "l_em",        "l_final",   "n_confident", "shift_detected"};
const std::vector<std::string> kDomainHeader{"domain_id", "corruption", "severity", "n_samples", "n_correct", "error_pct"};
const std::vector<std::string> kSummaryHeader{"method",    "ordering",  "delta",     "n_batches",            "n_samples",
                                              "n_correct", "error_pct", "mean_domain_error_pct", "n_shifts", "aborted"};

std::string join(const std::vector<std::string>& cells) {
  std::string s;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) s += ',';
    s += cells[i];
  }
  return s + '\n';
}

}  // namespace

void write_trace_csv(const MetricsTrace& trace, const StreamSpec& spec, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string batches = join(kBatchHeader);
  for (const auto& b : trace.batches) {
    batches += join({std::to_string(b.batch_index), std::to_string(b.domain_id), std::to_string(b.n_samples),
                     std::to_string(b.n_correct), format_number(b.loss.l_da), format_number(b.loss.l_em),
                     format_number(b.loss.l_final), std::to_string(b.loss.n_confident), b.shift_detected ? "1" : "0"});
  }
  std::string domains = join(kDomainHeader);
  for (const auto& d : trace.domains) {
    domains += join({std::to_string(d.domain_id), d.corruption, std::to_string(d.severity), std::to_string(d.n_samples),
                     std::to_string(d.n_correct), format_number(d.error_pct)});
  }
  std::string summary = join(kSummaryHeader);
  summary += join({trace.method, to_string(spec.ordering), format_number(spec.delta), std::to_string(trace.batches.size()),
                   std::to_string(trace.n_samples), std::to_string(trace.n_correct), format_number(trace.error_pct),
                   format_number(trace.mean_domain_error_pct), std::to_string(trace.n_shifts), trace.aborted ? "1" : "0"});
  write_file(dir / "batches.csv", batches);
  write_file(dir / "domains.csv", domains);
  write_file(dir / "summary.csv", summary);
}

ComparisonTable compare_traces(const std::vector<std::filesystem::path>& dirs) {
  if (dirs.size() < 2) throw std::invalid_argument("compare needs at least two traces");
  ComparisonTable table;
  std::vector<std::pair<std::string, Index>> reference;
  for (const auto& dir : dirs) {
    const auto summary_path = dir / "summary.csv";
    const auto domains_path = dir / "domains.csv";
    const CsvTable summary = read_csv(summary_path, kSummaryHeader);
    if (summary.rows.size() != 1) throw CsvError(summary_path.string() + ":2: expected exactly one summary row");
    const CsvTable domains = read_csv(domains_path, kDomainHeader);

    ComparisonRow row;
    row.method = summary.rows[0][0];
    std::vector<std::pair<std::string, Index>> shape;
    for (std::size_t r = 0; r < domains.rows.size(); ++r) {
      const auto& cells = domains.rows[r];
      const std::string label = cells[0] + ":" + cells[1] + "-" + cells[2];
      shape.emplace_back(label, static_cast<Index>(parse_number(cells[3], domains_path, r)));
      row.domain_error_pct.push_back(parse_number(cells[5], domains_path, r));
    }
    row.mean_error_pct = parse_number(summary.rows[0][7], summary_path, 0);
    if (reference.empty()) {
      reference = shape;
      for (const auto& [label, n] : shape) table.domains.push_back(label);
    } else if (shape != reference) {
      throw StreamError("trace " + dir.string() + " covers a different stream than " + dirs.front().string());
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string render_comparison_csv(const ComparisonTable& table) {
  std::vector<std::string> header{"method"};
  header.insert(header.end(), table.domains.begin(), table.domains.end());
  header.push_back("mean");
  std::string out = join(header);
  for (const auto& row : table.rows) {
    std::vector<std::string> cells{row.method};
    for (double e : row.domain_error_pct) cells.push_back(format_number(e));
    cells.push_back(format_number(row.mean_error_pct));
    out += join(cells);
  }
  return out;
}

}  // namespace datta
