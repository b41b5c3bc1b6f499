#include <fstream>
#include <iterator>
#include <set>

#include <json.hpp>

#include "datta/errors.hpp"
#include "datta/experiment.hpp"

namespace datta {

namespace {

using nlohmann::json;

/// Cursor over a JSON object that tracks its field path and rejects unknown keys.
class Section {
 public:
  Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const {
    seen_.insert(key);
    return node_.contains(key);
  }
  const json& raw(const std::string& key) const {
    seen_.insert(key);
    return node_.at(key);
  }
  Section child(const std::string& key) const { return Section(raw(key), field(key)); }

  template <typename T>
  void read(const std::string& key, T& dst) const {
    if (!has(key)) return;
    const json& v = node_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(field(key), "expected a boolean");
        dst = v.get<bool>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError(field(key), "expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_unsigned() || v.get<long long>() >= 0) {
            dst = v.get<T>();
          } else {
            throw ConfigError(field(key), "expected a non-negative integer");
          }
        } else {
          dst = v.get<T>();
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(field(key), "expected a number");
        dst = v.get<T>();
      } else {
        if (!v.is_string()) throw ConfigError(field(key), "expected a string");
        dst = v.get<std::string>();
      }
    } catch (const json::exception& e) {
      throw ConfigError(field(key), e.what());
    }
  }

  void finish() const {
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
    }
  }

 private:
  const json& node_;
  std::string path_;
  mutable std::set<std::string> seen_;
};

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  if (p.empty()) return {};
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

ArchSpec parse_arch(const Section& s) {
  ArchSpec a;
  s.read("in_channels", a.in_channels);
  s.read("height", a.height);
  s.read("width", a.width);
  s.read("pool", a.pool);
  s.read("num_classes", a.num_classes);
  s.read("bn_epsilon", a.bn_epsilon);
  if (s.has("blocks")) {
    const json& arr = s.raw("blocks");
    if (!arr.is_array()) throw ConfigError(s.field("blocks"), "expected an array");
    a.blocks.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      Section b(arr[i], s.field("blocks[" + std::to_string(i) + "]"));
      ConvBlockSpec blk;
      b.read("out_channels", blk.out_channels);
      b.read("kernel", blk.kernel);
      b.read("stride", blk.stride);
      b.read("padding", blk.padding);
      b.finish();
      a.blocks.push_back(blk);
    }
  }
  s.finish();
  return a;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  json root;
  try {
    root = json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("<root>", std::string("parse error: ") + e.what());
  }
  Section top(root, "");
  ExperimentConfig cfg;
  top.read("seed", cfg.seed);
  std::string out_dir;
  top.read("output_dir", out_dir);
  if (!out_dir.empty()) cfg.output_dir = resolve(base_dir, out_dir);

  if (top.has("architecture")) cfg.arch = parse_arch(top.child("architecture"));

  if (top.has("data")) {
    Section d = top.child("data");
    std::string train, test;
    d.read("train_dir", train);
    d.read("test_dir", test);
    cfg.data.train_dir = resolve(base_dir, train);
    cfg.data.test_dir = resolve(base_dir, test);
    d.read("train_samples", cfg.data.train_samples);
    d.read("test_samples", cfg.data.test_samples);
    d.read("num_classes", cfg.data.synthetic.num_classes);
    d.read("generator_seed", cfg.data.synthetic.seed);
    d.finish();
  }
  cfg.data.synthetic.channels = cfg.arch.in_channels;
  cfg.data.synthetic.height = cfg.arch.height;
  cfg.data.synthetic.width = cfg.arch.width;

  if (top.has("source")) {
    Section s = top.child("source");
    std::string weights, stats;
    s.read("weights", weights);
    s.read("stats", stats);
    cfg.source.weights = resolve(base_dir, weights);
    cfg.source.stats = resolve(base_dir, stats);
    s.read("epochs", cfg.source.train.epochs);
    s.read("lr", cfg.source.train.lr);
    s.read("momentum", cfg.source.train.momentum);
    s.read("weight_decay", cfg.source.train.weight_decay);
    s.read("batch_size", cfg.source.train.batch_size);
    s.read("bn_momentum", cfg.source.train.bn_momentum);
    s.read("stats_batch_size", cfg.source.stats_batch_size);
    s.read("auto_prepare", cfg.source.auto_prepare);
    s.finish();
  }

  if (top.has("method")) {
    Section m = top.child("method");
    std::string variant, selection, capture;
    m.read("variant", variant);
    if (!variant.empty()) cfg.method.variant = variant_from_string(variant);
    m.read("alpha", cfg.method.alpha);
    m.read("theta", cfg.method.theta);
    m.read("lr", cfg.method.lr);
    m.read("momentum", cfg.method.momentum);
    m.read("da_layer_selection", selection);
    if (!selection.empty()) cfg.method.da_layer_selection = layer_selection_from_string(selection);
    m.read("capture_point", capture);
    if (capture == "post_affine" || capture.empty()) {
      cfg.method.capture_point = CapturePoint::PostAffine;
    } else if (capture == "pre_norm") {
      cfg.method.capture_point = CapturePoint::PreNorm;
    } else {
      throw ConfigError("method.capture_point", "expected post_affine or pre_norm");
    }
    m.finish();
  }

  if (top.has("stream")) {
    Section st = top.child("stream");
    std::string ordering;
    st.read("ordering", ordering);
    if (!ordering.empty()) {
      try {
        cfg.stream.ordering = ordering_from_string(ordering);
      } catch (const StreamError& e) {
        throw ConfigError("stream.ordering", e.what());
      }
    }
    st.read("delta", cfg.stream.delta);
    st.read("batch_size", cfg.stream.batch_size);
    if (st.has("domains")) {
      const json& arr = st.raw("domains");
      if (!arr.is_array()) throw ConfigError("stream.domains", "expected an array");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        const std::string path = "stream.domains[" + std::to_string(i) + "]";
        Section d(arr[i], path);
        DomainSpec dom;
        std::string kind;
        d.read("corruption", kind);
        try {
          dom.corruption.kind = corruption_from_string(kind.empty() ? "gaussian_noise" : kind);
        } catch (const StreamError& e) {
          throw ConfigError(path + ".corruption", e.what());
        }
        d.read("severity", dom.corruption.severity);
        d.read("budget", dom.budget);
        d.finish();
        cfg.stream.domains.push_back(dom);
      }
    }
    st.finish();
  }

  if (top.has("detector")) {
    Section d = top.child("detector");
    DetectorConfig det;
    d.read("short_window", det.short_window);
    d.read("long_window", det.long_window);
    d.read("tau", det.tau);
    d.read("warmup", det.warmup);
    d.read("cooldown", det.cooldown);
    d.finish();
    cfg.detector = det;
  }
  top.finish();

  apply_seed(cfg, cfg.seed);
  cfg.validate();
  return cfg;
}

void apply_seed(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.stream.seed = seed;
  cfg.source.train.seed = seed;
  for (std::size_t i = 0; i < cfg.stream.domains.size(); ++i) cfg.stream.domains[i].corruption.seed = seed * 1000 + i;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("<file>", "cannot read config " + path.string());
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_config(text, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

void ExperimentConfig::validate() const {
  if (arch.in_channels < 1 || arch.height < 1 || arch.width < 1) throw ConfigError("architecture", "input extents must be positive");
  if (arch.blocks.empty()) throw ConfigError("architecture.blocks", "need at least one conv block");
  if (arch.num_classes < 2) throw ConfigError("architecture.num_classes", "need at least two classes");
  if (!(arch.bn_epsilon > 0.0)) throw ConfigError("architecture.bn_epsilon", "must be positive");
  try {
    (void)build_model<float>(arch, 0);
  } catch (const std::exception& e) {
    throw ConfigError("architecture", e.what());
  }
  method.validate();
  if (stream.batch_size < 1) throw ConfigError("stream.batch_size", "must be at least 1");
  if (stream.ordering == Ordering::Dirichlet && !(stream.delta > 0.0)) throw ConfigError("stream.delta", "must be positive");
  for (std::size_t i = 0; i < stream.domains.size(); ++i) {
    const auto& d = stream.domains[i];
    const std::string path = "stream.domains[" + std::to_string(i) + "]";
    if (d.corruption.kind != CorruptionKind::None && (d.corruption.severity < 1 || d.corruption.severity > 5))
      throw ConfigError(path + ".severity", "must be in 1..5");
    if (d.budget < 1) throw ConfigError(path + ".budget", "must be positive");
    if (d.budget < stream.batch_size) throw ConfigError(path + ".budget", "smaller than the batch size");
  }
  if (detector) {
    detector->validate();
    if (stream.domains.size() < 2) throw ConfigError("detector", "continual mode requires at least two domains");
    if (!uses_da(method.variant)) throw ConfigError("detector", "domain-shift detection needs a DA variant (da_only or da_em)");
  }
  if (source.train.epochs < 0) throw ConfigError("source.epochs", "must be non-negative");
  if (source.train.batch_size < 2) throw ConfigError("source.batch_size", "must be at least 2");
  if (source.stats_batch_size < 1) throw ConfigError("source.stats_batch_size", "must be positive");
  if (data.train_samples < 1 || data.test_samples < 1) throw ConfigError("data", "sample counts must be positive");
  if (data.synthetic.num_classes < 2 || data.synthetic.num_classes > arch.num_classes)
    throw ConfigError("data.num_classes", "must lie in 2..architecture.num_classes");
}

}  // namespace datta
