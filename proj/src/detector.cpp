#include "datta/detector.hpp"

#include <cmath>
#include <string>

#include "datta/errors.hpp"

namespace datta {

void DetectorConfig::validate() const {
  if (short_window < 1) throw ConfigError("detector.short_window", "must be at least 1");
  if (long_window <= short_window) throw ConfigError("detector.long_window", "must exceed short_window");
  if (!(tau > 1.0) || !std::isfinite(tau)) throw ConfigError("detector.tau", "must be a finite value above 1");
  if (warmup < long_window) throw ConfigError("detector.warmup", "must be at least long_window");
}

ShiftDetector::ShiftDetector(DetectorConfig cfg) : cfg_(cfg) { cfg_.validate(); }

ShiftDecision ShiftDetector::observe(double l_da) {
  if (!std::isfinite(l_da) || l_da < 0.0) {
    throw NonFiniteError("shift detector needs a finite non-negative DA loss, got " + std::to_string(l_da));
  }
  buffer_.push_back(l_da);
  if (buffer_.size() > cfg_.long_window) buffer_.pop_front();
  ++observed_;
  ++since_reset_;

  if (observed_ < cfg_.warmup) return ShiftDecision::NoShift;
  if (resets_ > 0 && since_reset_ <= cfg_.cooldown) return ShiftDecision::NoShift;
  if (buffer_.size() < cfg_.long_window) return ShiftDecision::NoShift;

  double short_sum = 0.0, long_sum = 0.0;
  std::size_t k = 0;
  for (auto it = buffer_.rbegin(); it != buffer_.rend(); ++it, ++k) {
    if (k < cfg_.short_window) short_sum += *it;
    long_sum += *it;
  }
  const double short_mean = short_sum / double(cfg_.short_window);
  const double long_mean = long_sum / double(cfg_.long_window);
  return short_mean > cfg_.tau * long_mean ? ShiftDecision::ShiftDetected : ShiftDecision::NoShift;
}

void ShiftDetector::reset() {
  buffer_.clear();
  since_reset_ = 0;
  ++resets_;
}

}  // namespace datta
