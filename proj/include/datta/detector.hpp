#pragma once

#include <cstddef>
#include <deque>

namespace datta {

/// Short/long window comparison of the DA loss. A shift is flagged when the mean of the last
/// `short_window` values exceeds `tau` times the mean of the last `long_window` values (the
/// long window includes the short one).
struct DetectorConfig {
  std::size_t short_window = 4;
  std::size_t long_window = 32;
  double tau = 1.5;
  std::size_t warmup = 32;    ///< observations required before the first detection
  std::size_t cooldown = 32;  ///< observations suppressed after each reset

  /// Throws ConfigError unless short < long, tau > 1, warmup >= long.
  void validate() const;
};

enum class ShiftDecision { NoShift, ShiftDetected };

class ShiftDetector {
 public:
  explicit ShiftDetector(DetectorConfig cfg = {});

  /// Records the DA loss of the current batch and decides. Throws NonFiniteError for
  /// non-finite or negative input.
  ShiftDecision observe(double l_da);

  /// Clears the window buffer and starts the cooldown.
  void reset();

  const DetectorConfig& config() const noexcept { return cfg_; }
  std::size_t observations() const noexcept { return observed_; }
  std::size_t buffered() const noexcept { return buffer_.size(); }
  std::size_t resets() const noexcept { return resets_; }

 private:
  DetectorConfig cfg_;
  std::deque<double> buffer_;  ///< most recent value at the back; at most long_window entries
  std::size_t observed_ = 0;
  std::size_t since_reset_ = 0;
  std::size_t resets_ = 0;
};

}  // namespace datta
