#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "datta/tensor.hpp"

namespace datta {

/// Labeled image set. Images are [N,C,H,W] with values in [0,1].
struct Dataset {
  TensorF images;
  std::vector<int> labels;
  int num_classes = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index sample_numel() const { return size() ? images.size() / size() : 0; }

  /// Stacks the selected samples into one [k,C,H,W] tensor, in the given order.
  TensorF gather(std::span<const Index> indices) const;
  std::vector<int> gather_labels(std::span<const Index> indices) const;
  /// Samples [begin, end).
  Dataset slice(Index begin, Index end) const;
};

/// On-disk layout: `<dir>/images.datt` holds one record named "images" with shape
/// [N,C,H,W]; `<dir>/labels.txt` holds one integer label per line.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace datta
