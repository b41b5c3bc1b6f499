#include "datta/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <string>

#include "datta/errors.hpp"
#include "datta/record_io.hpp"

namespace datta {

TensorF Dataset::gather(std::span<const Index> indices) const {
  Shape shape = images.shape();
  shape[0] = static_cast<Index>(indices.size());
  TensorF out(shape);
  const Index n = sample_numel();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Index i = indices[k];
    if (i < 0 || i >= size()) throw std::out_of_range("dataset index " + std::to_string(i));
    std::copy_n(images.data().begin() + i * n, n, out.data().begin() + static_cast<Index>(k) * n);
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const Index> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (Index i : indices) out.push_back(labels.at(static_cast<std::size_t>(i)));
  return out;
}

Dataset Dataset::slice(Index begin, Index end) const {
  std::vector<Index> idx;
  for (Index i = begin; i < end; ++i) idx.push_back(i);
  return {gather(idx), gather_labels(idx), num_classes};
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_records(dir / "images.datt", {{"images", data.images}});
  std::ofstream f(dir / "labels.txt", std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError(FormatError::Kind::Io, (dir / "labels.txt").string() + ": cannot open for writing");
  for (int l : data.labels) f << l << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto records = read_records(dir / "images.datt");
  Dataset out;
  out.images = find_record(records, "images", (dir / "images.datt").string());
  if (out.images.rank() != 4) {
    throw FormatError(FormatError::Kind::DimensionMismatch, (dir / "images.datt").string() + ": images must be rank 4");
  }
  std::ifstream f(dir / "labels.txt");
  if (!f) throw FormatError(FormatError::Kind::Io, (dir / "labels.txt").string() + ": cannot open for reading");
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(line, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != line.size() || v < 0) {
      throw FormatError(FormatError::Kind::DimensionMismatch,
                        (dir / "labels.txt").string() + ":" + std::to_string(line_no) + ": bad label '" + line + "'");
    }
    out.labels.push_back(v);
  }
  if (out.size() != out.images.dim(0)) {
    throw FormatError(FormatError::Kind::DimensionMismatch,
                      dir.string() + ": " + std::to_string(out.labels.size()) + " labels for " +
                          std::to_string(out.images.dim(0)) + " images");
  }
  out.num_classes = out.labels.empty() ? 0 : *std::max_element(out.labels.begin(), out.labels.end()) + 1;
  return out;
}

}  // namespace datta
