#pragma once

#include <filesystem>
#include <vector>

#include "datta/model.hpp"
#include "datta/record_io.hpp"

namespace datta {

/// Weight file records: every parameter under its param_name, each BN layer's four
/// statistics tensors plus a one-element mode tensor, and "model.da_layers".
std::vector<NamedTensor> model_records(const ModelF& model);
ModelF model_from_records(const std::vector<NamedTensor>& records, const ArchSpec& arch, const std::string& source);

void save_weights(const ModelF& model, const std::filesystem::path& path);

/// Validates every tensor's extents against `arch` (FormatError::DimensionMismatch names the tensor).
ModelF load_weights(const std::filesystem::path& path, const ArchSpec& arch);

}  // namespace datta
