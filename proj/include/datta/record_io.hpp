#pragma once

// Binary record container shared by weight, stats, and dataset files:
//
//   "DATT" | u32 version | u32 count | count x record
//   record := u32 name_len | name (UTF-8) | u32 rank | rank x u32 extent | f32 payload
//
// All integers and floats are little-endian.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "datta/tensor.hpp"

namespace datta {

inline constexpr char kRecordMagic[4] = {'D', 'A', 'T', 'T'};
inline constexpr std::uint32_t kRecordVersion = 1;

struct NamedTensor {
  std::string name;
  TensorF tensor;
};

void write_records(const std::filesystem::path& path, const std::vector<NamedTensor>& records);

/// Throws FormatError (BadMagic, VersionMismatch, Truncated, Io).
std::vector<NamedTensor> read_records(const std::filesystem::path& path);

std::string encode_records(const std::vector<NamedTensor>& records);
std::vector<NamedTensor> decode_records(const std::string& bytes, const std::string& source = "<memory>");

/// Looks up a record by name or throws FormatError::MissingTensor.
const TensorF& find_record(const std::vector<NamedTensor>& records, const std::string& name,
                           const std::string& source);

}  // namespace datta
