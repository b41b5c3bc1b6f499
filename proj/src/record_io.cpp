#include "datta/record_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include "datta/errors.hpp"

namespace datta {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  Reader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  bool has(std::size_t n) const { return bytes_.size() - pos_ >= n; }

  std::uint32_t u32(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string str(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n, const std::string& what) const {
    if (!has(n)) {
      throw FormatError(FormatError::Kind::Truncated,
                        source_ + ": truncated while reading " + what + " (needed " + std::to_string(n) +
                            " bytes at offset " + std::to_string(pos_) + ", " + std::to_string(bytes_.size() - pos_) +
                            " available)");
    }
  }

 private:
  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_records(const std::vector<NamedTensor>& records) {
  std::string out(kRecordMagic, 4);
  put_u32(out, kRecordVersion);
  put_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    put_u32(out, static_cast<std::uint32_t>(r.tensor.rank()));
    for (Index e : r.tensor.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : r.tensor.data()) put_f32(out, v);
  }
  return out;
}

std::vector<NamedTensor> decode_records(const std::string& bytes, const std::string& source) {
  Reader in(bytes, source);
  const std::string magic = in.str(4, "magic");
  if (std::memcmp(magic.data(), kRecordMagic, 4) != 0) {
    throw FormatError(FormatError::Kind::BadMagic, source + ": bad magic bytes (not a DATT record file)");
  }
  const std::uint32_t version = in.u32("version");
  if (version != kRecordVersion) {
    throw FormatError(FormatError::Kind::VersionMismatch, source + ": unsupported version " + std::to_string(version) +
                                                              " (expected " + std::to_string(kRecordVersion) + ")");
  }
  const std::uint32_t count = in.u32("tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string where = "record " + std::to_string(k);
    const std::uint32_t name_len = in.u32(where + " name length");
    std::string name = in.str(name_len, where + " name");
    const std::string label = "tensor '" + name + "'";
    const std::uint32_t rank = in.u32(label + " rank");
    if (rank > 4) throw FormatError(FormatError::Kind::DimensionMismatch, source + ": " + label + " has rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t e = in.u32(label + " extents");
      shape.push_back(static_cast<Index>(e));
      numel *= e;
    }
    if (numel > std::numeric_limits<std::size_t>::max() / 4) {
      throw FormatError(FormatError::Kind::Truncated, source + ": " + label + " payload size overflows");
    }
    in.need(static_cast<std::size_t>(numel) * 4, label + " payload");
    std::vector<float> data(static_cast<std::size_t>(numel));
    for (auto& v : data) v = std::bit_cast<float>(in.u32(label + " payload"));
    out.push_back({std::move(name), TensorF(std::move(shape), std::move(data))});
  }
  return out;
}

void write_records(const std::filesystem::path& path, const std::vector<NamedTensor>& records) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError(FormatError::Kind::Io, path.string() + ": cannot open for writing");
  const std::string bytes = encode_records(records);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError(FormatError::Kind::Io, path.string() + ": write failed");
}

std::vector<NamedTensor> read_records(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError(FormatError::Kind::Io, path.string() + ": cannot open for reading");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_records(bytes, path.string());
}

const TensorF& find_record(const std::vector<NamedTensor>& records, const std::string& name,
                           const std::string& source) {
  for (const auto& r : records)
    if (r.name == name) return r.tensor;
  throw FormatError(FormatError::Kind::MissingTensor, source + ": missing tensor '" + name + "'");
}

}  // namespace datta
