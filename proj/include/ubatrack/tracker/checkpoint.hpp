#pragma once

// Binary checkpoint:
//   "UBAT" | u32 version (1) | u32 count |
//   per tensor: u32 name length | name | u8 dtype (0 f32, 1 f64) | u8 rank |
//               rank x u64 dims | row-major payload
// All integers and payloads little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "ubatrack/numerics/tensor.hpp"
#include "ubatrack/tracker/model.hpp"

namespace ubatrack {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'U', 'B', 'A', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::uint8_t dtype = 0;
  Shape shape;
  std::vector<unsigned char> payload;
};

namespace detail {

template <class U>
void put(std::vector<unsigned char>& out, U v) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &v, sizeof(U));
  out.insert(out.end(), bytes, bytes + sizeof(U));
}

class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& data) : data_(data) {}

  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, data_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::vector<unsigned char> bytes(std::size_t n, const char* what) {
    need(n, what);
    std::vector<unsigned char> out(data_.begin() + pos_, data_.begin() + pos_ + n);
    pos_ += n;
    return out;
  }

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what + " (offset " +
                        std::to_string(pos_) + ", file length " + std::to_string(data_.size()) + ")");
    }
  }

  const std::vector<unsigned char>& data_;
  std::size_t pos_ = 0;
};

template <class T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 0 : 1;
}

}  // namespace detail

template <class T>
std::vector<unsigned char> serialize_model(TrackerModel<T>& model) {
  std::vector<std::pair<std::string, Tensor<T>>> tensors;
  model.visit([&](const std::string& n, Tensor<T>& t) { tensors.emplace_back(n, t); });
  std::vector<unsigned char> out(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, std::uint32_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put<std::uint32_t>(out, std::uint32_t(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put<std::uint8_t>(out, detail::dtype_code<T>());
    detail::put<std::uint8_t>(out, std::uint8_t(t.rank()));
    for (auto d : t.shape()) detail::put<std::uint64_t>(out, d);
    const auto* raw = reinterpret_cast<const unsigned char*>(t.values().data());
    out.insert(out.end(), raw, raw + t.numel() * sizeof(T));
  }
  return out;
}

// Parses the whole image before returning; throws FormatError on bad magic,
// version, length, or dtype.
inline std::map<std::string, CheckpointTensor> parse_checkpoint(const std::vector<unsigned char>& data) {
  detail::Reader r(data);
  const auto magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) throw FormatError("checkpoint: bad magic bytes");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("tensor count");
  std::map<std::string, CheckpointTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>("name length");
    const auto name_bytes = r.bytes(len, "name");
    std::string name(name_bytes.begin(), name_bytes.end());
    CheckpointTensor t;
    t.dtype = r.get<std::uint8_t>("dtype");
    if (t.dtype > 1) throw FormatError("checkpoint: unknown dtype " + std::to_string(t.dtype) + " for " + name);
    const auto rank = r.get<std::uint8_t>("rank");
    std::size_t n = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      t.shape.push_back(std::size_t(r.get<std::uint64_t>("dims")));
      n *= t.shape.back();
    }
    t.payload = r.bytes(n * (t.dtype == 0 ? 4 : 8), "payload");
    if (!out.emplace(name, std::move(t)).second) throw FormatError("checkpoint: duplicate tensor " + name);
  }
  if (r.remaining() != 0) {
    throw FormatError("checkpoint: " + std::to_string(r.remaining()) + " trailing bytes after the last tensor");
  }
  return out;
}

// Assigns every model tensor from the checkpoint, or nothing on error.
template <class T>
void load_into(TrackerModel<T>& model, const std::vector<unsigned char>& data) {
  const auto parsed = parse_checkpoint(data);
  std::size_t expected = 0;
  model.visit([&](const std::string& name, Tensor<T>& t) {
    ++expected;
    auto it = parsed.find(name);
    if (it == parsed.end()) throw FormatError("checkpoint: missing tensor " + name);
    if (it->second.dtype != detail::dtype_code<T>()) throw FormatError("checkpoint: dtype mismatch for " + name);
    if (it->second.shape != t.shape()) {
      throw FormatError("checkpoint: shape " + shape_str(it->second.shape) + " for " + name + ", model expects " +
                        shape_str(t.shape()));
    }
  });
  if (expected != parsed.size()) throw FormatError("checkpoint: tensor set differs from the model");
  model.visit([&](const std::string& name, Tensor<T>& t) {
    const auto& src = parsed.at(name).payload;
    std::memcpy(t.mutable_data().data(), src.data(), src.size());
  });
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw Error("write failed for " + path);
}

template <class T>
void save_checkpoint(TrackerModel<T>& model, const std::string& path) {
  write_file_bytes(path, serialize_model(model));
}

// The config is needed to build the parameter skeleton.
template <class T>
TrackerModel<T> load_checkpoint(const TrackerConfig& cfg, const std::string& path) {
  auto model = build_model<T>(cfg);
  load_into(model, read_file_bytes(path));
  return model;
}

}  // namespace ubatrack
