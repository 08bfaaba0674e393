#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "pcmp/errors.hpp"
#include "pcmp/tensor.hpp"

namespace pcmp {

/// Ordered name -> tensor collection. Ordering by name keeps serialized bytes stable.
using TensorMap = std::map<std::string, Tensor>;

// Binary layout, all integers little-endian:
//   "PCMP" | u32 version | u64 count |
//   count x { u32 name_len | name bytes (UTF-8) | u32 rank | rank x u64 dim | numel x f64 }
inline constexpr char kContainerMagic[4] = {'P', 'C', 'M', 'P'};
inline constexpr std::uint32_t kContainerVersion = 1;

namespace detail {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    need(sizeof(U));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return std::bit_cast<T>(bits);
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("truncated tensor container");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_container(const TensorMap& tensors) {
  std::vector<std::uint8_t> out(std::begin(kContainerMagic), std::end(kContainerMagic));
  detail::put_le<std::uint32_t>(out, kContainerVersion);
  detail::put_le<std::uint64_t>(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(out, d);
    for (double v : t.values()) detail::put_le<double>(out, v);
  }
  return out;
}

inline TensorMap decode_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0) {
    throw IoError("not a PCMP container (bad magic)");
  }
  detail::Reader in(bytes.subspan(4));
  const auto version = in.get<std::uint32_t>();
  if (version != kContainerVersion) throw IoError("unsupported container version " + std::to_string(version));
  const auto count = in.get<std::uint64_t>();
  TensorMap out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = in.get<std::uint32_t>();
    std::string name = in.get_string(name_len);
    const auto rank = in.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(in.get<std::uint64_t>());
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = in.get<double>();
    out.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!in.done()) throw IoError("trailing bytes after tensor container");
  return out;
}

inline void write_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path);
}

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void save_container(const std::string& path, const TensorMap& tensors) {
  write_bytes(path, encode_container(tensors));
}

inline TensorMap load_container(const std::string& path) { return decode_container(read_bytes(path)); }

/// 64-bit FNV-1a, used for checksums and config fingerprints.
inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(std::string_view s) {
  return fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

}  // namespace pcmp
