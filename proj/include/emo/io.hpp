#pragma once

// Binary tensor files (EMOT) and weight checkpoints (EMOW). All integers and
// payloads are little-endian; payload is row-major.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "emo/backbone.hpp"

namespace emo {

/// Malformed or mismatching file content.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File could not be opened, read or written.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::uint32_t kWeightsVersion = 1;

namespace detail {

class Writer {
 public:
  template <class T>
  void put(T v) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    auto u = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
  }
  void bytes(const std::string& s) { buf_ += s; }
  void values(std::span<const double> data, DType dt) {
    for (double v : data) {
      if (dt == DType::f64)
        put(v);
      else
        put(static_cast<float>(v));
    }
  }
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

  template <class T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    need(sizeof(T));
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      u |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return std::bit_cast<T>(u);
  }
  std::string bytes(std::size_t n) {
    need(n);
    auto s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  DType dtype() {
    auto b = get<std::uint8_t>();
    if (b > 1) throw FormatError(what_ + ": unknown dtype " + std::to_string(b));
    return static_cast<DType>(b);
  }
  Shape shape(std::uint32_t rank) {
    Shape s(rank);
    std::uint64_t n = 1;
    for (auto& d : s) {
      auto v = get<std::uint64_t>();
      if (v > (std::uint64_t{1} << 40)) throw FormatError(what_ + ": implausible dimension " + std::to_string(v));
      d = static_cast<std::int64_t>(v);
      n *= v;
      if (n > (std::uint64_t{1} << 40)) throw FormatError(what_ + ": implausible tensor size");
    }
    return s;
  }
  std::vector<double> values(std::int64_t n, DType dt) {
    need(static_cast<std::size_t>(n) * (dt == DType::f64 ? 8 : 4));
    std::vector<double> out(static_cast<std::size_t>(n));
    for (auto& v : out) v = dt == DType::f64 ? get<double>() : static_cast<double>(get<float>());
    return out;
  }
  bool done() const { return pos_ == buf_.size(); }
  const std::string& what() const { return what_; }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n)
      throw FormatError(what_ + ": truncated (need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                        ", file has " + std::to_string(buf_.size()) + ")");
  }

  const std::string& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << f.rdbuf();
  if (f.bad()) throw IoError("read failed on '" + path + "'");
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed on '" + path + "'");
}

inline void check_magic(Reader& r, const char* magic) {
  if (r.bytes(4) != magic) throw FormatError(r.what() + ": bad magic (expected " + magic + ")");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// EMOT

inline std::string encode_tensor(const Tensor& t, DType dt = DType::f64) {
  detail::Writer w;
  w.bytes("EMOT");
  w.put(kTensorVersion);
  w.put(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) w.put(static_cast<std::uint64_t>(d));
  w.put(static_cast<std::uint8_t>(dt));
  w.values(t.data(), dt);
  return w.str();
}

inline Tensor decode_tensor(const std::string& bytes, const std::string& what = "tensor") {
  detail::Reader r(bytes, what);
  detail::check_magic(r, "EMOT");
  if (auto v = r.get<std::uint32_t>(); v != kTensorVersion)
    throw FormatError(what + ": unsupported version " + std::to_string(v));
  auto rank = r.get<std::uint32_t>();
  if (rank > 16) throw FormatError(what + ": implausible rank " + std::to_string(rank));
  auto shape = r.shape(rank);
  auto dt = r.dtype();
  auto data = r.values(numel_of(shape), dt);
  if (!r.done()) throw FormatError(what + ": trailing bytes");
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::string& path, const Tensor& t, DType dt = DType::f64) {
  detail::write_file(path, encode_tensor(t, dt));
}

inline Tensor load_tensor(const std::string& path) { return decode_tensor(detail::read_file(path), path); }

// ---------------------------------------------------------------------------
// EMOW

struct Checkpoint {
  struct Entry {
    DType dtype = DType::f64;
    Tensor tensor;
  };
  std::vector<std::string> order;  // file order
  std::map<std::string, Entry> entries;
};

inline std::string encode_weights(const ParamList& params, DType dt = DType::f64) {
  detail::Writer w;
  w.bytes("EMOW");
  w.put(kWeightsVersion);
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    if (p.name.size() > 0xFFFF) throw FormatError("tensor name too long: " + p.name.substr(0, 64));
    w.put(static_cast<std::uint16_t>(p.name.size()));
    w.bytes(p.name);
    w.put(static_cast<std::uint8_t>(dt));
    w.put(static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) w.put(static_cast<std::uint64_t>(d));
    w.values(p.tensor.data(), dt);
  }
  return w.str();
}

inline Checkpoint decode_weights(const std::string& bytes, const std::string& what = "checkpoint") {
  detail::Reader r(bytes, what);
  detail::check_magic(r, "EMOW");
  if (auto v = r.get<std::uint32_t>(); v != kWeightsVersion)
    throw FormatError(what + ": unsupported version " + std::to_string(v));
  auto count = r.get<std::uint32_t>();
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto len = r.get<std::uint16_t>();
    auto name = r.bytes(len);
    auto dt = r.dtype();
    auto rank = r.get<std::uint32_t>();
    if (rank > 16) throw FormatError(what + ": implausible rank for '" + name + "'");
    auto shape = r.shape(rank);
    auto data = r.values(numel_of(shape), dt);
    if (ck.entries.count(name)) throw FormatError(what + ": duplicate tensor '" + name + "'");
    ck.order.push_back(name);
    ck.entries[name] = {dt, Tensor(std::move(shape), std::move(data))};
  }
  if (!r.done()) throw FormatError(what + ": trailing bytes");
  return ck;
}

/// Copies checkpoint values into `params` by name (in place, so the owning
/// model sees them). Every parameter must be present with the same shape.
inline void assign_weights(const Checkpoint& ck, const ParamList& params, const std::string& what = "checkpoint") {
  for (const auto& p : params) {
    auto it = ck.entries.find(p.name);
    if (it == ck.entries.end()) throw FormatError(what + ": missing tensor '" + p.name + "'");
    const auto& src = it->second.tensor;
    if (src.shape() != p.tensor.shape())
      throw FormatError(what + ": shape mismatch for '" + p.name + "': file " + to_string(src.shape()) +
                        ", model " + to_string(p.tensor.shape()));
  }
  for (const auto& p : params) {
    auto dst = p.tensor;  // shares storage
    const auto& src = ck.entries.at(p.name).tensor;
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
}

inline void save_weights(const std::string& path, const Model& m, DType dt = DType::f64) {
  detail::write_file(path, encode_weights(m.parameters(), dt));
}

inline void load_weights(const std::string& path, Model& m) {
  assign_weights(decode_weights(detail::read_file(path), path), m.parameters(), path);
}

}  // namespace emo
