#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "aligngen/errors.hpp"
#include "aligngen/params.hpp"

// Binary checkpoint, little-endian:
//   "AGCK" u32 version u32 count
//   per tensor: u16 name_len, name, u8 group, u8 dtype (0 = f32), u8 rank, u64 dims[rank], f32 data
namespace aligngen::ckpt {

inline constexpr char kMagic[4] = {'A', 'G', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

// Matrix weights and LoRA factors decay; biases, norm gains and <s*> do not.
inline bool default_decay(const std::string& name, Group g) {
  if (g == Group::kStar) return false;
  if (g == Group::kLora) return true;
  return name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0;
}

namespace detail {

template <typename V>
void put(std::string& out, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.append(buf, sizeof(V));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  template <typename V>
  V get(const char* what) {
    need(sizeof(V), what);
    V v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw DataError(std::string("checkpoint truncated while reading ") + what);
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const ParamStore<float>& s) {
  std::string out(kMagic, 4);
  detail::put<std::uint32_t>(out, kVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  for (const auto& e : s.entries()) {
    if (e.name.size() > 0xffff) throw ArgumentError("checkpoint: tensor name too long");
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out += e.name;
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(e.group));
    detail::put<std::uint8_t>(out, 0);
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(e.value.rank()));
    for (auto d : e.value.dims()) detail::put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(e.value.raw()), e.value.size() * sizeof(float));
  }
  return out;
}

inline ParamStore<float> deserialize(std::string bytes) {
  detail::Reader in(std::move(bytes));
  if (in.take(4, "magic") != std::string(kMagic, 4)) throw DataError("checkpoint: bad magic");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = in.get<std::uint32_t>("tensor count");
  ParamStore<float> s;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = in.get<std::uint16_t>("name length");
    std::string name = in.take(len, "name");
    const auto group = in.get<std::uint8_t>("group");
    if (group > 3) throw DataError("checkpoint: tensor " + name + " has unknown group " + std::to_string(group));
    if (in.get<std::uint8_t>("dtype") != 0) throw DataError("checkpoint: tensor " + name + " is not f32");
    const auto rank = in.get<std::uint8_t>("rank");
    if (rank == 0) throw DataError("checkpoint: tensor " + name + " has rank 0");
    ad::Shape dims;
    std::uint64_t numel = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      dims.push_back(in.get<std::uint64_t>("dims"));
      if (dims.back() == 0 || dims.back() > (1ull << 32)) throw DataError("checkpoint: tensor " + name + " has bad dims");
      numel *= dims.back();
    }
    std::string raw = in.take(numel * sizeof(float), "tensor data");
    std::vector<float> data(numel);
    std::memcpy(data.data(), raw.data(), raw.size());
    const auto g = static_cast<Group>(group);
    s.add(name, ad::Tensor<float>(dims, std::move(data)), g, default_decay(name, g));
  }
  if (!in.done()) throw DataError("checkpoint: trailing bytes after last tensor");
  return s;
}

inline void save_checkpoint(const ParamStore<float>& s, const std::string& path) {
  const std::string bytes = serialize(s);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("checkpoint: write failed for " + path);
}

inline ParamStore<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

// Copies every tensor of `src` into `dst`, which must hold the same names
// (strict) with matching dims. Group and flags of `dst` are kept.
inline void load_into(ParamStore<float>& dst, const ParamStore<float>& src) {
  for (const auto& e : src.entries()) {
    if (!dst.contains(e.name)) throw DataError("checkpoint: unknown tensor " + e.name);
    auto& d = dst.entry(e.name);
    if (d.value.dims() != e.value.dims()) {
      throw ShapeError("checkpoint: tensor " + e.name + " has dims " + ad::shape_str(e.value.dims()) +
                       " but the model expects " + ad::shape_str(d.value.dims()));
    }
    if (d.group != e.group) throw DataError("checkpoint: tensor " + e.name + " has the wrong group");
  }
  for (const auto& e : dst.entries()) {
    if (!src.contains(e.name)) throw DataError("checkpoint: missing tensor " + e.name);
  }
  for (const auto& e : src.entries()) dst.get(e.name) = e.value;
}

}  // namespace aligngen::ckpt
