// Binary checkpoints.
//
//   "AVNET\x01"
//   u32 tensor count
//   per tensor: u32 name length, name bytes, u8 dtype, u32 rank,
//               u64 dims[rank], raw little-endian data
//   u32 CRC-32 of every preceding byte
//
// Entries keep their order, so load followed by save reproduces the file
// byte for byte.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "avnet/model.hpp"
#include "avnet/optim.hpp"

namespace avnet {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { F32 = 0, F64 = 1, U8 = 2, I64 = 3 };

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::U8: return 1;
    case DType::I64: return 8;
  }
  throw CheckpointError("unknown dtype code " + std::to_string(static_cast<int>(d)));
}

template <typename T> constexpr DType dtype_of();
template <> constexpr DType dtype_of<float>() { return DType::F32; }
template <> constexpr DType dtype_of<double>() { return DType::F64; }
template <> constexpr DType dtype_of<std::uint8_t>() { return DType::U8; }
template <> constexpr DType dtype_of<std::int64_t>() { return DType::I64; }

inline constexpr char kCheckpointMagic[6] = {'A', 'V', 'N', 'E', 'T', '\x01'};

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> bytes;

  std::size_t numel() const { return bytes.size() / dtype_size(dtype); }
};

class Checkpoint {
 public:
  template <typename T>
  void put(const std::string& name, std::vector<std::uint64_t> dims, const T* data,
           std::size_t n) {
    if (find(name)) throw CheckpointError("duplicate checkpoint entry " + name);
    std::size_t expect = 1;
    for (auto d : dims) expect *= d;
    if (expect != n) throw CheckpointError("entry " + name + ": dims do not match data length");
    CheckpointEntry e{name, dtype_of<T>(), std::move(dims), std::vector<std::uint8_t>(n * sizeof(T))};
    if (n) std::memcpy(e.bytes.data(), data, n * sizeof(T));
    entries_.push_back(std::move(e));
  }
  template <typename T>
  void put(const std::string& name, const std::vector<T>& values) {
    put(name, {values.size()}, values.data(), values.size());
  }
  void put_string(const std::string& name, const std::string& s) {
    put(name, {s.size()}, reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
  }
  void put_int(const std::string& name, std::int64_t v) { put(name, {}, &v, 1); }

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }
  const CheckpointEntry& at(const std::string& name) const {
    const auto* e = find(name);
    if (!e) throw CheckpointError("checkpoint has no entry named " + name);
    return *e;
  }

  template <typename T>
  std::vector<T> get(const std::string& name) const {
    const auto& e = at(name);
    if (e.dtype != dtype_of<T>()) {
      throw CheckpointError("entry " + name + " has dtype code " +
                            std::to_string(static_cast<int>(e.dtype)) + ", expected " +
                            std::to_string(static_cast<int>(dtype_of<T>())));
    }
    std::vector<T> out(e.numel());
    if (!out.empty()) std::memcpy(out.data(), e.bytes.data(), e.bytes.size());
    return out;
  }
  std::string get_string(const std::string& name) const {
    const auto v = get<std::uint8_t>(name);
    return std::string(v.begin(), v.end());
  }
  std::int64_t get_int(const std::string& name) const {
    const auto v = get<std::int64_t>(name);
    if (v.size() != 1) throw CheckpointError("entry " + name + " is not a scalar");
    return v[0];
  }

  const std::vector<CheckpointEntry>& entries() const { return entries_; }
  std::vector<CheckpointEntry>& entries() { return entries_; }

  // Total element count of entries whose name starts with prefix.
  std::size_t element_count(std::string_view prefix = "") const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (std::string_view(e.name).starts_with(prefix)) n += e.numel();
    return n;
  }

  bool operator==(const Checkpoint& o) const {
    if (entries_.size() != o.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto &a = entries_[i], &b = o.entries_[i];
      if (a.name != b.name || a.dtype != b.dtype || a.dims != b.dims || a.bytes != b.bytes)
        return false;
    }
    return true;
  }

 private:
  std::vector<CheckpointEntry> entries_;
};

namespace detail {

template <typename U>
void append_le(std::vector<std::uint8_t>& out, U v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(U));
}

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  template <typename U>
  U read(const char* what) {
    U v;
    std::memcpy(&v, take(sizeof(U), what), sizeof(U));
    return v;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    if (n > size_ - pos_) {
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what +
                            " at byte " + std::to_string(pos_));
    }
    const auto* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return size_ - pos_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in pieces.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::append_le(out, static_cast<std::uint32_t>(ckpt.entries().size()));
  for (const auto& e : ckpt.entries()) {
    detail::append_le(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    detail::append_le(out, static_cast<std::uint8_t>(e.dtype));
    detail::append_le(out, static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) detail::append_le(out, d);
    out.insert(out.end(), e.bytes.begin(), e.bytes.end());
  }
  detail::append_le(out, detail::crc32_of(out.data(), out.size()));
  return out;
}

inline Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) + 8) {
    throw CheckpointError("checkpoint truncated: only " + std::to_string(bytes.size()) + " bytes");
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic, 5) != 0) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  if (bytes[5] != static_cast<std::uint8_t>(kCheckpointMagic[5])) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(bytes[5]));
  }
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  const std::uint32_t actual = detail::crc32_of(bytes.data(), body);
  if (stored != actual) {
    throw CheckpointError("checkpoint checksum mismatch (file truncated or corrupt)");
  }
  detail::ByteReader r(bytes.data() + sizeof(kCheckpointMagic), body - sizeof(kCheckpointMagic));
  Checkpoint ckpt;
  const auto count = r.read<std::uint32_t>("entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = r.read<std::uint32_t>("name length");
    const auto* name = r.take(len, "name");
    e.name.assign(reinterpret_cast<const char*>(name), len);
    const auto code = r.read<std::uint8_t>("dtype");
    if (code > static_cast<std::uint8_t>(DType::I64)) {
      throw CheckpointError("entry " + e.name + ": unknown dtype code " + std::to_string(code));
    }
    e.dtype = static_cast<DType>(code);
    const auto rank = r.read<std::uint32_t>("rank");
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      e.dims.push_back(r.read<std::uint64_t>("dims"));
      n *= e.dims.back();
    }
    const std::uint64_t nbytes = n * dtype_size(e.dtype);
    if (nbytes > r.remaining()) {
      throw CheckpointError("entry " + e.name + " claims " + std::to_string(nbytes) +
                            " bytes, only " + std::to_string(r.remaining()) + " remain");
    }
    const auto* p = r.take(nbytes, "data");
    e.bytes.assign(p, p + nbytes);
    ckpt.entries().push_back(std::move(e));
  }
  if (r.remaining() != 0) {
    throw CheckpointError("checkpoint has " + std::to_string(r.remaining()) +
                          " trailing bytes before the checksum");
  }
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("failed writing " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return parse_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

// Entry naming: param/<name>, bn/<node>.running_mean|running_var,
// optim/<name>.first|second, meta/<key>.
inline constexpr std::string_view kParamPrefix = "param/";

struct CheckpointMeta {
  std::string config_json;
  std::int64_t iteration = 0;
  std::int64_t split_seed = 0;
};

template <typename T>
Checkpoint make_checkpoint(const Network<T>& net, const OptimizerState<T>* optim,
                           const CheckpointMeta& meta) {
  Checkpoint c;
  c.put_string("meta/config", meta.config_json);
  c.put_int("meta/iteration", meta.iteration);
  c.put_int("meta/split_seed", meta.split_seed);
  for (const auto& [name, t] : net.parameters()) {
    std::vector<std::uint64_t> dims(t.shape().begin(), t.shape().end());
    c.put(std::string(kParamPrefix) + name, std::move(dims), t.values().data(), t.numel());
  }
  for (const auto& [node, bn] : net.batch_norms()) {
    c.put("bn/" + node + ".running_mean", bn.running_mean);
    c.put("bn/" + node + ".running_var", bn.running_var);
  }
  if (optim) {
    c.put_string("optim/kind", std::string(optimizer_name(optim->config.kind)));
    c.put_int("optim/iteration", static_cast<std::int64_t>(optim->iteration));
    for (const auto& [name, t] : net.parameters()) {
      if (auto it = optim->first.find(name); it != optim->first.end())
        c.put("optim/" + name + ".first", it->second);
      if (auto it = optim->second.find(name); it != optim->second.end())
        c.put("optim/" + name + ".second", it->second);
    }
  }
  return c;
}

// Copies parameters and running statistics into net, which must have been
// built from the same configuration.
template <typename T>
void restore_model(Network<T>& net, const Checkpoint& c) {
  for (auto& [name, t] : net.parameters()) {
    const auto& e = c.at(std::string(kParamPrefix) + name);
    const std::vector<std::uint64_t> dims(t.shape().begin(), t.shape().end());
    if (e.dims != dims) {
      throw CheckpointError("parameter " + name + " has shape " + shape_string(t.shape()) +
                            " in the model but a different shape in the checkpoint");
    }
    const auto values = c.get<T>(e.name);
    auto data = net.parameter(name).mutable_data();
    std::copy(values.begin(), values.end(), data.begin());
  }
  for (auto& [node, bn] : net.batch_norms()) {
    auto mean = c.get<T>("bn/" + node + ".running_mean");
    auto var = c.get<T>("bn/" + node + ".running_var");
    if (mean.size() != bn.channels() || var.size() != bn.channels()) {
      throw CheckpointError("running statistics for " + node + " have the wrong length");
    }
    bn.running_mean = std::move(mean);
    bn.running_var = std::move(var);
  }
  std::size_t expected = 0;
  for (const auto& e : c.entries())
    if (std::string_view(e.name).starts_with(kParamPrefix)) ++expected;
  if (expected != net.parameters().size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(expected) +
                          " parameters, model has " + std::to_string(net.parameters().size()));
  }
}

template <typename T>
OptimizerState<T> restore_optimizer(const Network<T>& net, const Checkpoint& c,
                                    OptimizerConfig cfg) {
  OptimizerState<T> s(cfg);
  if (!c.find("optim/kind")) return s;
  if (c.get_string("optim/kind") != optimizer_name(cfg.kind)) {
    throw CheckpointError("checkpoint optimizer is " + c.get_string("optim/kind") +
                          ", configuration asks for " + std::string(optimizer_name(cfg.kind)));
  }
  s.iteration = static_cast<std::size_t>(c.get_int("optim/iteration"));
  for (const auto& [name, t] : net.parameters()) {
    if (c.find("optim/" + name + ".first")) s.first[name] = c.get<T>("optim/" + name + ".first");
    if (c.find("optim/" + name + ".second")) s.second[name] = c.get<T>("optim/" + name + ".second");
  }
  return s;
}

}  // namespace avnet
