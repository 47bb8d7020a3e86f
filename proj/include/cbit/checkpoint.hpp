#pragma once

// Checkpoint container:
//
//   #cbit-ckpt v1\n
//   key=value\n ...          model configuration, fixed key order
//   end\n
//   u64 tensor count, then per tensor:
//     u32 name length, name bytes, u32 rank, u64 dims[rank],
//     f64 payload (row-major)
//
// All binary integers and doubles are little-endian regardless of host.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cbit/encoder.hpp"
#include "cbit/error.hpp"

namespace cbit {

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes, std::size_t pos = 0) : bytes_(bytes), pos_(pos) {}

  std::uint64_t u64() { return read_le(8); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(read_le(4)); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError("checkpoint truncated");
  }
  std::uint64_t read_le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  const std::string& bytes_;
  std::size_t pos_;
};

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

inline std::string config_block(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "max_len=" << cfg.max_len << '\n'
     << "dim=" << cfg.dim << '\n'
     << "layers=" << cfg.layers << '\n'
     << "heads=" << cfg.heads << '\n'
     << "vocab_size=" << cfg.vocab_size << '\n'
     << "dropout=" << detail::format_double(cfg.dropout) << '\n'
     << "seed=" << cfg.seed << '\n'
     << "key_padding_mask=" << (cfg.key_padding_mask ? 1 : 0) << '\n'
     << "init_std=" << detail::format_double(cfg.init_std) << '\n'
     << "layer_norm_eps=" << detail::format_double(cfg.layer_norm_eps) << '\n';
  return os.str();
}

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
};

inline std::string serialize_checkpoint(const ModelConfig& cfg, const ModelParams& params) {
  std::string out = "#cbit-ckpt v1\n" + config_block(cfg) + "end\n";
  std::uint64_t count = 0;
  params.for_each([&](const std::string&, const Tensor&) { ++count; });
  detail::put_u64(out, count);
  params.for_each([&](const std::string& name, const Tensor& t) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape) detail::put_u64(out, d);
    for (double v : t.data) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  });
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  std::istringstream text(bytes);
  std::string line;
  std::getline(text, line);
  if (line != "#cbit-ckpt v1") throw DataError("not a cbit checkpoint (header '" + line.substr(0, 40) + "')");
  std::map<std::string, std::string> kv;
  while (std::getline(text, line) && line != "end") {
    auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("checkpoint: bad config line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (line != "end") throw DataError("checkpoint: missing end of config block");
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw DataError(std::string("checkpoint: missing config key ") + key);
    return it->second;
  };
  Checkpoint ck;
  ModelConfig& c = ck.config;
  try {
    c.max_len = std::stoull(get("max_len"));
    c.dim = std::stoull(get("dim"));
    c.layers = std::stoull(get("layers"));
    c.heads = std::stoull(get("heads"));
    c.vocab_size = std::stoull(get("vocab_size"));
    c.dropout = std::stod(get("dropout"));
    c.seed = std::stoull(get("seed"));
    c.key_padding_mask = get("key_padding_mask") == "1";
    c.init_std = std::stod(get("init_std"));
    c.layer_norm_eps = std::stod(get("layer_norm_eps"));
  } catch (const std::logic_error& e) {
    throw DataError(std::string("checkpoint: bad config value: ") + e.what());
  }
  c.validate();

  const auto binary_start = static_cast<std::size_t>(text.tellg());
  detail::ByteReader in(bytes, binary_start);
  ck.params = make_params(c);
  std::vector<std::pair<std::string, Tensor*>> slots;
  ck.params.for_each([&](const std::string& name, Tensor& t) { slots.emplace_back(name, &t); });
  const std::uint64_t count = in.u64();
  if (count != slots.size())
    throw DataError("checkpoint: " + std::to_string(count) + " tensors, config implies " + std::to_string(slots.size()));
  for (auto& [name, t] : slots) {
    const std::string got = in.str(in.u32());
    if (got != name) throw DataError("checkpoint: expected tensor '" + name + "', found '" + got + "'");
    Shape shape(in.u32());
    for (auto& d : shape) d = in.u64();
    if (shape != t->shape)
      throw DataError("checkpoint: tensor '" + name + "' has shape " + shape_str(shape) + ", config implies " +
                      shape_str(t->shape));
    for (double& v : t->data) v = in.f64();
  }
  if (!in.done()) throw DataError("checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ModelParams& params) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = serialize_checkpoint(cfg, params);
  // Write-then-rename so an interrupted save never clobbers the previous file.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return deserialize_checkpoint(read_file_bytes(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace cbit
