#pragma once

// Versioned binary checkpoints. Layout (all integers little-endian):
//
//   magic      8 bytes  "RETNETCK"
//   version    u32      kCheckpointVersion
//   config     u64 length + UTF-8 JSON of ModelConfig
//   step       u64      completed training updates
//   has_opt    u8       1 if Adam moments follow the parameters
//   adam_step  u64      (present even when has_opt = 0)
//   count      u32      number of arrays
//   arrays     count × { u32 name length, name bytes, u8 dtype (0 fp32, 1 fp64),
//                        u8 ndim, ndim × u64 dims, IEEE-754 little-endian payload }
//   checksum   u64      FNV-1a over every preceding byte
//
// Parameters use their model names ("blocks.0.msr.wq"); Adam moments are
// stored as "adam.m.<name>" and "adam.v.<name>". docs/checkpoint_format.md
// describes the same layout for external readers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "retnet/train.hpp"

namespace retnet {

inline constexpr char kCheckpointMagic[8] = {'R', 'E', 'T', 'N', 'E', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// ModelConfig <-> JSON

inline nlohmann::json config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["arch"] = to_string(c.arch);
  j["layers"] = c.layers;
  j["d_model"] = c.d_model;
  j["heads"] = c.heads;
  j["vocab_size"] = c.vocab_size;
  j["ffn_dim"] = c.ffn_dim;
  j["paradigm"] = to_string(c.paradigm);
  j["chunk_size"] = c.chunk_size;
  j["flags"] = {{"no_gate", c.flags.no_gate},
                {"no_groupnorm", c.flags.no_groupnorm},
                {"no_decay", c.flags.no_decay},
                {"single_scale", c.flags.single_scale},
                {"head_dim_override", c.flags.head_dim_override ? nlohmann::json(*c.flags.head_dim_override) : nlohmann::json()}};
  j["gamma_variant"] = to_string(c.gamma_variant);
  j["norm"] = {{"scale_qk", c.norm.scale_qk}, {"normalize_D", c.norm.normalize_D}, {"clamp_row_sum", c.norm.clamp_row_sum}};
  j["groupnorm_affine"] = c.groupnorm_affine;
  j["tie_embeddings"] = c.tie_embeddings;
  j["dropout"] = c.dropout;
  j["init_std"] = c.init_std;
  j["rotation_base"] = c.rotation_base;
  j["precision"] = to_string(c.precision);
  j["seed"] = c.seed;
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.arch = parse_arch(j.at("arch").get<std::string>());
  c.layers = j.at("layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.paradigm = parse_paradigm(j.at("paradigm").get<std::string>());
  c.chunk_size = j.at("chunk_size").get<std::size_t>();
  const auto& f = j.at("flags");
  c.flags.no_gate = f.at("no_gate").get<bool>();
  c.flags.no_groupnorm = f.at("no_groupnorm").get<bool>();
  c.flags.no_decay = f.at("no_decay").get<bool>();
  c.flags.single_scale = f.at("single_scale").get<bool>();
  if (!f.at("head_dim_override").is_null()) c.flags.head_dim_override = f.at("head_dim_override").get<std::size_t>();
  c.gamma_variant = parse_gamma_variant(j.at("gamma_variant").get<std::string>());
  const auto& n = j.at("norm");
  c.norm = {n.at("scale_qk").get<bool>(), n.at("normalize_D").get<bool>(), n.at("clamp_row_sum").get<bool>()};
  c.groupnorm_affine = j.at("groupnorm_affine").get<bool>();
  c.tie_embeddings = j.at("tie_embeddings").get<bool>();
  c.dropout = j.at("dropout").get<double>();
  c.init_std = j.at("init_std").get<double>();
  c.rotation_base = j.at("rotation_base").get<double>();
  c.precision = parse_precision(j.at("precision").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

// ---------------------------------------------------------------------------
// Byte-level encoding

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    buf_.insert(buf_.end(), b, b + sizeof(U));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void str(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<unsigned char>& buffer() { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& b) : b_(b) {}
  template <class U>
  U get() {
    need(sizeof(U));
    unsigned char t[sizeof(U)];
    std::memcpy(t, b_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(t, t + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, t, sizeof(U));
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw CheckpointError("checkpoint: truncated file");
  }
  const std::vector<unsigned char>& b_;
  std::size_t pos_ = 0;
};

inline std::uint64_t fnv1a(const unsigned char* p, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <class T>
void write_array(ByteWriter& w, const std::string& name, const Tensor<T>& t) {
  w.str(name);
  w.put<std::uint8_t>(std::is_same_v<T, float> ? 0 : 1);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) w.put<std::uint64_t>(d);
  for (T v : t.data()) w.put<T>(v);
}

}  // namespace detail

/// A decoded checkpoint before it is bound to a precision.
struct CheckpointData {
  std::uint32_t version = 0;
  ModelConfig config;
  std::uint64_t step = 0;
  bool has_optimizer = false;
  std::uint64_t adam_step = 0;
  struct Array {
    std::uint8_t dtype = 1;
    Shape shape;
    std::vector<double> values;  // widened; fp32 payloads convert exactly
  };
  std::map<std::string, Array> arrays;
};

template <class T>
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams<Tensor<T>>& p,
                     std::uint64_t step = 0, const AdamState<T>* opt = nullptr) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string js = config_to_json(cfg).dump();
  w.put<std::uint64_t>(js.size());
  w.bytes(js.data(), js.size());
  w.put<std::uint64_t>(step);
  w.put<std::uint8_t>(opt ? 1 : 0);
  w.put<std::uint64_t>(opt ? opt->step : 0);
  std::uint32_t count = 0;
  for_each_param(p, [&](const std::string&, const Tensor<T>&) { ++count; });
  if (opt) count *= 3;
  w.put<std::uint32_t>(count);
  for_each_param(p, [&](const std::string& n, const Tensor<T>& t) { detail::write_array(w, n, t); });
  if (opt) {
    for_each_param(opt->m, [&](const std::string& n, const Tensor<T>& t) { detail::write_array(w, "adam.m." + n, t); });
    for_each_param(opt->v, [&](const std::string& n, const Tensor<T>& t) { detail::write_array(w, "adam.v." + n, t); });
  }
  auto& buf = w.buffer();
  const std::uint64_t sum = detail::fnv1a(buf.data(), buf.size());
  w.put<std::uint64_t>(sum);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw CheckpointError("checkpoint: write to '" + path + "' failed");
}

inline CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open '" + path + "'");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof kCheckpointMagic + 8 || std::memcmp(buf.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw CheckpointError("checkpoint: '" + path + "' is not a checkpoint file");
  std::uint64_t stored = 0;
  std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
  if constexpr (std::endian::native == std::endian::big) stored = __builtin_bswap64(stored);
  if (detail::fnv1a(buf.data(), buf.size() - 8) != stored) throw CheckpointError("checkpoint: checksum mismatch in '" + path + "'");

  detail::ByteReader r(buf);
  r.str(sizeof kCheckpointMagic);
  CheckpointData d;
  d.version = r.get<std::uint32_t>();
  if (d.version != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported format version " + std::to_string(d.version));
  const auto jlen = r.get<std::uint64_t>();
  d.config = config_from_json(nlohmann::json::parse(r.str(jlen)));
  d.step = r.get<std::uint64_t>();
  d.has_optimizer = r.get<std::uint8_t>() != 0;
  d.adam_step = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto nlen = r.get<std::uint32_t>();
    std::string name = r.str(nlen);
    CheckpointData::Array a;
    a.dtype = r.get<std::uint8_t>();
    if (a.dtype > 1) throw CheckpointError("checkpoint: array '" + name + "' has unknown dtype");
    const auto nd = r.get<std::uint8_t>();
    for (std::uint8_t k = 0; k < nd; ++k) a.shape.push_back(r.get<std::uint64_t>());
    const std::size_t n = shape_numel(a.shape);
    a.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) a.values[k] = a.dtype == 0 ? static_cast<double>(r.get<float>()) : r.get<double>();
    d.arrays.emplace(std::move(name), std::move(a));
  }
  if (r.pos() != buf.size() - 8) throw CheckpointError("checkpoint: trailing bytes before checksum");
  return d;
}

template <class T>
struct LoadedCheckpoint {
  ModelConfig config;
  ModelParams<Tensor<T>> params;
  std::uint64_t step = 0;
  std::optional<AdamState<T>> optimizer;
};

/// Loads a checkpoint at precision T. When `expected` is given, every
/// architectural field must match it (seed and paradigm excepted, since
/// neither changes the parameter layout or values).
template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path, const std::optional<ModelConfig>& expected = std::nullopt) {
  auto d = read_checkpoint(path);
  if (expected) {
    ModelConfig a = d.config, b = *expected;
    a.seed = b.seed;
    a.paradigm = b.paradigm;
    a.chunk_size = b.chunk_size;
    a.precision = b.precision;
    if (!(a == b))
      throw CheckpointError("checkpoint: '" + path + "' was written for config " + config_to_json(d.config).dump() +
                            ", which does not match the requested " + config_to_json(*expected).dump());
  }
  const std::uint8_t want = std::is_same_v<T, float> ? 0 : 1;
  LoadedCheckpoint<T> out;
  out.config = d.config;
  out.step = d.step;
  // Fresh layout from the stored config; values are filled by name.
  Rng dummy(0);
  ModelConfig layout = d.config;
  auto fill = [&](const std::string& name, const Tensor<T>& like) {
    auto it = d.arrays.find(name);
    if (it == d.arrays.end()) throw CheckpointError("checkpoint: missing array '" + name + "'");
    if (it->second.shape != like.shape())
      throw CheckpointError("checkpoint: array '" + name + "' has shape " + shape_str(it->second.shape) + ", expected " + shape_str(like.shape()));
    if (it->second.dtype != want)
      throw CheckpointError("checkpoint: array '" + name + "' is " + (it->second.dtype ? "fp64" : "fp32") + ", loading as " +
                            (want ? "fp64" : "fp32"));
    Tensor<T> t(like.shape());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(it->second.values[i]);
    return t;
  };
  auto shape_only = init_params<T>(layout, dummy);
  out.params = map_params<Tensor<T>>(shape_only, [&](const std::string& n, const Tensor<T>& t) { return fill(n, t); });
  if (d.has_optimizer) {
    AdamState<T> s;
    s.step = d.adam_step;
    s.m = map_params<Tensor<T>>(shape_only, [&](const std::string& n, const Tensor<T>& t) { return fill("adam.m." + n, t); });
    s.v = map_params<Tensor<T>>(shape_only, [&](const std::string& n, const Tensor<T>& t) { return fill("adam.v." + n, t); });
    out.optimizer = std::move(s);
  }
  return out;
}

}  // namespace retnet
