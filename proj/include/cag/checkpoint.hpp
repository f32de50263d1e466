#pragma once

// Versioned binary checkpoint. All integers little-endian, reals IEEE-754
// binary64 little-endian.
//
//   magic        8 bytes  "CAGCKPT\0"
//   version      u32      kCheckpointVersion
//   config_hash  u64      FNV-1a of the canonical model config JSON
//   config       str      RunConfig JSON plus "d_v" and "vocab_size"
//   vocab        u32 count, then count x str
//   params       u32 count, then per tensor:
//                  str name, u32 rank, rank x u64 extent, extent-product x f64
//   optimizer    u8 present; if 1: u64 step, u64 epoch, u64 skipped,
//                  then per param (same order) m values then v values
//   checksum     u64      FNV-1a of every preceding byte
//
// where str is a u64 byte length followed by the bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cag/model.hpp"
#include "cag/train.hpp"

namespace cag {

inline constexpr char kCheckpointMagic[8] = {'C', 'A', 'G', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  RunConfig config;
  ModelConfig model;
  Vocab vocab;
  ModelParams params;
  std::optional<OptimState> optim;
};

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.append(c, n);
  }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    buf_.append(s);
  }
  void array(const Array& a) {
    for (double v : a.data()) f64(v);
  }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  void need(std::size_t n, const std::string& field) const {
    if (data_.size() - pos_ < n)
      throw CheckpointError("checkpoint: truncated while reading " + field + " (need " + std::to_string(n) +
                            " bytes at offset " + std::to_string(pos_) + ")");
  }
  std::uint8_t u8(const std::string& field) {
    need(1, field);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32(const std::string& field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64(const std::string& field) {
    need(8, field);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_++])) << (8 * i);
    return v;
  }
  double f64(const std::string& field) { return std::bit_cast<double>(u64(field)); }
  std::string str(const std::string& field) {
    const std::uint64_t n = u64(field + " length");
    need(n, field);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  void array(Array& a, const std::string& field) {
    need(a.size() * 8, field);
    for (double& v : a.data()) v = f64(field);
  }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::size_t dim_of(const ModelConfig& m, const std::string& which) {
  if (which == "d") return m.d;
  if (which == "d_w") return m.d_w;
  if (which == "d_v") return m.d_v;
  return m.vocab;
}

}  // namespace detail

inline nlohmann::json checkpoint_config_json(const RunConfig& cfg, const ModelConfig& model) {
  nlohmann::json j = cfg.to_json();
  j.erase("out");  // same run in another directory gives the same bytes
  j["d_v"] = model.d_v;
  j["vocab_size"] = model.vocab;
  return j;
}

inline std::string serialize_checkpoint(const RunConfig& cfg, const ModelConfig& model, const Vocab& vocab,
                                        const ModelParams& params, const OptimState* optim) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u64(cfg.hash());
  w.str(checkpoint_config_json(cfg, model).dump());
  w.u32(static_cast<std::uint32_t>(vocab.size()));
  for (const auto& t : vocab.tokens()) w.str(t);
  const auto named = params.named();
  w.u32(static_cast<std::uint32_t>(named.size()));
  for (const auto& p : named) {
    w.str(p.name);
    const Shape& s = p.tensor.shape();
    w.u32(static_cast<std::uint32_t>(s.size()));
    for (std::size_t e : s) w.u64(e);
    w.array(p.tensor.value());
  }
  w.u8(optim ? 1 : 0);
  if (optim) {
    w.u64(optim->step);
    w.u64(optim->epoch);
    w.u64(optim->skipped);
    for (std::size_t k = 0; k < named.size(); ++k) {
      w.array(optim->first.at(k));
      w.array(optim->second.at(k));
    }
  }
  std::string out = w.buffer();
  detail::ByteWriter tail;
  tail.u64(fnv1a64(out));
  out += tail.buffer();
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, const ModelConfig& model,
                            const Vocab& vocab, const ModelParams& params, const OptimState* optim) {
  write_file(path, serialize_checkpoint(cfg, model, vocab, params, optim));
}

/// Parses and validates a checkpoint. When `expected` is given its
/// dimensions must match the stored ones.
inline Checkpoint parse_checkpoint(std::string_view bytes, const ModelConfig* expected = nullptr) {
  detail::ByteReader r(bytes);
  r.need(sizeof kCheckpointMagic, "magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw CheckpointError("checkpoint: bad magic (not a checkpoint file)");
  for (std::size_t i = 0; i < sizeof kCheckpointMagic; ++i) r.u8("magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: field 'version' is " + std::to_string(version) + ", this build reads " +
                          std::to_string(kCheckpointVersion));
  if (bytes.size() < r.pos() + 8) throw CheckpointError("checkpoint: truncated before checksum");
  {
    detail::ByteReader tail(bytes.substr(bytes.size() - 8));
    const std::uint64_t stored = tail.u64("checksum");
    if (stored != fnv1a64(bytes.substr(0, bytes.size() - 8)))
      throw CheckpointError("checkpoint: field 'checksum' does not match contents (truncated or corrupted file)");
  }
  const std::uint64_t hash = r.u64("config_hash");

  Checkpoint ck;
  nlohmann::json cj;
  try {
    cj = nlohmann::json::parse(r.str("config"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: field 'config' is not valid JSON: ") + e.what());
  }
  const std::size_t d_v = cj.value("d_v", std::size_t{0});
  const std::size_t vocab_size = cj.value("vocab_size", std::size_t{0});
  cj.erase("d_v");
  cj.erase("vocab_size");
  ck.config = RunConfig::from_json(cj);
  if (ck.config.hash() != hash)
    throw CheckpointError("checkpoint: field 'config_hash' does not match the stored config");

  std::vector<std::string> tokens(r.u32("vocab count"));
  for (auto& t : tokens) t = r.str("vocab token");
  ck.vocab = Vocab(std::move(tokens));
  if (ck.vocab.size() != vocab_size)
    throw CheckpointError("checkpoint: field 'vocab_size' is " + std::to_string(vocab_size) + " but " +
                          std::to_string(ck.vocab.size()) + " tokens are stored");
  ck.model = ck.config.model_config(vocab_size, d_v);

  if (expected) {
    for (const char* dim : {"d", "d_w", "d_v", "vocab"}) {
      const std::size_t have = detail::dim_of(ck.model, dim), want = detail::dim_of(*expected, dim);
      if (have != want)
        throw CheckpointError("checkpoint: dimension " + std::string(dim) + " mismatch (checkpoint has " +
                              std::to_string(have) + ", expected " + std::to_string(want) + ")");
    }
  }

  Rng scratch(0);
  ck.params = ModelParams::init(ck.model, scratch);
  const auto named = ck.params.named();
  const std::uint32_t count = r.u32("param count");
  if (count != named.size())
    throw CheckpointError("checkpoint: field 'param count' is " + std::to_string(count) + ", config implies " +
                          std::to_string(named.size()));
  for (const auto& p : named) {
    const std::string name = r.str("param name");
    if (name != p.name) throw CheckpointError("checkpoint: expected parameter '" + p.name + "', found '" + name + "'");
    const std::uint32_t rank = r.u32(name + " rank");
    Shape shape(rank);
    for (auto& e : shape) e = r.u64(name + " extent");
    if (shape != p.tensor.shape())
      throw CheckpointError("checkpoint: parameter '" + name + "' has shape " + shape_string(shape) +
                            " but config (d=" + std::to_string(ck.model.d) + ", d_w=" + std::to_string(ck.model.d_w) +
                            ") implies " + shape_string(p.tensor.shape()));
    Tensor t = p.tensor;
    r.array(t.mutable_value(), name);
  }
  if (r.u8("optimizer flag") == 1) {
    OptimState o(AdamOptions{ck.config.lr, 0.9, 0.999, 1e-8, ck.config.lr_decay, ck.config.lr_decay_every}, named);
    o.step = r.u64("optimizer step");
    o.epoch = r.u64("optimizer epoch");
    o.skipped = r.u64("optimizer skipped");
    for (std::size_t k = 0; k < named.size(); ++k) {
      r.array(o.first[k], "optimizer first moment of " + named[k].name);
      r.array(o.second[k], "optimizer second moment of " + named[k].name);
    }
    ck.optim = std::move(o);
  }
  if (r.pos() + 8 != bytes.size())
    throw CheckpointError("checkpoint: " + std::to_string(bytes.size() - 8 - r.pos()) + " unexpected trailing bytes");
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr) {
  return parse_checkpoint(read_file(path), expected);
}

}  // namespace cag
