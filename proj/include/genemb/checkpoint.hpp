#pragma once

// Little-endian checkpoint layout:
//   "GEL1"
//   u32 n_config, then n_config i64 values
//     (layers, d_model, heads, d_ff, max_seq, vocab_size, seed)
//   u32 n_params, then per parameter:
//     u32 name_len, name bytes, u32 rank, rank x u64 extents, f64 payload

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "genemb/error.hpp"
#include "genemb/model.hpp"

namespace genemb {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace detail {

template <typename T>
void put(std::string& buf, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  buf.append(b, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& buf, std::string source) : buf_(buf), src_(std::move(source)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw DataError("checkpoint " + src_ + ": truncated at byte " + std::to_string(pos_));
  }
  const std::string& buf_;
  std::string src_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Transformer& model) {
  std::string buf = "GEL1";
  const auto& c = model.config();
  const std::int64_t cfg[] = {c.layers, c.d_model, c.heads, c.d_ff, c.max_seq, c.vocab_size, c.seed};
  detail::put<std::uint32_t>(buf, 7);
  for (auto v : cfg) detail::put<std::int64_t>(buf, v);
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) {
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(p.name.size()));
    buf += p.name;
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(p.tensor.shape().size()));
    for (auto e : p.tensor.shape()) detail::put<std::uint64_t>(buf, e);
    for (double v : p.tensor.data()) detail::put<double>(buf, v);
  }
  return buf;
}

inline Transformer deserialize_checkpoint(const std::string& buf, const std::string& source = "<memory>") {
  if (buf.size() < 4 || buf.compare(0, 4, "GEL1") != 0)
    throw DataError("checkpoint " + source + ": bad magic (expected GEL1)");
  detail::Reader r(buf, source);
  r.bytes(4);
  const auto n_cfg = r.get<std::uint32_t>();
  if (n_cfg != 7) throw DataError("checkpoint " + source + ": unexpected config block size " + std::to_string(n_cfg));
  std::int64_t v[7];
  for (auto& x : v) x = r.get<std::int64_t>();
  ModelConfig cfg;
  cfg.layers = static_cast<int>(v[0]);
  cfg.d_model = static_cast<int>(v[1]);
  cfg.heads = static_cast<int>(v[2]);
  cfg.d_ff = static_cast<int>(v[3]);
  cfg.max_seq = static_cast<int>(v[4]);
  cfg.vocab_size = static_cast<int>(v[5]);
  cfg.seed = v[6];
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw DataError("checkpoint " + source + ": " + e.what());
  }
  Transformer model(cfg);
  const auto n_params = r.get<std::uint32_t>();
  if (n_params != model.params().size())
    throw DataError("checkpoint " + source + ": " + std::to_string(n_params) + " parameters, model expects " +
                    std::to_string(model.params().size()));
  for (std::uint32_t k = 0; k < n_params; ++k) {
    const std::string name = r.bytes(r.get<std::uint32_t>());
    ad::Tensor& t = model.param(name);
    const auto rank = r.get<std::uint32_t>();
    ad::Shape shape(rank);
    for (auto& e : shape) e = r.get<std::uint64_t>();
    if (shape != t.shape())
      throw DataError("checkpoint " + source + ": parameter '" + name + "' has shape " + ad::shape_str(shape) +
                      ", expected " + ad::shape_str(t.shape()));
    for (double& x : t.mutable_data()) x = r.get<double>();
  }
  if (!r.at_end()) throw DataError("checkpoint " + source + ": trailing bytes");
  return model;
}

inline void save_checkpoint(const Transformer& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot open '" + path + "' for writing");
  const std::string buf = serialize_checkpoint(model);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw DataError("checkpoint: write to '" + path + "' failed");
}

inline Transformer load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str(), path);
}

}  // namespace genemb
