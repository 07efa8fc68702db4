#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "arflow/config.hpp"
#include "arflow/errors.hpp"
#include "arflow/trainer.hpp"

namespace arflow {

// Raised when a checkpoint was written by an incompatible format version.
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline constexpr char kCheckpointMagic[8] = {'A', 'R', 'F', 'L', 'O', 'W', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout, all integers little-endian:
///
///     magic[8] version:u32
///     config: len:u32 text            (TrainConfig as key = value lines)
///     step:u64
///     params: count:u32 tensor*
///     ema:    count:u32 tensor*
///     adam:   t:u64 count:u32 tensor*  (m.<name> then v.<name> per parameter)
///     rng:    len:u32 text
///     "END\0"
///
/// tensor = name_len:u32 name rank:u32 dim:u64* payload:f32*
namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void text(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void tensor(const std::string& name, const Shape& shape, std::span<const float> data) {
    text(name);
    u32(static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) u64(d);
    for (float v : data) f32(v);
  }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(std::vector<std::uint8_t> buf, std::string source) : buf_(std::move(buf)), src_(std::move(source)) {}

  void need(std::size_t n, const char* what) {
    if (buf_.size() - pos_ < n) throw CheckpointError(src_ + ": truncated while reading " + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_++]) << (8 * i);
    return v;
  }
  std::string text(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void raw(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }

  /// Reads a tensor record and checks it against the expected name and shape.
  void tensor_into(const std::string& name, const Shape& shape, std::span<float> out) {
    const std::string got = text("tensor name");
    if (got != name) throw CheckpointError(src_ + ": expected tensor " + name + ", found " + got);
    const std::uint32_t rank = u32("tensor rank");
    Shape s(rank);
    for (auto& d : s) d = u64("tensor dims");
    if (s != shape)
      throw CheckpointError(src_ + ": tensor " + name + " has shape " + shape_str(s) + ", expected " +
                            shape_str(shape));
    for (float& v : out) v = std::bit_cast<float>(u32("tensor payload"));
  }

  bool at_end() const { return pos_ == buf_.size(); }
  const std::string& source() const { return src_; }

 private:
  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
  std::string src_;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const TrainState<float>& st) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.text(to_text(st.cfg));
  w.u64(st.step);

  const auto& params = st.net.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) w.tensor(p.name, p.value.shape(), p.value.data());

  const auto& shadow = st.ema.parameters();
  w.u32(static_cast<std::uint32_t>(shadow.size()));
  for (const auto& p : shadow) w.tensor(p.name, p.value.shape(), p.value.data());

  w.u64(st.opt.steps());
  w.u32(static_cast<std::uint32_t>(2 * params.size()));
  for (std::size_t k = 0; k < params.size(); ++k) {
    w.tensor("m." + params[k].name, params[k].value.shape(), st.opt.first_moments()[k]);
    w.tensor("v." + params[k].name, params[k].value.shape(), st.opt.second_moments()[k]);
  }

  std::ostringstream rng;
  rng << st.rng;
  w.text(rng.str());
  w.raw("END", 4);
  return w.bytes();
}

inline TrainState<float> deserialize_checkpoint(std::vector<std::uint8_t> bytes, const std::string& source) {
  detail::ByteReader r(std::move(bytes), source);
  char magic[8];
  r.raw(magic, sizeof magic, "magic");
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw CheckpointError(source + ": not a checkpoint file");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw CheckpointVersionError(source + ": checkpoint format version " + std::to_string(version) +
                                 ", this build reads version " + std::to_string(kCheckpointVersion));

  TrainConfig cfg;
  try {
    cfg = parse_train_config(r.text("config"), source + " config block");
  } catch (const ContractError& e) {
    throw CheckpointError(e.what());
  }
  TrainState<float> st(cfg);
  st.step = r.u64("step");

  auto read_params = [&](std::vector<NamedParam<float>>& ps, const char* what) {
    if (r.u32(what) != ps.size()) throw CheckpointError(source + ": " + what + " count does not match architecture");
    for (auto& p : ps) r.tensor_into(p.name, p.value.shape(), p.value.mutable_data());
  };
  read_params(st.net.parameters(), "parameter");
  read_params(st.ema.parameters(), "EMA");

  st.opt.set_steps(r.u64("optimizer step"));
  auto& params = st.net.parameters();
  if (r.u32("optimizer") != 2 * params.size()) throw CheckpointError(source + ": optimizer block size mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    r.tensor_into("m." + params[k].name, params[k].value.shape(), st.opt.first_moments()[k]);
    r.tensor_into("v." + params[k].name, params[k].value.shape(), st.opt.second_moments()[k]);
  }

  std::istringstream rng(r.text("rng"));
  rng >> st.rng;
  if (!rng) throw CheckpointError(source + ": bad RNG state");
  char end[4];
  r.raw(end, 4, "end marker");
  if (std::memcmp(end, "END", 4) != 0 || !r.at_end()) throw CheckpointError(source + ": trailing or corrupt data");
  return st;
}

inline void save_checkpoint(const TrainState<float>& st, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(st);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError(path.string() + ": cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(path.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

inline TrainState<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path.string() + ": cannot open checkpoint");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(std::move(bytes), path.string());
}

}  // namespace arflow
