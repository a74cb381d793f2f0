#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "sedkit/encoder/model.hpp"
#include "sedkit/flow/coupling_flow.hpp"
#include "sedkit/io/hash.hpp"

namespace sedkit {

/// Unreadable checkpoint: bad checksum, truncation, wrong kind or version.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class CheckpointKind : std::uint32_t { Encoder = 1, Flow = 2 };

inline constexpr char kCheckpointMagic[8] = {'S', 'E', 'D', 'K', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

constexpr std::uint32_t tag(const char (&s)[5]) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(s[0])) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(s[1])) << 8 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(s[2])) << 16 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(s[3])) << 24;
}

inline constexpr std::uint32_t kArch = tag("ARCH");
inline constexpr std::uint32_t kVocab = tag("VOCB");
inline constexpr std::uint32_t kParams = tag("PARM");
inline constexpr std::uint32_t kFlow = tag("FLOW");

/// Little-endian byte sink.
class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    buf_ += s;
  }
  void raw(const std::string& s) { buf_ += s; }
  void section(std::uint32_t t, const Writer& payload) {
    u32(t);
    u64(payload.buf_.size());
    buf_ += payload.buf_;
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const char* data, std::size_t size) : data_(data), size_(size) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const auto n = u64();
    need(n);
    std::string s(data_ + pos_, n);
    pos_ += n;
    return s;
  }
  Reader sub(std::size_t n) {
    need(n);
    Reader r(data_ + pos_, n);
    pos_ += n;
    return r;
  }
  bool done() const { return pos_ == size_; }

 private:
  void need(std::uint64_t n) const {
    if (n > size_ - pos_) throw CheckpointError("checkpoint: section overruns its bounds");
  }
  const char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline void write_params(Writer& w, const std::vector<std::pair<std::string, Var>>& params) {
  w.u64(params.size());
  for (const auto& [name, var] : params) {
    const Tensor& t = var.value();
    w.str(name);
    w.u64(t.rank());
    for (auto d : t.shape()) w.u64(d);
    for (double v : t.storage()) w.f64(v);
  }
}

inline void read_params_into(Reader r, const std::vector<std::pair<std::string, Var>>& params) {
  const auto count = r.u64();
  if (count != params.size()) throw CheckpointError("checkpoint: parameter count mismatch");
  for (auto [name, var] : params) {
    const auto stored = r.str();
    if (stored != name) throw CheckpointError("checkpoint: expected parameter '" + name + "', found '" + stored + "'");
    const auto rank = r.u64();
    Shape shape;
    for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(r.u64());
    if (shape != var.shape()) throw CheckpointError("checkpoint: shape mismatch for " + name);
    std::vector<double> values(shape_size(shape));
    for (auto& v : values) v = r.f64();
    var.mutable_value() = Tensor(shape, std::move(values));
  }
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes in parameter section");
}

inline std::string seal(CheckpointKind kind, const Writer& body) {
  Writer w;
  w.raw(std::string(kCheckpointMagic, 8));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(kind));
  w.raw(body.bytes());
  const auto digest = sha256(w.bytes());
  w.raw(std::string(reinterpret_cast<const char*>(digest.data()), digest.size()));
  return w.bytes();
}

/// Verifies checksum, magic, version and kind; returns the section map.
inline std::map<std::uint32_t, std::pair<const char*, std::size_t>> open(const std::string& bytes, CheckpointKind kind) {
  constexpr std::size_t header = 8 + 4 + 4;
  if (bytes.size() < header + 32) throw CheckpointError("checkpoint: file truncated");
  const std::size_t body_end = bytes.size() - 32;
  const auto digest = sha256(std::string_view(bytes.data(), body_end));
  if (std::memcmp(digest.data(), bytes.data() + body_end, 32) != 0) {
    throw CheckpointError("checkpoint: checksum mismatch (file corrupt or truncated)");
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw CheckpointError("checkpoint: not a sedkit checkpoint");
  Reader r(bytes.data() + 8, body_end - 8);
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported format version " + std::to_string(version) + " (this build reads " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const auto stored_kind = r.u32();
  if (stored_kind != static_cast<std::uint32_t>(kind)) {
    throw CheckpointError("checkpoint: expected kind " + std::to_string(static_cast<std::uint32_t>(kind)) + ", found " +
                          std::to_string(stored_kind));
  }
  std::map<std::uint32_t, std::pair<const char*, std::size_t>> sections;
  const char* base = bytes.data() + header;
  std::size_t offset = 0;
  while (!r.done()) {
    const auto t = r.u32();
    const auto len = r.u64();
    offset += 12;
    r.sub(len);
    sections[t] = {base + offset, len};
    offset += len;
  }
  return sections;
}

inline Reader section(const std::map<std::uint32_t, std::pair<const char*, std::size_t>>& s, std::uint32_t t,
                      const char* name) {
  auto it = s.find(t);
  if (it == s.end()) throw CheckpointError(std::string("checkpoint: missing section ") + name);
  return Reader(it->second.first, it->second.second);
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace ckpt_detail

inline std::string encoder_checkpoint_bytes(const EncoderModel& model) {
  using namespace ckpt_detail;
  Writer arch, vocab, params, body;
  const auto& a = model.arch();
  for (std::uint64_t v : {a.layers, a.hidden, a.heads, a.ffn, a.max_len}) arch.u64(v);
  vocab.u64(model.vocab().size());
  for (const auto& t : model.vocab().tokens()) vocab.str(t);
  write_params(params, model.named_parameters());
  body.section(kArch, arch);
  body.section(kVocab, vocab);
  body.section(kParams, params);
  return seal(CheckpointKind::Encoder, body);
}

inline EncoderModel encoder_from_checkpoint_bytes(const std::string& bytes) {
  using namespace ckpt_detail;
  const auto sections = open(bytes, CheckpointKind::Encoder);
  auto ar = section(sections, kArch, "ARCH");
  Architecture arch;
  arch.layers = ar.u64();
  arch.hidden = ar.u64();
  arch.heads = ar.u64();
  arch.ffn = ar.u64();
  arch.max_len = ar.u64();
  auto vr = section(sections, kVocab, "VOCB");
  std::vector<std::string> tokens(vr.u64());
  for (auto& t : tokens) t = vr.str();
  std::shared_ptr<const Vocabulary> vocab;
  try {
    arch.validate();
    vocab = std::make_shared<const Vocabulary>(Vocabulary::from_id_order(tokens));
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  EncoderModel model(arch, vocab, 0);
  read_params_into(section(sections, kParams, "PARM"), model.named_parameters());
  return model;
}

inline std::string flow_checkpoint_bytes(const CouplingFlow& flow) {
  using namespace ckpt_detail;
  Writer meta, params, body;
  meta.u64(flow.dim());
  meta.u64(flow.hidden());
  meta.u64(flow.num_layers());
  write_params(params, flow.named_parameters());
  body.section(kFlow, meta);
  body.section(kParams, params);
  return seal(CheckpointKind::Flow, body);
}

inline CouplingFlow flow_from_checkpoint_bytes(const std::string& bytes) {
  using namespace ckpt_detail;
  const auto sections = open(bytes, CheckpointKind::Flow);
  auto mr = section(sections, kFlow, "FLOW");
  const auto dim = mr.u64(), hidden = mr.u64(), layers = mr.u64();
  if (dim < 2 || layers < 2 || hidden == 0 || dim > (1u << 20) || hidden > (1u << 20) || layers > 1024) {
    throw CheckpointError("checkpoint: implausible flow dimensions");
  }
  CouplingFlow flow(dim, layers, hidden);
  read_params_into(section(sections, kParams, "PARM"), flow.named_parameters());
  return flow;
}

inline void save_checkpoint(const EncoderModel& model, const std::filesystem::path& path) {
  ckpt_detail::write_file(path, encoder_checkpoint_bytes(model));
}
inline void save_checkpoint(const CouplingFlow& flow, const std::filesystem::path& path) {
  ckpt_detail::write_file(path, flow_checkpoint_bytes(flow));
}

inline EncoderModel load_encoder_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  return encoder_from_checkpoint_bytes(std::string(std::istreambuf_iterator<char>(in), {}));
}
inline CouplingFlow load_flow_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  return flow_from_checkpoint_bytes(std::string(std::istreambuf_iterator<char>(in), {}));
}

}  // namespace sedkit
