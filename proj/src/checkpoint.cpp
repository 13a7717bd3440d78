#include "srnet/checkpoint.hpp"

#include <bit>
#include <cstring>

namespace srnet {

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void shape(const Shape& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    for (std::size_t d : s) u64(d);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw FormatError("checkpoint truncated");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(in_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Shape shape() {
    const std::uint32_t rank = u32();
    if (rank == 0 || rank > 8) throw FormatError("checkpoint: implausible rank " + std::to_string(rank));
    Shape s(rank);
    for (auto& d : s) {
      d = u64();
      if (d == 0) throw FormatError("checkpoint: zero dimension");
    }
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::string& in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes("SRNT", 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, t] : ckpt.params) {
    w.str(name);
    w.shape(t.shape());
    for (float x : t.data()) w.f32(x);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.masks.size()));
  for (const MaskRecord& m : ckpt.masks) {
    w.str(m.owner);
    w.shape(m.binary.shape());
    const std::size_t n = m.binary.numel();
    std::string packed((n + 7) / 8, '\0');
    for (std::size_t i = 0; i < n; ++i)
      if (m.binary[i] != 0.0f) packed[i / 8] = static_cast<char>(packed[i / 8] | (1u << (i % 8)));
    w.bytes(packed.data(), packed.size());
    w.u8(m.real ? 1 : 0);
    if (m.real) {
      if (m.real->numel() != n) throw ShapeError("mask record `" + m.owner + "`: real mask size mismatch");
      w.f32(m.threshold);
      for (float x : m.real->data()) w.f32(x);
    }
  }
  w.str(format_key_values(ckpt.meta));
  return w.take();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), "SRNT", 4) != 0) throw FormatError("not an SRNT checkpoint");
  Reader r(bytes);
  for (int i = 0; i < 4; ++i) r.u8();
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const std::uint32_t np = r.u32();
  for (std::uint32_t p = 0; p < np; ++p) {
    std::string name = r.str();
    Shape shape = r.shape();
    Tensor t(shape);
    r.need(t.numel() * 4);
    for (float& x : t.data()) x = r.f32();
    ckpt.params.emplace_back(std::move(name), std::move(t));
  }
  const std::uint32_t nm = r.u32();
  for (std::uint32_t k = 0; k < nm; ++k) {
    MaskRecord m;
    m.owner = r.str();
    m.binary = Tensor(r.shape());
    const std::size_t n = m.binary.numel();
    r.need((n + 7) / 8);
    std::uint8_t byte = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (i % 8 == 0) byte = r.u8();
      m.binary[i] = (byte >> (i % 8)) & 1u ? 1.0f : 0.0f;
    }
    if (r.u8()) {
      m.threshold = r.f32();
      Tensor real(m.binary.shape());
      r.need(n * 4);
      for (float& x : real.data()) x = r.f32();
      m.real = std::move(real);
    }
    ckpt.masks.push_back(std::move(m));
  }
  ckpt.meta = parse_key_values(r.str());
  if (!r.done()) throw FormatError("trailing bytes after checkpoint");
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_text_file(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_text_file(path)); }

}  // namespace srnet
