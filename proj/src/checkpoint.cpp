#include "waveformer/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace waveformer {

namespace {

constexpr char kMagic[4] = {'W', 'F', 'C', 'K'};

class Writer {
 public:
  void u8(std::uint8_t v) { buf.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }

  std::vector<std::uint8_t> buf;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes) : b_(bytes) {}
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    const auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large payloads.
  for (std::size_t off = 0; off < bytes.size();) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::size_t payload_count(const CheckpointEntry& e) {
  return std::visit(
      [](const auto& p) -> std::size_t {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, QuantizedTensor>)
          return p.values.size();
        else
          return p.size();
      },
      e.payload);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(std::span<const CheckpointEntry> entries) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    const Shape shape = e.dtype() == DType::kText ? Shape{payload_count(e)} : e.shape;
    if (shape_numel(shape) != payload_count(e))
      throw DimensionError("checkpoint entry '" + e.name + "': shape does not match payload");
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.u8(static_cast<std::uint8_t>(e.dtype()));
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) w.u32(static_cast<std::uint32_t>(d));
    std::visit(
        [&](const auto& p) {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, std::vector<float>>) {
            for (float v : p) w.f32(v);
          } else if constexpr (std::is_same_v<P, std::vector<double>>) {
            for (double v : p) w.f64(v);
          } else if constexpr (std::is_same_v<P, QuantizedTensor>) {
            if (p.zero_point != 0) throw FormatError("checkpoint stores symmetric int8 only");
            w.f32(p.scale);
            w.bytes(p.values.data(), p.values.size());
          } else {
            w.bytes(p.data(), p.size());
          }
        },
        e.payload);
  }
  w.u32(crc_of(std::span(w.buf).subspan(4)));
  return std::move(w.buf);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  if (bytes.size() < 16) throw FormatError("checkpoint truncated");
  Reader r(bytes.subspan(4));
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const auto body = bytes.subspan(4, bytes.size() - 8);
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
  if (crc_of(body) != stored) throw ChecksumError("checkpoint CRC mismatch");

  Reader in(body.subspan(4));
  const std::uint32_t count = in.u32();
  Checkpoint out;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto name = in.take(in.u32());
    e.name.assign(name.begin(), name.end());
    const std::uint8_t tag = in.u8();
    const std::uint32_t rank = in.u32();
    in.need(std::size_t{rank} * 4);
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(in.u32());
    const std::size_t n = shape_numel(e.shape);
    switch (static_cast<DType>(tag)) {
      case DType::kF32: {
        in.need(n * 4);
        std::vector<float> v(n);
        for (auto& x : v) x = in.f32();
        e.payload = std::move(v);
        break;
      }
      case DType::kF64: {
        in.need(n * 8);
        std::vector<double> v(n);
        for (auto& x : v) x = in.f64();
        e.payload = std::move(v);
        break;
      }
      case DType::kI8: {
        QuantizedTensor q;
        q.shape = e.shape;
        q.scale = in.f32();
        const auto raw = in.take(n);
        q.values.resize(n);
        std::memcpy(q.values.data(), raw.data(), n);
        e.payload = std::move(q);
        break;
      }
      case DType::kText: {
        if (rank != 1) throw FormatError("text entry '" + e.name + "' must have rank 1");
        const auto raw = in.take(n);
        e.payload = std::string(raw.begin(), raw.end());
        break;
      }
      default:
        throw FormatError("entry '" + e.name + "' has unknown dtype " + std::to_string(tag));
    }
    out.push_back(std::move(e));
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes after the last checkpoint entry");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, std::span<const CheckpointEntry> entries) {
  const auto bytes = encode_checkpoint(entries);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot write checkpoint " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw InputError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

const CheckpointEntry* find_entry(const Checkpoint& ckpt, const std::string& name) {
  for (const auto& e : ckpt)
    if (e.name == name) return &e;
  return nullptr;
}

template <typename T>
Checkpoint model_checkpoint(const Model<T>& model, const std::string& config_text, bool quantize) {
  Checkpoint out;
  out.push_back({"config", {config_text.size()}, config_text});
  for (const auto& p : model.parameters()) {
    const auto& t = p.tensor;
    if (quantize && is_quantizable(t.shape())) {
      std::vector<float> v(t.data().begin(), t.data().end());
      out.push_back({p.name, t.shape(), quantize_symmetric(v, t.shape())});
    } else if constexpr (std::is_same_v<T, float>) {
      out.push_back({p.name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
    } else {
      out.push_back({p.name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
    }
  }
  return out;
}

template <typename T>
void load_parameters(Model<T>& model, const Checkpoint& ckpt) {
  for (const auto& p : model.parameters()) {
    const auto* e = find_entry(ckpt, p.name);
    if (!e) throw ShapeMismatchError(p.name, "checkpoint has no tensor '" + p.name + "'");
    if (e->shape != p.tensor.shape())
      throw ShapeMismatchError(p.name, "tensor '" + p.name + "': checkpoint shape " + shape_str(e->shape) +
                                           " vs model " + shape_str(p.tensor.shape()));
    auto dst = p.tensor;
    auto data = dst.mutable_data();
    std::visit(
        [&](const auto& src) {
          using P = std::decay_t<decltype(src)>;
          if constexpr (std::is_same_v<P, QuantizedTensor>) {
            const auto v = src.dequantize();
            for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(v[i]);
          } else if constexpr (std::is_same_v<P, std::string>) {
            throw FormatError("tensor '" + p.name + "' is stored as text");
          } else {
            for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(src[i]);
          }
        },
        e->payload);
  }
}

template Checkpoint model_checkpoint(const Model<float>&, const std::string&, bool);
template Checkpoint model_checkpoint(const Model<double>&, const std::string&, bool);
template void load_parameters(Model<float>&, const Checkpoint&);
template void load_parameters(Model<double>&, const Checkpoint&);

}  // namespace waveformer
