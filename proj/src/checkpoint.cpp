#include "mflow/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "mflow/errors.hpp"

namespace mflow {

namespace {

constexpr char kMagic[4] = {'M', 'M', '2', 'G'};
constexpr std::uint8_t kF32 = 1;

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint8_t u8() { return take(1)[0]; }
  std::uint32_t u32() {
    auto p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    auto p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    auto p = take(n);
    return std::string(p.begin(), p.end());
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > b_.size() - pos_) throw FormatError("checkpoint truncated");
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t narrow32(std::size_t v, const char* what) {
  if (v > 0xffffffffu) throw FormatError(std::string(what) + " does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& data) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(narrow32(data.modalities.size(), "modality count"));
  for (const ModalitySpec& m : data.modalities) {
    w.str(m.name);
    w.u8(m.kind == ModalityKind::kText ? 1 : 0);
    w.u32(narrow32(m.latent.channels, "channels"));
    w.u32(narrow32(m.latent.height, "height"));
    w.u32(narrow32(m.latent.width, "width"));
    w.u32(narrow32(m.context_len, "context_len"));
    w.u32(narrow32(m.embed_dim, "embed_dim"));
  }
  w.u32(narrow32(data.params.size(), "parameter count"));
  std::uint64_t offset = 0;
  for (const CheckpointParam& p : data.params) {
    if (shape_numel(p.shape) != p.values.size()) {
      throw ShapeError("parameter " + p.name + " has " + std::to_string(p.values.size()) +
                       " values for shape " + shape_str(p.shape));
    }
    w.str(p.name);
    w.u8(kF32);
    if (p.shape.size() > 255) throw FormatError("parameter " + p.name + " has too many axes");
    w.u8(static_cast<std::uint8_t>(p.shape.size()));
    for (std::size_t e : p.shape) w.u32(narrow32(e, "extent"));
    w.u64(offset);
    offset += 4 * p.values.size();
  }
  w.u64(offset);
  for (const CheckpointParam& p : data.params) w.bytes(p.values.data(), 4 * p.values.size());
  const std::uint32_t crc = crc_of(w.buffer());
  w.u32(crc);
  return std::move(w.buffer());
}

CheckpointData decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  if (bytes.size() < 12) throw FormatError("checkpoint truncated");
  Reader r(bytes.first(bytes.size() - 4));
  r.take(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t stored_crc = Reader(bytes.last(4)).u32();
  if (crc_of(bytes.first(bytes.size() - 4)) != stored_crc) {
    throw IntegrityError("checkpoint CRC mismatch");
  }
  CheckpointData data;
  const std::uint32_t nmod = r.u32();
  for (std::uint32_t i = 0; i < nmod; ++i) {
    ModalitySpec m;
    m.name = r.str();
    const std::uint8_t kind = r.u8();
    if (kind > 1) throw FormatError("unknown modality kind " + std::to_string(kind));
    m.kind = kind == 1 ? ModalityKind::kText : ModalityKind::kImage;
    m.latent.channels = r.u32();
    m.latent.height = r.u32();
    m.latent.width = r.u32();
    m.context_len = r.u32();
    m.embed_dim = r.u32();
    data.modalities.push_back(std::move(m));
  }
  const std::uint32_t nparam = r.u32();
  std::vector<std::uint64_t> offsets;
  for (std::uint32_t i = 0; i < nparam; ++i) {
    CheckpointParam p;
    p.name = r.str();
    const std::uint8_t dtype = r.u8();
    if (dtype != kF32) throw FormatError("parameter " + p.name + ": unsupported dtype");
    const std::uint8_t ndim = r.u8();
    for (std::uint8_t k = 0; k < ndim; ++k) p.shape.push_back(r.u32());
    offsets.push_back(r.u64());
    data.params.push_back(std::move(p));
  }
  const std::uint64_t payload_len = r.u64();
  auto payload = r.take(static_cast<std::size_t>(payload_len));
  if (r.pos() != bytes.size() - 4) throw FormatError("trailing bytes after checkpoint payload");
  for (std::size_t i = 0; i < data.params.size(); ++i) {
    CheckpointParam& p = data.params[i];
    const std::size_t n = shape_numel(p.shape);
    if (offsets[i] > payload_len || 4 * n > payload_len - offsets[i]) {
      throw FormatError("parameter " + p.name + " lies outside the payload");
    }
    p.values.resize(n);
    std::memcpy(p.values.data(), payload.data() + offsets[i], 4 * n);
  }
  return data;
}

CheckpointData snapshot(const System& system) {
  CheckpointData data;
  data.modalities = system.registry().specs();
  for (const ParamRef& p : system.parameters()) {
    CheckpointParam cp{p.name, p.tensor.shape(), {}};
    auto v = p.tensor.data();
    cp.values.assign(v.begin(), v.end());
    data.params.push_back(std::move(cp));
  }
  return data;
}

void restore(System& system, const CheckpointData& data) {
  const auto& specs = system.registry().specs();
  if (data.modalities.size() != specs.size()) {
    throw FormatError("checkpoint has " + std::to_string(data.modalities.size()) +
                      " modalities, model has " + std::to_string(specs.size()));
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const ModalitySpec& a = data.modalities[i];
    const ModalitySpec& b = specs[i];
    if (a.name != b.name || a.kind != b.kind || !(a.latent == b.latent) ||
        a.context_len != b.context_len || a.embed_dim != b.embed_dim) {
      throw FormatError("checkpoint modality '" + a.name + "' does not match model modality '" +
                        b.name + "'");
    }
  }
  auto params = system.parameters();
  if (params.size() != data.params.size()) {
    throw FormatError("checkpoint has " + std::to_string(data.params.size()) +
                      " parameters, model has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != data.params[i].name || params[i].tensor.shape() != data.params[i].shape) {
      throw FormatError("checkpoint parameter " + data.params[i].name + " " +
                        shape_str(data.params[i].shape) + " does not match " + params[i].name +
                        " " + shape_str(params[i].tensor.shape()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.mutable_data();
    const auto& src = data.params[i].values;
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<double>(src[k]);
  }
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), {});
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: " + path);
}

void save_checkpoint(const System& system, const std::string& path) {
  write_file(path, encode_checkpoint(snapshot(system)));
}

void load_checkpoint(System& system, const std::string& path) {
  restore(system, decode_checkpoint(read_file(path)));
}

}  // namespace mflow
