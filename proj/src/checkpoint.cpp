#include "pfseg/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

namespace pfseg {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'P', 'F', 'S', 'E', 'G', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  template <typename V>
  void pod(V v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    buf.insert(buf.end(), p, p + sizeof(V));
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    buf.insert(buf.end(), s.begin(), s.end());
  }
  std::vector<unsigned char> buf;
};

class Parser {
 public:
  Parser(const std::vector<unsigned char>& b, std::size_t end, std::string source) : b_(b), end_(end), source_(std::move(source)) {}
  template <typename V>
  V pod() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, b_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<unsigned char> raw(std::size_t n) {
    need(n);
    std::vector<unsigned char> out(b_.begin() + static_cast<std::ptrdiff_t>(pos_), b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) fail(ErrorKind::Checkpoint, source_ + ": truncated checkpoint");
  }
  const std::vector<unsigned char>& b_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string source_;
};

std::uint32_t crc_of(const unsigned char* data, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

}  // namespace

std::vector<double> CheckpointEntry::values() const {
  const auto n = bytes.size() / dtype_size(dtype);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (dtype == DType::F32) {
      float f;
      std::memcpy(&f, bytes.data() + 4 * i, 4);
      out[i] = f;
    } else {
      std::memcpy(&out[i], bytes.data() + 8 * i, 8);
    }
  }
  return out;
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

std::vector<unsigned char> serialize(const Checkpoint& ckpt) {
  Writer w;
  w.buf.insert(w.buf.end(), kMagic, kMagic + 8);
  w.pod(kVersion);
  w.pod(static_cast<std::uint32_t>(ckpt.metadata.size()));
  for (const auto& [k, v] : ckpt.metadata) {
    w.str(k);
    w.str(v);
  }
  w.pod(static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    w.str(e.name);
    w.pod(static_cast<std::uint8_t>(e.dtype));
    w.pod(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.pod(static_cast<std::int64_t>(d));
    w.pod(static_cast<std::uint64_t>(e.bytes.size()));
    w.buf.insert(w.buf.end(), e.bytes.begin(), e.bytes.end());
  }
  w.pod(crc_of(w.buf.data(), w.buf.size()));
  return std::move(w.buf);
}

Checkpoint deserialize(const std::vector<unsigned char>& bytes, const std::string& source) {
  if (bytes.size() < 8 + 4 + 4 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    fail(ErrorKind::Checkpoint, source + ": not a checkpoint (bad magic)");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (crc_of(bytes.data(), body) != stored) fail(ErrorKind::Checkpoint, source + ": checksum mismatch (file is corrupted)");
  Parser p(bytes, body, source);
  p.raw(8);
  const auto version = p.pod<std::uint32_t>();
  if (version != kVersion) fail(ErrorKind::Checkpoint, source + ": unsupported version " + std::to_string(version));
  Checkpoint c;
  const auto n_meta = p.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = p.str();
    c.metadata[k] = p.str();
  }
  const auto n = p.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    CheckpointEntry e;
    e.name = p.str();
    const auto dt = p.pod<std::uint8_t>();
    if (dt != 1 && dt != 2) fail(ErrorKind::Checkpoint, source + ": entry '" + e.name + "' has unknown dtype");
    e.dtype = static_cast<DType>(dt);
    const auto rank = p.pod<std::uint32_t>();
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(p.pod<std::int64_t>());
    const auto nbytes = p.pod<std::uint64_t>();
    if (nbytes != static_cast<std::uint64_t>(numel(e.shape)) * dtype_size(e.dtype))
      fail(ErrorKind::Checkpoint, source + ": entry '" + e.name + "' size disagrees with its shape");
    e.bytes = p.raw(nbytes);
    c.entries.push_back(std::move(e));
  }
  if (p.pos() != body) fail(ErrorKind::Checkpoint, source + ": trailing bytes");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const auto bytes = serialize(ckpt);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write '" + tmp + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      std::remove(tmp.c_str());
      fail(ErrorKind::Io, "write failed for '" + tmp + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::remove(tmp.c_str());
    fail(ErrorKind::Io, "cannot move checkpoint into place at '" + path + "': " + ec.message());
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open checkpoint '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes, path);
}

template <typename T>
Checkpoint to_checkpoint(const SegModel<T>& model) {
  Checkpoint c;
  c.metadata["config"] = to_json(model.config()).dump();
  bool deploy = false;
  for (const auto* a : model.adapters())
    if (a->kind() == AdapterKind::LW && a->reparam.mode() == BlockMode::Deploy) deploy = true;
  c.metadata["mode"] = deploy ? "deploy" : "train";
  bool merged = model.config().decoder.lora;
  const auto params = model.parameters();
  for (const auto& p : params)
    if (p.name.ends_with(".lora_A")) merged = false;
  c.metadata["lora"] = merged ? "merged" : "separate";
  Json manifest{{"frozen", Json::array()}, {"learnable", Json::array()}};
  for (const auto& p : params) {
    const bool learn = classify_parameter(p.name, model.config()) == ParamRole::Learnable;
    manifest[learn ? "learnable" : "frozen"].push_back(p.name);
    CheckpointEntry e;
    e.name = p.name;
    e.dtype = sizeof(T) == 4 ? DType::F32 : DType::F64;
    e.shape = p.tensor.shape();
    const auto d = p.tensor.data();
    e.bytes.resize(d.size() * sizeof(T));
    std::memcpy(e.bytes.data(), d.data(), e.bytes.size());
    c.entries.push_back(std::move(e));
  }
  c.metadata["manifest"] = manifest.dump();
  c.metadata["library_version"] = PFSEG_VERSION;
  return c;
}

template <typename T>
SegModel<T> model_from_checkpoint(const Checkpoint& ckpt) {
  const auto it = ckpt.metadata.find("config");
  if (it == ckpt.metadata.end()) fail(ErrorKind::Checkpoint, "checkpoint has no model config");
  SegModel<T> model = SegModel<T>::make(model_config_from_json(parse_json(it->second, "checkpoint config")));
  const auto mode = ckpt.metadata.count("mode") ? ckpt.metadata.at("mode") : "train";
  const auto lora = ckpt.metadata.count("lora") ? ckpt.metadata.at("lora") : "separate";
  if (mode == "deploy") model = model.fused();
  if (lora == "merged") model = model.lora_merged();
  auto params = model.parameters();
  std::set<std::string> expected;
  for (auto& p : params) {
    expected.insert(p.name);
    const auto* e = ckpt.find(p.name);
    if (!e) fail(ErrorKind::Checkpoint, "checkpoint is missing '" + p.name + "'");
    if (e->shape != p.tensor.shape())
      fail(ErrorKind::Checkpoint, "'" + p.name + "' has shape " + shape_str(e->shape) + ", model expects " + shape_str(p.tensor.shape()));
    auto dst = p.tensor.mutable_data();
    if (e->dtype == (sizeof(T) == 4 ? DType::F32 : DType::F64)) {
      std::memcpy(dst.data(), e->bytes.data(), e->bytes.size());
    } else {
      const auto v = e->values();
      for (std::size_t i = 0; i < v.size(); ++i) dst[i] = static_cast<T>(v[i]);
    }
  }
  for (const auto& e : ckpt.entries)
    if (!expected.count(e.name)) fail(ErrorKind::Checkpoint, "checkpoint has unexpected tensor '" + e.name + "'");
  return model;
}

#define PFSEG_INSTANTIATE(T)                                      \
  template Checkpoint to_checkpoint<T>(const SegModel<T>&);       \
  template SegModel<T> model_from_checkpoint<T>(const Checkpoint&);

PFSEG_INSTANTIATE(float)
PFSEG_INSTANTIATE(double)
#undef PFSEG_INSTANTIATE

}  // namespace pfseg
