#include "ffpf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include <zlib.h>

namespace ffpf {
namespace {

constexpr char kMagic[4] = {'F', 'F', 'P', 'F'};
constexpr std::size_t kHeaderSize = 12;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

class Writer {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    U v;
    std::memcpy(&v, take(sizeof(U), what), sizeof(U));
    return v;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw CheckpointError(CheckpointErrc::truncated,
                            std::string("file ends inside ") + what + " at byte " +
                                std::to_string(pos_));
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks to stay within range for very large files.
  constexpr std::size_t kChunk = 1u << 30;
  for (std::size_t off = 0; off < bytes.size(); off += kChunk)
    crc = crc32(crc, bytes.data() + off, static_cast<uInt>(std::min(kChunk, bytes.size() - off)));
  return static_cast<std::uint32_t>(crc);
}

NamedTensor from_tensor(std::string name, const Tensor<float>& t) {
  const Shape s = t.shape();
  NamedTensor nt{std::move(name),
                 {static_cast<std::uint64_t>(s.n), static_cast<std::uint64_t>(s.c),
                  static_cast<std::uint64_t>(s.h), static_cast<std::uint64_t>(s.w)},
                 {t.data(), t.data() + t.numel()}};
  return nt;
}

NamedTensor vector_tensor(std::string name, std::vector<float> values) {
  NamedTensor nt{std::move(name), {static_cast<std::uint64_t>(values.size())}, std::move(values)};
  return nt;
}

void copy_into(const NamedTensor& src, Tensor<float>& dst) {
  const Shape s = dst.shape();
  std::vector<std::uint64_t> want{static_cast<std::uint64_t>(s.n), static_cast<std::uint64_t>(s.c),
                                  static_cast<std::uint64_t>(s.h), static_cast<std::uint64_t>(s.w)};
  if (src.dims != want)
    throw CheckpointError(CheckpointErrc::shape_mismatch,
                          "'" + src.name + "' does not have shape " + s.str());
  std::copy(src.data.begin(), src.data.end(), dst.data());
}

const NamedTensor& require(const Checkpoint& ckpt, const std::string& name) {
  if (const NamedTensor* t = ckpt.find(name)) return *t;
  throw CheckpointError(CheckpointErrc::missing_tensor, "no tensor named '" + name + "'");
}

}  // namespace

const char* to_string(CheckpointErrc code) {
  switch (code) {
    case CheckpointErrc::io_error: return "io error";
    case CheckpointErrc::bad_magic: return "bad magic";
    case CheckpointErrc::bad_version: return "unsupported version";
    case CheckpointErrc::truncated: return "truncated file";
    case CheckpointErrc::name_collision: return "duplicate tensor name";
    case CheckpointErrc::checksum_mismatch: return "checksum mismatch";
    case CheckpointErrc::config_mismatch: return "model configuration mismatch";
    case CheckpointErrc::missing_tensor: return "missing tensor";
    case CheckpointErrc::shape_mismatch: return "shape mismatch";
  }
  return "unknown checkpoint error";
}

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint) {
  std::set<std::string> seen;
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(checkpoint.tensors.size()));
  for (const auto& t : checkpoint.tensors) {
    if (!seen.insert(t.name).second)
      throw CheckpointError(CheckpointErrc::name_collision, "'" + t.name + "' appears twice");
    if (t.name.size() > 0xffff || t.dims.size() > 0xff)
      throw std::invalid_argument("checkpoint: name or rank too large for '" + t.name + "'");
    std::uint64_t count = 1;
    for (auto d : t.dims) count *= d;
    if (count != t.data.size())
      throw std::invalid_argument("checkpoint: dims of '" + t.name + "' disagree with its data");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.put_bytes(t.name.data(), t.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.put<std::uint64_t>(d);
    w.put_bytes(t.data.data(), t.data.size() * sizeof(float));
  }
  const std::uint32_t crc =
      crc32_of(std::span<const std::uint8_t>(w.bytes).subspan(kHeaderSize));
  w.put<std::uint32_t>(crc);
  return std::move(w.bytes);
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const std::uint8_t* magic = r.take(4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw CheckpointError(CheckpointErrc::bad_magic, "file does not start with \"FFPF\"");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointErrc::bad_version,
                          "version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
  const auto count = r.get<std::uint32_t>("tensor count");
  if (bytes.size() < kHeaderSize + 4)
    throw CheckpointError(CheckpointErrc::truncated, "file has no checksum");

  Checkpoint ckpt;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = r.get<std::uint16_t>("name length");
    const std::uint8_t* name = r.take(len, "tensor name");
    t.name.assign(reinterpret_cast<const char*>(name), len);
    if (!seen.insert(t.name).second)
      throw CheckpointError(CheckpointErrc::name_collision, "'" + t.name + "' appears twice");
    const auto rank = r.get<std::uint8_t>("rank");
    std::uint64_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      t.dims.push_back(r.get<std::uint64_t>("dims"));
      if (t.dims.back() != 0 && numel > r.remaining() / t.dims.back())
        throw CheckpointError(CheckpointErrc::truncated, "'" + t.name + "' is larger than the file");
      numel *= t.dims.back();
    }
    if (numel > r.remaining() / sizeof(float))
      throw CheckpointError(CheckpointErrc::truncated, "payload of '" + t.name + "' is cut short");
    t.data.resize(static_cast<std::size_t>(numel));
    std::memcpy(t.data.data(), r.take(static_cast<std::size_t>(numel) * sizeof(float), "payload"),
                static_cast<std::size_t>(numel) * sizeof(float));
    ckpt.tensors.push_back(std::move(t));
  }
  if (r.remaining() < 4) throw CheckpointError(CheckpointErrc::truncated, "checksum is cut short");
  const std::size_t payload_end = bytes.size() - r.remaining();
  const auto stored = r.get<std::uint32_t>("checksum");
  if (r.remaining() != 0)
    throw CheckpointError(CheckpointErrc::checksum_mismatch,
                          std::to_string(r.remaining()) + " unexpected bytes after the checksum");
  const std::uint32_t actual =
      crc32_of(bytes.subspan(kHeaderSize, payload_end - kHeaderSize));
  if (stored != actual)
    throw CheckpointError(CheckpointErrc::checksum_mismatch,
                          "stored " + std::to_string(stored) + ", computed " + std::to_string(actual));
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = serialize_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointErrc::io_error, "cannot open '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointErrc::io_error, "write failed for '" + path.string() + "'");
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrc::io_error, "cannot open '" + path.string() + "'");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  if (in.bad()) throw CheckpointError(CheckpointErrc::io_error, "read failed for '" + path.string() + "'");
  return parse_checkpoint(bytes);
}

Checkpoint capture_checkpoint(const FFPFModel<float>& model, Sgd<float>* optimizer,
                              const TrainState& state) {
  Checkpoint ckpt;
  for (const Parameter<float>* p : model.store().all()) ckpt.tensors.push_back(from_tensor(p->name, p->value));
  if (optimizer != nullptr)
    for (Parameter<float>* p : optimizer->params())
      ckpt.tensors.push_back(from_tensor("momentum/" + p->name, optimizer->velocity(p->name)));
  const auto encoded = model.config().encode();
  ckpt.tensors.push_back(vector_tensor("meta/model_config", {encoded.begin(), encoded.end()}));
  ckpt.tensors.push_back(vector_tensor("meta/epoch", {static_cast<float>(state.epoch)}));
  ckpt.tensors.push_back(vector_tensor("meta/step", {static_cast<float>(state.step)}));
  return ckpt;
}

ModelConfig checkpoint_config(const Checkpoint& checkpoint) {
  const NamedTensor& t = require(checkpoint, "meta/model_config");
  const std::vector<double> values(t.data.begin(), t.data.end());
  try {
    return ModelConfig::decode(values);
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointErrc::config_mismatch, e.what());
  }
}

void restore_checkpoint(const Checkpoint& checkpoint, FFPFModel<float>& model,
                        Sgd<float>* optimizer, TrainState* state) {
  if (!(checkpoint_config(checkpoint) == model.config()))
    throw CheckpointError(CheckpointErrc::config_mismatch,
                          "stored configuration differs from the target model");
  for (Parameter<float>* p : model.store().all()) copy_into(require(checkpoint, p->name), p->value);
  if (optimizer != nullptr)
    for (Parameter<float>* p : optimizer->params())
      copy_into(require(checkpoint, "momentum/" + p->name), optimizer->velocity(p->name));
  if (state != nullptr) {
    state->epoch = static_cast<int>(require(checkpoint, "meta/epoch").data.at(0));
    const NamedTensor* step = checkpoint.find("meta/step");
    state->step = step != nullptr ? static_cast<std::int64_t>(step->data.at(0)) : 0;
  }
}

void save_checkpoint(const std::filesystem::path& path, const FFPFModel<float>& model,
                     Sgd<float>* optimizer, const TrainState& state) {
  write_checkpoint(path, capture_checkpoint(model, optimizer, state));
}

std::unique_ptr<FFPFModel<float>> load_model(const std::filesystem::path& path, TrainState* state) {
  const Checkpoint ckpt = read_checkpoint(path);
  auto model = std::make_unique<FFPFModel<float>>(checkpoint_config(ckpt), 0);
  restore_checkpoint(ckpt, *model, nullptr, state);
  return model;
}

}  // namespace ffpf
