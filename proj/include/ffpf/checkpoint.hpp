#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "ffpf/train.hpp"

namespace ffpf {

// Layout: "FFPF", u32 version, u32 tensor count, then per tensor u16 name length, name bytes,
// u8 rank, u64 dims, f32 payload; a trailing u32 CRC32 covers everything after the first
// 12 bytes. All integers and floats little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointErrc {
  io_error = 1,
  bad_magic,
  bad_version,
  truncated,
  name_collision,
  checksum_mismatch,
  config_mismatch,
  missing_tensor,
  shape_mismatch,
};

const char* to_string(CheckpointErrc code);

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrc code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}
  CheckpointErrc code() const noexcept { return code_; }

 private:
  CheckpointErrc code_;
};

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> data;
};

/// Raw file contents in file order.
struct Checkpoint {
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Model parameters and buffers, momentum buffers as "momentum/<name>", the configuration as
/// "meta/model_config" and the completed epoch count as "meta/epoch".
Checkpoint capture_checkpoint(const FFPFModel<float>& model, Sgd<float>* optimizer,
                              const TrainState& state);

/// Restores tensors into an existing model with a matching configuration.
void restore_checkpoint(const Checkpoint& checkpoint, FFPFModel<float>& model,
                        Sgd<float>* optimizer = nullptr, TrainState* state = nullptr);

ModelConfig checkpoint_config(const Checkpoint& checkpoint);

void save_checkpoint(const std::filesystem::path& path, const FFPFModel<float>& model,
                     Sgd<float>* optimizer = nullptr, const TrainState& state = {});

/// Builds a model from the stored configuration and loads its tensors.
std::unique_ptr<FFPFModel<float>> load_model(const std::filesystem::path& path,
                                             TrainState* state = nullptr);

}  // namespace ffpf
