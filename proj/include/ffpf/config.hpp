#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace ffpf {

enum class FuPlacement { per_stage, per_block };

/// One backbone stage: `blocks` basic residual blocks, the first one strided.
struct StageSpec {
  int blocks = 1;
  std::int64_t channels = 16;
  int stride = 1;
  bool fu_enabled = true;
};

/// Architecture hyperparameters for the whole detector.
struct ModelConfig {
  std::int64_t in_channels = 3;
  std::int64_t stem_channels = 16;
  std::array<StageSpec, 4> stages{{{1, 16, 1, true}, {1, 32, 2, true}, {1, 64, 2, true},
                                   {1, 128, 2, true}}};
  FuPlacement fu_placement = FuPlacement::per_stage;
  // Zero spectral weights make every unit an exact identity at initialization, but its
  // post-BN ReLU then sits at 0 and no gradient ever reaches the unit.
  bool fu_zero_init = false;

  bool bs_fpn = true;
  std::int64_t fpn_channels = 64;
  int carafe_k_up = 5;
  int carafe_k_enc = 3;
  std::int64_t carafe_c_mid = 16;
  // Skip fusion multiplies the CAM gate with the laterally projected G_i rather than the raw
  // backbone output. The raw variant is only well-typed when backbone and FPN widths agree.
  bool skip_uses_lateral = true;

  int num_classes = 3;
  // Anchor side at scale 1 is anchor_base_scale * stride; three octave scales per location.
  double anchor_base_scale = 4.0;
  int anchors_per_location = 3;

  /// Turns every stage's Fourier Unit on or off.
  void set_fu(bool on) {
    for (auto& s : stages) s.fu_enabled = on;
  }
  bool any_fu() const {
    for (const auto& s : stages)
      if (s.fu_enabled) return true;
    return false;
  }

  /// Throws std::invalid_argument describing the first inconsistency.
  void validate() const;

  /// Small widths for gradient checks and fast tests.
  static ModelConfig tiny();

  /// Flat numeric echo stored in checkpoints.
  std::vector<double> encode() const;
  static ModelConfig decode(std::span<const double> values);

  friend bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return a.encode() == b.encode();
  }
};

/// Strides of pyramid levels 2..5.
inline constexpr std::array<int, 4> kLevelStrides{4, 8, 16, 32};

}  // namespace ffpf
