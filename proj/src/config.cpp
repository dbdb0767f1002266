#include "ffpf/config.hpp"

#include <stdexcept>
#include <string>

namespace ffpf {
namespace {

void check(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("ModelConfig: " + what);
}

}  // namespace

void ModelConfig::validate() const {
  check(in_channels > 0 && stem_channels > 0, "channel widths must be positive");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    check(s.blocks >= 1, "stage " + std::to_string(i + 2) + " needs at least one block");
    check(s.channels > 0, "stage " + std::to_string(i + 2) + " channels must be positive");
    check(s.stride == 1 || s.stride == 2, "stage stride must be 1 or 2");
  }
  check(stages[0].stride == 1 && stages[1].stride == 2 && stages[2].stride == 2 &&
            stages[3].stride == 2,
        "stage strides must be {1,2,2,2} to land on strides 4/8/16/32");
  check(fpn_channels > 0, "fpn_channels must be positive");
  check(carafe_k_up >= 1 && carafe_k_up % 2 == 1, "carafe k_up must be odd");
  check(carafe_k_enc >= 1 && carafe_k_enc % 2 == 1, "carafe k_enc must be odd");
  check(carafe_c_mid > 0, "carafe c_mid must be positive");
  check(num_classes >= 1, "num_classes must be positive");
  check(anchors_per_location >= 1, "anchors_per_location must be positive");
  check(anchor_base_scale > 0.0, "anchor_base_scale must be positive");
  if (bs_fpn && !skip_uses_lateral)
    for (const auto& s : stages)
      check(s.channels == fpn_channels,
            "skip fusion on raw backbone features requires stage widths equal to fpn_channels");
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.stem_channels = 4;
  c.stages = {{{1, 4, 1, true}, {1, 6, 2, true}, {1, 8, 2, true}, {1, 8, 2, true}}};
  c.fpn_channels = 4;
  c.carafe_c_mid = 2;
  c.carafe_k_up = 3;
  c.num_classes = 2;
  c.anchors_per_location = 2;
  return c;
}

std::vector<double> ModelConfig::encode() const {
  std::vector<double> v{static_cast<double>(in_channels), static_cast<double>(stem_channels)};
  for (const auto& s : stages) {
    v.push_back(s.blocks);
    v.push_back(static_cast<double>(s.channels));
    v.push_back(s.stride);
    v.push_back(s.fu_enabled ? 1.0 : 0.0);
  }
  v.push_back(fu_placement == FuPlacement::per_block ? 1.0 : 0.0);
  v.push_back(fu_zero_init ? 1.0 : 0.0);
  v.push_back(bs_fpn ? 1.0 : 0.0);
  v.push_back(static_cast<double>(fpn_channels));
  v.push_back(carafe_k_up);
  v.push_back(carafe_k_enc);
  v.push_back(static_cast<double>(carafe_c_mid));
  v.push_back(skip_uses_lateral ? 1.0 : 0.0);
  v.push_back(num_classes);
  v.push_back(anchor_base_scale);
  v.push_back(anchors_per_location);
  return v;
}

ModelConfig ModelConfig::decode(std::span<const double> v) {
  constexpr std::size_t kFields = 2 + 4 * 4 + 11;
  if (v.size() != kFields)
    throw std::invalid_argument("ModelConfig::decode: expected " + std::to_string(kFields) +
                                " fields, got " + std::to_string(v.size()));
  ModelConfig c;
  std::size_t i = 0;
  auto next = [&] { return v[i++]; };
  c.in_channels = static_cast<std::int64_t>(next());
  c.stem_channels = static_cast<std::int64_t>(next());
  for (auto& s : c.stages) {
    s.blocks = static_cast<int>(next());
    s.channels = static_cast<std::int64_t>(next());
    s.stride = static_cast<int>(next());
    s.fu_enabled = next() != 0.0;
  }
  c.fu_placement = next() != 0.0 ? FuPlacement::per_block : FuPlacement::per_stage;
  c.fu_zero_init = next() != 0.0;
  c.bs_fpn = next() != 0.0;
  c.fpn_channels = static_cast<std::int64_t>(next());
  c.carafe_k_up = static_cast<int>(next());
  c.carafe_k_enc = static_cast<int>(next());
  c.carafe_c_mid = static_cast<std::int64_t>(next());
  c.skip_uses_lateral = next() != 0.0;
  c.num_classes = static_cast<int>(next());
  c.anchor_base_scale = next();
  c.anchors_per_location = static_cast<int>(next());
  c.validate();
  return c;
}

}  // namespace ffpf
