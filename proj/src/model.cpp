#include "ffpf/model.hpp"

namespace ffpf {

template <typename T>
FFPFModel<T>::FFPFModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config.validate();
  Rng rng(seed);
  backbone_ = std::make_unique<FResNet<T>>(store_, config, rng);
  if (config.bs_fpn)
    bs_fpn_ = BsFpnParams<T>::create(store_, config, backbone_->out_channels(), rng);
  else
    fpn_ = FpnParams<T>::create(store_, config, backbone_->out_channels(), rng);
  head_ = DetectionHead<T>::create(store_, config, rng);
}

template <typename T>
PyramidFeatures<T> FFPFModel<T>::features(const Var<T>& image, NormMode mode) const {
  PyramidFeatures<T> g = f_resnet_forward(image, *backbone_, mode);
  return bs_fpn_ ? bs_fpn_forward(g, *bs_fpn_, mode) : fpn_forward(g, *fpn_);
}

template <typename T>
HeadOutputs<T> FFPFModel<T>::forward(const Var<T>& image, NormMode mode) const {
  return head_forward(features(image, mode), head_);
}

template <typename T>
const std::vector<Anchor>& FFPFModel<T>::anchors(std::int64_t h, std::int64_t w) const {
  if (h != anchor_h_ || w != anchor_w_) {
    anchors_ = generate_anchors(h, w, config_);
    anchor_h_ = h;
    anchor_w_ = w;
  }
  return anchors_;
}

template <typename T>
std::vector<std::vector<BoxDetection>> FFPFModel<T>::predict(const Tensor<T>& images,
                                                             const NmsOptions& options) const {
  Tape<T> tape;
  tape.set_grad_enabled(false);
  const Shape s = images.shape();
  HeadOutputs<T> out = forward(tape.constant(images), NormMode::eval);
  const auto& a = anchors(s.h, s.w);
  std::vector<std::vector<BoxDetection>> result;
  for (std::int64_t n = 0; n < s.n; ++n)
    result.push_back(decode_and_nms(
        flatten_prediction(out, n, config_.num_classes, config_.anchors_per_location), a,
        config_.num_classes, s.h, s.w, options));
  return result;
}

template class FFPFModel<float>;
template class FFPFModel<double>;

}  // namespace ffpf
