#pragma once

#include <algorithm>
#include <array>
#include <iosfwd>
#include <span>
#include <vector>

#include "ffpf/backbone.hpp"
#include "ffpf/config.hpp"

namespace ffpf {

/// Axis-aligned box in pixels, x1 < x2 and y1 < y2 when valid.
struct Box {
  float x1 = 0;
  float y1 = 0;
  float x2 = 0;
  float y2 = 0;

  double width() const { return static_cast<double>(x2) - x1; }
  double height() const { return static_cast<double>(y2) - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  friend bool operator==(const Box&, const Box&) = default;
};

/// Intersection over union in [0, 1]; 0 when the union is empty.
double iou(const Box& a, const Box& b);

struct Anchor {
  float cx = 0;
  float cy = 0;
  float w = 0;
  float h = 0;
  int level = 2;

  Box box() const { return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}; }
};

/// Anchors for every level, ordered (level, y, x, scale). Centres sit at (j + 0.5) * stride.
std::vector<Anchor> generate_anchors(std::int64_t image_h, std::int64_t image_w,
                                     const ModelConfig& config);

struct GroundTruth {
  Box box;
  int class_id = 0;
};

inline constexpr int kIgnoreLabel = -2;
inline constexpr int kBackgroundLabel = -1;

/// label is kIgnoreLabel, kBackgroundLabel or a class id; delta is meaningful for positives.
struct AnchorTarget {
  int label = kBackgroundLabel;
  std::array<float, 4> delta{};
};

std::array<float, 4> encode_box(const Anchor& anchor, const Box& box);
Box decode_box(const Anchor& anchor, const std::array<float, 4>& delta);

/// IoU >= pos_thr positive, < neg_thr negative, otherwise ignored; each ground truth's best anchor
/// is forced positive. Zero-area ground truth is rejected.
std::vector<AnchorTarget> assign_targets(std::span<const Anchor> anchors,
                                         std::span<const GroundTruth> gt, double pos_thr = 0.5,
                                         double neg_thr = 0.4);

/// Shared-weight head: one 3x3 conv-ReLU tower, then 3x3 classification and box convs.
template <typename T>
struct DetectionHead {
  Conv2d<T> tower;
  Conv2d<T> cls;
  Conv2d<T> box;
  int num_classes = 1;
  int anchors_per_location = 1;

  static DetectionHead create(ParameterStore<T>& store, const ModelConfig& config, Rng& rng);
};

/// Per level: cls [N, A*K, H, W] (channel a*K + k), box [N, A*4, H, W] (channel a*4 + d).
template <typename T>
struct HeadOutputs {
  std::array<Var<T>, 4> cls;
  std::array<Var<T>, 4> box;
};

template <typename T>
HeadOutputs<T> head_forward(const PyramidFeatures<T>& features, const DetectionHead<T>& head);

struct LossOptions {
  double alpha = 0.25;
  double gamma = 2.0;
  double beta = 1.0 / 9.0;
};

struct LossBreakdown {
  double classification = 0;
  double regression = 0;
  std::int64_t positives = 0;
};

/// Sigmoid focal loss over non-ignored anchors plus smooth-L1 over positives, both divided by
/// max(1, positive count). targets[n] covers every anchor of image n.
template <typename T>
Var<T> detection_loss(const HeadOutputs<T>& outputs,
                      std::span<const std::vector<AnchorTarget>> targets, int num_classes,
                      int anchors_per_location, const LossOptions& options = {},
                      LossBreakdown* breakdown = nullptr);

/// Logits [anchors x K] and deltas [anchors x 4] for one image, in anchor order.
struct ImagePrediction {
  std::vector<float> logits;
  std::vector<float> deltas;
};

template <typename T>
ImagePrediction flatten_prediction(const HeadOutputs<T>& outputs, std::int64_t image,
                                   int num_classes, int anchors_per_location);

struct BoxDetection {
  int class_id = 0;
  float score = 0;
  Box box;
  std::int64_t anchor_index = 0;
};

/// Per-class greedy suppression by descending score, ties to the lower anchor index. A box is
/// dropped when its IoU with an already kept box exceeds iou_thr. Returns kept indices in order.
std::vector<std::size_t> greedy_nms(std::span<const BoxDetection> candidates, double iou_thr);

struct NmsOptions {
  double score_thr = 0.05;
  double iou_thr = 0.5;
  std::size_t max_det = 100;
  std::size_t pre_nms_top_k = 1000;
};

std::vector<BoxDetection> decode_and_nms(const ImagePrediction& prediction,
                                         std::span<const Anchor> anchors, int num_classes,
                                         std::int64_t image_h, std::int64_t image_w,
                                         const NmsOptions& options = {});

struct MapResult {
  std::vector<double> ap;            // per class; NaN where a class has no ground truth
  std::vector<std::int64_t> gt_count;
  double map = 0;                    // mean over classes with ground truth
};

/// VOC-style all-point interpolated AP with greedy highest-score-first matching.
MapResult evaluate_map(std::span<const std::vector<BoxDetection>> detections,
                       std::span<const std::vector<GroundTruth>> ground_truth, int num_classes,
                       double iou_thr = 0.5);

/// One line per detection: `image_id class_id score x1 y1 x2 y2`, floats with 6 decimals.
void write_detection_dump(std::ostream& out, std::span<const std::vector<BoxDetection>> detections);

}  // namespace ffpf
