#include "ffpf/detect.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>

namespace ffpf {
namespace {

// Upper bound on decoded log-scale deltas, as in common detection codebases.
const double kMaxLogScale = std::log(1000.0 / 16.0);

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

double iou(const Box& a, const Box& b) {
  const double iw = std::min<double>(a.x2, b.x2) - std::max<double>(a.x1, b.x1);
  const double ih = std::min<double>(a.y2, b.y2) - std::max<double>(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

std::vector<Anchor> generate_anchors(std::int64_t image_h, std::int64_t image_w,
                                     const ModelConfig& config) {
  std::vector<Anchor> anchors;
  for (int li = 0; li < 4; ++li) {
    const int stride = kLevelStrides[static_cast<std::size_t>(li)];
    const std::int64_t h = image_h / stride;
    const std::int64_t w = image_w / stride;
    const double base = config.anchor_base_scale * stride;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        for (int a = 0; a < config.anchors_per_location; ++a) {
          const double side = base * std::pow(2.0, a / 3.0);
          anchors.push_back(Anchor{static_cast<float>((x + 0.5) * stride),
                                   static_cast<float>((y + 0.5) * stride),
                                   static_cast<float>(side), static_cast<float>(side), li + 2});
        }
  }
  return anchors;
}

std::array<float, 4> encode_box(const Anchor& anchor, const Box& box) {
  const double gw = box.width();
  const double gh = box.height();
  const double gcx = box.x1 + 0.5 * gw;
  const double gcy = box.y1 + 0.5 * gh;
  return {static_cast<float>((gcx - anchor.cx) / anchor.w),
          static_cast<float>((gcy - anchor.cy) / anchor.h),
          static_cast<float>(std::log(gw / anchor.w)), static_cast<float>(std::log(gh / anchor.h))};
}

Box decode_box(const Anchor& anchor, const std::array<float, 4>& delta) {
  const double cx = anchor.cx + static_cast<double>(delta[0]) * anchor.w;
  const double cy = anchor.cy + static_cast<double>(delta[1]) * anchor.h;
  const double w = anchor.w * std::exp(std::min<double>(delta[2], kMaxLogScale));
  const double h = anchor.h * std::exp(std::min<double>(delta[3], kMaxLogScale));
  return {static_cast<float>(cx - 0.5 * w), static_cast<float>(cy - 0.5 * h),
          static_cast<float>(cx + 0.5 * w), static_cast<float>(cy + 0.5 * h)};
}

std::vector<AnchorTarget> assign_targets(std::span<const Anchor> anchors,
                                         std::span<const GroundTruth> gt, double pos_thr,
                                         double neg_thr) {
  for (const auto& g : gt)
    if (!(g.box.width() > 0.0 && g.box.height() > 0.0))
      throw std::invalid_argument("assign_targets: degenerate ground-truth box");
  std::vector<AnchorTarget> targets(anchors.size());
  if (gt.empty()) return targets;

  std::vector<double> best_for_gt(gt.size(), -1.0);
  std::vector<std::size_t> best_anchor(gt.size(), 0);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const Box ab = anchors[i].box();
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      const double v = iou(ab, gt[j].box);
      if (v > best) {
        best = v;
        arg = j;
      }
      if (v > best_for_gt[j]) {
        best_for_gt[j] = v;
        best_anchor[j] = i;
      }
    }
    AnchorTarget& t = targets[i];
    if (best >= pos_thr) {
      t.label = gt[arg].class_id;
      t.delta = encode_box(anchors[i], gt[arg].box);
    } else if (best < neg_thr) {
      t.label = kBackgroundLabel;
    } else {
      t.label = kIgnoreLabel;
    }
  }
  for (std::size_t j = 0; j < gt.size(); ++j) {
    AnchorTarget& t = targets[best_anchor[j]];
    t.label = gt[j].class_id;
    t.delta = encode_box(anchors[best_anchor[j]], gt[j].box);
  }
  return targets;
}

template <typename T>
DetectionHead<T> DetectionHead<T>::create(ParameterStore<T>& store, const ModelConfig& config,
                                          Rng& rng) {
  const std::int64_t c = config.fpn_channels;
  const int a = config.anchors_per_location;
  const int k = config.num_classes;
  DetectionHead h;
  h.tower = Conv2d<T>::create(store, "head.tower", c, c, 3, 1, true, rng);
  h.cls = Conv2d<T>::create(store, "head.cls", c, a * k, 3, 1, true, rng, Init::normal, 0.01);
  h.box = Conv2d<T>::create(store, "head.box", c, a * 4, 3, 1, true, rng, Init::normal, 0.01);
  // Prior probability 0.01 for every class keeps the initial focal loss from being swamped by
  // background anchors.
  h.cls.bias->value.fill(static_cast<T>(-std::log((1.0 - 0.01) / 0.01)));
  h.num_classes = k;
  h.anchors_per_location = a;
  return h;
}

template <typename T>
HeadOutputs<T> head_forward(const PyramidFeatures<T>& features, const DetectionHead<T>& head) {
  HeadOutputs<T> out;
  for (std::size_t i = 0; i < 4; ++i) {
    Var<T> t = relu(head.tower(features.levels[i]));
    out.cls[i] = head.cls(t);
    out.box[i] = head.box(t);
  }
  return out;
}

template <typename T>
Var<T> detection_loss(const HeadOutputs<T>& outputs,
                      std::span<const std::vector<AnchorTarget>> targets, int num_classes,
                      int anchors_per_location, const LossOptions& options,
                      LossBreakdown* breakdown) {
  const std::int64_t batch = outputs.cls[0].shape().n;
  if (static_cast<std::int64_t>(targets.size()) != batch)
    throw DimensionError("detection_loss", "N", batch, static_cast<std::int64_t>(targets.size()));
  std::int64_t total_anchors = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const Shape cs = outputs.cls[i].shape();
    const Shape bs = outputs.box[i].shape();
    if (cs.c != static_cast<std::int64_t>(anchors_per_location) * num_classes)
      throw DimensionError("detection_loss", "C", anchors_per_location * num_classes, cs.c);
    if (bs.c != static_cast<std::int64_t>(anchors_per_location) * 4)
      throw DimensionError("detection_loss", "C", anchors_per_location * 4, bs.c);
    total_anchors += cs.plane() * anchors_per_location;
  }
  for (const auto& t : targets)
    if (static_cast<std::int64_t>(t.size()) != total_anchors)
      throw DimensionError("detection_loss", "anchors", total_anchors,
                           static_cast<std::int64_t>(t.size()));

  std::int64_t positives = 0;
  for (const auto& img : targets)
    for (const auto& t : img) positives += t.label >= 0 ? 1 : 0;
  const double norm = 1.0 / static_cast<double>(std::max<std::int64_t>(1, positives));
  const double alpha = options.alpha;
  const double gamma = options.gamma;
  const double beta = options.beta;
  const int A = anchors_per_location;
  const int K = num_classes;

  // Visits (level, n, a, y*W+x, plane size, target) for every anchor. Owns copies of the shapes
  // and targets because the backward pass outlives the caller's arguments.
  std::array<Shape, 4> shapes;
  for (std::size_t i = 0; i < 4; ++i) shapes[i] = outputs.cls[i].shape();
  auto owned = std::make_shared<const std::vector<std::vector<AnchorTarget>>>(targets.begin(),
                                                                             targets.end());
  auto visit = [shapes, owned, A](auto&& fn) {
    for (std::size_t li = 0, offset = 0; li < 4; ++li) {
      const Shape s = shapes[li];
      for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t p = 0; p < s.plane(); ++p)
          for (int a = 0; a < A; ++a) {
            const std::size_t idx = offset + static_cast<std::size_t>(p * A + a);
            fn(li, n, a, p, s.plane(), (*owned)[static_cast<std::size_t>(n)][idx]);
          }
      offset += static_cast<std::size_t>(s.plane() * A);
    }
  };

  double cls_loss = 0.0;
  double box_loss = 0.0;
  std::uint64_t kink_bits = 0;
  Tape<T>& tape = outputs.cls[0].tape();
  visit([&](std::size_t li, std::int64_t n, int a, std::int64_t p, std::int64_t plane,
            const AnchorTarget& t) {
    if (t.label == kIgnoreLabel) return;
    const T* logits = outputs.cls[li].value().plane(n, 0);
    for (int k = 0; k < K; ++k) {
      const double z = logits[(a * K + k) * plane + p];
      const double prob = 1.0 / (1.0 + std::exp(-z));
      if (t.label == k)
        cls_loss += alpha * std::pow(1.0 - prob, gamma) * softplus(-z);
      else
        cls_loss += (1.0 - alpha) * std::pow(prob, gamma) * softplus(z);
    }
    if (t.label >= 0) {
      const T* deltas = outputs.box[li].value().plane(n, 0);
      for (int d = 0; d < 4; ++d) {
        const double diff = deltas[(a * 4 + d) * plane + p] - static_cast<double>(t.delta[d]);
        const bool quadratic = std::abs(diff) < beta;
        kink_bits = kink_bits * 3 + (quadratic ? 1 : 2);
        box_loss += quadratic ? 0.5 * diff * diff / beta : std::abs(diff) - 0.5 * beta;
      }
    }
  });
  if (tape.track_kinks()) tape.mix_kink(kink_bits);
  if (breakdown != nullptr) *breakdown = LossBreakdown{cls_loss * norm, box_loss * norm, positives};

  std::vector<Var<T>> inputs(outputs.cls.begin(), outputs.cls.end());
  inputs.insert(inputs.end(), outputs.box.begin(), outputs.box.end());
  Tensor<T> value(Shape{1, 1, 1, 1}, static_cast<T>((cls_loss + box_loss) * norm));
  return tape.record(std::move(value), std::span<const Var<T>>(inputs),
                     [visit, norm, alpha, gamma, beta, K](const BackwardArgs<T>& args) {
                       const double g = static_cast<double>(args.out_grad[0]) * norm;
                       visit([&](std::size_t li, std::int64_t n, int a, std::int64_t p,
                                 std::int64_t plane, const AnchorTarget& t) {
                         if (t.label == kIgnoreLabel) return;
                         if (Tensor<T>* gc = args.in_grads[li]) {
                           const T* logits = args.in_values[li]->plane(n, 0);
                           T* q = gc->plane(n, 0);
                           for (int k = 0; k < K; ++k) {
                             const std::int64_t at = (a * K + k) * plane + p;
                             const double z = logits[at];
                             const double prob = 1.0 / (1.0 + std::exp(-z));
                             double d;
                             if (t.label == k)
                               d = alpha * std::pow(1.0 - prob, gamma) *
                                   (gamma * prob * -softplus(-z) - (1.0 - prob));
                             else
                               d = (1.0 - alpha) * std::pow(prob, gamma) *
                                   (prob + gamma * (1.0 - prob) * softplus(z));
                             q[at] += static_cast<T>(g * d);
                           }
                         }
                         if (t.label >= 0) {
                           if (Tensor<T>* gb = args.in_grads[4 + li]) {
                             const T* deltas = args.in_values[4 + li]->plane(n, 0);
                             T* q = gb->plane(n, 0);
                             for (int d = 0; d < 4; ++d) {
                               const std::int64_t at = (a * 4 + d) * plane + p;
                               const double diff = deltas[at] - static_cast<double>(t.delta[d]);
                               const double dd = std::abs(diff) < beta ? diff / beta
                                                                       : (diff > 0 ? 1.0 : -1.0);
                               q[at] += static_cast<T>(g * dd);
                             }
                           }
                         }
                       });
                     });
}

template <typename T>
ImagePrediction flatten_prediction(const HeadOutputs<T>& outputs, std::int64_t image,
                                   int num_classes, int anchors_per_location) {
  ImagePrediction pred;
  for (std::size_t li = 0; li < 4; ++li) {
    const Shape s = outputs.cls[li].shape();
    const T* logits = outputs.cls[li].value().plane(image, 0);
    const T* deltas = outputs.box[li].value().plane(image, 0);
    for (std::int64_t p = 0; p < s.plane(); ++p)
      for (int a = 0; a < anchors_per_location; ++a) {
        for (int k = 0; k < num_classes; ++k)
          pred.logits.push_back(static_cast<float>(logits[(a * num_classes + k) * s.plane() + p]));
        for (int d = 0; d < 4; ++d)
          pred.deltas.push_back(static_cast<float>(deltas[(a * 4 + d) * s.plane() + p]));
      }
  }
  return pred;
}

std::vector<std::size_t> greedy_nms(std::span<const BoxDetection> candidates, double iou_thr) {
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = candidates[a];
    const auto& y = candidates[b];
    if (x.score != y.score) return x.score > y.score;
    return x.anchor_index < y.anchor_index;
  });
  std::vector<std::size_t> kept;
  for (std::size_t idx : order) {
    const auto& c = candidates[idx];
    bool suppressed = false;
    for (std::size_t k : kept) {
      if (candidates[k].class_id == c.class_id && iou(candidates[k].box, c.box) > iou_thr) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

std::vector<BoxDetection> decode_and_nms(const ImagePrediction& prediction,
                                         std::span<const Anchor> anchors, int num_classes,
                                         std::int64_t image_h, std::int64_t image_w,
                                         const NmsOptions& options) {
  const std::size_t k_count = static_cast<std::size_t>(num_classes);
  if (prediction.logits.size() != anchors.size() * k_count ||
      prediction.deltas.size() != anchors.size() * 4)
    throw DimensionError("decode_and_nms", "anchors", "prediction size does not match anchors");

  struct Scored {
    float score;
    std::size_t anchor;
    int cls;
  };
  std::vector<Scored> scored;
  for (std::size_t i = 0; i < anchors.size(); ++i)
    for (std::size_t k = 0; k < k_count; ++k) {
      const double z = prediction.logits[i * k_count + k];
      const auto s = static_cast<float>(1.0 / (1.0 + std::exp(-z)));
      if (s > options.score_thr) scored.push_back({s, i, static_cast<int>(k)});
    }
  std::stable_sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.anchor != b.anchor) return a.anchor < b.anchor;
    return a.cls < b.cls;
  });
  if (scored.size() > options.pre_nms_top_k) scored.resize(options.pre_nms_top_k);

  std::vector<BoxDetection> candidates;
  const auto maxx = static_cast<float>(image_w);
  const auto maxy = static_cast<float>(image_h);
  for (const auto& s : scored) {
    const std::size_t i = s.anchor;
    Box b = decode_box(anchors[i], {prediction.deltas[i * 4], prediction.deltas[i * 4 + 1],
                                    prediction.deltas[i * 4 + 2], prediction.deltas[i * 4 + 3]});
    b.x1 = std::clamp(b.x1, 0.0f, maxx);
    b.x2 = std::clamp(b.x2, 0.0f, maxx);
    b.y1 = std::clamp(b.y1, 0.0f, maxy);
    b.y2 = std::clamp(b.y2, 0.0f, maxy);
    if (!(b.x2 > b.x1 && b.y2 > b.y1)) continue;
    candidates.push_back(BoxDetection{s.cls, s.score, b, static_cast<std::int64_t>(i)});
  }

  std::vector<BoxDetection> out;
  for (std::size_t idx : greedy_nms(candidates, options.iou_thr)) out.push_back(candidates[idx]);
  std::stable_sort(out.begin(), out.end(), [](const BoxDetection& a, const BoxDetection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    return a.anchor_index < b.anchor_index;
  });
  if (out.size() > options.max_det) out.resize(options.max_det);
  return out;
}

MapResult evaluate_map(std::span<const std::vector<BoxDetection>> detections,
                       std::span<const std::vector<GroundTruth>> ground_truth, int num_classes,
                       double iou_thr) {
  if (detections.size() != ground_truth.size())
    throw std::invalid_argument("evaluate_map: " + std::to_string(detections.size()) +
                                " detection lists for " + std::to_string(ground_truth.size()) +
                                " images");
  auto check_class = [num_classes](int c) {
    if (c < 0 || c >= num_classes)
      throw std::invalid_argument("evaluate_map: unknown class id " + std::to_string(c));
  };
  for (const auto& img : detections)
    for (const auto& d : img) check_class(d.class_id);
  for (const auto& img : ground_truth)
    for (const auto& g : img) check_class(g.class_id);

  MapResult result;
  result.ap.assign(static_cast<std::size_t>(num_classes), std::numeric_limits<double>::quiet_NaN());
  result.gt_count.assign(static_cast<std::size_t>(num_classes), 0);
  double ap_sum = 0.0;
  int classes_with_gt = 0;
  for (int cls = 0; cls < num_classes; ++cls) {
    struct Entry {
      float score;
      std::size_t image;
      const Box* box;
    };
    std::vector<Entry> entries;
    std::vector<std::vector<bool>> matched(ground_truth.size());
    std::int64_t npos = 0;
    for (std::size_t i = 0; i < ground_truth.size(); ++i) {
      matched[i].assign(ground_truth[i].size(), false);
      for (const auto& g : ground_truth[i]) npos += g.class_id == cls ? 1 : 0;
      for (const auto& d : detections[i])
        if (d.class_id == cls) entries.push_back({d.score, i, &d.box});
    }
    result.gt_count[static_cast<std::size_t>(cls)] = npos;
    if (npos == 0) continue;
    std::stable_sort(entries.begin(), entries.end(),
                     [](const Entry& a, const Entry& b) { return a.score > b.score; });

    std::vector<double> recall;
    std::vector<double> precision;
    std::int64_t tp = 0;
    std::int64_t fp = 0;
    for (const auto& e : entries) {
      const auto& gts = ground_truth[e.image];
      double best = -1.0;
      std::size_t arg = 0;
      for (std::size_t j = 0; j < gts.size(); ++j) {
        if (gts[j].class_id != cls) continue;
        const double v = iou(*e.box, gts[j].box);
        if (v > best) {
          best = v;
          arg = j;
        }
      }
      if (best >= iou_thr && !matched[e.image][arg]) {
        matched[e.image][arg] = true;
        ++tp;
      } else {
        ++fp;
      }
      recall.push_back(static_cast<double>(tp) / static_cast<double>(npos));
      precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    }

    // All-point interpolation: area under the monotone envelope of the PR curve.
    std::vector<double> mrec{0.0};
    std::vector<double> mpre{0.0};
    mrec.insert(mrec.end(), recall.begin(), recall.end());
    mpre.insert(mpre.end(), precision.begin(), precision.end());
    mrec.push_back(1.0);
    mpre.push_back(0.0);
    for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
    double ap = 0.0;
    for (std::size_t i = 1; i < mrec.size(); ++i)
      if (mrec[i] != mrec[i - 1]) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
    result.ap[static_cast<std::size_t>(cls)] = ap;
    ap_sum += ap;
    ++classes_with_gt;
  }
  result.map = classes_with_gt > 0 ? ap_sum / classes_with_gt : 0.0;
  return result;
}

void write_detection_dump(std::ostream& out, std::span<const std::vector<BoxDetection>> detections) {
  for (std::size_t i = 0; i < detections.size(); ++i)
    for (const auto& d : detections[i]) {
      char line[160];
      std::snprintf(line, sizeof line, "%zu %d %.6f %.6f %.6f %.6f %.6f\n", i, d.class_id,
                    static_cast<double>(d.score), static_cast<double>(d.box.x1),
                    static_cast<double>(d.box.y1), static_cast<double>(d.box.x2),
                    static_cast<double>(d.box.y2));
      out << line;
    }
}

#define FFPF_INSTANTIATE_DETECT(T)                                                             \
  template struct DetectionHead<T>;                                                            \
  template HeadOutputs<T> head_forward(const PyramidFeatures<T>&, const DetectionHead<T>&);    \
  template Var<T> detection_loss(const HeadOutputs<T>&,                                        \
                                 std::span<const std::vector<AnchorTarget>>, int, int,         \
                                 const LossOptions&, LossBreakdown*);                          \
  template ImagePrediction flatten_prediction(const HeadOutputs<T>&, std::int64_t, int, int);

FFPF_INSTANTIATE_DETECT(float)
FFPF_INSTANTIATE_DETECT(double)

}  // namespace ffpf
