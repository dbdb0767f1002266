#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "ffpf/detect.hpp"
#include "oracles.hpp"

using namespace ffpf;

namespace {

Box random_box(Rng& rng, double extent, double min_side, double max_side) {
  const double w = rng.uniform(min_side, max_side);
  const double h = rng.uniform(min_side, max_side);
  const double x = rng.uniform(0, extent - w);
  const double y = rng.uniform(0, extent - h);
  return {static_cast<float>(x), static_cast<float>(y), static_cast<float>(x + w),
          static_cast<float>(y + h)};
}

std::vector<BoxDetection> random_candidates(Rng& rng, std::size_t n) {
  std::vector<BoxDetection> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    d[i].class_id = static_cast<int>(rng.integer(0, 2));
    // Coarse scores so that ties actually occur.
    d[i].score = static_cast<float>(rng.integer(1, 8)) / 8.0f;
    d[i].box = random_box(rng, 40, 4, 20);
    d[i].anchor_index = static_cast<std::int64_t>(i);
  }
  return d;
}

BoxDetection det(int cls, float score, Box b) { return BoxDetection{cls, score, b, 0}; }

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

TEST_CASE("iou basic properties") {
  const Box a{0, 0, 10, 10};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, {10, 0, 20, 10}) == 0.0);
  CHECK(iou(a, {5, 0, 15, 10}) == doctest::Approx(50.0 / 150.0));
  CHECK(iou(a, {2, 2, 4, 4}) == doctest::Approx(4.0 / 100.0));
  CHECK(iou({0, 0, 0, 0}, {0, 0, 0, 0}) == 0.0);
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    const Box x = random_box(rng, 30, 1, 15);
    const Box y = random_box(rng, 30, 1, 15);
    const double v = iou(x, y);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(v == iou(y, x));
    CHECK(std::abs(v - oracle::box_iou(x, y)) < 1e-6);
  }
}

TEST_CASE("anchors tile every level on its stride grid") {
  ModelConfig config;
  const auto anchors = generate_anchors(64, 96, config);
  std::size_t expected = 0;
  for (int s : kLevelStrides) expected += static_cast<std::size_t>((64 / s) * (96 / s) * 3);
  REQUIRE(anchors.size() == expected);

  CHECK(anchors[0].level == 2);
  CHECK(anchors[0].cx == 2.0f);
  CHECK(anchors[0].cy == 2.0f);
  CHECK(anchors[0].w == 16.0f);
  CHECK(anchors[1].w == doctest::Approx(16.0 * std::cbrt(2.0)));
  CHECK(anchors[2].w == doctest::Approx(16.0 * std::cbrt(4.0)));
  CHECK(anchors[3].cx == 6.0f);  // next x position
  CHECK(anchors[3 * 24].cy == 6.0f);  // next row

  for (const auto& a : anchors) {
    const double stride = kLevelStrides[static_cast<std::size_t>(a.level - 2)];
    const double gx = a.cx / stride - 0.5;
    const double gy = a.cy / stride - 0.5;
    CHECK(gx == std::floor(gx));
    CHECK(gy == std::floor(gy));
    CHECK(a.w >= 4.0 * stride - 1e-4);
    CHECK(a.w == a.h);
  }
  CHECK(anchors.back().level == 5);
}

TEST_CASE("box encoding round trips") {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const Anchor a{static_cast<float>(rng.uniform(0, 64)), static_cast<float>(rng.uniform(0, 64)),
                   static_cast<float>(rng.uniform(8, 64)), static_cast<float>(rng.uniform(8, 64)), 2};
    const Box b = random_box(rng, 64, 2, 30);
    const Box r = decode_box(a, encode_box(a, b));
    CHECK(r.x1 == doctest::Approx(b.x1).epsilon(1e-4));
    CHECK(r.y1 == doctest::Approx(b.y1).epsilon(1e-4));
    CHECK(r.x2 == doctest::Approx(b.x2).epsilon(1e-4));
    CHECK(r.y2 == doctest::Approx(b.y2).epsilon(1e-4));
  }
  const Anchor a{10, 10, 16, 16, 2};
  const auto d = encode_box(a, Box{6, 6, 14, 14});
  CHECK(d[0] == 0.0f);
  CHECK(d[1] == 0.0f);
  CHECK(d[2] == doctest::Approx(std::log(0.5)));
  // Huge log-scales are clamped rather than overflowing.
  const Box big = decode_box(a, {0, 0, 100, 100});
  CHECK(std::isfinite(big.x2));
  CHECK(big.width() == doctest::Approx(16.0 * 1000.0 / 16.0).epsilon(1e-4));
}

TEST_CASE("target assignment thresholds and forced matches") {
  const std::vector<Anchor> anchors{{10, 10, 10, 10, 2}, {12, 10, 10, 10, 2}, {13.5f, 10, 10, 10, 2},
                                    {40, 40, 10, 10, 2}, {60, 60, 4, 4, 2}};
  const std::vector<GroundTruth> gt{{{5, 5, 15, 15}, 1}, {{58, 58, 66, 66}, 0}};
  const auto t = assign_targets(anchors, gt);
  REQUIRE(t.size() == anchors.size());
  CHECK(t[0].label == 1);  // IoU 1
  CHECK(t[1].label == 1);  // IoU 80/120 >= 0.5
  CHECK(t[2].label == kIgnoreLabel);  // IoU 65/135
  CHECK(t[3].label == kBackgroundLabel);
  CHECK(t[4].label == 0);  // IoU 16/64 but the second object's best anchor
  CHECK(t[4].delta == encode_box(anchors[4], gt[1].box));
  CHECK(assign_targets(anchors, {}).at(0).label == kBackgroundLabel);
  CHECK_THROWS_AS(assign_targets(anchors, std::vector<GroundTruth>{{{3, 3, 3, 9}, 0}}), std::invalid_argument);
}

TEST_CASE("focal and smooth-L1 loss on a hand-computed case") {
  Tape<double> tape;
  HeadOutputs<double> out;
  // Level 2 holds one location with three anchors; the other levels are empty.
  out.cls[0] = tape.leaf(Tensor<double>({1, 3, 1, 1}, std::vector<double>{0.3, -1.2, 5.0}));
  std::vector<double> deltas(12, 0.0);
  const double target[4] = {0.1, -0.2, 0.4, 1.0};
  const double pred[4] = {0.15, -0.7, 0.4, 3.0};
  for (int d = 0; d < 4; ++d) deltas[static_cast<std::size_t>(d)] = pred[d];
  out.box[0] = tape.leaf(Tensor<double>({1, 12, 1, 1}, deltas));
  for (int i = 1; i < 4; ++i) {
    out.cls[static_cast<std::size_t>(i)] = tape.leaf(Tensor<double>({1, 3, 0, 0}));
    out.box[static_cast<std::size_t>(i)] = tape.leaf(Tensor<double>({1, 12, 0, 0}));
  }
  std::vector<std::vector<AnchorTarget>> targets(1, std::vector<AnchorTarget>(3));
  targets[0][0].label = 0;
  for (int d = 0; d < 4; ++d) targets[0][0].delta[static_cast<std::size_t>(d)] = static_cast<float>(target[d]);
  targets[0][1].label = kBackgroundLabel;
  targets[0][2].label = kIgnoreLabel;

  LossBreakdown parts;
  const auto loss = detection_loss(out, std::span<const std::vector<AnchorTarget>>(targets), 1, 3, {}, &parts);

  const double p0 = sigmoid(0.3);
  const double p1 = sigmoid(-1.2);
  const double focal = 0.25 * (1 - p0) * (1 - p0) * -std::log(p0) + 0.75 * p1 * p1 * -std::log(1 - p1);
  const double beta = 1.0 / 9.0;
  double smooth = 0;
  for (int d = 0; d < 4; ++d) {
    const double diff = std::abs(pred[d] - static_cast<double>(static_cast<float>(target[d])));
    smooth += diff < beta ? 0.5 * diff * diff / beta : diff - 0.5 * beta;
  }
  CHECK(parts.positives == 1);
  CHECK(std::abs(parts.classification - focal) < 1e-6);
  CHECK(std::abs(parts.regression - smooth) < 1e-6);
  CHECK(std::abs(loss.value()[0] - (focal + smooth)) < 1e-6);

  tape.backward(loss);
  const Tensor<double>& gc = *tape.grad(out.cls[0]);
  CHECK(gc[2] == 0.0);  // ignored anchor
  const Tensor<double>& gb = *tape.grad(out.box[0]);
  CHECK(gb[1] == doctest::Approx(-1.0));  // linear branch: sign of the residual
  CHECK(gb[3] == doctest::Approx(1.0));
  CHECK(std::abs(gb[2]) < 1e-6);
  for (int i = 4; i < 12; ++i) CHECK(gb[i] == 0.0);  // non-positive anchors
}

TEST_CASE("loss with no positives normalizes by one") {
  Tape<float> tape;
  HeadOutputs<float> out;
  out.cls[0] = tape.leaf(Tensor<float>({2, 2, 1, 1}, std::vector<float>{0, 0, 0, 0}));
  out.box[0] = tape.leaf(Tensor<float>({2, 8, 1, 1}));
  for (std::size_t i = 1; i < 4; ++i) {
    out.cls[i] = tape.leaf(Tensor<float>({2, 2, 0, 0}));
    out.box[i] = tape.leaf(Tensor<float>({2, 8, 0, 0}));
  }
  std::vector<std::vector<AnchorTarget>> targets(2, std::vector<AnchorTarget>(2));
  const auto loss = detection_loss(out, std::span<const std::vector<AnchorTarget>>(targets), 1, 2);
  CHECK(loss.value()[0] == doctest::Approx(4 * 0.75 * 0.25 * std::log(2.0)));

  std::vector<std::vector<AnchorTarget>> short_targets(2, std::vector<AnchorTarget>(1));
  CHECK_THROWS_AS(detection_loss(out, std::span<const std::vector<AnchorTarget>>(short_targets), 1, 2),
                  DimensionError);
  CHECK_THROWS_AS(detection_loss(out, std::span<const std::vector<AnchorTarget>>(targets), 2, 2), DimensionError);
}

TEST_CASE("greedy NMS agrees with brute force on 1000 random instances") {
  Rng rng(3);
  for (int instance = 0; instance < 1000; ++instance) {
    const auto cands = random_candidates(rng, static_cast<std::size_t>(rng.integer(0, 30)));
    const double thr = rng.uniform(0.1, 0.8);
    const auto kept = greedy_nms(cands, thr);
    const auto keep = oracle::nms_keep(cands, thr);
    std::vector<bool> got(cands.size(), false);
    for (std::size_t k : kept) got[k] = true;
    REQUIRE(got == keep);
    for (std::size_t i = 1; i < kept.size(); ++i) {
      const auto& a = cands[kept[i - 1]];
      const auto& b = cands[kept[i]];
      CHECK((a.score > b.score || (a.score == b.score && a.anchor_index < b.anchor_index)));
    }
  }
}

TEST_CASE("greedy NMS does not depend on input order") {
  Rng rng(4);
  for (int instance = 0; instance < 200; ++instance) {
    auto cands = random_candidates(rng, 25);
    auto ids = [&](const std::vector<BoxDetection>& c) {
      std::vector<std::int64_t> out;
      for (std::size_t k : greedy_nms(c, 0.5)) out.push_back(c[k].anchor_index);
      return out;
    };
    const auto before = ids(cands);
    for (std::size_t i = cands.size() - 1; i > 0; --i)
      std::swap(cands[i], cands[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i)))]);
    CHECK(ids(cands) == before);
  }
}

TEST_CASE("NMS suppresses same-class overlaps only") {
  const std::vector<BoxDetection> c{det(0, 0.9f, {0, 0, 10, 10}), det(0, 0.8f, {1, 1, 11, 11}),
                                    det(1, 0.7f, {1, 1, 11, 11}), det(0, 0.6f, {20, 20, 30, 30})};
  CHECK(greedy_nms(c, 0.5) == std::vector<std::size_t>{0, 2, 3});
  CHECK(greedy_nms(c, 0.99) == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(greedy_nms(std::vector<BoxDetection>{}, 0.5).empty());
}

TEST_CASE("decode_and_nms filters, clips and caps detections") {
  const std::vector<Anchor> anchors{{8, 8, 16, 16, 2}, {9, 8, 16, 16, 2}, {60, 60, 16, 16, 2}, {30, 30, 16, 16, 2}};
  ImagePrediction p;
  p.logits = {2.0f, -9.0f, 1.0f, -9.0f, 3.0f, -9.0f, -9.0f, -9.0f};
  p.deltas.assign(16, 0.0f);
  const auto out = decode_and_nms(p, anchors, 2, 64, 64);
  REQUIRE(out.size() == 2);
  CHECK(out[0].anchor_index == 2);
  CHECK(out[0].box.x2 == 64.0f);  // clipped
  CHECK(out[0].box.x1 == 52.0f);
  CHECK(out[1].anchor_index == 0);  // anchor 1 overlaps it and scores lower
  CHECK(out[1].score == doctest::Approx(sigmoid(2.0)));

  NmsOptions capped;
  capped.max_det = 1;
  CHECK(decode_and_nms(p, anchors, 2, 64, 64, capped).size() == 1);
  NmsOptions strict;
  strict.score_thr = 0.9;
  CHECK(decode_and_nms(p, anchors, 2, 64, 64, strict).size() == 1);
  CHECK_THROWS_AS(decode_and_nms(p, anchors, 3, 64, 64), DimensionError);
}

TEST_CASE("mAP on a hand-computed precision/recall curve") {
  // One class, two objects. Ranked detections: TP, FP, TP.
  // PR points (r, p): (0.5, 1), (0.5, 0.5), (1, 2/3); all-point AP = 0.5 * 1 + 0.5 * 2/3.
  const std::vector<std::vector<GroundTruth>> gt{{{{0, 0, 10, 10}, 0}, {{20, 20, 30, 30}, 0}}};
  const std::vector<std::vector<BoxDetection>> d{
      {det(0, 0.9f, {0, 0, 10, 10}), det(0, 0.8f, {40, 40, 50, 50}), det(0, 0.7f, {20, 20, 30, 30})}};
  const auto r = evaluate_map(d, gt, 1);
  CHECK(std::abs(r.map - (0.5 + 0.5 * 2.0 / 3.0)) < 1e-6);
  CHECK(r.gt_count[0] == 2);

  // A duplicate of a matched object counts as a false positive.
  const std::vector<std::vector<BoxDetection>> dup{
      {det(0, 0.9f, {0, 0, 10, 10}), det(0, 0.8f, {0, 0, 10, 10}), det(0, 0.7f, {20, 20, 30, 30})}};
  CHECK(std::abs(evaluate_map(dup, gt, 1).map - (0.5 + 0.5 * 2.0 / 3.0)) < 1e-6);
}

TEST_CASE("mAP edge cases") {
  const std::vector<std::vector<GroundTruth>> gt{{{{0, 0, 10, 10}, 0}}, {{{5, 5, 15, 15}, 2}}};
  const std::vector<std::vector<BoxDetection>> perfect{{det(0, 0.9f, {0, 0, 10, 10})},
                                                       {det(2, 0.8f, {5, 5, 15, 15})}};
  const auto p = evaluate_map(perfect, gt, 3);
  CHECK(p.map == 1.0);
  CHECK(std::isnan(p.ap[1]));

  const std::vector<std::vector<BoxDetection>> none(2);
  CHECK(evaluate_map(none, gt, 3).map == 0.0);

  const std::vector<std::vector<BoxDetection>> wrong_class{{det(1, 0.9f, {0, 0, 10, 10})}, {}};
  CHECK(evaluate_map(wrong_class, gt, 3).map == 0.0);

  const std::vector<std::vector<BoxDetection>> bad{{det(5, 0.9f, {0, 0, 10, 10})}, {}};
  CHECK_THROWS_AS(evaluate_map(bad, gt, 3), std::invalid_argument);
  CHECK_THROWS_AS(evaluate_map(none, std::vector<std::vector<GroundTruth>>(3), 3), std::invalid_argument);

  // IoU exactly at the threshold matches.
  const std::vector<std::vector<GroundTruth>> one{{{{0, 0, 10, 10}, 0}}};
  const std::vector<std::vector<BoxDetection>> half{{det(0, 0.5f, {0, 0, 10, 5})}};
  CHECK(evaluate_map(half, one, 1).map == 1.0);
}

TEST_CASE("adding a true positive above every false positive never lowers AP") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<GroundTruth>> gt(3);
    std::vector<std::vector<BoxDetection>> d(3);
    for (std::size_t i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) gt[i].push_back({random_box(rng, 60, 4, 12), 0});
      for (int j = 0; j < 4; ++j) d[i].push_back(det(0, static_cast<float>(rng.uniform(0.1, 0.9)), random_box(rng, 60, 4, 12)));
    }
    const double before = evaluate_map(d, gt, 1).map;
    d[0].push_back(det(0, 0.95f, gt[0][0].box));
    CHECK(evaluate_map(d, gt, 1).map >= before - 1e-12);
  }
}

TEST_CASE("detection dump format") {
  const std::vector<std::vector<BoxDetection>> d{{det(1, 0.5f, {1, 2, 3.25f, 4})}, {}, {det(0, 0.125f, {0, 0, 8, 9})}};
  std::ostringstream out;
  write_detection_dump(out, d);
  CHECK(out.str() ==
        "0 1 0.500000 1.000000 2.000000 3.250000 4.000000\n"
        "2 0 0.125000 0.000000 0.000000 8.000000 9.000000\n");
}
