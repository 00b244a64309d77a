#include <doctest.h>

#include <functional>
#include <sstream>

#include "oseg/errors.hpp"
#include "oseg/evaluation.hpp"
#include "oseg/random.hpp"

using namespace oseg;

namespace {

const ImageSize kSize{100, 100};

BinaryMask full(const Box& b) {
  const auto f = pixel_frame(b, kSize);
  return {f.x0, f.y0, f.width, f.height, std::vector<std::uint8_t>(static_cast<std::size_t>(f.width * f.height), 1)};
}

GroundTruthInstance gt(std::uint64_t img, int cls, Box b) { return {img, cls, b, full(b)}; }
InstancePrediction pred(std::uint64_t img, int cls, double score, Box b) { return {img, cls, score, b, full(b)}; }

// Box of the same size as `g`, shifted right so that IoU = v.
Box at_iou(const Box& g, double v) {
  const double w = g.width();
  const double shift = w * (1 - v) / (1 + v);
  return {g.x1 + shift, g.y1, g.x2 + shift, g.y2};
}

// Independent AP: enumerate every injective assignment of ranked
// predictions to same-image gts with IoU >= thr, keep the one whose IoU
// vector (rank order, 0 = unmatched) is lexicographically largest, then
// integrate the precision envelope over recall.
double oracle_ap(const std::vector<InstancePrediction>& preds, const std::vector<GroundTruthInstance>& gts, int cls,
                 double thr) {
  std::vector<InstancePrediction> p;
  for (const auto& x : preds)
    if (x.class_id == cls) p.push_back(x);
  std::vector<GroundTruthInstance> g;
  for (const auto& x : gts)
    if (x.class_id == cls) g.push_back(x);
  std::stable_sort(p.begin(), p.end(), [](const auto& a, const auto& b) {
    return a.score != b.score ? a.score > b.score : a.image_id < b.image_id;
  });
  std::vector<double> best_vec;
  std::vector<int> best_assign, cur(p.size(), -1);
  std::vector<bool> used(g.size(), false);
  std::function<void(std::size_t)> rec = [&](std::size_t i) {
    if (i == p.size()) {
      std::vector<double> v;
      for (std::size_t k = 0; k < p.size(); ++k) v.push_back(cur[k] < 0 ? 0.0 : iou(p[k].box, g[static_cast<std::size_t>(cur[k])].box));
      if (best_assign.empty() || v > best_vec) best_vec = v, best_assign = cur;
      return;
    }
    cur[i] = -1;
    rec(i + 1);
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (used[j] || g[j].image_id != p[i].image_id || iou(p[i].box, g[j].box) < thr) continue;
      used[j] = true;
      cur[i] = static_cast<int>(j);
      rec(i + 1);
      used[j] = false;
      cur[i] = -1;
    }
  };
  rec(0);
  if (g.empty()) return -1;
  std::vector<double> prec, recall;
  double tp = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    tp += best_assign[k] >= 0;
    prec.push_back(tp / static_cast<double>(k + 1));
    recall.push_back(tp / static_cast<double>(g.size()));
  }
  double ap = 0, prev_r = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    double env = 0;
    for (std::size_t j = k; j < p.size(); ++j) env = std::max(env, prec[j]);
    ap += (recall[k] - prev_r) * env;
    prev_r = recall[k];
  }
  return ap;
}

}  // namespace

TEST_CASE("mask_iou examples") {
  const Box a{0, 0, 10, 10};
  CHECK(mask_iou(full(a), full(a)) == 1.0);
  CHECK(mask_iou(full(a), full({20, 20, 30, 30})) == 0.0);
  CHECK(mask_iou(full(a), full({5, 0, 15, 10})) == doctest::Approx(50.0 / 150.0).epsilon(1e-12));
  BinaryMask empty = full(a);
  std::fill(empty.bits.begin(), empty.bits.end(), 0);
  CHECK(mask_iou(empty, full(a)) == 0.0);
  CHECK_THROWS_AS(mask_iou(empty, empty), ArgumentError);
}

TEST_CASE("average_precision hand traces") {
  const Box g{10, 10, 40, 40};
  const std::vector<GroundTruthInstance> one{gt(0, 0, g)};

  std::vector<InstancePrediction> p{pred(0, 0, 0.7, at_iou(g, 0.9))};
  REQUIRE(iou(p[0].box, g) == doctest::Approx(0.9));
  CHECK(*average_precision(p, one, 0, 0.5, MatchKind::BBox).ap == 1.0);

  p = {pred(0, 0, 0.7, at_iou(g, 0.6))};
  CHECK(*average_precision(p, one, 0, 0.7, MatchKind::BBox).ap == 0.0);

  // duplicate: P = (1, 0.5), R = (1, 1), envelope area 1
  p = {pred(0, 0, 0.9, at_iou(g, 0.8)), pred(0, 0, 0.8, at_iou(g, 0.8))};
  const auto r = average_precision(p, one, 0, 0.5, MatchKind::BBox);
  CHECK(*r.ap == 1.0);
  CHECK(r.true_positives == 1);
  CHECK(r.false_positives == 1);

  // FP ranked first, then TP: P = (0, 0.5), R = (0, 1) -> 0.5
  p = {pred(0, 0, 0.9, {60, 60, 90, 90}), pred(0, 0, 0.8, g)};
  CHECK(*average_precision(p, one, 0, 0.5, MatchKind::BBox).ap == doctest::Approx(0.5));

  // two gts, TP FP TP: P = (1, .5, .667), R = (.5, .5, 1) -> .5 * 1 + .5 * .667
  const std::vector<GroundTruthInstance> two{gt(0, 0, g), gt(0, 0, {60, 60, 90, 90})};
  p = {pred(0, 0, 0.9, g), pred(0, 0, 0.8, {0, 60, 20, 90}), pred(0, 0, 0.7, {60, 60, 90, 90})};
  CHECK(*average_precision(p, two, 0, 0.5, MatchKind::BBox).ap == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0));

  // class without gts has no AP
  CHECK_FALSE(average_precision(p, one, 1, 0.5, MatchKind::BBox).ap);
  // a prediction on another image never matches
  p = {pred(1, 0, 0.9, g)};
  CHECK(*average_precision(p, one, 0, 0.5, MatchKind::BBox).ap == 0.0);
}

TEST_CASE("greedy match takes the best unmatched gt") {
  // A clears 0.5 with both gts (0.54 with g1, 0.94 with g2); taking the first
  // listed gt would strand B, whose only match is g1
  const Box g1{10, 10, 40, 40}, g2{20, 10, 50, 40};
  const std::vector<GroundTruthInstance> gts{gt(0, 0, g1), gt(0, 0, g2)};
  const std::vector<InstancePrediction> p{pred(0, 0, 0.9, {19, 10, 49, 40}), pred(0, 0, 0.8, {9, 10, 39, 40})};
  REQUIRE(iou(p[1].box, g2) < 0.5);
  const auto r = average_precision(p, gts, 0, 0.5, MatchKind::BBox);
  CHECK(r.true_positives == 2);
  CHECK(*r.ap == 1.0);
}

TEST_CASE("evaluate on perfect and empty predictions") {
  std::vector<GroundTruthInstance> gts{gt(0, 0, {10, 10, 40, 40}), gt(0, 1, {50, 50, 80, 90}), gt(1, 1, {5, 5, 25, 25})};
  std::vector<InstancePrediction> perfect;
  for (const auto& g : gts) perfect.push_back({g.image_id, g.class_id, 1.0, g.box, g.mask});
  const auto rep = evaluate(perfect, gts, 3);
  for (auto kind : {MatchKind::BBox, MatchKind::Segm})
    for (double t : {0.5, 0.7}) CHECK(rep.mean_ap(kind, t) == 1.0);
  CHECK_FALSE(rep.per_class[0][0][2].ap);

  const auto none = evaluate({}, gts, 3);
  for (auto kind : {MatchKind::BBox, MatchKind::Segm})
    for (double t : {0.5, 0.7}) CHECK(none.mean_ap(kind, t) == 0.0);
}

TEST_CASE("brute-force oracle agreement on small random instances") {
  Rng rng(2024);
  auto rbox = [&] {
    const double x = rng.uniform(0, 60), y = rng.uniform(0, 60);
    return Box{x, y, x + rng.uniform(10, 35), y + rng.uniform(10, 35)};
  };
  for (int trial = 0; trial < 400; ++trial) {
    std::vector<GroundTruthInstance> gts;
    std::vector<InstancePrediction> preds;
    const std::size_t ng = 1 + rng.below(4);
    for (std::size_t i = 0; i < ng; ++i) gts.push_back(gt(rng.below(2), static_cast<int>(rng.below(2)), rbox()));
    const std::size_t np = 1 + rng.below(5);
    for (std::size_t i = 0; i < np; ++i) {
      const auto& near = gts[rng.below(gts.size())];
      Box b = rng.uniform() < 0.7 ? Box{near.box.x1 + rng.uniform(-4, 4), near.box.y1 + rng.uniform(-4, 4),
                                        near.box.x2 + rng.uniform(-4, 4), near.box.y2 + rng.uniform(-4, 4)}
                                  : rbox();
      b = clip_to_image(b, kSize);
      const double score = std::round(rng.uniform() * 4) / 4;  // force ties
      preds.push_back(pred(near.image_id, static_cast<int>(rng.below(2)), score, b));
    }
    const auto rep = evaluate(preds, gts, 2);
    for (int cls = 0; cls < 2; ++cls) {
      for (std::size_t t = 0; t < rep.thresholds.size(); ++t) {
        const double want = oracle_ap(preds, gts, cls, rep.thresholds[t]);
        const auto& got = rep.per_class[0][t][static_cast<std::size_t>(cls)].ap;
        CAPTURE(trial);
        if (want < 0) {
          CHECK_FALSE(got);
        } else {
          REQUIRE(got);
          CHECK(std::abs(*got - want) < 1e-9);
        }
      }
    }
  }
}

TEST_CASE("AP is invariant under monotone score transforms") {
  Rng rng(8);
  std::vector<GroundTruthInstance> gts;
  std::vector<InstancePrediction> preds;
  for (int i = 0; i < 6; ++i) gts.push_back(gt(static_cast<std::uint64_t>(i % 3), 0, {10.0 * i, 5, 10.0 * i + 25, 40}));
  for (int i = 0; i < 15; ++i) {
    const double x = rng.uniform(0, 60);
    preds.push_back(pred(rng.below(3), 0, rng.uniform(-2, 2), {x, 5, x + 25, 40}));
  }
  const double base = *average_precision(preds, gts, 0, 0.5, MatchKind::BBox).ap;
  auto moved = preds;
  for (auto& p : moved) p.score = std::exp(3 * p.score) + 7;
  CHECK(*average_precision(moved, gts, 0, 0.5, MatchKind::BBox).ap == base);
}

TEST_CASE("report csv") {
  std::vector<GroundTruthInstance> gts{gt(0, 0, {10, 10, 40, 40})};
  std::vector<InstancePrediction> p{pred(0, 0, 1.0, {10, 10, 40, 40})};
  std::ostringstream out;
  const std::vector<std::string> names{"mug", "ball"};
  write_report_csv(out, evaluate(p, gts, 2), names);
  CHECK(out.str() ==
        "scope,mAP50_bbox,mAP70_bbox,mAP50_segm,mAP70_segm\n"
        "all,100.0000,100.0000,100.0000,100.0000\n"
        "mug,100.0000,100.0000,100.0000,100.0000\n"
        "ball,absent,absent,absent,absent\n");
}
