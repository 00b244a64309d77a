#include "oseg/verify.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cstdio>
#include <functional>

#include "oseg/evaluation.hpp"
#include "oseg/incremental.hpp"
#include "oseg/kernel.hpp"
#include "oseg/random.hpp"

namespace oseg {

namespace {

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

const ImageSize kCanvas{100, 100};

BinaryMask filled(const Box& b) {
  const auto f = pixel_frame(b, kCanvas);
  return {f.x0, f.y0, f.width, f.height, std::vector<std::uint8_t>(static_cast<std::size_t>(f.width * f.height), 1)};
}

// Best IoU vector (rank order, lexicographic) over all injective matchings,
// then all-point AP on the resulting TP/FP sequence.
double exhaustive_ap(std::vector<InstancePrediction> p, const std::vector<GroundTruthInstance>& g, double thr) {
  std::stable_sort(p.begin(), p.end(), [](const auto& a, const auto& b) {
    return a.score != b.score ? a.score > b.score : a.image_id < b.image_id;
  });
  std::vector<double> best_v;
  std::vector<int> best, cur(p.size(), -1);
  std::vector<bool> used(g.size(), false);
  std::function<void(std::size_t)> rec = [&](std::size_t i) {
    if (i == p.size()) {
      std::vector<double> v(p.size(), 0.0);
      for (std::size_t k = 0; k < p.size(); ++k)
        if (cur[k] >= 0) v[k] = iou(p[k].box, g[static_cast<std::size_t>(cur[k])].box);
      if (best.empty() || v > best_v) best_v = v, best = cur;
      return;
    }
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
  std::vector<double> prec;
  std::vector<double> recall;
  double tp = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    tp += best[k] >= 0 ? 1 : 0;
    prec.push_back(tp / static_cast<double>(k + 1));
    recall.push_back(tp / static_cast<double>(g.size()));
  }
  double ap = 0, prev = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    ap += (recall[k] - prev) * *std::max_element(prec.begin() + static_cast<std::ptrdiff_t>(k), prec.end());
    prev = recall[k];
  }
  return ap;
}

}  // namespace

VerifyCheck verify_sampling(const VerifyOptions& opt) {
  const std::vector<std::size_t> chain{4, 3};
  const auto uni = sampling_equivalence_test(6, 2, chain, opt.trials, opt.seed);
  const auto biased = sampling_equivalence_test(6, 2, chain, opt.trials, opt.seed, ChainSampler::KeepFirst);
  return {"sampling equivalence", uni.pass && !biased.pass,
          fmt("chain 6-4-3-2: chi2=%.2f df=%zu p=%.4f; keep-first control p=%.3g", uni.statistic,
              uni.degrees_of_freedom, uni.p_value, biased.p_value)};
}

VerifyCheck verify_solver(const VerifyOptions& opt) {
  const auto half = static_cast<Eigen::Index>(opt.oracle_points / 2);
  const Eigen::Index d = 5;
  Rng rng(opt.seed);
  Matrix pos(half, d), neg(half, d), q(50, d);
  for (Eigen::Index i = 0; i < half; ++i)
    for (Eigen::Index j = 0; j < d; ++j) {
      pos(i, j) = rng.normal() + 0.7;
      neg(i, j) = rng.normal() - 0.7;
    }
  for (Eigen::Index i = 0; i < q.rows(); ++i)
    for (Eigen::Index j = 0; j < d; ++j) q(i, j) = 1.5 * rng.normal();
  const double sigma = 1.5;
  const Matrix x = vstack(pos, neg);
  const Eigen::Index n = x.rows();
  Vector y(n);
  y.head(half).setOnes();
  y.tail(half).setConstant(-1);
  double worst = 0;
  for (double lambda : {1e-3, 1e-4}) {
    const auto model = train_kernel_classifier(pos, neg, {static_cast<std::size_t>(n), sigma, lambda}, opt.seed);
    Matrix k = gaussian_kernel(x, x, sigma);
    k.diagonal().array() += lambda * static_cast<double>(n);
    const Vector want = gaussian_kernel(q, x, sigma) * k.fullPivLu().solve(y);
    worst = std::max(worst, (model.score_rows(q) - want).norm() / want.norm());
  }
  return {"solver oracle", worst < 1e-6, fmt("M = n = %td, max relative error %.3g", n, worst)};
}

VerifyCheck verify_evaluator(const VerifyOptions& opt) {
  Rng rng(opt.seed);
  double worst = 0;
  std::size_t missing = 0;
  for (std::size_t trial = 0; trial < opt.evaluator_instances; ++trial) {
    std::vector<GroundTruthInstance> gts;
    std::vector<InstancePrediction> preds;
    const std::size_t ng = 1 + rng.below(4), np = 1 + rng.below(5);
    for (std::size_t i = 0; i < ng; ++i) {
      const double x = rng.uniform(0, 60), y = rng.uniform(0, 60);
      const Box b{x, y, x + rng.uniform(10, 35), y + rng.uniform(10, 35)};
      gts.push_back({rng.below(2), static_cast<int>(rng.below(2)), b, filled(b)});
    }
    for (std::size_t i = 0; i < np; ++i) {
      const auto& g = gts[rng.below(gts.size())];
      const Box b = clip_to_image({g.box.x1 + rng.uniform(-4, 4), g.box.y1 + rng.uniform(-4, 4),
                                   g.box.x2 + rng.uniform(-4, 4), g.box.y2 + rng.uniform(-4, 4)},
                                  kCanvas);
      preds.push_back({g.image_id, static_cast<int>(rng.below(2)), std::round(rng.uniform() * 4) / 4, b, filled(b)});
    }
    const auto rep = evaluate(preds, gts, 2);
    for (int c = 0; c < 2; ++c) {
      std::vector<InstancePrediction> pc;
      std::vector<GroundTruthInstance> gc;
      for (const auto& p : preds)
        if (p.class_id == c) pc.push_back(p);
      for (const auto& g : gts)
        if (g.class_id == c) gc.push_back(g);
      for (std::size_t t = 0; t < rep.thresholds.size(); ++t) {
        const auto& got = rep.per_class[0][t][static_cast<std::size_t>(c)].ap;
        if (gc.empty() || !got) {
          missing += gc.empty() == !got ? 0 : 1;
          continue;
        }
        worst = std::max(worst, std::abs(*got - exhaustive_ap(pc, gc, rep.thresholds[t])));
      }
    }
  }
  return {"evaluator oracle", worst <= 1e-9 && missing == 0,
          fmt("%zu random instances, max |AP - exhaustive AP| = %.3g", opt.evaluator_instances, worst)};
}

std::vector<VerifyCheck> verify_all(const VerifyOptions& opt) {
  return {verify_sampling(opt), verify_solver(opt), verify_evaluator(opt)};
}

}  // namespace oseg
