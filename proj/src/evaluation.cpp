#include "oseg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

#include "oseg/errors.hpp"

namespace oseg {

std::vector<GroundTruthInstance> ground_truth_of(const FeatureRecord& record) {
  std::vector<GroundTruthInstance> out;
  for (const auto& g : record.gt_objects) out.push_back({record.image_id, g.class_id, g.box, g.mask});
  return out;
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  const std::size_t ca = a.count(), cb = b.count();
  if (ca == 0 && cb == 0) throw ArgumentError("mask_iou: both masks are empty");
  const int x0 = std::max(a.x0, b.x0), x1 = std::min(a.x0 + a.width, b.x0 + b.width);
  const int y0 = std::max(a.y0, b.y0), y1 = std::min(a.y0 + a.height, b.y0 + b.height);
  std::size_t inter = 0;
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) inter += (a.at(x - a.x0, y - a.y0) && b.at(x - b.x0, y - b.y0)) ? 1 : 0;
  }
  return static_cast<double>(inter) / static_cast<double>(ca + cb - inter);
}

double ap_from_matches(const std::vector<bool>& is_tp, std::size_t num_gt) {
  if (num_gt == 0) throw ArgumentError("average precision needs at least one ground truth");
  const std::size_t n = is_tp.size();
  std::vector<double> recall(n), precision(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += is_tp[i] ? 1 : 0;
    recall[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  // precision envelope, then area over recall steps
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (recall[i] > prev_recall) {
      ap += (recall[i] - prev_recall) * precision[i];
      prev_recall = recall[i];
    }
  }
  return ap;
}

ApResult average_precision(std::span<const InstancePrediction> predictions,
                           std::span<const GroundTruthInstance> ground_truth, int cls, double iou_threshold,
                           MatchKind kind) {
  ApResult result;
  std::vector<std::size_t> gts;
  for (std::size_t g = 0; g < ground_truth.size(); ++g) {
    if (ground_truth[g].class_id == cls) gts.push_back(g);
  }
  result.num_gt = gts.size();

  std::vector<std::size_t> order;
  for (std::size_t p = 0; p < predictions.size(); ++p) {
    if (predictions[p].class_id != cls) continue;
    if (!std::isfinite(predictions[p].score)) throw ArgumentError("average_precision: non-finite score");
    if (kind == MatchKind::Segm && !predictions[p].mask) throw ArgumentError("average_precision: segm needs masks");
    order.push_back(p);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (predictions[a].score != predictions[b].score) return predictions[a].score > predictions[b].score;
    return predictions[a].image_id < predictions[b].image_id;
  });

  std::vector<bool> taken(gts.size(), false);
  std::vector<bool> is_tp;
  is_tp.reserve(order.size());
  for (std::size_t p : order) {
    const InstancePrediction& pred = predictions[p];
    double best = -1.0;
    std::size_t arg = gts.size();
    for (std::size_t k = 0; k < gts.size(); ++k) {
      const GroundTruthInstance& g = ground_truth[gts[k]];
      if (taken[k] || g.image_id != pred.image_id) continue;
      double v;
      if (kind == MatchKind::BBox) {
        v = iou(pred.box, g.box);
      } else {
        v = (pred.mask->count() == 0 && g.mask.count() == 0) ? 0.0 : mask_iou(*pred.mask, g.mask);
      }
      if (v >= iou_threshold && v > best) best = v, arg = k;
    }
    if (arg < gts.size()) taken[arg] = true;
    is_tp.push_back(arg < gts.size());
  }
  result.true_positives = static_cast<std::size_t>(std::count(is_tp.begin(), is_tp.end(), true));
  result.false_positives = is_tp.size() - result.true_positives;
  if (!gts.empty()) {
    result.ap = ap_from_matches(is_tp, gts.size());
  }
  return result;
}

double EvalReport::mean_ap(MatchKind kind, double threshold) const {
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    if (thresholds[t] == threshold) return map[static_cast<std::size_t>(kind)][t];
  }
  throw ArgumentError("EvalReport: threshold not evaluated");
}

EvalReport evaluate(std::span<const InstancePrediction> predictions,
                    std::span<const GroundTruthInstance> ground_truth, std::size_t num_classes,
                    std::vector<double> thresholds) {
  EvalReport report;
  report.thresholds = std::move(thresholds);
  report.num_classes = num_classes;
  for (int kind = 0; kind < 2; ++kind) {
    for (double thr : report.thresholds) {
      std::vector<ApResult> row;
      double sum = 0.0;
      std::size_t counted = 0;
      for (std::size_t c = 0; c < num_classes; ++c) {
        row.push_back(average_precision(predictions, ground_truth, static_cast<int>(c), thr, static_cast<MatchKind>(kind)));
        if (row.back().ap) {
          sum += *row.back().ap;
          ++counted;
        }
      }
      report.per_class[static_cast<std::size_t>(kind)].push_back(std::move(row));
      report.map[static_cast<std::size_t>(kind)].push_back(counted ? sum / static_cast<double>(counted) : 0.0);
    }
  }
  return report;
}

void write_report_csv(std::ostream& out, const EvalReport& report, std::span<const std::string> class_names) {
  auto pct = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", 100.0 * v);
    return std::string(buf);
  };
  out << "scope";
  for (int kind = 0; kind < 2; ++kind) {
    for (double thr : report.thresholds) {
      out << ",mAP" << static_cast<int>(std::lround(thr * 100)) << (kind == 0 ? "_bbox" : "_segm");
    }
  }
  out << '\n' << "all";
  for (int kind = 0; kind < 2; ++kind) {
    for (double v : report.map[static_cast<std::size_t>(kind)]) out << ',' << pct(v);
  }
  out << '\n';
  for (std::size_t c = 0; c < report.num_classes; ++c) {
    out << (c < class_names.size() ? class_names[c] : "class_" + std::to_string(c));
    for (int kind = 0; kind < 2; ++kind) {
      for (const auto& row : report.per_class[static_cast<std::size_t>(kind)]) {
        out << ',' << (row[c].ap ? pct(*row[c].ap) : std::string("absent"));
      }
    }
    out << '\n';
  }
}

}  // namespace oseg
