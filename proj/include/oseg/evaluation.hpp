#pragma once

// VOC-style average precision for boxes and masks.

#include <array>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "oseg/feature_store.hpp"

namespace oseg {

struct InstancePrediction {
  std::uint64_t image_id = 0;
  int class_id = 0;
  double score = 0.0;
  Box box;
  std::optional<BinaryMask> mask;

  bool operator==(const InstancePrediction&) const = default;
};

struct GroundTruthInstance {
  std::uint64_t image_id = 0;
  int class_id = 0;
  Box box;
  BinaryMask mask;
};

std::vector<GroundTruthInstance> ground_truth_of(const FeatureRecord& record);

enum class MatchKind { BBox = 0, Segm = 1 };

/// Pixel IoU of two box-aligned masks on the common image canvas. Throws
/// ArgumentError when both are empty.
double mask_iou(const BinaryMask& a, const BinaryMask& b);

/// Area under the precision envelope of a TP/FP sequence (ordered by
/// descending score) against `num_gt` ground truths.
double ap_from_matches(const std::vector<bool>& is_tp, std::size_t num_gt);

struct ApResult {
  std::optional<double> ap;  // nullopt when the class has no ground truth
  std::size_t num_gt = 0;
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
};

/// Predictions are ranked by descending score, ties by image id, then input
/// order; each takes the highest-IoU unmatched ground truth of its class and
/// image with IoU >= threshold.
ApResult average_precision(std::span<const InstancePrediction> predictions,
                           std::span<const GroundTruthInstance> ground_truth, int cls, double iou_threshold,
                           MatchKind kind);

struct EvalReport {
  std::vector<double> thresholds;
  std::size_t num_classes = 0;
  // [kind][threshold][class]
  std::array<std::vector<std::vector<ApResult>>, 2> per_class;
  // [kind][threshold]; mean over classes that have ground truth
  std::array<std::vector<double>, 2> map;

  double mean_ap(MatchKind kind, double threshold) const;
};

EvalReport evaluate(std::span<const InstancePrediction> predictions,
                    std::span<const GroundTruthInstance> ground_truth, std::size_t num_classes,
                    std::vector<double> thresholds = {0.5, 0.7});

/// Rows: "all" then one per class; columns mAP50/70 bbox, mAP50/70 segm in
/// percent (per-class rows hold AP, "absent" without ground truth).
void write_report_csv(std::ostream& out, const EvalReport& report, std::span<const std::string> class_names);

}  // namespace oseg
