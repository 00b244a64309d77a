#pragma once

// On-line segmentation: one per-pixel kernel classifier per class over the
// s x s mask-feature grid of each box.

#include <optional>
#include <vector>

#include "oseg/feature_store.hpp"
#include "oseg/online_rpn.hpp"

namespace oseg {

struct SegmentationConfig {
  double subsample = 0.3;  // r
  KernelParams kernel{500, 2.0, 1e-6};
  double threshold = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// floor(r * count), but at least one when count >= 1.
std::size_t subsample_count(std::size_t count, double r);

struct SegmentationTrainingSets {
  std::vector<Matrix> positives;  // [class]
  std::vector<Matrix> negatives;  // [class]
};

class SegmentationSetBuilder {
 public:
  SegmentationSetBuilder(std::size_t num_classes, std::size_t feature_dim, const SegmentationConfig& config);
  void add(const FeatureRecord& record);
  SegmentationTrainingSets finish() &&;

 private:
  std::size_t feature_dim_;
  SegmentationConfig config_;
  std::vector<std::vector<Matrix>> pos_, neg_;
};

SegmentationTrainingSets build_segmentation_training_sets(RecordSource& source, const SegmentationConfig& config);

struct OnlineSegmentationModel {
  std::vector<std::optional<KernelClassifier>> classifiers;  // [class]; nullopt = not trained
  double threshold = 0.0;
  double subsample = 0.3;

  bool operator==(const OnlineSegmentationModel&) const = default;
};

/// Fits the classifiers of `classes` (all classes when empty) and leaves the
/// others as given in `base`. Throws UntrainableError when a requested class
/// lacks positive or negative pixels.
OnlineSegmentationModel train_segmentation_from_sets(const SegmentationTrainingSets& sets,
                                                     const SegmentationConfig& config,
                                                     std::span<const int> classes = {},
                                                     const OnlineSegmentationModel* base = nullptr,
                                                     ModuleTrainReport* report = nullptr);

OnlineSegmentationModel train_online_segmentation(RecordSource& source, const SegmentationConfig& config,
                                                  ModuleTrainReport* report = nullptr);

/// Raw s x s score grid of a box, row-major.
Vector mask_scores(const OnlineSegmentationModel& model, int cls, const Matrix& mask_features);

/// Scores the grid, resizes it bilinearly to the box's pixel frame and
/// thresholds (score >= threshold is foreground).
BinaryMask predict_mask(const OnlineSegmentationModel& model, int cls, const Box& box, const Matrix& mask_features,
                        ImageSize image_size);

/// The resize + threshold step on its own.
BinaryMask upsample_scores(const Vector& grid_scores, std::size_t s, const Box& box, ImageSize image_size,
                           double threshold);

}  // namespace oseg
