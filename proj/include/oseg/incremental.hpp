#pragma once

// Class-incremental training with per-image negative reservoirs. After each
// new sequence every stored image is cut down to the new per-image quota
// ceil(n_B * BS / #IMG), so the minibootstrap budget stays fixed while the
// reservoir grows with the number of images only.

#include <filesystem>
#include <string>
#include <vector>

#include "oseg/model.hpp"

namespace oseg {

struct RpnReservoir {
  AnchorGrid grid;
  std::size_t feature_dim = 0;
  std::vector<Matrix> positives;               // [anchor]
  std::vector<std::vector<Matrix>> negatives;  // [anchor][image]
  std::vector<Matrix> reg_features;            // [anchor]
  std::vector<Matrix> reg_targets;             // [anchor]
  std::vector<std::uint64_t> image_ids;
  std::size_t updates = 0;  // t

  std::size_t num_images() const { return image_ids.size(); }
  bool operator==(const RpnReservoir&) const = default;
};

struct DetectionReservoir {
  std::size_t feature_dim = 0;
  std::vector<Matrix> positives;             // [class]
  std::vector<std::vector<Matrix>> img_neg;  // [class][image]
  /// [class][image]: 1 when the image has ground truth of the class, i.e.
  /// img_neg holds its own class negatives rather than standing empty.
  std::vector<std::vector<std::uint8_t>> has_class;
  std::vector<Matrix> buffers;  // [image], sample of all RoI features
  std::vector<Matrix> reg_features;
  std::vector<Matrix> reg_targets;
  std::vector<std::uint64_t> image_ids;
  std::size_t updates = 0;

  std::size_t num_classes() const { return positives.size(); }
  std::size_t num_images() const { return image_ids.size(); }
  bool operator==(const DetectionReservoir&) const = default;
};

RpnReservoir empty_rpn_reservoir(const AnchorGrid& grid, std::size_t feature_dim);
DetectionReservoir empty_detection_reservoir(std::size_t feature_dim);

/// Downsamples every stored image to the new quota, then adds the new
/// images' positives and quota-sized negative samples per anchor.
void rpn_incremental_update(RpnReservoir& reservoir, RecordSource& sequence, const BootstrapConfig& config,
                            const RpnLabelConfig& labels = {});

/// As above per class; `new_classes` extends the class list (their lists on
/// old images start empty). New images also store a quota-sized buffer of
/// all their RoI features. Throws UntrainableError when a new class has no
/// positive in the sequence.
void detection_incremental_update(DetectionReservoir& reservoir, RecordSource& sequence, std::size_t new_classes,
                                  const DetectionTrainConfig& config);

/// Stage-1 pools as seen by the minibootstrap.
NegativePool materialize(const RpnReservoir& reservoir);
/// Class n on image i uses img_neg[n][i] when non-empty, else the buffer.
NegativePool materialize(const DetectionReservoir& reservoir);

struct IncrementalConfig {
  RpnConfig rpn;
  DetectionTrainConfig detection;
  SegmentationConfig segmentation;
};

struct IncrementalReport {
  ModuleTrainReport rpn, detection, segmentation;
};

/// Retrains RPN and detection for all anchors/classes from the reservoirs
/// and fits segmentation classifiers for `new_classes` only, on `sequence`.
/// Other segmentation classifiers are copied from `previous`.
SegModel retrain_incremental(const RpnReservoir& rpn, const DetectionReservoir& det, RecordSource& sequence,
                             std::span<const int> new_classes, const SegModel* previous,
                             std::vector<std::string> class_names, const IncrementalConfig& config,
                             IncrementalReport* report = nullptr);

std::string encode_reservoirs(const RpnReservoir& rpn, const DetectionReservoir& det);
void decode_reservoirs(std::span<const char> bytes, RpnReservoir& rpn, DetectionReservoir& det);

enum class ChainSampler { Uniform, KeepFirst };

struct EquivalenceResult {
  double statistic = 0.0;
  std::size_t degrees_of_freedom = 0;
  double p_value = 0.0;
  bool pass = false;
  std::size_t num_subsets = 0;
};

/// Draws a subset of `subset_size` from {0..pool_size-1} through the chain
/// of intermediate sizes, `trials` times, and tests the subset counts for
/// uniformity with a chi-square test (pass when p > 0.01). KeepFirst is a
/// biased control that never drops element 0.
EquivalenceResult sampling_equivalence_test(std::size_t pool_size, std::size_t subset_size,
                                            std::span<const std::size_t> chain, std::size_t trials,
                                            std::uint64_t seed, ChainSampler sampler = ChainSampler::Uniform);

}  // namespace oseg
