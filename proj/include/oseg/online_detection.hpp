#pragma once

// On-line detection: one kernel classifier and one RLS regressor per class
// over per-RoI features, trained with the minibootstrap.

#include <array>
#include <optional>
#include <vector>

#include "oseg/feature_store.hpp"
#include "oseg/minibootstrap.hpp"
#include "oseg/online_rpn.hpp"

namespace oseg {

/// Stage-1 sampling stream of the detection pool.
inline constexpr std::uint64_t kDetectionStream = tag_hash("detection");

struct DetectionConfig {
  double score_threshold = 0.0;
  double nms_iou = 0.3;
  std::size_t max_detections = 100;

  bool operator==(const DetectionConfig&) const = default;
};

struct DetectionLabelConfig {
  double positive_iou = 0.6;
  double negative_iou = 0.3;
};

struct DetectionTrainConfig {
  BootstrapConfig bootstrap;
  KernelParams kernel;
  double rls_lambda = 1.0;
  DetectionLabelConfig labels;
  DetectionConfig inference;
  bool use_gt_proposals = true;  // keep proposals flagged GroundTruth as training RoIs
};

/// The RoIs of one image used for training: boxes, features and provenance.
struct ProposalSet {
  std::vector<Box> boxes;
  std::vector<ProposalSource> sources;
  Matrix features;  // P x f_d
};

/// Stored proposals of a record, optionally without the injected gt copies.
ProposalSet stored_proposals(const FeatureRecord& record, bool include_gt = true);

struct DetectionImageCandidates {
  std::vector<ClassCandidates> per_class;  // N
  std::vector<Matrix> reg_features;        // N x (k x f_d)
  std::vector<Matrix> reg_targets;         // N x (k x 4)
  std::vector<std::vector<ProposalSource>> positive_sources;  // N, per positive row
};

/// Per class: positives at IoU > 0.6 with a class gt, negatives at IoU < 0.3
/// with every class gt. Images without the class offer all their RoIs as
/// negatives under the shared buffer key.
DetectionImageCandidates detection_image_candidates(const FeatureRecord& record, const ProposalSet& rois,
                                                    std::size_t num_classes, const DetectionLabelConfig& labels = {});

struct DetectionTrainingSets {
  NegativePool pool;
  std::vector<Matrix> reg_features;
  std::vector<Matrix> reg_targets;
  /// Positive RoIs per provenance, indexed by ProposalSource.
  std::array<std::size_t, 3> positive_sources{};
};

class DetectionSetBuilder {
 public:
  DetectionSetBuilder(std::size_t num_classes, std::size_t feature_dim, std::size_t num_images,
                      const DetectionTrainConfig& config);
  void add(const FeatureRecord& record, const ProposalSet& rois);
  DetectionTrainingSets finish() &&;

 private:
  std::size_t num_classes_;
  std::size_t feature_dim_;
  DetectionLabelConfig labels_;
  PoolBuilder pool_;
  std::vector<std::vector<Matrix>> reg_features_, reg_targets_;
  std::array<std::size_t, 3> sources_{};
};

/// Sets from the stored proposals of every record.
DetectionTrainingSets build_detection_training_sets(RecordSource& source, const DetectionTrainConfig& config);

struct OnlineDetectionModel {
  std::vector<KernelClassifier> classifiers;  // N
  std::vector<RlsRegressor> regressors;       // N
  DetectionConfig config;

  std::size_t num_classes() const { return classifiers.size(); }
  bool operator==(const OnlineDetectionModel&) const = default;
};

/// Throws UntrainableError for classes without positives, NumericalError
/// when a class fails to train.
OnlineDetectionModel train_detection_from_sets(const DetectionTrainingSets& sets, const DetectionTrainConfig& config,
                                               ModuleTrainReport* report = nullptr);

OnlineDetectionModel train_online_detection(RecordSource& source, const DetectionTrainConfig& config,
                                            ModuleTrainReport* report = nullptr);

struct InstanceDetection {
  int class_id = 0;
  double score = 0.0;
  Box box;
  std::size_t proposal = 0;  // index of the source proposal
};

/// Scores every (proposal, class), refines, per-class NMS, caps. Descending
/// score; equal scores keep class order then proposal order.
std::vector<InstanceDetection> detect(const OnlineDetectionModel& model, ImageSize image_size,
                                      std::span<const Box> proposals, const Matrix& features);

}  // namespace oseg
