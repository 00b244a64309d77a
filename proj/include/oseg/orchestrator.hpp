#pragma once

// Training protocols, timing accounting, cross-validation and inference.

#include <array>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "oseg/evaluation.hpp"
#include "oseg/incremental.hpp"
#include "oseg/model.hpp"
#include "oseg/synthetic.hpp"

namespace oseg {

enum class Protocol { Ours, OursSerial };

std::string protocol_name(Protocol p);
Protocol parse_protocol(const std::string& name);

struct ModuleHyper {
  std::size_t num_centers = 1000;
  double sigma = 2.0;
  double lambda = 1e-6;

  bool operator==(const ModuleHyper&) const = default;
};

struct ProtocolConfig {
  Protocol protocol = Protocol::Ours;
  std::size_t batch_size = 2000;  // BS
  std::size_t num_batches = 10;   // n_B
  double hard_threshold = -1.0;
  double easy_threshold = -1.0;
  ModuleHyper rpn{1000, 10.0, 1e-3};
  ModuleHyper detection{1000, 2.0, 1e-4};
  ModuleHyper segmentation{500, 2.0, 1e-6};
  double subsample = 0.3;  // r
  double rls_lambda = 1.0;
  bool use_gt_proposals = true;
  ProposalConfig proposals;
  DetectionConfig detection_output;
  double mask_threshold = 0.0;
  std::uint64_t seed = 0;
  // modeled timing
  double extraction_fps = 14.7;
  double flops_per_second = 2e9;

  void validate() const;
  BootstrapConfig bootstrap() const;
  RpnConfig rpn_config() const;
  DetectionTrainConfig detection_config() const;
  SegmentationConfig segmentation_config() const;
  IncrementalConfig incremental_config() const;

  /// Canonical JSON (sorted keys, fixed formatting).
  std::string to_json() const;
  static ProtocolConfig from_json(const std::string& text);
  bool operator==(const ProtocolConfig&) const = default;
};

struct TimingPhase {
  std::string name;
  double modeled_seconds = 0.0;
  double wall_seconds = 0.0;
  bool extraction = false;
  bool overlappable = false;  // can run while images are still being acquired
};

struct TimingLedger {
  std::vector<TimingPhase> phases;

  std::size_t extraction_passes() const;
  /// Sum of modeled times, leaving out overlappable phases when
  /// `exclude_overlappable` is set.
  double modeled_total(bool exclude_overlappable = false) const;
  double wall_total() const;
  /// Modeled on-line training only (no extraction).
  double modeled_training() const;
};

struct TrainResult {
  SegModel model;
  TimingLedger ledger;
  ModuleTrainReport rpn, detection, segmentation;
  /// Positive detection RoIs per provenance (indexed by ProposalSource).
  std::array<std::size_t, 3> detection_positive_sources{};
};

/// One pass over the records collects RPN, detection (stored proposals) and
/// segmentation sets, then the three modules are trained.
TrainResult train_ours(RecordSource& source, const ProtocolConfig& config);

/// Pass 1 trains the RPN; pass 2 featurizes its proposals and trains
/// detection and segmentation from them.
TrainResult train_ours_serial(RecordSource& source, const ProtocolConfig& config, const Featurizer& featurizer);

/// Dispatches on config.protocol; the featurizer comes from the dataset
/// header when needed.
TrainResult train(RecordSource& source, const ProtocolConfig& config);

struct StreamReport {
  std::size_t frames = 0;
  double stream_fps = 0.0;
  double extraction_fps = 0.0;
  double acquisition_end = 0.0;
  double extraction_finish = 0.0;
  double residual_extraction = 0.0;  // extraction still running after the last frame arrived
  double second_pass = 0.0;          // non-overlappable extraction (serial)
  double online_training = 0.0;
  double post_acquisition = 0.0;     // residual + second pass + on-line training
};

/// Frame k arrives at k / stream_fps and is extracted as soon as the single
/// extractor is free, taking 1 / extraction_fps.
StreamReport stream_report(std::size_t frames, double stream_fps, double extraction_fps, const TimingLedger& ledger);

struct StreamResult {
  TrainResult train;
  StreamReport report;
};

StreamResult simulate_stream(RecordSource& source, double stream_fps, double extraction_fps, ProtocolConfig config);

void write_stream_csv(std::ostream& out, const StreamReport& report, Protocol protocol);

/// Boxes, masks and classes for one image.
std::vector<InstancePrediction> infer(const SegModel& model, const FeatureRecord& record, const Featurizer& featurizer);

std::vector<InstancePrediction> infer_all(const SegModel& model, RecordSource& source, const Featurizer& featurizer);

/// Predicts every record and evaluates against its ground truth.
EvalReport evaluate_model(const SegModel& model, RecordSource& source, const Featurizer& featurizer);

/// Fraction of ground-truth boxes with a proposal at IoU >= threshold.
double proposal_recall(const OnlineRpnModel& rpn, RecordSource& source, double threshold = 0.7);

struct CvGrid {
  std::vector<double> sigmas{1, 5, 10, 15, 25};
  std::vector<double> lambdas{1e-7, 1e-6, 1e-5, 1e-4, 1e-3};
};

struct CvChoice {
  double sigma = 0.0;
  double lambda = 0.0;
  double score = 0.0;
};

struct CvResult {
  CvChoice rpn, detection, segmentation;
  ProtocolConfig tuned;
};

/// Picks the best grid point for a score function; equal scores go to the
/// larger lambda, then to the earlier grid point (sigma-major order).
CvChoice select_grid_point(const CvGrid& grid, const std::function<double(double sigma, double lambda)>& score);

/// RPN by proposal recall at IoU 0.7, then detection and segmentation by
/// validation mAP50 segm, each module searched with the others fixed.
CvResult cross_validate(RecordSource& train, RecordSource& validation, const CvGrid& grid, const ProtocolConfig& base,
                        const Featurizer& featurizer);

/// JSON manifest: tool version, command, config, seeds and file digests.
std::string make_manifest(const std::string& command, const ProtocolConfig* config,
                          const std::vector<std::pair<std::string, std::filesystem::path>>& files);

inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace oseg
