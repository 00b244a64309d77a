#pragma once

// On-line RPN: one kernel classifier and one 4-output RLS bank per anchor
// shape, over the per-location vectors of the RPN feature map. Each anchor
// shape is a "class" of the minibootstrap.

#include <optional>
#include <vector>

#include "oseg/feature_store.hpp"
#include "oseg/minibootstrap.hpp"
#include "oseg/random.hpp"

namespace oseg {

/// Stage-1 sampling stream of the RPN pool.
inline constexpr std::uint64_t kRpnStream = tag_hash("rpn");

struct ProposalConfig {
  std::size_t pre_nms_top_k = 1000;
  double nms_iou = 0.7;
  std::size_t post_nms_top_k = 300;

  bool operator==(const ProposalConfig&) const = default;
};

struct RpnLabelConfig {
  double positive_iou = 0.7;
  double negative_iou = 0.3;
  double regression_iou = 0.6;
};

struct RpnConfig {
  BootstrapConfig bootstrap;
  KernelParams kernel;
  double rls_lambda = 1.0;
  RpnLabelConfig labels;
  ProposalConfig proposals;
};

/// One image's contribution to every anchor's training problem.
struct RpnImageCandidates {
  std::vector<ClassCandidates> per_anchor;  // A
  std::vector<Matrix> reg_features;         // A x (k x f)
  std::vector<Matrix> reg_targets;          // A x (k x 4)
};

RpnImageCandidates rpn_image_candidates(const FeatureRecord& record, const AnchorGrid& grid,
                                        const RpnLabelConfig& labels = {});

struct RpnTrainingSets {
  NegativePool pool;
  std::vector<Matrix> reg_features;
  std::vector<Matrix> reg_targets;
};

/// Streaming builder so RPN sets can be collected in a shared pass.
class RpnSetBuilder {
 public:
  RpnSetBuilder(const AnchorGrid& grid, std::size_t feature_dim, std::size_t num_images, const RpnConfig& config);
  void add(const FeatureRecord& record);
  RpnTrainingSets finish() &&;

 private:
  AnchorGrid grid_;
  RpnLabelConfig labels_;
  PoolBuilder pool_;
  std::vector<std::vector<Matrix>> reg_features_, reg_targets_;
  std::size_t feature_dim_;
};

RpnTrainingSets build_rpn_training_sets(RecordSource& source, const RpnConfig& config);

struct OnlineRpnModel {
  AnchorGrid grid;
  std::vector<std::optional<KernelClassifier>> classifiers;  // nullopt: untrainable anchor
  std::vector<RlsRegressor> regressors;
  ProposalConfig proposals;

  bool operator==(const OnlineRpnModel&) const = default;
};

struct ModuleTrainReport {
  std::vector<IterationStat> stats;
  std::vector<ClassFailure> failures;
  TrainCost cost;
  double wall_seconds = 0.0;
};

/// Trains from collected sets. Anchors without positives are left
/// untrainable and reported in `report.failures`.
OnlineRpnModel train_rpn_from_sets(const RpnTrainingSets& sets, const AnchorGrid& grid, const RpnConfig& config,
                                   ModuleTrainReport* report = nullptr);

OnlineRpnModel train_online_rpn(RecordSource& source, const RpnConfig& config, ModuleTrainReport* report = nullptr);

struct Proposal {
  Box box;
  double score = 0.0;
};

/// Scores every (location, anchor), refines, clips, NMS. Descending score.
std::vector<Proposal> propose(const OnlineRpnModel& model, const FeatureRecord& record);

}  // namespace oseg
