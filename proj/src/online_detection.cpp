#include "oseg/online_detection.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>

#include "oseg/errors.hpp"
#include "oseg/random.hpp"

namespace oseg {

namespace {

Matrix gather(const Matrix& src, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = src.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

Matrix stack_all(const std::vector<Matrix>& parts, Eigen::Index cols) {
  Eigen::Index total = 0;
  for (const auto& p : parts) total += p.rows();
  Matrix out(total, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p;
    at += p.rows();
  }
  return out;
}

}  // namespace

ProposalSet stored_proposals(const FeatureRecord& record, bool include_gt) {
  ProposalSet out;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < record.proposal_boxes.size(); ++i) {
    if (!include_gt && record.proposal_sources[i] == ProposalSource::GroundTruth) continue;
    keep.push_back(i);
    out.boxes.push_back(record.proposal_boxes[i]);
    out.sources.push_back(record.proposal_sources[i]);
  }
  out.features = gather(record.proposal_features, keep);
  return out;
}

DetectionImageCandidates detection_image_candidates(const FeatureRecord& record, const ProposalSet& rois,
                                                    std::size_t num_classes, const DetectionLabelConfig& labels) {
  if (rois.boxes.size() != static_cast<std::size_t>(rois.features.rows()) || rois.sources.size() != rois.boxes.size()) {
    throw ArgumentError("proposal set: boxes, sources and features disagree in length");
  }
  DetectionImageCandidates out;
  for (std::size_t n = 0; n < num_classes; ++n) {
    const int cls = static_cast<int>(n);
    std::vector<Box> gts;
    for (const auto& g : record.gt_objects) {
      if (g.class_id == cls) gts.push_back(g.box);
    }
    std::vector<std::size_t> pos, neg;
    std::vector<int> match;
    for (std::size_t p = 0; p < rois.boxes.size(); ++p) {
      double best = 0.0;
      int arg = -1;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        const double v = iou(rois.boxes[p], gts[g]);
        if (v > best) best = v, arg = static_cast<int>(g);
      }
      if (best > labels.positive_iou) {
        pos.push_back(p);
        match.push_back(arg);
      } else if (best < labels.negative_iou) {
        neg.push_back(p);
      }
    }
    const std::uint64_t key = gts.empty() ? kBufferKey : n;
    Matrix pos_features = gather(rois.features, pos);
    Matrix targets(static_cast<Eigen::Index>(pos.size()), 4);
    std::vector<ProposalSource> src;
    for (std::size_t i = 0; i < pos.size(); ++i) {
      const auto e = encode_target(rois.boxes[pos[i]], gts[static_cast<std::size_t>(match[i])]);
      targets.row(static_cast<Eigen::Index>(i)) << e.tx, e.ty, e.tw, e.th;
      src.push_back(rois.sources[pos[i]]);
    }
    out.reg_features.push_back(pos_features);
    out.reg_targets.push_back(std::move(targets));
    out.positive_sources.push_back(std::move(src));
    out.per_class.push_back({std::move(pos_features), gather(rois.features, neg), key});
  }
  return out;
}

DetectionSetBuilder::DetectionSetBuilder(std::size_t num_classes, std::size_t feature_dim, std::size_t num_images,
                                         const DetectionTrainConfig& config)
    : num_classes_(num_classes),
      feature_dim_(feature_dim),
      labels_(config.labels),
      pool_(num_classes, num_images, feature_dim, config.bootstrap, kDetectionStream),
      reg_features_(num_classes),
      reg_targets_(num_classes) {}

void DetectionSetBuilder::add(const FeatureRecord& record, const ProposalSet& rois) {
  auto cand = detection_image_candidates(record, rois, num_classes_, labels_);
  pool_.add_image(record.image_id, cand.per_class);
  for (std::size_t n = 0; n < num_classes_; ++n) {
    for (ProposalSource s : cand.positive_sources[n]) ++sources_[static_cast<std::size_t>(s)];
    if (cand.reg_features[n].rows() == 0) continue;
    reg_features_[n].push_back(std::move(cand.reg_features[n]));
    reg_targets_[n].push_back(std::move(cand.reg_targets[n]));
  }
}

DetectionTrainingSets DetectionSetBuilder::finish() && {
  DetectionTrainingSets out;
  out.pool = std::move(pool_).finish();
  for (std::size_t n = 0; n < num_classes_; ++n) {
    out.reg_features.push_back(stack_all(reg_features_[n], static_cast<Eigen::Index>(feature_dim_)));
    out.reg_targets.push_back(stack_all(reg_targets_[n], 4));
  }
  out.positive_sources = sources_;
  return out;
}

DetectionTrainingSets build_detection_training_sets(RecordSource& source, const DetectionTrainConfig& config) {
  const auto& h = source.header();
  DetectionSetBuilder builder(h.num_classes(), h.dims.det, source.size(), config);
  source.rewind();
  while (const FeatureRecord* r = source.next()) builder.add(*r, stored_proposals(*r, config.use_gt_proposals));
  return std::move(builder).finish();
}

OnlineDetectionModel train_detection_from_sets(const DetectionTrainingSets& sets, const DetectionTrainConfig& config,
                                               ModuleTrainReport* report) {
  const auto t0 = std::chrono::steady_clock::now();
  if (auto missing = sets.pool.untrainable_classes(); !missing.empty()) throw UntrainableError(std::move(missing));
  const auto batches = make_batches(sets.pool, config.bootstrap);
  BootstrapResult boot = run_minibootstrap(sets.pool, batches, config.bootstrap, config.kernel);
  if (!boot.failures.empty()) {
    std::string msg = "detection training failed:";
    for (const auto& f : boot.failures) msg += " [class " + std::to_string(f.cls) + ": " + f.reason + "]";
    throw NumericalError(msg);
  }

  OnlineDetectionModel model;
  model.config = config.inference;
  const auto dim = static_cast<double>(sets.pool.positives.front().cols());
  for (std::size_t n = 0; n < sets.pool.num_classes(); ++n) {
    model.classifiers.push_back(std::move(*boot.classifiers[n]));
    model.regressors.push_back(train_rls(sets.reg_features[n], sets.reg_targets[n], config.rls_lambda));
    boot.cost.flops += 2.0 * static_cast<double>(sets.reg_features[n].rows()) * dim * dim + dim * dim * dim;
  }
  if (report) {
    report->stats = std::move(boot.stats);
    report->failures.clear();
    report->cost = boot.cost;
    report->wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return model;
}

OnlineDetectionModel train_online_detection(RecordSource& source, const DetectionTrainConfig& config,
                                            ModuleTrainReport* report) {
  return train_detection_from_sets(build_detection_training_sets(source, config), config, report);
}

std::vector<InstanceDetection> detect(const OnlineDetectionModel& model, ImageSize image_size,
                                      std::span<const Box> proposals, const Matrix& features) {
  if (static_cast<std::size_t>(features.rows()) != proposals.size()) {
    throw ArgumentError("detect: one feature row per proposal required");
  }
  std::vector<InstanceDetection> out;
  if (proposals.empty()) return out;
  for (std::size_t n = 0; n < model.num_classes(); ++n) {
    const Vector scores = model.classifiers[n].score_rows(features);
    const Matrix deltas = model.regressors[n].predict_rows(features);
    std::vector<ScoredBox> cands;
    std::vector<std::size_t> origin;
    for (std::size_t p = 0; p < proposals.size(); ++p) {
      const auto i = static_cast<Eigen::Index>(p);
      if (!(scores[i] >= model.config.score_threshold)) continue;
      const RegressionTarget t{deltas(i, 0), deltas(i, 1), deltas(i, 2), deltas(i, 3)};
      if (auto b = apply_target(proposals[p], t, image_size)) {
        cands.push_back({*b, scores[i]});
        origin.push_back(p);
      }
    }
    for (std::size_t k : nms(cands, model.config.nms_iou)) {
      out.push_back({static_cast<int>(n), cands[k].score, cands[k].box, origin[k]});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  if (out.size() > model.config.max_detections) out.resize(model.config.max_detections);
  return out;
}

}  // namespace oseg
