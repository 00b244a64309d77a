#include "oseg/online_rpn.hpp"

#include <algorithm>
#include <chrono>
#include <limits>
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

void check_map(const FeatureRecord& record, const AnchorGrid& grid) {
  if (static_cast<std::size_t>(record.rpn_map.rows()) != grid.num_locations()) {
    throw ArgumentError("RPN map has " + std::to_string(record.rpn_map.rows()) + " locations, grid expects " +
                        std::to_string(grid.num_locations()));
  }
}

}  // namespace

RpnImageCandidates rpn_image_candidates(const FeatureRecord& record, const AnchorGrid& grid,
                                        const RpnLabelConfig& labels) {
  check_map(record, grid);
  const std::size_t num_shapes = grid.num_shapes();
  const auto gts = record.gt_boxes();
  const auto lab = label_anchors(grid, gts, labels.positive_iou, labels.negative_iou);

  std::vector<std::vector<std::size_t>> pos(num_shapes), neg(num_shapes), reg(num_shapes);
  for (std::size_t loc = 0; loc < grid.num_locations(); ++loc) {
    for (std::size_t a = 0; a < num_shapes; ++a) {
      const AnchorLabel& l = lab[loc * num_shapes + a];
      if (l.kind == AnchorLabelKind::Positive) pos[a].push_back(loc);
      if (l.kind == AnchorLabelKind::Negative) neg[a].push_back(loc);
      if (l.gt >= 0 && l.max_iou >= labels.regression_iou) reg[a].push_back(loc);
    }
  }

  RpnImageCandidates out;
  for (std::size_t a = 0; a < num_shapes; ++a) {
    out.per_anchor.push_back({gather(record.rpn_map, pos[a]), gather(record.rpn_map, neg[a]), a});
    out.reg_features.push_back(gather(record.rpn_map, reg[a]));
    Matrix t(static_cast<Eigen::Index>(reg[a].size()), 4);
    for (std::size_t i = 0; i < reg[a].size(); ++i) {
      const AnchorLabel& l = lab[reg[a][i] * num_shapes + a];
      const auto e = encode_target(grid.anchor(reg[a][i], a), gts[static_cast<std::size_t>(l.gt)]);
      t.row(static_cast<Eigen::Index>(i)) << e.tx, e.ty, e.tw, e.th;
    }
    out.reg_targets.push_back(std::move(t));
  }
  return out;
}

RpnSetBuilder::RpnSetBuilder(const AnchorGrid& grid, std::size_t feature_dim, std::size_t num_images,
                             const RpnConfig& config)
    : grid_(grid),
      labels_(config.labels),
      pool_(grid.num_shapes(), num_images, feature_dim, config.bootstrap, kRpnStream),
      reg_features_(grid.num_shapes()),
      reg_targets_(grid.num_shapes()),
      feature_dim_(feature_dim) {}

void RpnSetBuilder::add(const FeatureRecord& record) {
  auto cand = rpn_image_candidates(record, grid_, labels_);
  pool_.add_image(record.image_id, cand.per_anchor);
  for (std::size_t a = 0; a < cand.reg_features.size(); ++a) {
    if (cand.reg_features[a].rows() == 0) continue;
    reg_features_[a].push_back(std::move(cand.reg_features[a]));
    reg_targets_[a].push_back(std::move(cand.reg_targets[a]));
  }
}

RpnTrainingSets RpnSetBuilder::finish() && {
  RpnTrainingSets out;
  out.pool = std::move(pool_).finish();
  for (std::size_t a = 0; a < reg_features_.size(); ++a) {
    out.reg_features.push_back(stack_all(reg_features_[a], static_cast<Eigen::Index>(feature_dim_)));
    out.reg_targets.push_back(stack_all(reg_targets_[a], 4));
  }
  return out;
}

RpnTrainingSets build_rpn_training_sets(RecordSource& source, const RpnConfig& config) {
  const auto& h = source.header();
  RpnSetBuilder builder(h.grid, h.dims.rpn, source.size(), config);
  source.rewind();
  while (const FeatureRecord* r = source.next()) builder.add(*r);
  return std::move(builder).finish();
}

OnlineRpnModel train_rpn_from_sets(const RpnTrainingSets& sets, const AnchorGrid& grid, const RpnConfig& config,
                                   ModuleTrainReport* report) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto batches = make_batches(sets.pool, config.bootstrap);
  BootstrapResult boot = run_minibootstrap(sets.pool, batches, config.bootstrap, config.kernel);

  OnlineRpnModel model;
  model.grid = grid;
  model.proposals = config.proposals;
  model.classifiers = std::move(boot.classifiers);
  const auto dim = static_cast<std::size_t>(sets.pool.positives.front().cols());
  for (std::size_t a = 0; a < grid.num_shapes(); ++a) {
    model.regressors.push_back(sets.reg_features[a].rows() > 0
                                   ? train_rls(sets.reg_features[a], sets.reg_targets[a], config.rls_lambda)
                                   : RlsRegressor::zeros(dim));
    if (sets.reg_features[a].rows() > 0) {
      const double n = static_cast<double>(sets.reg_features[a].rows()), f = static_cast<double>(dim);
      boot.cost.flops += 2.0 * n * f * f + f * f * f;
    }
  }
  if (report) {
    report->stats = std::move(boot.stats);
    report->failures = std::move(boot.failures);
    report->cost = boot.cost;
    report->wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return model;
}

OnlineRpnModel train_online_rpn(RecordSource& source, const RpnConfig& config, ModuleTrainReport* report) {
  const auto sets = build_rpn_training_sets(source, config);
  return train_rpn_from_sets(sets, source.header().grid, config, report);
}

std::vector<Proposal> propose(const OnlineRpnModel& model, const FeatureRecord& record) {
  const AnchorGrid& grid = model.grid;
  check_map(record, grid);
  const std::size_t num_shapes = grid.num_shapes();

  std::vector<ScoredBox> cands;
  for (std::size_t a = 0; a < num_shapes; ++a) {
    if (!model.classifiers[a]) continue;
    const Vector scores = model.classifiers[a]->score_rows(record.rpn_map);
    const Matrix deltas = model.regressors[a].predict_rows(record.rpn_map);
    for (std::size_t loc = 0; loc < grid.num_locations(); ++loc) {
      const auto i = static_cast<Eigen::Index>(loc);
      const RegressionTarget t{deltas(i, 0), deltas(i, 1), deltas(i, 2), deltas(i, 3)};
      if (auto b = apply_target(grid.anchor(loc, a), t, grid.image_size())) cands.push_back({*b, scores[i]});
    }
  }
  // stable: equal scores keep shape-major, then location order
  std::vector<std::size_t> order(cands.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return cands[x].score > cands[y].score; });
  if (order.size() > model.proposals.pre_nms_top_k) order.resize(model.proposals.pre_nms_top_k);
  std::vector<ScoredBox> top;
  top.reserve(order.size());
  for (std::size_t i : order) top.push_back(cands[i]);

  std::vector<Proposal> out;
  for (std::size_t k : nms(top, model.proposals.nms_iou)) {
    if (out.size() >= model.proposals.post_nms_top_k) break;
    out.push_back({top[k].box, top[k].score});
  }
  return out;
}

}  // namespace oseg
