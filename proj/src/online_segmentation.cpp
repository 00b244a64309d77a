#include "oseg/online_segmentation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

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

void SegmentationConfig::validate() const {
  if (!(subsample > 0.0 && subsample <= 1.0)) throw ArgumentError("segmentation: r must lie in (0, 1]");
  if (kernel.num_centers < 1) throw ArgumentError("segmentation: need at least one Nystrom center");
}

std::size_t subsample_count(std::size_t count, double r) {
  if (count == 0) return 0;
  // small epsilon so that e.g. 0.3 * 10 lands on 3, not 2.9999
  const auto k = static_cast<std::size_t>(std::floor(r * static_cast<double>(count) + 1e-9));
  return std::clamp<std::size_t>(k, 1, count);
}

SegmentationSetBuilder::SegmentationSetBuilder(std::size_t num_classes, std::size_t feature_dim,
                                               const SegmentationConfig& config)
    : feature_dim_(feature_dim), config_(config), pos_(num_classes), neg_(num_classes) {
  config_.validate();
}

void SegmentationSetBuilder::add(const FeatureRecord& record) {
  for (std::size_t g = 0; g < record.gt_objects.size(); ++g) {
    const GtObject& obj = record.gt_objects[g];
    if (obj.class_id < 0 || static_cast<std::size_t>(obj.class_id) >= pos_.size()) {
      throw ArgumentError("segmentation: gt class " + std::to_string(obj.class_id) + " outside the class list");
    }
    if (static_cast<std::size_t>(obj.mask_features.rows()) != obj.pixel_labels.size() ||
        static_cast<std::size_t>(obj.mask_features.cols()) != feature_dim_) {
      throw ArgumentError("segmentation: mask features do not match pixel labels");
    }
    std::vector<std::size_t> fg, bg;
    for (std::size_t p = 0; p < obj.pixel_labels.size(); ++p) (obj.pixel_labels[p] ? fg : bg).push_back(p);
    const auto c = static_cast<std::size_t>(obj.class_id);
    const std::uint64_t base = derive_seed(config_.seed, {tag_hash("segmentation"), record.image_id, g});
    for (int side = 0; side < 2; ++side) {
      const auto& idx = side == 0 ? fg : bg;
      if (idx.empty()) continue;
      Rng rng(derive_seed(base, {static_cast<std::uint64_t>(side)}));
      const auto keep = sample_indices(idx.size(), subsample_count(idx.size(), config_.subsample), rng);
      std::vector<std::size_t> rows;
      rows.reserve(keep.size());
      for (std::size_t k : keep) rows.push_back(idx[k]);
      (side == 0 ? pos_ : neg_)[c].push_back(gather(obj.mask_features, rows));
    }
  }
}

SegmentationTrainingSets SegmentationSetBuilder::finish() && {
  SegmentationTrainingSets out;
  const auto cols = static_cast<Eigen::Index>(feature_dim_);
  for (std::size_t c = 0; c < pos_.size(); ++c) {
    out.positives.push_back(stack_all(pos_[c], cols));
    out.negatives.push_back(stack_all(neg_[c], cols));
  }
  return out;
}

SegmentationTrainingSets build_segmentation_training_sets(RecordSource& source, const SegmentationConfig& config) {
  const auto& h = source.header();
  SegmentationSetBuilder builder(h.num_classes(), h.dims.seg, config);
  source.rewind();
  while (const FeatureRecord* r = source.next()) builder.add(*r);
  return std::move(builder).finish();
}

OnlineSegmentationModel train_segmentation_from_sets(const SegmentationTrainingSets& sets,
                                                     const SegmentationConfig& config, std::span<const int> classes,
                                                     const OnlineSegmentationModel* base, ModuleTrainReport* report) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t num_classes = sets.positives.size();
  std::vector<int> todo(classes.begin(), classes.end());
  if (todo.empty()) {
    for (std::size_t c = 0; c < num_classes; ++c) todo.push_back(static_cast<int>(c));
  }
  std::vector<int> missing;
  for (int c : todo) {
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes) throw ArgumentError("segmentation: class out of range");
    if (sets.positives[static_cast<std::size_t>(c)].rows() == 0 || sets.negatives[static_cast<std::size_t>(c)].rows() == 0) {
      missing.push_back(c);
    }
  }
  if (!missing.empty()) throw UntrainableError(std::move(missing));

  OnlineSegmentationModel model;
  if (base) model = *base;
  model.threshold = config.threshold;
  model.subsample = config.subsample;
  model.classifiers.resize(num_classes);
  TrainCost cost;
  for (int c : todo) {
    const auto cu = static_cast<std::size_t>(c);
    KernelParams p = config.kernel;
    const auto n = static_cast<std::size_t>(sets.positives[cu].rows() + sets.negatives[cu].rows());
    p.num_centers = std::min(p.num_centers, n);
    model.classifiers[cu] = train_kernel_classifier(sets.positives[cu], sets.negatives[cu], p,
                                                    derive_seed(config.seed, {tag_hash("segmentation-centers"), cu}),
                                                    &cost);
  }
  if (report) {
    report->stats.clear();
    report->failures.clear();
    report->cost = cost;
    report->wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return model;
}

OnlineSegmentationModel train_online_segmentation(RecordSource& source, const SegmentationConfig& config,
                                                  ModuleTrainReport* report) {
  return train_segmentation_from_sets(build_segmentation_training_sets(source, config), config, {}, nullptr, report);
}

Vector mask_scores(const OnlineSegmentationModel& model, int cls, const Matrix& mask_features) {
  if (cls < 0 || static_cast<std::size_t>(cls) >= model.classifiers.size() || !model.classifiers[static_cast<std::size_t>(cls)]) {
    throw ArgumentError("predict_mask: class " + std::to_string(cls) + " has no trained mask classifier");
  }
  return model.classifiers[static_cast<std::size_t>(cls)]->score_rows(mask_features);
}

BinaryMask upsample_scores(const Vector& grid_scores, std::size_t s, const Box& box, ImageSize image_size,
                           double threshold) {
  require_valid(box);
  if (s < 1 || static_cast<std::size_t>(grid_scores.size()) != s * s) throw ArgumentError("mask grid must be s x s");
  const PixelFrame f = pixel_frame(box, image_size);
  BinaryMask m{f.x0, f.y0, f.width, f.height, std::vector<std::uint8_t>(static_cast<std::size_t>(f.width) * f.height, 0)};
  const double ds = static_cast<double>(s);
  const double hi = ds - 1.0;
  auto grid = [&](std::size_t r, std::size_t c) { return grid_scores[static_cast<Eigen::Index>(r * s + c)]; };
  for (int y = 0; y < f.height; ++y) {
    const double v = std::clamp((f.y0 + y + 0.5 - box.y1) / box.height() * ds - 0.5, 0.0, hi);
    const auto r0 = static_cast<std::size_t>(std::floor(v));
    const std::size_t r1 = std::min(r0 + 1, s - 1);
    const double fy = v - static_cast<double>(r0);
    for (int x = 0; x < f.width; ++x) {
      const double u = std::clamp((f.x0 + x + 0.5 - box.x1) / box.width() * ds - 0.5, 0.0, hi);
      const auto c0 = static_cast<std::size_t>(std::floor(u));
      const std::size_t c1 = std::min(c0 + 1, s - 1);
      const double fx = u - static_cast<double>(c0);
      const double top = grid(r0, c0) * (1 - fx) + grid(r0, c1) * fx;
      const double bottom = grid(r1, c0) * (1 - fx) + grid(r1, c1) * fx;
      m.bits[static_cast<std::size_t>(y) * f.width + x] = (top * (1 - fy) + bottom * fy) >= threshold ? 1 : 0;
    }
  }
  return m;
}

BinaryMask predict_mask(const OnlineSegmentationModel& model, int cls, const Box& box, const Matrix& mask_features,
                        ImageSize image_size) {
  const auto cells = static_cast<std::size_t>(mask_features.rows());
  const auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(cells))));
  if (s * s != cells) throw ArgumentError("predict_mask: mask features are not an s x s grid");
  return upsample_scores(mask_scores(model, cls, mask_features), s, box, image_size, model.threshold);
}

}  // namespace oseg
