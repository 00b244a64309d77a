#include "oseg/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "oseg/errors.hpp"
#include "oseg/random.hpp"

namespace oseg {

namespace {

Matrix make_prototypes(std::uint64_t seed, std::string_view family, std::size_t rows, std::size_t dim) {
  Matrix p(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
  for (std::size_t c = 0; c < rows; ++c) {
    for (std::size_t k = 0; k < dim; ++k) {
      p(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k)) =
          hashed_normal(derive_seed(seed, {tag_hash(family), c, k}));
    }
  }
  return p;
}

void add_noise(Eigen::Ref<Eigen::RowVectorXd> row, double eta, std::uint64_t key) {
  if (eta == 0.0) return;
  for (Eigen::Index k = 0; k < row.size(); ++k) {
    row[k] += eta * hashed_normal(derive_seed(key, {static_cast<std::uint64_t>(k)}));
  }
}

/// Weighted prototype blend; the background takes whatever weight is left.
Eigen::RowVectorXd blend(const Matrix& protos, std::span<const std::pair<int, double>> weights) {
  const Eigen::Index bg = protos.rows() - 1;
  Eigen::RowVectorXd v = Eigen::RowVectorXd::Zero(protos.cols());
  double used = 0.0;
  for (const auto& [cls, w] : weights) {
    if (w == 0.0) continue;
    v += w * protos.row(cls);
    used += w;
  }
  const double rest = std::max(0.0, 1.0 - used);
  if (rest > 0.0) v += rest * protos.row(bg);
  return v;
}

std::uint64_t box_key(const Box& q) {
  auto enc = [](double v) { return static_cast<std::uint64_t>(static_cast<std::int64_t>(std::llround(2.0 * v))); };
  return derive_seed(enc(q.x1), {enc(q.y1), enc(q.x2), enc(q.y2)});
}

bool inside_image(const Box& b, ImageSize size) {
  return b.x1 >= 0 && b.y1 >= 0 && b.x2 <= size.width && b.y2 <= size.height;
}

double round_half(double v) { return std::round(2.0 * v) / 2.0; }

/// Sample point of mask cell (row, col) for a box, in integer image pixels.
std::pair<int, int> cell_pixel(const Box& b, std::size_t s, std::size_t row, std::size_t col, ImageSize size) {
  const double x = b.x1 + (static_cast<double>(col) + 0.5) * b.width() / static_cast<double>(s);
  const double y = b.y1 + (static_cast<double>(row) + 0.5) * b.height() / static_cast<double>(s);
  return {std::clamp(static_cast<int>(std::floor(x)), 0, size.width - 1),
          std::clamp(static_cast<int>(std::floor(y)), 0, size.height - 1)};
}

std::optional<Box> jitter_in_band(Rng& rng, const Box& gt, double spread, ImageSize size, auto in_band) {
  for (int attempt = 0; attempt < 200; ++attempt) {
    const double sw = std::exp(rng.uniform(-spread, spread));
    const double sh = std::exp(rng.uniform(-spread, spread));
    const double dx = rng.uniform(-spread, spread) * gt.width();
    const double dy = rng.uniform(-spread, spread) * gt.height();
    const double cx = gt.center_x() + dx, cy = gt.center_y() + dy;
    const double w = gt.width() * sw, h = gt.height() * sh;
    const Box b = quantize_half_pixel(clip_to_image({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h}, size));
    if (!b.valid() || b.width() < 2 || b.height() < 2) continue;
    if (in_band(iou(b, gt))) return b;
  }
  return std::nullopt;
}

}  // namespace

SyntheticWorld::SyntheticWorld(SyntheticParams params, FeatureDims dims, AnchorGrid grid)
    : params_(std::move(params)), dims_(dims), grid_(std::move(grid)) {
  if (params_.num_classes < 1) throw ArgumentError("synthetic world needs at least one class");
  if (!(params_.noise >= 0)) throw ArgumentError("synthetic noise must be non-negative");
  if (params_.max_objects < params_.min_objects) throw ArgumentError("max_objects < min_objects");
  if (dims_.rpn < 1 || dims_.det < 1 || dims_.seg < 1 || dims_.mask_size < 1) throw ArgumentError("feature dims must be positive");
  for (int c : params_.classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= params_.num_classes) throw ArgumentError("class id outside the world");
  }
  const std::size_t rows = params_.num_classes + 1;
  proto_rpn_ = make_prototypes(params_.seed, "proto-rpn", rows, dims_.rpn);
  proto_det_ = make_prototypes(params_.seed, "proto-det", rows, dims_.det);
  proto_seg_ = make_prototypes(params_.seed, "proto-seg", rows, dims_.seg);
}

SyntheticWorld SyntheticWorld::with_classes(std::vector<int> classes) const {
  SyntheticParams p = params_;
  p.classes = std::move(classes);
  return SyntheticWorld(std::move(p), dims_, grid_);
}

std::vector<ObjectLayout> SyntheticWorld::layout(std::uint64_t image_id) const {
  std::vector<int> classes = params_.classes;
  if (classes.empty()) {
    classes.resize(params_.num_classes);
    std::iota(classes.begin(), classes.end(), 0);
  }
  const ImageSize size = grid_.image_size();
  Rng rng(derive_seed(params_.seed, {tag_hash("layout"), image_id}));
  const std::size_t count = params_.min_objects + rng.below(params_.max_objects - params_.min_objects + 1);
  std::vector<ObjectLayout> objects;
  for (std::size_t o = 0; o < count; ++o) {
    const int cls = classes[rng.below(classes.size())];
    // each class keeps one aspect ratio, as real categories roughly do; the
    // shape-blind RPN map can then tell anchors apart through the class
    const std::size_t shape = static_cast<std::size_t>(cls) % grid_.num_shapes();
    for (int attempt = 0; attempt < 100; ++attempt) {
      const std::size_t loc = rng.below(grid_.num_locations());
      const double dx = round_half(rng.uniform(-params_.box_jitter, params_.box_jitter));
      const double dy = round_half(rng.uniform(-params_.box_jitter, params_.box_jitter));
      Box b = grid_.anchor(loc, shape);
      b = {b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy};
      if (!inside_image(b, size)) continue;
      const Box padded{b.x1 - 2, b.y1 - 2, b.x2 + 2, b.y2 + 2};
      const bool overlaps = std::any_of(objects.begin(), objects.end(),
                                        [&](const ObjectLayout& other) { return iou(padded, other.box) > 0.0; });
      if (overlaps) continue;
      objects.push_back({cls, b, rasterize_ellipse(b, size)});
      break;
    }
  }
  return objects;
}

Matrix SyntheticWorld::rpn_map(std::uint64_t image_id, std::span<const ObjectLayout> objects) const {
  const std::size_t locs = grid_.num_locations();
  Matrix map(static_cast<Eigen::Index>(locs), static_cast<Eigen::Index>(dims_.rpn));
  std::vector<std::pair<int, double>> weights(objects.size());
  for (std::size_t loc = 0; loc < locs; ++loc) {
    for (std::size_t g = 0; g < objects.size(); ++g) {
      double best = 0.0;
      for (std::size_t a = 0; a < grid_.num_shapes(); ++a) best = std::max(best, iou(grid_.anchor(loc, a), objects[g].box));
      weights[g] = {objects[g].class_id, best};
    }
    map.row(static_cast<Eigen::Index>(loc)) = blend(proto_rpn_, weights);
    add_noise(map.row(static_cast<Eigen::Index>(loc)), params_.noise,
              derive_seed(params_.seed, {tag_hash("noise-rpn"), image_id, loc}));
  }
  return map;
}

Vector SyntheticWorld::detection_features(std::uint64_t image_id, std::span<const ObjectLayout> objects,
                                          const Box& box) const {
  const Box q = quantize_half_pixel(box);
  require_valid(q);
  std::vector<std::pair<int, double>> weights;
  for (const auto& o : objects) weights.emplace_back(o.class_id, iou(q, o.box));
  Eigen::RowVectorXd v = blend(proto_det_, weights);
  add_noise(v, params_.noise, derive_seed(params_.seed, {tag_hash("noise-det"), image_id, box_key(q)}));
  return v.transpose();
}

Matrix SyntheticWorld::mask_features(std::uint64_t image_id, std::span<const ObjectLayout> objects,
                                     const Box& box) const {
  const Box q = quantize_half_pixel(box);
  require_valid(q);
  const std::size_t s = dims_.mask_size;
  const ImageSize size = grid_.image_size();
  Matrix out(static_cast<Eigen::Index>(s * s), static_cast<Eigen::Index>(dims_.seg));
  const std::uint64_t key = derive_seed(params_.seed, {tag_hash("noise-seg"), image_id, box_key(q)});
  std::vector<std::pair<int, double>> weights(objects.size());
  for (std::size_t row = 0; row < s; ++row) {
    for (std::size_t col = 0; col < s; ++col) {
      const auto [px, py] = cell_pixel(q, s, row, col, size);
      for (std::size_t g = 0; g < objects.size(); ++g) {
        weights[g] = {objects[g].class_id, objects[g].mask.covers(px, py) ? 1.0 : 0.0};
      }
      const auto cell = static_cast<Eigen::Index>(row * s + col);
      out.row(cell) = blend(proto_seg_, weights);
      add_noise(out.row(cell), params_.noise, derive_seed(key, {static_cast<std::uint64_t>(cell)}));
    }
  }
  return out;
}

FeatureRecord SyntheticWorld::make_record(std::uint64_t image_id) const {
  const ImageSize size = grid_.image_size();
  const auto objects = layout(image_id);
  FeatureRecord rec;
  rec.image_id = image_id;
  rec.image_size = size;
  rec.rpn_map = rpn_map(image_id, objects);

  Rng rng(derive_seed(params_.seed, {tag_hash("proposals"), image_id}));
  auto add = [&](const Box& b, ProposalSource src) {
    rec.proposal_boxes.push_back(b);
    rec.proposal_sources.push_back(src);
  };
  for (const auto& o : objects) {
    if (params_.inject_gt_proposals) add(o.box, ProposalSource::GroundTruth);
    for (std::size_t i = 0; i < params_.proposals_high; ++i) {
      if (auto b = jitter_in_band(rng, o.box, 0.12, size, [](double v) { return v > 0.6; })) add(*b, ProposalSource::Stored);
    }
    for (std::size_t i = 0; i < params_.proposals_mid; ++i) {
      if (auto b = jitter_in_band(rng, o.box, 0.45, size, [](double v) { return v >= 0.3 && v <= 0.6; })) {
        add(*b, ProposalSource::Stored);
      }
    }
    for (std::size_t i = 0; i < params_.proposals_low; ++i) {
      if (auto b = jitter_in_band(rng, o.box, 0.9, size, [](double v) { return v > 0.0 && v < 0.3; })) {
        add(*b, ProposalSource::Stored);
      }
    }
  }
  for (std::size_t i = 0; i < params_.proposals_background; ++i) {
    const double w = round_half(rng.uniform(24.0, 160.0));
    const double h = round_half(rng.uniform(24.0, 160.0));
    const double x = round_half(rng.uniform(0.0, size.width - w));
    const double y = round_half(rng.uniform(0.0, size.height - h));
    add({x, y, x + w, y + h}, ProposalSource::Stored);
  }
  rec.proposal_features.resize(static_cast<Eigen::Index>(rec.proposal_boxes.size()), static_cast<Eigen::Index>(dims_.det));
  for (std::size_t i = 0; i < rec.proposal_boxes.size(); ++i) {
    rec.proposal_features.row(static_cast<Eigen::Index>(i)) =
        detection_features(image_id, objects, rec.proposal_boxes[i]).transpose();
  }

  const std::size_t s = dims_.mask_size;
  for (const auto& o : objects) {
    GtObject g;
    g.class_id = o.class_id;
    g.box = o.box;
    g.mask = o.mask;
    g.mask_features = mask_features(image_id, objects, o.box);
    g.pixel_labels.resize(s * s);
    for (std::size_t row = 0; row < s; ++row) {
      for (std::size_t col = 0; col < s; ++col) {
        const auto [px, py] = cell_pixel(o.box, s, row, col, size);
        g.pixel_labels[row * s + col] = o.mask.covers(px, py) ? 1 : 0;
      }
    }
    rec.gt_objects.push_back(std::move(g));
  }
  return rec;
}

DatasetHeader SyntheticWorld::header(std::uint64_t num_records) const {
  DatasetHeader h;
  h.dims = dims_;
  h.grid = grid_;
  for (std::size_t c = 0; c < params_.num_classes; ++c) h.class_names.push_back("class_" + std::to_string(c));
  h.synthetic = params_;
  h.num_records = num_records;
  return h;
}

std::vector<ObjectLayout> layout_of(const FeatureRecord& record) {
  std::vector<ObjectLayout> out;
  for (const auto& g : record.gt_objects) out.push_back({g.class_id, g.box, g.mask});
  return out;
}

std::vector<FeatureRecord> generate_synthetic(const SyntheticWorld& world, std::size_t num_images,
                                              std::span<const int> classes, std::uint64_t first_image_id) {
  if (num_images < 1) throw ArgumentError("generate_synthetic: need at least one image");
  const SyntheticWorld view = classes.empty() ? world : world.with_classes({classes.begin(), classes.end()});
  std::vector<FeatureRecord> out;
  out.reserve(num_images);
  for (std::size_t i = 0; i < num_images; ++i) out.push_back(view.make_record(first_image_id + i));
  return out;
}

namespace {

OracleFeatures oracle_for(const SyntheticWorld& world, std::uint64_t image_id, std::span<const ObjectLayout> objects,
                          const Box& box) {
  require_valid(box);
  if (!inside_image(box, world.grid().image_size())) throw ArgumentError("oracle_features: box outside the image");
  return {world.detection_features(image_id, objects, box), world.mask_features(image_id, objects, box)};
}

}  // namespace

OracleFeatures oracle_features(const SyntheticWorld& world, std::uint64_t image_id, const Box& box) {
  return oracle_for(world, image_id, world.layout(image_id), box);
}

OracleFeatures oracle_features(const SyntheticWorld& world, const FeatureRecord& record, const Box& box) {
  return oracle_for(world, record.image_id, layout_of(record), box);
}

OracleFeaturizer OracleFeaturizer::from_header(const DatasetHeader& header) {
  if (!header.synthetic) {
    throw ArgumentError("dataset has no synthetic world: features for new boxes cannot be computed");
  }
  return OracleFeaturizer(SyntheticWorld(*header.synthetic, header.dims, header.grid));
}

Matrix OracleFeaturizer::detection_features(const FeatureRecord& record, std::span<const Box> boxes) const {
  const auto objects = layout_of(record);
  Matrix out(static_cast<Eigen::Index>(boxes.size()), static_cast<Eigen::Index>(world_.dims().det));
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = world_.detection_features(record.image_id, objects, boxes[i]).transpose();
  }
  return out;
}

Matrix OracleFeaturizer::mask_features(const FeatureRecord& record, const Box& box) const {
  return world_.mask_features(record.image_id, layout_of(record), box);
}

}  // namespace oseg
