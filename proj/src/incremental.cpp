#include "oseg/incremental.hpp"

#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <numeric>

#include "oseg/errors.hpp"
#include "oseg/random.hpp"
#include "oseg/serialization.hpp"

namespace oseg {

namespace {

Matrix empty_rows(std::size_t dim) { return Matrix(0, static_cast<Eigen::Index>(dim)); }

void check_sequence(RecordSource& sequence) {
  if (sequence.size() < 1) throw ArgumentError("incremental update: the new sequence has no images");
}

void put_matrices(ByteWriter& w, const std::vector<Matrix>& ms) {
  w.u64(ms.size());
  for (const auto& m : ms) w.matrix(m);
}

std::vector<Matrix> get_matrices(ByteReader& r) {
  const auto n = r.checked_count(r.u64(), 16);
  std::vector<Matrix> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(r.matrix());
  return out;
}

void put_ids(ByteWriter& w, const std::vector<std::uint64_t>& ids) {
  w.u64(ids.size());
  for (auto id : ids) w.u64(id);
}

std::vector<std::uint64_t> get_ids(ByteReader& r) {
  const auto n = r.checked_count(r.u64(), 8);
  std::vector<std::uint64_t> out(n);
  for (auto& id : out) id = r.u64();
  return out;
}

}  // namespace

RpnReservoir empty_rpn_reservoir(const AnchorGrid& grid, std::size_t feature_dim) {
  RpnReservoir r;
  r.grid = grid;
  r.feature_dim = feature_dim;
  r.positives.assign(grid.num_shapes(), empty_rows(feature_dim));
  r.negatives.assign(grid.num_shapes(), {});
  r.reg_features.assign(grid.num_shapes(), empty_rows(feature_dim));
  r.reg_targets.assign(grid.num_shapes(), Matrix(0, 4));
  return r;
}

DetectionReservoir empty_detection_reservoir(std::size_t feature_dim) {
  DetectionReservoir r;
  r.feature_dim = feature_dim;
  return r;
}

void rpn_incremental_update(RpnReservoir& res, RecordSource& sequence, const BootstrapConfig& config,
                            const RpnLabelConfig& labels) {
  config.validate();
  check_sequence(sequence);
  if (!(sequence.header().grid == res.grid)) throw ArgumentError("rpn_incremental_update: anchor grid mismatch");
  if (sequence.header().dims.rpn != res.feature_dim) throw ArgumentError("rpn_incremental_update: feature size mismatch");
  const std::size_t t = res.updates + 1;
  const std::size_t quota = per_image_quota(config.num_batches, config.batch_size, res.num_images() + sequence.size());
  const std::size_t num_shapes = res.grid.num_shapes();

  for (std::size_t a = 0; a < num_shapes; ++a) {
    for (std::size_t i = 0; i < res.num_images(); ++i) {
      Matrix& neg = res.negatives[a][i];
      neg = sample_rows(neg, quota, derive_seed(config.seed, {tag_hash("rpn-downsample"), res.image_ids[i], a, t}));
    }
  }

  sequence.rewind();
  while (const FeatureRecord* rec = sequence.next()) {
    auto cand = rpn_image_candidates(*rec, res.grid, labels);
    for (std::size_t a = 0; a < num_shapes; ++a) {
      const ClassCandidates& c = cand.per_anchor[a];
      res.positives[a] = vstack(res.positives[a], c.positives);
      res.negatives[a].push_back(c.negatives.rows() > 0 ? sample_image_negatives(c.negatives, quota, config.seed, kRpnStream,
                                                                                 rec->image_id, c.sampling_key)
                                                        : empty_rows(res.feature_dim));
      res.reg_features[a] = vstack(res.reg_features[a], cand.reg_features[a]);
      res.reg_targets[a] = vstack(res.reg_targets[a], cand.reg_targets[a]);
    }
    res.image_ids.push_back(rec->image_id);
  }
  res.updates = t;
}

void detection_incremental_update(DetectionReservoir& reservoir, RecordSource& sequence, std::size_t new_classes,
                                  const DetectionTrainConfig& config) {
  config.bootstrap.validate();
  check_sequence(sequence);
  if (sequence.header().dims.det != reservoir.feature_dim) {
    throw ArgumentError("detection_incremental_update: feature size mismatch");
  }
  DetectionReservoir res = reservoir;
  const std::size_t old_classes = res.num_classes();
  const std::size_t total = old_classes + new_classes;
  if (total < 1) throw ArgumentError("detection_incremental_update: no classes");
  if (sequence.header().num_classes() < total) {
    throw ArgumentError("detection_incremental_update: sequence header lists fewer classes than the model");
  }
  const std::size_t t = res.updates + 1;
  const std::size_t quota =
      per_image_quota(config.bootstrap.num_batches, config.bootstrap.batch_size, res.num_images() + sequence.size());
  const std::uint64_t seed = config.bootstrap.seed;
  const std::size_t dim = res.feature_dim;

  // old images: empty lists for the new classes, then the new quota
  for (std::size_t n = old_classes; n < total; ++n) {
    res.positives.push_back(empty_rows(dim));
    res.img_neg.emplace_back(res.num_images(), empty_rows(dim));
    res.has_class.emplace_back(res.num_images(), 0);
    res.reg_features.push_back(empty_rows(dim));
    res.reg_targets.push_back(Matrix(0, 4));
  }
  for (std::size_t i = 0; i < res.num_images(); ++i) {
    const std::uint64_t id = res.image_ids[i];
    for (std::size_t n = 0; n < total; ++n) {
      Matrix& neg = res.img_neg[n][i];
      neg = sample_rows(neg, quota, derive_seed(seed, {tag_hash("detection-downsample"), id, n, t}));
    }
    res.buffers[i] = sample_rows(res.buffers[i], quota, derive_seed(seed, {tag_hash("detection-downsample"), id, kBufferKey, t}));
  }

  sequence.rewind();
  while (const FeatureRecord* rec = sequence.next()) {
    for (const auto& g : rec->gt_objects) {
      if (g.class_id < 0 || static_cast<std::size_t>(g.class_id) >= total) {
        throw ArgumentError("detection_incremental_update: image " + std::to_string(rec->image_id) +
                            " has ground truth of unknown class " + std::to_string(g.class_id));
      }
    }
    const ProposalSet rois = stored_proposals(*rec, config.use_gt_proposals);
    auto cand = detection_image_candidates(*rec, rois, total, config.labels);
    for (std::size_t n = 0; n < total; ++n) {
      const ClassCandidates& c = cand.per_class[n];
      res.positives[n] = vstack(res.positives[n], c.positives);
      const bool has = rec->has_class(static_cast<int>(n));
      res.has_class[n].push_back(has ? 1 : 0);
      res.img_neg[n].push_back(has && c.negatives.rows() > 0
                                   ? sample_image_negatives(c.negatives, quota, seed, kDetectionStream, rec->image_id, n)
                                   : empty_rows(dim));
      res.reg_features[n] = vstack(res.reg_features[n], cand.reg_features[n]);
      res.reg_targets[n] = vstack(res.reg_targets[n], cand.reg_targets[n]);
    }
    res.buffers.push_back(rois.features.rows() > 0 ? sample_image_negatives(rois.features, quota, seed, kDetectionStream,
                                                                            rec->image_id, kBufferKey)
                                                   : empty_rows(dim));
    res.image_ids.push_back(rec->image_id);
  }

  std::vector<int> missing;
  for (std::size_t n = old_classes; n < total; ++n) {
    if (res.positives[n].rows() == 0) missing.push_back(static_cast<int>(n));
  }
  if (!missing.empty()) throw UntrainableError(std::move(missing));
  res.updates = t;
  reservoir = std::move(res);
}

NegativePool materialize(const RpnReservoir& res) {
  NegativePool pool;
  pool.positives = res.positives;
  pool.negatives = res.negatives;
  pool.image_ids = res.image_ids;
  return pool;
}

NegativePool materialize(const DetectionReservoir& res) {
  NegativePool pool;
  pool.positives = res.positives;
  pool.image_ids = res.image_ids;
  pool.negatives.resize(res.num_classes());
  for (std::size_t n = 0; n < res.num_classes(); ++n) {
    for (std::size_t i = 0; i < res.num_images(); ++i) {
      pool.negatives[n].push_back(res.img_neg[n][i].rows() > 0 ? res.img_neg[n][i] : res.buffers[i]);
    }
  }
  return pool;
}

SegModel retrain_incremental(const RpnReservoir& rpn, const DetectionReservoir& det, RecordSource& sequence,
                             std::span<const int> new_classes, const SegModel* previous,
                             std::vector<std::string> class_names, const IncrementalConfig& config,
                             IncrementalReport* report) {
  if (class_names.size() != det.num_classes()) {
    throw ArgumentError("retrain_incremental: class names do not match the detection reservoir");
  }
  IncrementalReport local;
  IncrementalReport& rep = report ? *report : local;

  SegModel model;
  model.class_names = std::move(class_names);
  model.dims = sequence.header().dims;

  RpnTrainingSets rpn_sets{materialize(rpn), rpn.reg_features, rpn.reg_targets};
  model.rpn = train_rpn_from_sets(rpn_sets, rpn.grid, config.rpn, &rep.rpn);

  DetectionTrainingSets det_sets;
  det_sets.pool = materialize(det);
  det_sets.reg_features = det.reg_features;
  det_sets.reg_targets = det.reg_targets;
  model.detection = train_detection_from_sets(det_sets, config.detection, &rep.detection);

  SegmentationSetBuilder seg_builder(model.num_classes(), model.dims.seg, config.segmentation);
  sequence.rewind();
  while (const FeatureRecord* rec = sequence.next()) seg_builder.add(*rec);
  const auto seg_sets = std::move(seg_builder).finish();
  if (new_classes.empty()) {
    model.segmentation = previous ? previous->segmentation : OnlineSegmentationModel{};
    model.segmentation.classifiers.resize(model.num_classes());
  } else {
    model.segmentation = train_segmentation_from_sets(seg_sets, config.segmentation, new_classes,
                                                      previous ? &previous->segmentation : nullptr, &rep.segmentation);
  }
  return model;
}

std::string encode_reservoirs(const RpnReservoir& rpn, const DetectionReservoir& det) {
  ByteWriter w;
  w.bytes("OSGR");
  w.u32(1);
  // RPN
  w.i32(rpn.grid.stride());
  w.u32(static_cast<std::uint32_t>(rpn.grid.num_shapes()));
  for (const auto& s : rpn.grid.shapes()) {
    w.f64(s.width);
    w.f64(s.height);
  }
  w.i32(rpn.grid.image_size().width);
  w.i32(rpn.grid.image_size().height);
  w.u64(rpn.feature_dim);
  w.u64(rpn.updates);
  put_ids(w, rpn.image_ids);
  put_matrices(w, rpn.positives);
  w.u64(rpn.negatives.size());
  for (const auto& per_image : rpn.negatives) put_matrices(w, per_image);
  put_matrices(w, rpn.reg_features);
  put_matrices(w, rpn.reg_targets);
  // detection
  w.u64(det.feature_dim);
  w.u64(det.updates);
  put_ids(w, det.image_ids);
  put_matrices(w, det.positives);
  w.u64(det.img_neg.size());
  for (std::size_t n = 0; n < det.img_neg.size(); ++n) {
    put_matrices(w, det.img_neg[n]);
    w.u64(det.has_class[n].size());
    for (auto b : det.has_class[n]) w.u8(b);
  }
  put_matrices(w, det.buffers);
  put_matrices(w, det.reg_features);
  put_matrices(w, det.reg_targets);
  return w.take();
}

void decode_reservoirs(std::span<const char> bytes, RpnReservoir& rpn, DetectionReservoir& det) {
  ByteReader r(bytes);
  if (r.bytes(4) != "OSGR") throw FormatError("not a reservoir file (bad magic)", 0);
  if (const auto v = r.u32(); v != 1) throw FormatError("unsupported reservoir version " + std::to_string(v), 4);
  RpnReservoir a;
  const int stride = r.i32();
  std::vector<AnchorShape> shapes(r.checked_count(r.u32(), 16));
  for (auto& s : shapes) {
    s.width = r.f64();
    s.height = r.f64();
  }
  ImageSize size;
  size.width = r.i32();
  size.height = r.i32();
  try {
    a.grid = AnchorGrid(stride, std::move(shapes), size);
  } catch (const std::exception& e) {
    r.fail(std::string("invalid anchor grid: ") + e.what());
  }
  a.feature_dim = r.u64();
  a.updates = r.u64();
  a.image_ids = get_ids(r);
  a.positives = get_matrices(r);
  const auto na = r.checked_count(r.u64(), 8);
  for (std::size_t i = 0; i < na; ++i) a.negatives.push_back(get_matrices(r));
  a.reg_features = get_matrices(r);
  a.reg_targets = get_matrices(r);
  const std::size_t shapes_n = a.grid.num_shapes();
  if (a.positives.size() != shapes_n || a.negatives.size() != shapes_n || a.reg_features.size() != shapes_n ||
      a.reg_targets.size() != shapes_n) {
    r.fail("RPN reservoir bank count disagrees with the anchor grid");
  }
  for (const auto& per_image : a.negatives) {
    if (per_image.size() != a.image_ids.size()) r.fail("RPN reservoir image count mismatch");
  }

  DetectionReservoir d;
  d.feature_dim = r.u64();
  d.updates = r.u64();
  d.image_ids = get_ids(r);
  d.positives = get_matrices(r);
  const auto nc = r.checked_count(r.u64(), 16);
  for (std::size_t n = 0; n < nc; ++n) {
    d.img_neg.push_back(get_matrices(r));
    std::vector<std::uint8_t> flags(r.checked_count(r.u64(), 1));
    for (auto& f : flags) f = r.u8();
    d.has_class.push_back(std::move(flags));
  }
  d.buffers = get_matrices(r);
  d.reg_features = get_matrices(r);
  d.reg_targets = get_matrices(r);
  if (d.img_neg.size() != d.positives.size() || d.reg_features.size() != d.positives.size() ||
      d.reg_targets.size() != d.positives.size() || d.buffers.size() != d.image_ids.size()) {
    r.fail("detection reservoir shape mismatch");
  }
  for (std::size_t n = 0; n < nc; ++n) {
    if (d.img_neg[n].size() != d.image_ids.size() || d.has_class[n].size() != d.image_ids.size()) {
      r.fail("detection reservoir image count mismatch");
    }
  }
  if (r.remaining() != 0) r.fail("trailing bytes after reservoirs");
  rpn = std::move(a);
  det = std::move(d);
}

namespace {

double binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0.0;
  k = std::min(k, n - k);
  double v = 1.0;
  for (std::size_t i = 1; i <= k; ++i) v = v * static_cast<double>(n - k + i) / static_cast<double>(i);
  return std::round(v);
}

/// Colex rank of a sorted k-subset.
std::size_t subset_rank(std::span<const std::size_t> sorted) {
  std::size_t rank = 0;
  for (std::size_t i = 0; i < sorted.size(); ++i) rank += static_cast<std::size_t>(binomial(sorted[i], i + 1));
  return rank;
}

}  // namespace

EquivalenceResult sampling_equivalence_test(std::size_t pool_size, std::size_t subset_size,
                                            std::span<const std::size_t> chain, std::size_t trials,
                                            std::uint64_t seed, ChainSampler sampler) {
  std::vector<std::size_t> sizes(chain.begin(), chain.end());
  sizes.push_back(subset_size);
  std::size_t prev = pool_size;
  for (std::size_t s : sizes) {
    if (s > prev) throw ArgumentError("sampling_equivalence_test: chain sizes must be non-increasing");
    prev = s;
  }
  const double subsets = binomial(pool_size, subset_size);
  if (subsets > 1e4) throw ArgumentError("sampling_equivalence_test: more than 10^4 subsets to test");
  const auto num_subsets = static_cast<std::size_t>(subsets);
  const double expected = static_cast<double>(trials) / subsets;
  if (expected < 50.0) {
    throw ArgumentError("sampling_equivalence_test: need at least 50 expected draws per subset (have " +
                        std::to_string(expected) + ")");
  }

  Rng rng(seed);
  std::vector<std::size_t> counts(num_subsets, 0);
  std::vector<std::size_t> current, next;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    current.resize(pool_size);
    std::iota(current.begin(), current.end(), std::size_t{0});
    for (std::size_t s : sizes) {
      next.clear();
      if (sampler == ChainSampler::KeepFirst && s > 0 && !current.empty() && current.front() == 0) {
        next.push_back(0);
        for (std::size_t k : sample_indices(current.size() - 1, s - 1, rng)) next.push_back(current[k + 1]);
      } else {
        for (std::size_t k : sample_indices(current.size(), s, rng)) next.push_back(current[k]);
      }
      current.swap(next);
    }
    ++counts[subset_rank(current)];
  }

  EquivalenceResult res;
  res.num_subsets = num_subsets;
  for (std::size_t c : counts) {
    const double d = static_cast<double>(c) - expected;
    res.statistic += d * d / expected;
  }
  res.degrees_of_freedom = num_subsets - 1;
  res.p_value = res.degrees_of_freedom == 0
                    ? 1.0
                    : boost::math::gamma_q(0.5 * static_cast<double>(res.degrees_of_freedom), 0.5 * res.statistic);
  res.pass = res.p_value > 0.01;
  return res;
}

}  // namespace oseg
