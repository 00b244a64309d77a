#include <doctest.h>

#include <numeric>

#include "fixtures.hpp"
#include "oseg/errors.hpp"

using namespace oseg;

namespace {

bool same_pool(const NegativePool& a, const NegativePool& b) {
  return a.positives == b.positives && a.negatives == b.negatives && a.image_ids == b.image_ids;
}

struct Sequences {
  fixtures::Data all;                   // 5 classes, ids 0..
  std::vector<FeatureRecord> first;     // classes 0..3
  std::vector<FeatureRecord> second;    // class 4 only
};

Sequences make_sequences() {
  auto d = fixtures::make_data(fixtures::params(0.05, 5), 24);
  std::vector<int> old_cls{0, 1, 2, 3}, new_cls{4};
  Sequences s{d, generate_synthetic(d.world, 24, old_cls, 1000), generate_synthetic(d.world, 12, new_cls, 2000)};
  return s;
}

}  // namespace

TEST_CASE("quota arithmetic") {
  CHECK(per_image_quota(10, 2000, 100) == 200);
  CHECK(per_image_quota(10, 2000, 200) == 100);
  CHECK(per_image_quota(3, 150, 20) == 23);
  // 50 stored rows under a quota of 100 are kept as they are
  Matrix rows = Matrix::Random(50, 4);
  CHECK(sample_rows(rows, 100, 5) == rows);
  CHECK(sample_rows(rows, 20, 5).rows() == 20);
}

TEST_CASE("first RPN update reproduces the batch pool") {
  auto d = fixtures::make_data(fixtures::params(0.1, 3), 12);
  auto src = d.source();
  const auto cfg = fixtures::fast_protocol().rpn_config();
  auto res = empty_rpn_reservoir(d.header.grid, d.header.dims.rpn);
  rpn_incremental_update(res, src, cfg.bootstrap);
  const auto batch = build_rpn_training_sets(src, cfg);
  CHECK(same_pool(materialize(res), batch.pool));
  CHECK(res.reg_features == batch.reg_features);
  CHECK(res.reg_targets == batch.reg_targets);
  CHECK(res.updates == 1);
}

TEST_CASE("first detection update reproduces the batch pool") {
  auto d = fixtures::make_data(fixtures::params(0.1, 3), 12);
  auto src = d.source();
  const auto cfg = fixtures::fast_protocol().detection_config();
  auto res = empty_detection_reservoir(d.header.dims.det);
  detection_incremental_update(res, src, 3, cfg);
  const auto batch = build_detection_training_sets(src, cfg);
  CHECK(same_pool(materialize(res), batch.pool));
  CHECK(res.reg_features == batch.reg_features);
}

TEST_CASE("t = 1 incremental training equals batch training byte for byte") {
  auto d = fixtures::make_data(fixtures::params(0.1, 3), 16);
  auto src = d.source();
  const auto pc = fixtures::fast_protocol(3);
  const auto ic = pc.incremental_config();
  auto rpn = empty_rpn_reservoir(d.header.grid, d.header.dims.rpn);
  auto det = empty_detection_reservoir(d.header.dims.det);
  rpn_incremental_update(rpn, src, ic.rpn.bootstrap);
  detection_incremental_update(det, src, 3, ic.detection);
  const std::vector<int> all{0, 1, 2};
  const SegModel inc = retrain_incremental(rpn, det, src, all, nullptr, d.header.class_names, ic);
  const SegModel batch = train_ours(src, pc).model;
  CHECK(encode_model(inc) == encode_model(batch));
}

TEST_CASE("reservoir bounds and buffer fallback across sequences") {
  const auto s = make_sequences();
  const auto cfg = fixtures::fast_protocol().incremental_config();
  MemorySource first(s.all.header, s.first), second(s.all.header, s.second);

  auto rpn = empty_rpn_reservoir(s.all.header.grid, s.all.header.dims.rpn);
  auto det = empty_detection_reservoir(s.all.header.dims.det);
  rpn_incremental_update(rpn, first, cfg.rpn.bootstrap);
  detection_incremental_update(det, first, 4, cfg.detection);
  const std::size_t q1 = per_image_quota(3, 150, 24);
  for (const auto& per_img : det.img_neg)
    for (const auto& m : per_img) CHECK(static_cast<std::size_t>(m.rows()) <= q1);

  rpn_incremental_update(rpn, second, cfg.rpn.bootstrap);
  detection_incremental_update(det, second, 1, cfg.detection);
  const std::size_t q2 = per_image_quota(3, 150, 36);
  REQUIRE(q2 < q1);
  CHECK(det.num_classes() == 5);
  CHECK(det.num_images() == 36);
  CHECK(rpn.num_images() == 36);
  for (std::size_t n = 0; n < 5; ++n) {
    std::size_t total = 0;
    for (std::size_t i = 0; i < 36; ++i) {
      const auto rows = static_cast<std::size_t>(det.img_neg[n][i].rows());
      CHECK(rows <= q2);
      total += rows;
      // lists only hold negatives of images that show the class
      if (!det.has_class[n][i]) CHECK(rows == 0);
    }
    CHECK(total <= 3 * 150 + 36);
  }
  for (const auto& b : det.buffers) CHECK(static_cast<std::size_t>(b.rows()) <= q2);
  for (const auto& per_img : rpn.negatives)
    for (const auto& m : per_img) CHECK(static_cast<std::size_t>(m.rows()) <= q2);

  // class 4 never appears in the first sequence: old images lend it their buffers
  for (std::size_t i = 0; i < 24; ++i) CHECK_FALSE(det.has_class[4][i]);
  const auto pool = materialize(det);
  for (std::size_t i = 0; i < 24; ++i) CHECK(pool.negatives[4][i] == det.buffers[i]);
  // and class 0 is absent from the second sequence
  for (std::size_t i = 24; i < 36; ++i) CHECK(pool.negatives[0][i] == det.buffers[i]);
  CHECK(det.positives[4].rows() > 0);
}

TEST_CASE("a new class without positives is untrainable and leaves the reservoir alone") {
  const auto s = make_sequences();
  const auto cfg = fixtures::fast_protocol().detection_config();
  MemorySource first(s.all.header, s.first);
  auto det = empty_detection_reservoir(s.all.header.dims.det);
  detection_incremental_update(det, first, 4, cfg);
  const auto before = det;
  const auto only_zero = generate_synthetic(s.all.world, 4, std::vector<int>{0}, 3000);
  MemorySource again(s.all.header, only_zero);
  try {
    detection_incremental_update(det, again, 1, cfg);
    FAIL("expected UntrainableError");
  } catch (const UntrainableError& e) {
    CHECK(e.classes() == std::vector<int>{4});
  }
  CHECK(det == before);
}

TEST_CASE("reservoir encode/decode round trip") {
  const auto s = make_sequences();
  const auto cfg = fixtures::fast_protocol().incremental_config();
  MemorySource first(s.all.header, s.first);
  auto rpn = empty_rpn_reservoir(s.all.header.grid, s.all.header.dims.rpn);
  auto det = empty_detection_reservoir(s.all.header.dims.det);
  rpn_incremental_update(rpn, first, cfg.rpn.bootstrap);
  detection_incremental_update(det, first, 4, cfg.detection);
  const std::string bytes = encode_reservoirs(rpn, det);
  RpnReservoir rpn2;
  DetectionReservoir det2;
  decode_reservoirs(bytes, rpn2, det2);
  CHECK(rpn2 == rpn);
  CHECK(det2 == det);
  CHECK(encode_reservoirs(rpn2, det2) == bytes);
  CHECK_THROWS_AS(decode_reservoirs(std::string_view(bytes).substr(0, bytes.size() / 2), rpn2, det2), FormatError);
  CHECK_THROWS_AS(decode_reservoirs(bytes + "z", rpn2, det2), FormatError);
}

TEST_CASE("adding a class keeps old segmentation classifiers bitwise") {
  const auto s = make_sequences();
  const auto cfg = fixtures::fast_protocol().incremental_config();
  MemorySource first(s.all.header, s.first), second(s.all.header, s.second);
  auto rpn = empty_rpn_reservoir(s.all.header.grid, s.all.header.dims.rpn);
  auto det = empty_detection_reservoir(s.all.header.dims.det);
  std::vector<std::string> names(s.all.header.class_names.begin(), s.all.header.class_names.begin() + 4);

  rpn_incremental_update(rpn, first, cfg.rpn.bootstrap);
  detection_incremental_update(det, first, 4, cfg.detection);
  const std::vector<int> old_cls{0, 1, 2, 3};
  const SegModel before = retrain_incremental(rpn, det, first, old_cls, nullptr, names, cfg);
  CHECK(before.num_classes() == 4);

  rpn_incremental_update(rpn, second, cfg.rpn.bootstrap);
  detection_incremental_update(det, second, 1, cfg.detection);
  names.push_back(s.all.header.class_names[4]);
  const std::vector<int> new_cls{4};
  const SegModel after = retrain_incremental(rpn, det, second, new_cls, &before, names, cfg);
  REQUIRE(after.num_classes() == 5);
  for (int c = 0; c < 4; ++c) CHECK(segmentation_classifier_bytes(after, c) == segmentation_classifier_bytes(before, c));
  CHECK(after.segmentation.classifiers[4].has_value());
  CHECK(after.detection.classifiers.size() == 5);
  CHECK_THROWS_AS(retrain_incremental(rpn, det, second, new_cls, &before, std::vector<std::string>(4, "x"), cfg), ArgumentError);
}

TEST_CASE("sampling equivalence through a subsampling chain") {
  const std::vector<std::size_t> chain{4, 3};
  const auto r = sampling_equivalence_test(6, 2, chain, 150000, 11);
  CHECK(r.num_subsets == 15);
  CHECK(r.degrees_of_freedom == 14);
  CHECK(r.pass);

  const auto biased = sampling_equivalence_test(6, 2, chain, 150000, 11, ChainSampler::KeepFirst);
  CHECK_FALSE(biased.pass);
  CHECK(biased.p_value < 1e-12);

  const auto direct = sampling_equivalence_test(6, 2, {}, 150000, 11);
  CHECK(direct.pass);

  CHECK_THROWS_AS(sampling_equivalence_test(6, 2, std::vector<std::size_t>{3, 4}, 150000, 1), ArgumentError);
  CHECK_THROWS_AS(sampling_equivalence_test(30, 5, {}, 10000000, 1), ArgumentError);  // 142506 subsets
  CHECK_THROWS_AS(sampling_equivalence_test(6, 2, chain, 700, 1), ArgumentError);     // < 50 per subset
}

TEST_CASE("chain sampling is uniform across seeds") {
  // false rejections at alpha = 0.01 should be rare
  const std::vector<std::size_t> chain{5, 4, 3};
  int passes = 0;
  for (std::uint64_t seed = 100; seed < 110; ++seed) passes += sampling_equivalence_test(6, 2, chain, 15000, seed).pass;
  CHECK(passes >= 8);
}
