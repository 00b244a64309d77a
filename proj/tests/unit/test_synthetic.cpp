#include <doctest.h>

#include "oseg/errors.hpp"
#include "oseg/synthetic.hpp"

using namespace oseg;

namespace {

SyntheticParams params(double noise, std::size_t classes, std::size_t objects) {
  SyntheticParams p;
  p.seed = 5;
  p.noise = noise;
  p.num_classes = classes;
  p.min_objects = p.max_objects = objects;
  return p;
}

Eigen::Index nearest_row(const Matrix& protos, const Eigen::RowVectorXd& v) {
  Eigen::Index best = 0;
  (protos.rowwise() - v).rowwise().squaredNorm().minCoeff(&best);
  return best;
}

}  // namespace

TEST_CASE("noise-free single object: ground-truth RoI equals the class prototype") {
  const SyntheticWorld world(params(0.0, 1, 1));
  const auto rec = world.make_record(0);
  REQUIRE(rec.gt_objects.size() == 1);
  const auto& gt = rec.gt_objects[0];
  bool found = false;
  for (std::size_t i = 0; i < rec.proposal_boxes.size(); ++i) {
    if (rec.proposal_sources[i] != ProposalSource::GroundTruth) continue;
    found = true;
    CHECK(rec.proposal_boxes[i] == gt.box);
    CHECK(rec.proposal_features.row(static_cast<Eigen::Index>(i)) == world.det_prototypes().row(gt.class_id));
  }
  CHECK(found);
}

TEST_CASE("noise-free pixel features are separable by nearest prototype") {
  const SyntheticWorld world(params(0.0, 4, 3));
  const auto bg = static_cast<Eigen::Index>(world.params().num_classes);
  for (const auto& rec : generate_synthetic(world, 6)) {
    for (const auto& g : rec.gt_objects) {
      for (Eigen::Index c = 0; c < g.mask_features.rows(); ++c) {
        const auto nearest = nearest_row(world.seg_prototypes(), g.mask_features.row(c));
        CHECK(nearest == (g.pixel_labels[static_cast<std::size_t>(c)] ? g.class_id : bg));
      }
    }
  }
}

TEST_CASE("oracle features") {
  const SyntheticWorld world(params(0.0, 3, 1));
  const auto rec = world.make_record(2);
  const auto& g = rec.gt_objects.at(0);
  const auto bg = static_cast<Eigen::Index>(world.params().num_classes);

  SUBCASE("gt box reproduces the stored features") {
    const auto f = oracle_features(world, rec, g.box);
    CHECK(f.mask == g.mask_features);
    CHECK(f.detection.transpose() == world.det_prototypes().row(g.class_id));
  }
  SUBCASE("disjoint box is background") {
    Box far = g.box.x1 > 160 ? Box{0, 0, 20, 20} : Box{299, 299, 319, 319};
    if (iou(far, g.box) > 0) far = {0, 299, 20, 319};
    REQUIRE(iou(far, g.box) == 0.0);
    CHECK(oracle_features(world, rec, far).detection.transpose() == world.det_prototypes().row(bg));
  }
  SUBCASE("IoU 0.5 blends prototype and background evenly") {
    // half-width box sharing the left edge: IoU exactly 0.5
    const Box half{g.box.x1, g.box.y1, g.box.x1 + 0.5 * g.box.width(), g.box.y2};
    REQUIRE(iou(half, g.box) == doctest::Approx(0.5));
    const Eigen::RowVectorXd want =
        0.5 * world.det_prototypes().row(g.class_id) + 0.5 * world.det_prototypes().row(bg);
    CHECK((oracle_features(world, rec, half).detection.transpose() - want).norm() < 1e-12);
  }
  SUBCASE("outside the image throws") {
    CHECK_THROWS_AS(oracle_features(world, rec, Box{400, 400, 420, 420}), ArgumentError);
  }
}

TEST_CASE("noisy oracle still reproduces stored proposals") {
  const SyntheticWorld world(params(0.2, 3, 2));
  const auto rec = world.make_record(9);
  OracleFeaturizer fz(world);
  const Matrix again = fz.detection_features(rec, rec.proposal_boxes);
  CHECK((again - rec.proposal_features).norm() < 1e-12);
  for (const auto& g : rec.gt_objects) CHECK(fz.mask_features(rec, g.box) == g.mask_features);
}

TEST_CASE("layout invariants") {
  SyntheticParams p = params(0.1, 5, 1);
  p.max_objects = 3;
  const SyntheticWorld world(p);
  for (const auto& rec : generate_synthetic(world, 30)) {
    CHECK(rec.gt_objects.size() >= 1);
    CHECK(rec.gt_objects.size() <= 3);
    for (std::size_t i = 0; i < rec.gt_objects.size(); ++i) {
      const auto& a = rec.gt_objects[i];
      CHECK(a.box.x1 >= 0);
      CHECK(a.box.x2 <= rec.image_size.width);
      CHECK(a.class_id >= 0);
      CHECK(a.class_id < 5);
      CHECK(a.mask.count() > 0);
      for (std::size_t j = i + 1; j < rec.gt_objects.size(); ++j) CHECK(iou(a.box, rec.gt_objects[j].box) == 0.0);
    }
    CHECK(rec.proposal_boxes.size() == rec.proposal_sources.size());
    CHECK(static_cast<std::size_t>(rec.proposal_features.rows()) == rec.proposal_boxes.size());
    CHECK(static_cast<std::size_t>(rec.rpn_map.rows()) == world.grid().num_locations());
  }
}

TEST_CASE("class restriction and header round trip of the world") {
  const SyntheticWorld world(params(0.1, 6, 2));
  const int only[] = {5};
  for (const auto& rec : generate_synthetic(world, 10, only, 1000)) {
    CHECK(rec.image_id >= 1000);
    for (const auto& g : rec.gt_objects) CHECK(g.class_id == 5);
  }
  const auto fz = OracleFeaturizer::from_header(world.header(1));
  CHECK(fz.world().params() == world.params());
  CHECK(fz.world().det_prototypes() == world.det_prototypes());
  DatasetHeader plain = world.header(1);
  plain.synthetic.reset();
  CHECK_THROWS(OracleFeaturizer::from_header(plain));
}
