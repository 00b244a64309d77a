#include <doctest.h>

#include "fixtures.hpp"
#include "oseg/errors.hpp"

using namespace oseg;

namespace {

// Record on `grid` whose RPN map row l is (l, 0, ...), so pooled rows can be
// traced back to their location.
FeatureRecord tagged_record(const AnchorGrid& grid, std::vector<Box> gts) {
  FeatureRecord r;
  r.image_size = grid.image_size();
  r.rpn_map = Matrix::Zero(static_cast<Eigen::Index>(grid.num_locations()), 4);
  for (Eigen::Index l = 0; l < r.rpn_map.rows(); ++l) r.rpn_map(l, 0) = static_cast<double>(l);
  r.proposal_features = Matrix(0, 4);
  for (const auto& b : gts) {
    GtObject g;
    g.box = b;
    r.gt_objects.push_back(g);
  }
  return r;
}

std::vector<int> tags(const Matrix& m) {
  std::vector<int> out;
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.push_back(static_cast<int>(m(i, 0)));
  return out;
}

RpnConfig fast_rpn() {
  RpnConfig c;
  c.bootstrap = fixtures::fast_bootstrap();
  c.kernel = {200, 10.0, 1e-3};
  return c;
}

}  // namespace

TEST_CASE("gt equal to a shape-0 anchor makes that location positive for shape 0") {
  const auto grid = AnchorGrid::default_grid();
  const std::size_t loc = 7 * grid.grid_width() + 9;
  const auto c = rpn_image_candidates(tagged_record(grid, {grid.anchor(loc, 0)}), grid);
  const auto pos = tags(c.per_anchor[0].positives);
  CHECK(std::find(pos.begin(), pos.end(), static_cast<int>(loc)) != pos.end());
  // exact match also feeds the regressor with a zero target
  const auto reg = tags(c.reg_features[0]);
  const auto it = std::find(reg.begin(), reg.end(), static_cast<int>(loc));
  REQUIRE(it != reg.end());
  CHECK(c.reg_targets[0].row(it - reg.begin()).norm() < 1e-12);
}

TEST_CASE("gt below 0.7 everywhere: exactly the argmax anchors are positive") {
  const auto grid = AnchorGrid::default_grid();
  const std::size_t loc = 5 * grid.grid_width() + 5;
  const Box a = grid.anchor(loc, 0);
  const Box g{a.x1, a.y1, a.x1 + 0.65 * a.width(), a.y2};
  double best = 0;
  for (std::size_t i = 0; i < grid.num_anchors(); ++i) best = std::max(best, iou(grid.anchor(i), g));
  REQUIRE(best < 0.7);
  std::size_t argmax = 0;
  for (std::size_t i = 0; i < grid.num_anchors(); ++i) argmax += iou(grid.anchor(i), g) == best;

  const auto c = rpn_image_candidates(tagged_record(grid, {g}), grid);
  std::size_t positives = 0;
  for (std::size_t s = 0; s < grid.num_shapes(); ++s) {
    for (int l : tags(c.per_anchor[s].positives))
      CHECK(iou(grid.anchor(static_cast<std::size_t>(l), s), g) == best);
    positives += static_cast<std::size_t>(c.per_anchor[s].positives.rows());
  }
  CHECK(positives == argmax);
  // forced positives below 0.6 stay out of the regressor
  for (std::size_t s = 0; s < grid.num_shapes(); ++s)
    if (best < 0.6) CHECK(c.reg_features[s].rows() == 0);
}

TEST_CASE("location at IoU 0.5 is neither positive nor negative") {
  const AnchorGrid grid(32, {{32, 32}, {32, 16}}, {64, 64});
  const Box g = grid.anchor(0, 0);
  REQUIRE(iou(g, grid.anchor(0, 1)) == doctest::Approx(0.5));
  const auto c = rpn_image_candidates(tagged_record(grid, {g}), grid);
  const auto pos = tags(c.per_anchor[1].positives), neg = tags(c.per_anchor[1].negatives);
  CHECK(std::find(pos.begin(), pos.end(), 0) == pos.end());
  CHECK(std::find(neg.begin(), neg.end(), 0) == neg.end());
}

TEST_CASE("noise-free training separates every anchor's positives") {
  const auto data = fixtures::make_data(fixtures::params(0.0, 3), 40);
  auto src = data.source();
  const auto cfg = fast_rpn();
  const auto sets = build_rpn_training_sets(src, cfg);
  ModuleTrainReport report;
  const auto model = train_rpn_from_sets(sets, data.header.grid, cfg, &report);
  CHECK(report.failures.empty());
  const auto batches = make_batches(sets.pool, cfg.bootstrap);
  for (std::size_t a = 0; a < model.classifiers.size(); ++a) {
    REQUIRE(model.classifiers[a]);
    CAPTURE(a);
    CHECK(model.classifiers[a]->score_rows(sets.pool.positives[a]).minCoeff() > 0);
    for (const auto& b : batches[a].batches) CHECK(model.classifiers[a]->score_rows(b).maxCoeff() < 0);
  }
  CHECK(report.cost.flops > 0);
}

TEST_CASE("single-shape grid is one binary problem") {
  const AnchorGrid grid(16, {{96, 96}}, {320, 320});
  const auto data = fixtures::make_data(fixtures::params(0.0, 2), 20, 0, grid);
  auto src = data.source();
  const auto model = train_online_rpn(src, fast_rpn());
  REQUIRE(model.classifiers.size() == 1);
  CHECK(model.classifiers[0]);
  CHECK(model.regressors.size() == 1);
}

TEST_CASE("rpn training is deterministic") {
  const auto data = fixtures::make_data(fixtures::params(0.1, 3), 20);
  auto s1 = data.source(), s2 = data.source();
  CHECK(train_online_rpn(s1, fast_rpn()) == train_online_rpn(s2, fast_rpn()));
}

TEST_CASE("propose examples") {
  SUBCASE("noise-free single object: top proposal fits the gt") {
    const auto data = fixtures::make_data(fixtures::params(0.0, 3, 1, 1), 40);
    auto src = data.source();
    const auto model = train_online_rpn(src, fast_rpn());
    const SyntheticWorld& world = data.world;
    for (std::uint64_t id = 500; id < 510; ++id) {
      const auto rec = world.make_record(id);
      const auto props = propose(model, rec);
      REQUIRE_FALSE(props.empty());
      CAPTURE(id);
      CHECK(iou(props[0].box, rec.gt_objects.at(0).box) > 0.9);
      for (std::size_t i = 1; i < props.size(); ++i) CHECK(props[i - 1].score >= props[i].score);
    }
  }
  SUBCASE("zero weights give zero scores, deterministically") {
    const auto grid = AnchorGrid::default_grid();
    OnlineRpnModel model;
    model.grid = grid;
    for (std::size_t a = 0; a < grid.num_shapes(); ++a) {
      model.classifiers.emplace_back(KernelClassifier(Matrix::Zero(1, 4), Vector::Zero(1), 1.0, 0.0));
      model.regressors.push_back(RlsRegressor::zeros(4));
    }
    const auto rec = tagged_record(grid, {});
    FeatureRecord zero = rec;
    zero.rpn_map.setZero();
    const auto a = propose(model, zero), b = propose(model, zero);
    REQUIRE(a.size() == b.size());
    CHECK_FALSE(a.empty());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].score == 0.0);
      CHECK(a[i].box == b[i].box);
    }
    model.proposals.post_nms_top_k = 1;
    CHECK(propose(model, zero).size() == 1);
  }
}

TEST_CASE("mismatched rpn map is rejected") {
  const auto grid = AnchorGrid::default_grid();
  auto rec = tagged_record(grid, {});
  rec.rpn_map.conservativeResize(10, Eigen::NoChange);
  CHECK_THROWS_AS(rpn_image_candidates(rec, grid), ArgumentError);
}
