#include <doctest.h>

#include <sstream>

#include "oseg/errors.hpp"
#include "oseg/minibootstrap.hpp"
#include "oseg/random.hpp"

using namespace oseg;

namespace {

Matrix blob(std::size_t n, std::size_t f, double center, std::uint64_t seed, double spread = 1.0) {
  Rng rng(seed);
  Matrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(f));
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = center + spread * rng.normal();
  return x;
}

// Rows tagged by their first coordinate so samples can be traced back.
Matrix tagged(std::size_t n, double base) {
  Matrix x(static_cast<Eigen::Index>(n), 2);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    x(i, 0) = base + static_cast<double>(i);
    x(i, 1) = 0;
  }
  return x;
}

}  // namespace

TEST_CASE("per_image_quota examples") {
  CHECK(per_image_quota(10, 2000, 11320) == 2);
  CHECK(per_image_quota(1, 10, 10) == 1);
  CHECK(per_image_quota(12, 2000, 20156) == 2);
  CHECK(per_image_quota(10, 2000, 100) == 200);
  CHECK(per_image_quota(10, 2000, 200) == 100);
  CHECK_THROWS_AS(per_image_quota(10, 2000, 0), ArgumentError);
}

TEST_CASE("per_image_quota is the smallest quota covering the budget") {
  for (std::size_t nb : {1, 3, 10})
    for (std::size_t bs : {7, 100, 2000})
      for (std::size_t imgs : {1, 9, 250, 11320}) {
        const std::size_t q = per_image_quota(nb, bs, imgs);
        CHECK(q * imgs >= nb * bs);
        CHECK((q - 1) * imgs < nb * bs);
      }
}

TEST_CASE("collect_pool examples") {
  BootstrapConfig cfg;
  SUBCASE("one image, quota above availability keeps everything") {
    cfg.batch_size = 100;
    cfg.num_batches = 1;
    std::vector<std::vector<ClassCandidates>> per_image{{{tagged(1, 100), tagged(7, 0), 0}}};
    const std::uint64_t ids[] = {4};
    const auto pool = collect_pool(per_image, ids, 2, cfg, 1);
    CHECK(pool.negative_count(0) == 7);
    CHECK(pool.negatives[0][0] == tagged(7, 0));
    CHECK(pool.positives[0].rows() == 1);
  }
  SUBCASE("ten images at quota 2 pool exactly 20") {
    cfg.batch_size = 10;
    cfg.num_batches = 2;
    std::vector<std::vector<ClassCandidates>> per_image;
    std::vector<std::uint64_t> ids;
    for (int i = 0; i < 10; ++i) {
      per_image.push_back({{Matrix(0, 2), tagged(5 + i, 10.0 * i), 0}});
      ids.push_back(static_cast<std::uint64_t>(i));
    }
    const auto pool = collect_pool(per_image, ids, 2, cfg, 1);
    CHECK(pool.negative_count(0) == 20);
    for (const auto& m : pool.negatives[0]) CHECK(m.rows() == 2);
    // images without positives still contribute negatives; the class has none overall
    CHECK(pool.untrainable_classes() == std::vector<int>{0});
  }
}

TEST_CASE("sample_image_negatives is a seeded, order-preserving subset") {
  const Matrix all = tagged(50, 0);
  const Matrix a = sample_image_negatives(all, 10, 3, 1, 7, 2);
  const Matrix b = sample_image_negatives(all, 10, 3, 1, 7, 2);
  CHECK(a == b);
  REQUIRE(a.rows() == 10);
  for (Eigen::Index i = 1; i < a.rows(); ++i) CHECK(a(i, 0) > a(i - 1, 0));
  CHECK_FALSE(a == sample_image_negatives(all, 10, 3, 1, 8, 2));
  CHECK(sample_image_negatives(all, 80, 3, 1, 7, 2) == all);
}

TEST_CASE("make_batches examples") {
  BootstrapConfig cfg;
  cfg.batch_size = 10;
  cfg.num_batches = 2;
  NegativePool pool;
  pool.positives = {tagged(1, 100)};
  pool.image_ids = {0};

  pool.negatives = {{tagged(20, 0)}};
  auto b = make_batches(pool, cfg);
  REQUIRE(b[0].batches.size() == 2);
  CHECK(b[0].batches[0].rows() == 10);
  CHECK(b[0].batches[1].rows() == 10);
  CHECK_FALSE(b[0].short_pool);
  CHECK(b[0].batches == make_batches(pool, cfg)[0].batches);

  pool.negatives = {{tagged(15, 0)}};
  b = make_batches(pool, cfg);
  REQUIRE(b[0].batches.size() == 2);
  CHECK(b[0].batches[0].rows() == 10);
  CHECK(b[0].batches[1].rows() == 5);
  CHECK(b[0].short_pool);
  CHECK(b[0].available == 15);

  pool.negatives = {{Matrix(0, 2)}};
  CHECK_THROWS_AS(make_batches(pool, cfg), ArgumentError);
}

TEST_CASE("batches partition the shuffled pool") {
  BootstrapConfig cfg;
  cfg.batch_size = 7;
  cfg.num_batches = 3;
  NegativePool pool;
  pool.positives = {tagged(1, 1000)};
  pool.image_ids = {0, 1};
  pool.negatives = {{tagged(12, 0), tagged(30, 100)}};
  const auto b = make_batches(pool, cfg);
  std::vector<double> seen;
  for (const auto& m : b[0].batches)
    for (Eigen::Index i = 0; i < m.rows(); ++i) seen.push_back(m(i, 0));
  CHECK(seen.size() == 21);
  std::sort(seen.begin(), seen.end());
  CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());
}

TEST_CASE("n_B = 1 equals one fit on positives and the batch") {
  BootstrapConfig cfg;
  cfg.batch_size = 40;
  cfg.num_batches = 1;
  NegativePool pool;
  pool.positives = {blob(20, 3, 1.5, 1)};
  pool.negatives = {{blob(40, 3, -1.5, 2)}};
  pool.image_ids = {0};
  const auto batches = make_batches(pool, cfg);
  const KernelParams params{60, 2.0, 1e-4};
  const auto res = run_minibootstrap(pool, batches, cfg, params);
  REQUIRE(res.classifiers[0]);
  // M = n: the centers are the full set, so the fit is seed independent
  const auto direct = train_kernel_classifier(pool.positives[0], batches[0].batches[0], params, 12345);
  const Matrix q = blob(10, 3, 0, 3);
  CHECK((res.classifiers[0]->score_rows(q) - direct.score_rows(q)).norm() < 1e-9);
  CHECK(res.stats.size() == 1);
}

TEST_CASE("separable pool keeps few hard negatives") {
  BootstrapConfig cfg;
  cfg.batch_size = 500;
  cfg.num_batches = 6;
  NegativePool pool;
  pool.positives = {blob(100, 4, 3.0, 1, 0.5)};
  pool.negatives = {{blob(3000, 4, -3.0, 2, 0.5)}};
  pool.image_ids = {0};
  const auto res = run_minibootstrap(pool, make_batches(pool, cfg), cfg, {200, 3.0, 1e-5});
  REQUIRE(res.classifiers[0]);
  REQUIRE(res.stats.size() == 6);
  CHECK(res.stats.back().chosen_negatives < 300);  // < 10% of 3000
}

TEST_CASE("identical batches: iteration 2 adds exactly the margin violators") {
  // Dense-solve scores of the negatives after iteration 1:
  // 1.5 -> -0.621 (hard), 2 -> -0.947 (pruned), 4 -> -0.809, 6 -> -0.789
  Matrix pos(2, 1), neg(4, 1);
  pos << 0, 0.5;
  neg << 1.5, 2, 4, 6;
  BootstrapConfig cfg;
  cfg.batch_size = 4;
  cfg.num_batches = 2;
  cfg.hard_threshold = -0.7;
  cfg.easy_threshold = -0.9;
  NegativePool pool;
  pool.positives = {pos};
  pool.negatives = {{neg}};
  pool.image_ids = {0};
  std::vector<ClassBatches> batches(1);
  batches[0].batches = {neg, neg};
  const KernelParams params{6, 1.0, 0.05};

  const auto first = train_kernel_classifier(pos, neg, params, 0);
  const Vector s = first.score_rows(neg);
  std::size_t violators = 0, kept = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    violators += s[i] >= cfg.hard_threshold;
    kept += s[i] >= cfg.easy_threshold;
  }
  CHECK(s[0] == doctest::Approx(-0.62083621).epsilon(1e-6));
  CHECK(s[1] == doctest::Approx(-0.94683623).epsilon(1e-6));
  CHECK(violators == 1);
  CHECK(kept == 3);

  const auto res = run_minibootstrap(pool, batches, cfg, params);
  REQUIRE(res.stats.size() == 2);
  CHECK(res.stats[0].chosen_negatives == kept);
  CHECK(res.stats[1].hard_negatives == violators);
  CHECK(res.stats[1].training_size == 2 + kept + violators);
}

TEST_CASE("class without positives is reported, not fatal") {
  BootstrapConfig cfg;
  cfg.batch_size = 5;
  cfg.num_batches = 1;
  NegativePool pool;
  pool.positives = {blob(5, 2, 2, 1), Matrix(0, 2)};
  pool.negatives = {{blob(5, 2, -2, 2)}, {blob(5, 2, -2, 3)}};
  pool.image_ids = {0};
  const auto res = run_minibootstrap(pool, make_batches(pool, cfg), cfg, {10, 1, 1e-3});
  CHECK(res.classifiers[0]);
  CHECK_FALSE(res.classifiers[1]);
  REQUIRE(res.failures.size() == 1);
  CHECK(res.failures[0].cls == 1);
}

TEST_CASE("stats csv columns") {
  std::ostringstream out;
  const IterationStat s{2, 3, 100, 5, 17, 40, 0.5};
  write_stats_csv(out, std::span(&s, 1));
  CHECK(out.str() == "class,iteration,pool_size,chosen_negatives,train_seconds\n2,3,100,17,0.5\n");
}

TEST_CASE("config validation") {
  BootstrapConfig cfg;
  cfg.num_batches = 0;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg = {};
  cfg.hard_threshold = -1.5;  // below the easy threshold
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
}
