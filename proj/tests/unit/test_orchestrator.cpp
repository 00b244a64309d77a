#include <doctest.h>

#include <filesystem>
#include <json.hpp>
#include <sstream>

#include "fixtures.hpp"
#include "oseg/errors.hpp"

using namespace oseg;

namespace {

struct Trained {
  fixtures::Data data;
  TrainResult ours, serial;
};

const Trained& trained() {
  static const Trained t = [] {
    auto d = fixtures::make_data(fixtures::params(0.0, 3), 40);
    auto src = d.source();
    auto cfg = fixtures::fast_protocol(5);
    auto ours = train_ours(src, cfg);
    cfg.protocol = Protocol::OursSerial;
    auto serial = train(src, cfg);
    return Trained{std::move(d), std::move(ours), std::move(serial)};
  }();
  return t;
}

}  // namespace

TEST_CASE("stream absorption arithmetic") {
  TimingLedger ledger;
  ledger.phases.push_back({"extraction", 90 / 14.7, 0, true, true});
  ledger.phases.push_back({"train", 4.0, 0, false, false});
  const auto fast = stream_report(90, 3, 14.7, ledger);
  CHECK(fast.residual_extraction == 0.0);
  CHECK(fast.acquisition_end == 30.0);
  CHECK(fast.post_acquisition == 4.0);

  const auto slow = stream_report(90, 3, 1, ledger);
  CHECK(slow.residual_extraction == 60.0);
  CHECK(slow.extraction_finish == 90.0);
  CHECK(slow.post_acquisition == 64.0);

  // equal rates: each frame is done exactly when the next arrives
  CHECK(stream_report(90, 3, 3, ledger).residual_extraction == 0.0);
  CHECK_THROWS_AS(stream_report(10, 0, 1, ledger), ArgumentError);
  CHECK_THROWS_AS(stream_report(10, 1, -1, ledger), ArgumentError);
}

TEST_CASE("serial protocol always pays for its second pass") {
  const auto& t = trained();
  const auto ours = stream_report(40, 3, 14.7, t.ours.ledger);
  const auto serial = stream_report(40, 3, 14.7, t.serial.ledger);
  CHECK(ours.second_pass == 0.0);
  CHECK(serial.second_pass == doctest::Approx(40 / 14.7));
  CHECK(serial.residual_extraction == 0.0);
  CHECK(serial.post_acquisition >= serial.second_pass);

  std::ostringstream csv;
  write_stream_csv(csv, ours, Protocol::Ours);
  CHECK(csv.str().rfind("protocol,frames,stream_fps,extraction_fps,acquisition_s,", 0) == 0);
  CHECK(csv.str().find("\nours,40,3.000000,14.700000,13.333333,0.000000,0.000000,") != std::string::npos);
}

TEST_CASE("protocol ledgers and proposal provenance") {
  const auto& t = trained();
  CHECK(t.ours.ledger.extraction_passes() == 1);
  CHECK(t.serial.ledger.extraction_passes() == 2);
  std::size_t non_overlappable = 0;
  for (const auto& p : t.serial.ledger.phases) non_overlappable += p.extraction && !p.overlappable;
  CHECK(non_overlappable == 1);
  for (const auto& p : t.ours.ledger.phases) CHECK((!p.extraction || p.overlappable));

  const auto adapted = static_cast<std::size_t>(ProposalSource::Adapted);
  CHECK(t.ours.detection_positive_sources[adapted] == 0);
  std::size_t serial_total = 0;
  for (auto n : t.serial.detection_positive_sources) serial_total += n;
  CHECK(serial_total > 0);
  CHECK(t.serial.detection_positive_sources[adapted] == serial_total);

  // both protocols sample segmentation from ground-truth boxes
  CHECK(t.ours.model.segmentation == t.serial.model.segmentation);
  CHECK(t.ours.ledger.modeled_total(true) < t.ours.ledger.modeled_total(false));
  CHECK(t.ours.ledger.modeled_training() > 0);
}

TEST_CASE("noise-free end to end on a small set") {
  const auto& t = trained();
  auto src = t.data.source();
  const auto featurizer = OracleFeaturizer::from_header(t.data.header);
  const auto rep = evaluate_model(t.ours.model, src, featurizer);
  CHECK(rep.mean_ap(MatchKind::BBox, 0.5) >= 0.95);
  CHECK(rep.mean_ap(MatchKind::Segm, 0.5) >= 0.9);
  CHECK(proposal_recall(t.ours.model.rpn, src, 0.7) >= 0.95);
}

TEST_CASE("infer on single-object and empty images") {
  const auto& t = trained();
  const auto featurizer = OracleFeaturizer::from_header(t.data.header);

  const SyntheticWorld single(fixtures::params(0.0, 3, 1, 1));
  for (std::uint64_t id = 900; id < 905; ++id) {
    const auto rec = single.make_record(id);
    const auto preds = infer(t.ours.model, rec, featurizer);
    REQUIRE(preds.size() == 1);
    CHECK(preds[0].class_id == rec.gt_objects[0].class_id);
    CHECK(mask_iou(*preds[0].mask, rec.gt_objects[0].mask) >= 0.95);
    CHECK(preds == infer(t.ours.model, rec, featurizer));
  }

  const SyntheticWorld blank(fixtures::params(0.0, 3, 0, 0));
  for (std::uint64_t id = 950; id < 955; ++id) {
    const auto rec = blank.make_record(id);
    REQUIRE(rec.gt_objects.empty());
    CHECK(infer(t.ours.model, rec, featurizer).empty());
  }
}

TEST_CASE("training and evaluation are deterministic") {
  const auto& t = trained();
  auto src = t.data.source();
  const auto again = train_ours(src, fixtures::fast_protocol(5));
  CHECK(encode_model(again.model) == encode_model(t.ours.model));
  auto cfg = fixtures::fast_protocol(5);
  cfg.protocol = Protocol::OursSerial;
  CHECK(encode_model(train(src, cfg).model) == encode_model(t.serial.model));

  const auto featurizer = OracleFeaturizer::from_header(t.data.header);
  std::ostringstream a, b;
  write_report_csv(a, evaluate_model(t.ours.model, src, featurizer), t.data.header.class_names);
  write_report_csv(b, evaluate_model(again.model, src, featurizer), t.data.header.class_names);
  CHECK(a.str() == b.str());

  CHECK(encode_model(train_ours(src, fixtures::fast_protocol(6)).model) != encode_model(t.ours.model));
}

TEST_CASE("config JSON") {
  ProtocolConfig c = fixtures::fast_protocol(42);
  c.protocol = Protocol::OursSerial;
  c.detection.sigma = 3.5;
  c.proposals.post_nms_top_k = 77;
  const std::string text = c.to_json();
  const ProtocolConfig back = ProtocolConfig::from_json(text);
  CHECK(back == c);
  CHECK(back.to_json() == text);
  CHECK(ProtocolConfig::from_json("{}") == ProtocolConfig{});

  const auto partial = ProtocolConfig::from_json(R"({"num_batches": 4, "segmentation": {"lambda": 1e-5}})");
  CHECK(partial.num_batches == 4);
  CHECK(partial.segmentation.lambda == 1e-5);
  CHECK(partial.segmentation.num_centers == 500);

  CHECK_THROWS_AS(ProtocolConfig::from_json(R"({"batchsize": 4})"), ArgumentError);
  CHECK_THROWS_AS(ProtocolConfig::from_json(R"({"rpn": {"gamma": 1}})"), ArgumentError);
  CHECK_THROWS_AS(ProtocolConfig::from_json(R"({"protocol": "mask-rcnn"})"), ArgumentError);
  CHECK_THROWS_AS(ProtocolConfig::from_json(R"({"num_batches": 0})"), ArgumentError);
  CHECK_THROWS_AS(ProtocolConfig::from_json(R"({"subsample": 1.5})"), ArgumentError);
  CHECK_THROWS_AS(ProtocolConfig::from_json(R"({"hard_threshold": -2, "easy_threshold": -1})"), ArgumentError);
  CHECK_THROWS_AS(ProtocolConfig::from_json(R"({"seed": "one"})"), ArgumentError);
  CHECK_THROWS_AS(ProtocolConfig::from_json("[1, 2]"), ArgumentError);
  CHECK_THROWS_AS(ProtocolConfig::from_json("{nope"), ArgumentError);

  CHECK(parse_protocol("ours") == Protocol::Ours);
  CHECK(parse_protocol("ours-serial") == Protocol::OursSerial);
  CHECK(protocol_name(Protocol::OursSerial) == "ours-serial");
}

TEST_CASE("grid point selection") {
  CvGrid single{{7}, {1e-4}};
  const auto one = select_grid_point(single, [](double, double) { return 0.3; });
  CHECK(one.sigma == 7);
  CHECK(one.lambda == 1e-4);
  CHECK(one.score == 0.3);

  CvGrid grid{{1, 5}, {1e-6, 1e-3, 1e-5}};
  const auto tie = select_grid_point(grid, [](double s, double) { return s == 5 ? 0.8 : 0.5; });
  CHECK(tie.sigma == 5);
  CHECK(tie.lambda == 1e-3);
  // equal score and lambda: the first sigma stays
  const auto flat = select_grid_point(grid, [](double, double) { return 1.0; });
  CHECK(flat.sigma == 1);
  CHECK(flat.lambda == 1e-3);

  CHECK_THROWS_AS(select_grid_point(CvGrid{{}, {1e-3}}, [](double, double) { return 0.0; }), ArgumentError);
  CHECK_THROWS_AS(select_grid_point(CvGrid{{1}, {}}, [](double, double) { return 0.0; }), ArgumentError);
}

TEST_CASE("cross-validation on a noise-free split") {
  const auto p = fixtures::params(0.0, 3);
  auto train_d = fixtures::make_data(p, 24);
  auto val_d = fixtures::make_data(p, 8, 500);
  auto train_src = train_d.source();
  auto val_src = val_d.source();
  const auto featurizer = OracleFeaturizer::from_header(train_d.header);
  CvGrid grid{{2, 10}, {1e-4}};
  const auto cv = cross_validate(train_src, val_src, grid, fixtures::fast_protocol(), featurizer);
  CHECK(cv.rpn.score >= 0.95);
  CHECK(cv.segmentation.score >= 0.9);
  CHECK(cv.tuned.detection.sigma == cv.detection.sigma);
  CHECK(cv.tuned.segmentation.sigma == cv.segmentation.sigma);

  CHECK_THROWS_AS(cross_validate(train_src, val_src, CvGrid{{}, {}}, fixtures::fast_protocol(), featurizer),
                  ArgumentError);
  auto overlap = train_d.source();
  CHECK_THROWS_AS(cross_validate(train_src, overlap, grid, fixtures::fast_protocol(), featurizer), ArgumentError);
}

TEST_CASE("manifest") {
  const auto path = std::filesystem::temp_directory_path() / "oseg_unit_manifest.bin";
  write_file_atomic(path, "abc");
  const auto cfg = fixtures::fast_protocol(9);
  const auto j = nlohmann::json::parse(make_manifest("train", &cfg, {{"dataset", path}}));
  CHECK(j["command"] == "train");
  CHECK(j["seed"] == 9);
  CHECK(j["version"] == kToolVersion);
  CHECK(j["files"]["dataset"]["file"] == "oseg_unit_manifest.bin");
  CHECK(j["files"]["dataset"]["fnv1a64"] == file_digest(path));
  CHECK(ProtocolConfig::from_json(j["config"].dump()) == cfg);
  std::filesystem::remove(path);
}
