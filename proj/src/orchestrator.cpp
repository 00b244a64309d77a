#include "oseg/orchestrator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <ostream>
#include <set>

#include "oseg/errors.hpp"

namespace oseg {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

TimingPhase training_phase(const std::string& name, const ModuleTrainReport& rep, const ProtocolConfig& cfg) {
  return {name, rep.cost.flops / cfg.flops_per_second, rep.wall_seconds, false, false};
}

TimingPhase extraction_phase(const std::string& name, std::size_t images, double wall, bool overlappable,
                             const ProtocolConfig& cfg) {
  return {name, static_cast<double>(images) / cfg.extraction_fps, wall, true, overlappable};
}

SegModel assemble(const DatasetHeader& h, OnlineRpnModel rpn, OnlineDetectionModel det, OnlineSegmentationModel seg) {
  SegModel m;
  m.class_names = h.class_names;
  m.dims = h.dims;
  m.rpn = std::move(rpn);
  m.detection = std::move(det);
  m.segmentation = std::move(seg);
  return m;
}

json hyper_json(const ModuleHyper& h) {
  return {{"num_centers", h.num_centers}, {"sigma", h.sigma}, {"lambda", h.lambda}};
}

ModuleHyper hyper_from(const json& j, const ModuleHyper& d) {
  ModuleHyper h = d;
  for (const auto& [k, v] : j.items()) {
    if (k == "num_centers") h.num_centers = v.get<std::size_t>();
    else if (k == "sigma") h.sigma = v.get<double>();
    else if (k == "lambda") h.lambda = v.get<double>();
    else throw ArgumentError("config: unknown key '" + k + "' in module hyper-parameters");
  }
  return h;
}

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string protocol_name(Protocol p) { return p == Protocol::Ours ? "ours" : "ours-serial"; }

Protocol parse_protocol(const std::string& name) {
  if (name == "ours") return Protocol::Ours;
  if (name == "ours-serial" || name == "ours_serial") return Protocol::OursSerial;
  throw ArgumentError("unknown protocol '" + name + "' (expected ours or ours-serial)");
}

void ProtocolConfig::validate() const {
  if (batch_size < 1 || num_batches < 1) throw ArgumentError("config: BS and n_B must be positive");
  if (rpn.num_centers < 1 || detection.num_centers < 1 || segmentation.num_centers < 1) {
    throw ArgumentError("config: Nystrom center counts must be positive");
  }
  for (const auto* h : {&rpn, &detection, &segmentation}) {
    if (!(h->sigma > 0) || !(h->lambda >= 0)) throw ArgumentError("config: sigma must be > 0 and lambda >= 0");
  }
  if (!(subsample > 0 && subsample <= 1)) throw ArgumentError("config: r must lie in (0, 1]");
  if (!(hard_threshold >= easy_threshold)) throw ArgumentError("config: hard_threshold must be >= easy_threshold");
  if (!(extraction_fps > 0) || !(flops_per_second > 0)) throw ArgumentError("config: rates must be positive");
  if (!(rls_lambda >= 0)) throw ArgumentError("config: rls_lambda must be non-negative");
}

BootstrapConfig ProtocolConfig::bootstrap() const {
  return {batch_size, num_batches, hard_threshold, easy_threshold, seed};
}

RpnConfig ProtocolConfig::rpn_config() const {
  RpnConfig c;
  c.bootstrap = bootstrap();
  c.bootstrap.seed = derive_seed(seed, {tag_hash("rpn")});
  c.kernel = {rpn.num_centers, rpn.sigma, rpn.lambda};
  c.rls_lambda = rls_lambda;
  c.proposals = proposals;
  return c;
}

DetectionTrainConfig ProtocolConfig::detection_config() const {
  DetectionTrainConfig c;
  c.bootstrap = bootstrap();
  c.bootstrap.seed = derive_seed(seed, {tag_hash("detection")});
  c.kernel = {detection.num_centers, detection.sigma, detection.lambda};
  c.rls_lambda = rls_lambda;
  c.inference = detection_output;
  c.use_gt_proposals = use_gt_proposals;
  return c;
}

SegmentationConfig ProtocolConfig::segmentation_config() const {
  SegmentationConfig c;
  c.subsample = subsample;
  c.kernel = {segmentation.num_centers, segmentation.sigma, segmentation.lambda};
  c.threshold = mask_threshold;
  c.seed = derive_seed(seed, {tag_hash("segmentation")});
  return c;
}

IncrementalConfig ProtocolConfig::incremental_config() const {
  return {rpn_config(), detection_config(), segmentation_config()};
}

std::string ProtocolConfig::to_json() const {
  json j = {
      {"protocol", protocol_name(protocol)},
      {"batch_size", batch_size},
      {"num_batches", num_batches},
      {"hard_threshold", hard_threshold},
      {"easy_threshold", easy_threshold},
      {"rpn", hyper_json(rpn)},
      {"detection", hyper_json(detection)},
      {"segmentation", hyper_json(segmentation)},
      {"subsample", subsample},
      {"rls_lambda", rls_lambda},
      {"use_gt_proposals", use_gt_proposals},
      {"proposals",
       {{"pre_nms_top_k", proposals.pre_nms_top_k}, {"nms_iou", proposals.nms_iou}, {"post_nms_top_k", proposals.post_nms_top_k}}},
      {"detection_output",
       {{"score_threshold", detection_output.score_threshold},
        {"nms_iou", detection_output.nms_iou},
        {"max_detections", detection_output.max_detections}}},
      {"mask_threshold", mask_threshold},
      {"seed", seed},
      {"extraction_fps", extraction_fps},
      {"flops_per_second", flops_per_second},
  };
  return j.dump(2) + "\n";
}

ProtocolConfig ProtocolConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ArgumentError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ArgumentError("config: expected a JSON object");
  ProtocolConfig c;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "protocol") c.protocol = parse_protocol(v.get<std::string>());
      else if (k == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (k == "num_batches") c.num_batches = v.get<std::size_t>();
      else if (k == "hard_threshold") c.hard_threshold = v.get<double>();
      else if (k == "easy_threshold") c.easy_threshold = v.get<double>();
      else if (k == "rpn") c.rpn = hyper_from(v, c.rpn);
      else if (k == "detection") c.detection = hyper_from(v, c.detection);
      else if (k == "segmentation") c.segmentation = hyper_from(v, c.segmentation);
      else if (k == "subsample") c.subsample = v.get<double>();
      else if (k == "rls_lambda") c.rls_lambda = v.get<double>();
      else if (k == "use_gt_proposals") c.use_gt_proposals = v.get<bool>();
      else if (k == "proposals") {
        c.proposals.pre_nms_top_k = v.value("pre_nms_top_k", c.proposals.pre_nms_top_k);
        c.proposals.nms_iou = v.value("nms_iou", c.proposals.nms_iou);
        c.proposals.post_nms_top_k = v.value("post_nms_top_k", c.proposals.post_nms_top_k);
      } else if (k == "detection_output") {
        c.detection_output.score_threshold = v.value("score_threshold", c.detection_output.score_threshold);
        c.detection_output.nms_iou = v.value("nms_iou", c.detection_output.nms_iou);
        c.detection_output.max_detections = v.value("max_detections", c.detection_output.max_detections);
      } else if (k == "mask_threshold") c.mask_threshold = v.get<double>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "extraction_fps") c.extraction_fps = v.get<double>();
      else if (k == "flops_per_second") c.flops_per_second = v.get<double>();
      else throw ArgumentError("config: unknown key '" + k + "'");
    }
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

std::size_t TimingLedger::extraction_passes() const {
  return static_cast<std::size_t>(std::count_if(phases.begin(), phases.end(), [](const auto& p) { return p.extraction; }));
}

double TimingLedger::modeled_total(bool exclude_overlappable) const {
  double t = 0.0;
  for (const auto& p : phases) {
    if (exclude_overlappable && p.overlappable) continue;
    t += p.modeled_seconds;
  }
  return t;
}

double TimingLedger::wall_total() const {
  double t = 0.0;
  for (const auto& p : phases) t += p.wall_seconds;
  return t;
}

double TimingLedger::modeled_training() const {
  double t = 0.0;
  for (const auto& p : phases) {
    if (!p.extraction) t += p.modeled_seconds;
  }
  return t;
}

TrainResult train_ours(RecordSource& source, const ProtocolConfig& config) {
  config.validate();
  const DatasetHeader& h = source.header();
  const auto rpn_cfg = config.rpn_config();
  const auto det_cfg = config.detection_config();
  const auto seg_cfg = config.segmentation_config();

  auto t0 = Clock::now();
  RpnSetBuilder rpn_b(h.grid, h.dims.rpn, source.size(), rpn_cfg);
  DetectionSetBuilder det_b(h.num_classes(), h.dims.det, source.size(), det_cfg);
  SegmentationSetBuilder seg_b(h.num_classes(), h.dims.seg, seg_cfg);
  source.rewind();
  std::size_t images = 0;
  while (const FeatureRecord* r = source.next()) {
    rpn_b.add(*r);
    det_b.add(*r, stored_proposals(*r, det_cfg.use_gt_proposals));
    seg_b.add(*r);
    ++images;
  }
  auto rpn_sets = std::move(rpn_b).finish();
  auto det_sets = std::move(det_b).finish();
  auto seg_sets = std::move(seg_b).finish();

  TrainResult out;
  out.ledger.phases.push_back(extraction_phase("extraction", images, seconds_since(t0), true, config));
  out.detection_positive_sources = det_sets.positive_sources;

  auto rpn = train_rpn_from_sets(rpn_sets, h.grid, rpn_cfg, &out.rpn);
  out.ledger.phases.push_back(training_phase("train rpn", out.rpn, config));
  auto det = train_detection_from_sets(det_sets, det_cfg, &out.detection);
  out.ledger.phases.push_back(training_phase("train detection", out.detection, config));
  auto seg = train_segmentation_from_sets(seg_sets, seg_cfg, {}, nullptr, &out.segmentation);
  out.ledger.phases.push_back(training_phase("train segmentation", out.segmentation, config));

  out.model = assemble(h, std::move(rpn), std::move(det), std::move(seg));
  return out;
}

TrainResult train_ours_serial(RecordSource& source, const ProtocolConfig& config, const Featurizer& featurizer) {
  config.validate();
  const DatasetHeader& h = source.header();
  const auto rpn_cfg = config.rpn_config();
  const auto det_cfg = config.detection_config();
  const auto seg_cfg = config.segmentation_config();
  TrainResult out;

  auto t0 = Clock::now();
  RpnSetBuilder rpn_b(h.grid, h.dims.rpn, source.size(), rpn_cfg);
  source.rewind();
  std::size_t images = 0;
  while (const FeatureRecord* r = source.next()) {
    rpn_b.add(*r);
    ++images;
  }
  auto rpn_sets = std::move(rpn_b).finish();
  out.ledger.phases.push_back(extraction_phase("extraction pass 1", images, seconds_since(t0), true, config));
  auto rpn = train_rpn_from_sets(rpn_sets, h.grid, rpn_cfg, &out.rpn);
  out.ledger.phases.push_back(training_phase("train rpn", out.rpn, config));

  // pass 2 depends on the adapted RPN, so it cannot overlap acquisition
  t0 = Clock::now();
  DetectionSetBuilder det_b(h.num_classes(), h.dims.det, source.size(), det_cfg);
  SegmentationSetBuilder seg_b(h.num_classes(), h.dims.seg, seg_cfg);
  source.rewind();
  while (const FeatureRecord* r = source.next()) {
    ProposalSet rois;
    for (const auto& p : propose(rpn, *r)) rois.boxes.push_back(p.box);
    rois.sources.assign(rois.boxes.size(), ProposalSource::Adapted);
    rois.features = rois.boxes.empty() ? Matrix(0, static_cast<Eigen::Index>(h.dims.det))
                                       : featurizer.detection_features(*r, rois.boxes);
    det_b.add(*r, rois);
    seg_b.add(*r);
  }
  auto det_sets = std::move(det_b).finish();
  auto seg_sets = std::move(seg_b).finish();
  out.ledger.phases.push_back(extraction_phase("extraction pass 2", images, seconds_since(t0), false, config));
  out.detection_positive_sources = det_sets.positive_sources;

  auto det = train_detection_from_sets(det_sets, det_cfg, &out.detection);
  out.ledger.phases.push_back(training_phase("train detection", out.detection, config));
  auto seg = train_segmentation_from_sets(seg_sets, seg_cfg, {}, nullptr, &out.segmentation);
  out.ledger.phases.push_back(training_phase("train segmentation", out.segmentation, config));

  out.model = assemble(h, std::move(rpn), std::move(det), std::move(seg));
  return out;
}

TrainResult train(RecordSource& source, const ProtocolConfig& config) {
  if (config.protocol == Protocol::Ours) return train_ours(source, config);
  const auto featurizer = OracleFeaturizer::from_header(source.header());
  return train_ours_serial(source, config, featurizer);
}

StreamReport stream_report(std::size_t frames, double stream_fps, double extraction_fps, const TimingLedger& ledger) {
  if (!(stream_fps > 0) || !(extraction_fps > 0)) throw ArgumentError("simulate_stream: rates must be positive");
  StreamReport r;
  r.frames = frames;
  r.stream_fps = stream_fps;
  r.extraction_fps = extraction_fps;
  r.acquisition_end = static_cast<double>(frames) / stream_fps;
  const double per_frame = 1.0 / extraction_fps;
  double free_at = 0.0;
  for (std::size_t k = 0; k < frames; ++k) {
    const double arrival = static_cast<double>(k) / stream_fps;
    free_at = std::max(arrival, free_at) + per_frame;
  }
  r.extraction_finish = free_at;
  r.residual_extraction = std::max(0.0, free_at - r.acquisition_end);
  // rounding of k / fps must not show up as a spurious backlog
  if (r.residual_extraction <= 1e-9 * std::max(1.0, r.acquisition_end)) r.residual_extraction = 0.0;
  for (const auto& p : ledger.phases) {
    if (p.extraction && !p.overlappable) r.second_pass += p.modeled_seconds;
  }
  r.online_training = ledger.modeled_training();
  r.post_acquisition = r.residual_extraction + r.second_pass + r.online_training;
  return r;
}

StreamResult simulate_stream(RecordSource& source, double stream_fps, double extraction_fps, ProtocolConfig config) {
  if (!(stream_fps > 0) || !(extraction_fps > 0)) throw ArgumentError("simulate_stream: rates must be positive");
  config.extraction_fps = extraction_fps;
  StreamResult out;
  out.train = train(source, config);
  out.report = stream_report(source.size(), stream_fps, extraction_fps, out.train.ledger);
  return out;
}

void write_stream_csv(std::ostream& out, const StreamReport& r, Protocol protocol) {
  out << "protocol,frames,stream_fps,extraction_fps,acquisition_s,residual_extraction_s,second_pass_s,"
         "online_training_s,post_acquisition_s\n";
  out << protocol_name(protocol) << ',' << r.frames << ',' << fmt(r.stream_fps) << ',' << fmt(r.extraction_fps) << ','
      << fmt(r.acquisition_end) << ',' << fmt(r.residual_extraction) << ',' << fmt(r.second_pass) << ','
      << fmt(r.online_training) << ',' << fmt(r.post_acquisition) << '\n';
}

std::vector<InstancePrediction> infer(const SegModel& model, const FeatureRecord& record, const Featurizer& featurizer) {
  std::vector<Box> boxes;
  for (const auto& p : propose(model.rpn, record)) boxes.push_back(p.box);
  std::vector<InstancePrediction> out;
  if (boxes.empty()) return out;
  const Matrix features = featurizer.detection_features(record, boxes);
  for (const auto& d : detect(model.detection, record.image_size, boxes, features)) {
    const Matrix mf = featurizer.mask_features(record, d.box);
    out.push_back({record.image_id, d.class_id, d.score, d.box,
                   predict_mask(model.segmentation, d.class_id, d.box, mf, record.image_size)});
  }
  return out;
}

std::vector<InstancePrediction> infer_all(const SegModel& model, RecordSource& source, const Featurizer& featurizer) {
  std::vector<InstancePrediction> out;
  source.rewind();
  while (const FeatureRecord* r = source.next()) {
    auto p = infer(model, *r, featurizer);
    out.insert(out.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
  }
  return out;
}

EvalReport evaluate_model(const SegModel& model, RecordSource& source, const Featurizer& featurizer) {
  std::vector<InstancePrediction> preds;
  std::vector<GroundTruthInstance> gts;
  source.rewind();
  while (const FeatureRecord* r = source.next()) {
    auto p = infer(model, *r, featurizer);
    preds.insert(preds.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
    auto g = ground_truth_of(*r);
    gts.insert(gts.end(), g.begin(), g.end());
  }
  return evaluate(preds, gts, model.num_classes());
}

double proposal_recall(const OnlineRpnModel& rpn, RecordSource& source, double threshold) {
  std::size_t total = 0, hit = 0;
  source.rewind();
  while (const FeatureRecord* r = source.next()) {
    const auto props = propose(rpn, *r);
    for (const auto& g : r->gt_objects) {
      ++total;
      hit += std::any_of(props.begin(), props.end(), [&](const Proposal& p) { return iou(p.box, g.box) >= threshold; }) ? 1 : 0;
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

CvChoice select_grid_point(const CvGrid& grid, const std::function<double(double, double)>& score) {
  if (grid.sigmas.empty() || grid.lambdas.empty()) throw ArgumentError("cross_validate: empty grid");
  CvChoice best;
  bool first = true;
  for (double s : grid.sigmas) {
    for (double l : grid.lambdas) {
      const double v = score(s, l);
      if (first || v > best.score || (v == best.score && l > best.lambda)) {
        best = {s, l, v};
        first = false;
      }
    }
  }
  return best;
}

CvResult cross_validate(RecordSource& train_src, RecordSource& validation, const CvGrid& grid,
                        const ProtocolConfig& base, const Featurizer& featurizer) {
  base.validate();
  if (grid.sigmas.empty() || grid.lambdas.empty()) throw ArgumentError("cross_validate: empty grid");
  std::set<std::uint64_t> train_ids;
  train_src.rewind();
  while (const FeatureRecord* r = train_src.next()) train_ids.insert(r->image_id);
  validation.rewind();
  while (const FeatureRecord* r = validation.next()) {
    if (train_ids.count(r->image_id)) throw ArgumentError("cross_validate: validation split overlaps training");
  }

  const DatasetHeader& h = train_src.header();
  ProtocolConfig cfg = base;
  const auto rpn_sets = build_rpn_training_sets(train_src, cfg.rpn_config());
  const auto det_sets = build_detection_training_sets(train_src, cfg.detection_config());
  const auto seg_sets = build_segmentation_training_sets(train_src, cfg.segmentation_config());

  CvResult out;
  out.rpn = select_grid_point(grid, [&](double s, double l) {
    ProtocolConfig c = cfg;
    c.rpn.sigma = s, c.rpn.lambda = l;
    return proposal_recall(train_rpn_from_sets(rpn_sets, h.grid, c.rpn_config()), validation, 0.7);
  });
  cfg.rpn.sigma = out.rpn.sigma, cfg.rpn.lambda = out.rpn.lambda;
  const auto rpn = train_rpn_from_sets(rpn_sets, h.grid, cfg.rpn_config());

  auto seg = train_segmentation_from_sets(seg_sets, cfg.segmentation_config());
  auto score_model = [&](const OnlineDetectionModel& det, const OnlineSegmentationModel& sg) {
    const SegModel m = assemble(h, rpn, det, sg);
    return evaluate_model(m, validation, featurizer).mean_ap(MatchKind::Segm, 0.5);
  };
  out.detection = select_grid_point(grid, [&](double s, double l) {
    ProtocolConfig c = cfg;
    c.detection.sigma = s, c.detection.lambda = l;
    return score_model(train_detection_from_sets(det_sets, c.detection_config()), seg);
  });
  cfg.detection.sigma = out.detection.sigma, cfg.detection.lambda = out.detection.lambda;
  const auto det = train_detection_from_sets(det_sets, cfg.detection_config());

  out.segmentation = select_grid_point(grid, [&](double s, double l) {
    ProtocolConfig c = cfg;
    c.segmentation.sigma = s, c.segmentation.lambda = l;
    return score_model(det, train_segmentation_from_sets(seg_sets, c.segmentation_config()));
  });
  cfg.segmentation.sigma = out.segmentation.sigma, cfg.segmentation.lambda = out.segmentation.lambda;
  out.tuned = cfg;
  return out;
}

std::string make_manifest(const std::string& command, const ProtocolConfig* config,
                          const std::vector<std::pair<std::string, std::filesystem::path>>& files) {
  json j;
  j["tool"] = "oseg";
  j["version"] = kToolVersion;
  j["command"] = command;
  if (config) {
    j["config"] = json::parse(config->to_json());
    j["seed"] = config->seed;
  }
  json f = json::object();
  for (const auto& [role, path] : files) {
    f[role] = {{"file", path.filename().string()}, {"fnv1a64", file_digest(path)}};
  }
  j["files"] = f;
  return j.dump(2) + "\n";
}

}  // namespace oseg
