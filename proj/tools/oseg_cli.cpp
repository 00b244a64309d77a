// oseg command line: dataset generation, training protocols, incremental
// updates, evaluation, stream simulation and self-checks.

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "oseg/errors.hpp"
#include "oseg/orchestrator.hpp"
#include "oseg/verify.hpp"

using namespace oseg;
namespace fs = std::filesystem;

namespace {

ProtocolConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  return ProtocolConfig::from_json(read_file(path));
}

std::string path_of(const fs::path& p, const char* suffix) {
  fs::path out = p;
  out += suffix;
  return out.string();
}

void write_text(const fs::path& path, const std::string& text) { write_file_atomic(path, text); }

void write_manifest(const fs::path& artifact, const std::string& command, const ProtocolConfig* cfg,
                    std::vector<std::pair<std::string, fs::path>> files) {
  write_text(path_of(artifact, ".manifest.json"), make_manifest(command, cfg, files));
}

std::string report_csv(const EvalReport& rep, const std::vector<std::string>& names) {
  std::ostringstream out;
  write_report_csv(out, rep, names);
  return out.str();
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int class_index(const DatasetHeader& h, const std::string& token) {
  for (std::size_t i = 0; i < h.class_names.size(); ++i)
    if (h.class_names[i] == token) return static_cast<int>(i);
  try {
    std::size_t used = 0;
    const int v = std::stoi(token, &used);
    if (used == token.size() && v >= 0 && static_cast<std::size_t>(v) < h.num_classes()) return v;
  } catch (const std::exception&) {
  }
  throw ArgumentError("unknown class '" + token + "'");
}

// ---- commands

struct GenArgs {
  std::size_t images = 100, classes = 5, min_objects = 1, max_objects = 3;
  double noise = 0.1;
  std::uint64_t seed = 0, first_id = 0;
  std::string present, out;
};

int cmd_gen(const GenArgs& a) {
  SyntheticParams p;
  p.seed = a.seed;
  p.noise = a.noise;
  p.num_classes = a.classes;
  p.min_objects = a.min_objects;
  p.max_objects = a.max_objects;
  SyntheticWorld world(p);
  if (!a.present.empty()) {
    DatasetHeader probe = world.header(0);
    std::vector<int> cls;
    for (const auto& t : split_list(a.present)) cls.push_back(class_index(probe, t));
    world = world.with_classes(cls);
  }
  if (a.images < 1) throw ArgumentError("--images must be at least 1");
  const fs::path tmp = path_of(a.out, ".tmp");
  {
    DatasetWriter writer(tmp, world.header(a.images));
    for (std::uint64_t i = 0; i < a.images; ++i) writer.write(world.make_record(a.first_id + i));
    writer.close();
  }
  fs::rename(tmp, a.out);
  write_manifest(a.out, "gen-synthetic", nullptr, {{"dataset", a.out}});
  std::printf("wrote %zu images to %s\n", a.images, a.out.c_str());
  return 0;
}

struct TrainArgs {
  std::string dataset, model, config, protocol, ledger;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> batch_size, num_batches;
};

ProtocolConfig resolve(const TrainArgs& a) {
  ProtocolConfig cfg = load_config(a.config);
  if (!a.protocol.empty()) cfg.protocol = parse_protocol(a.protocol);
  if (a.seed) cfg.seed = *a.seed;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (a.num_batches) cfg.num_batches = *a.num_batches;
  cfg.validate();
  return cfg;
}

void write_ledger_csv(std::ostream& out, const TimingLedger& ledger) {
  out << "phase,modeled_s,extraction,overlappable\n";
  for (const auto& p : ledger.phases) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", p.modeled_seconds);
    out << p.name << ',' << buf << ',' << (p.extraction ? 1 : 0) << ',' << (p.overlappable ? 1 : 0) << '\n';
  }
}

int cmd_train(const TrainArgs& a) {
  const ProtocolConfig cfg = resolve(a);
  FileSource src(a.dataset);
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = train(src, cfg);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_model(a.model, res.model);
  write_manifest(a.model, "train", &cfg, {{"dataset", a.dataset}, {"model", a.model}});
  if (!a.ledger.empty()) {
    std::ostringstream out;
    write_ledger_csv(out, res.ledger);
    write_text(a.ledger, out.str());
  }
  for (const auto* r : {&res.rpn, &res.detection, &res.segmentation})
    for (const auto& f : r->failures) std::fprintf(stderr, "warning: class %d not trained: %s\n", f.cls, f.reason.c_str());
  std::printf("%s: %zu extraction pass(es), modeled training %.2fs, wall %.2fs -> %s\n",
              protocol_name(cfg.protocol).c_str(), res.ledger.extraction_passes(), res.ledger.modeled_training(), wall,
              a.model.c_str());
  return 0;
}

struct IncArgs {
  std::string model, reservoir, sequence, new_classes, config;
};

int cmd_train_incremental(const IncArgs& a) {
  const ProtocolConfig cfg = load_config(a.config);
  const auto ic = cfg.incremental_config();
  FileSource seq(a.sequence);
  const DatasetHeader& h = seq.header();

  const bool fresh = !fs::exists(a.reservoir);
  if (fresh != !fs::exists(a.model)) throw ArgumentError("model and reservoir must either both exist or both be absent");
  RpnReservoir rpn;
  DetectionReservoir det;
  std::optional<SegModel> previous;
  if (fresh) {
    rpn = empty_rpn_reservoir(h.grid, h.dims.rpn);
    det = empty_detection_reservoir(h.dims.det);
  } else {
    decode_reservoirs(read_file(a.reservoir), rpn, det);
    previous = load_model(a.model);
    if (previous->num_classes() != det.num_classes()) throw ArgumentError("model and reservoir disagree on the class count");
  }

  std::vector<int> added;
  for (const auto& t : split_list(a.new_classes)) added.push_back(class_index(h, t));
  std::sort(added.begin(), added.end());
  for (std::size_t k = 0; k < added.size(); ++k) {
    if (static_cast<std::size_t>(added[k]) != det.num_classes() + k) {
      throw ArgumentError("--new-classes must extend the model's classes in order (next id is " +
                          std::to_string(det.num_classes()) + ")");
    }
  }
  std::vector<std::string> names = previous ? previous->class_names : std::vector<std::string>{};
  for (int c : added) names.push_back(h.class_names[static_cast<std::size_t>(c)]);
  if (names.empty()) throw ArgumentError("the first incremental update needs --new-classes");

  rpn_incremental_update(rpn, seq, ic.rpn.bootstrap);
  detection_incremental_update(det, seq, added.size(), ic.detection);
  IncrementalReport rep;
  const SegModel model = retrain_incremental(rpn, det, seq, added, previous ? &*previous : nullptr, names, ic, &rep);

  // both temp files are complete before either rename
  const std::string model_bytes = encode_model(model), res_bytes = encode_reservoirs(rpn, det);
  write_file_atomic(path_of(a.reservoir, ".next"), res_bytes);
  write_file_atomic(a.model, model_bytes);
  fs::rename(path_of(a.reservoir, ".next"), a.reservoir);
  write_manifest(a.model, "train-incremental", &cfg,
                 {{"sequence", a.sequence}, {"model", a.model}, {"reservoir", a.reservoir}});
  std::printf("update %zu: %zu classes, %zu images in reservoir -> %s, %s\n", det.updates, names.size(),
              det.num_images(), a.model.c_str(), a.reservoir.c_str());
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& dataset, const std::string& out) {
  const SegModel model = load_model(model_path);
  FileSource src(dataset);
  if (src.header().num_classes() > model.num_classes()) {
    std::fprintf(stderr, "note: the model knows %zu of the dataset's %zu classes; the rest are not scored\n",
                 model.num_classes(), src.header().num_classes());
  }
  const auto featurizer = OracleFeaturizer::from_header(src.header());
  const auto rep = evaluate_model(model, src, featurizer);
  const std::string csv = report_csv(rep, model.class_names);
  if (out.empty()) {
    std::cout << csv;
  } else {
    write_text(out, csv);
    write_manifest(out, "eval", nullptr, {{"model", model_path}, {"dataset", dataset}, {"report", out}});
  }
  return 0;
}

struct StreamArgs {
  TrainArgs train;
  double stream_fps = 3.0, extraction_fps = 14.7;
  std::string out;
};

int cmd_stream(const StreamArgs& a) {
  const ProtocolConfig cfg = resolve(a.train);
  FileSource src(a.train.dataset);
  const auto res = simulate_stream(src, a.stream_fps, a.extraction_fps, cfg);
  std::ostringstream csv;
  write_stream_csv(csv, res.report, cfg.protocol);
  if (a.out.empty()) std::cout << csv.str();
  else write_text(a.out, csv.str());
  if (!a.train.model.empty()) save_model(a.train.model, res.train.model);
  return 0;
}

struct SweepArgs {
  TrainArgs train;
  std::string test, values = "2,5,10", out;
};

int cmd_sweep(const SweepArgs& a) {
  ProtocolConfig cfg = resolve(a.train);
  FileSource src(a.train.dataset), test(a.test);
  const auto featurizer = OracleFeaturizer::from_header(test.header());
  std::ostringstream csv;
  csv << "num_batches,batch_size,modeled_training_s,wall_s,mAP50_bbox,mAP50_segm\n";
  for (const auto& v : split_list(a.values)) {
    cfg.num_batches = static_cast<std::size_t>(std::stoul(v));
    const auto res = train(src, cfg);
    const auto rep = evaluate_model(res.model, test, featurizer);
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.6f,%.6f,%.4f,%.4f\n", cfg.num_batches, cfg.batch_size,
                  res.ledger.modeled_training(), res.ledger.wall_total(), 100 * rep.mean_ap(MatchKind::BBox, 0.5),
                  100 * rep.mean_ap(MatchKind::Segm, 0.5));
    csv << buf;
  }
  if (a.out.empty()) std::cout << csv.str();
  else write_text(a.out, csv.str());
  return 0;
}

struct CvArgs {
  TrainArgs train;
  std::string validation, sigmas, lambdas, out;
};

int cmd_cv(const CvArgs& a) {
  const ProtocolConfig base = resolve(a.train);
  FileSource tr(a.train.dataset), val(a.validation);
  CvGrid grid;
  if (!a.sigmas.empty()) {
    grid.sigmas.clear();
    for (const auto& s : split_list(a.sigmas)) grid.sigmas.push_back(std::stod(s));
  }
  if (!a.lambdas.empty()) {
    grid.lambdas.clear();
    for (const auto& s : split_list(a.lambdas)) grid.lambdas.push_back(std::stod(s));
  }
  const auto cv = cross_validate(tr, val, grid, base, OracleFeaturizer::from_header(tr.header()));
  std::printf("rpn sigma=%g lambda=%g recall70=%.4f\n", cv.rpn.sigma, cv.rpn.lambda, cv.rpn.score);
  std::printf("detection sigma=%g lambda=%g segm50=%.4f\n", cv.detection.sigma, cv.detection.lambda, cv.detection.score);
  std::printf("segmentation sigma=%g lambda=%g segm50=%.4f\n", cv.segmentation.sigma, cv.segmentation.lambda,
              cv.segmentation.score);
  if (!a.out.empty()) write_text(a.out, cv.tuned.to_json());
  return 0;
}

int cmd_verify(const VerifyOptions& opt) {
  bool ok = true;
  for (const auto& c : verify_all(opt)) {
    std::printf("%-22s %s  %s\n", c.name.c_str(), c.pass ? "PASS" : "FAIL", c.detail.c_str());
    ok = ok && c.pass;
  }
  return ok ? 0 : 1;
}

void add_train_options(CLI::App* cmd, TrainArgs& a, bool need_model) {
  cmd->add_option("--dataset", a.dataset, "Feature dataset")->required()->check(CLI::ExistingFile);
  auto* m = cmd->add_option("--model", a.model, "Output model file");
  if (need_model) m->required();
  cmd->add_option("--config", a.config, "Protocol config JSON")->check(CLI::ExistingFile);
  cmd->add_option("--protocol", a.protocol, "ours | ours-serial");
  cmd->add_option("--seed", a.seed, "Override config seed");
  cmd->add_option("--batch-size", a.batch_size, "Override BS");
  cmd->add_option("--num-batches", a.num_batches, "Override n_B");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"On-line instance segmentation on pre-extracted features"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);
  std::function<int()> run;

  GenArgs gen;
  auto* g = app.add_subcommand("gen-synthetic", "Write a synthetic feature dataset");
  g->add_option("--images", gen.images)->required();
  g->add_option("--classes", gen.classes, "Number of classes in the world");
  g->add_option("--noise", gen.noise, "Feature noise eta");
  g->add_option("--seed", gen.seed, "World seed");
  g->add_option("--first-id", gen.first_id, "First image id (use disjoint ranges for splits)");
  g->add_option("--present", gen.present, "Comma list of classes that may appear (default all)");
  g->add_option("--min-objects", gen.min_objects);
  g->add_option("--max-objects", gen.max_objects);
  g->add_option("--out", gen.out)->required();
  g->callback([&] { run = [&] { return cmd_gen(gen); }; });

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model with a batch protocol");
  add_train_options(t, tr, true);
  t->add_option("--ledger", tr.ledger, "Write the timing ledger CSV here");
  t->callback([&] { run = [&] { return cmd_train(tr); }; });

  IncArgs inc;
  auto* ti = app.add_subcommand("train-incremental", "Add a sequence (and new classes) to a model in place");
  ti->add_option("--model", inc.model)->required();
  ti->add_option("--reservoir", inc.reservoir)->required();
  ti->add_option("--sequence", inc.sequence)->required()->check(CLI::ExistingFile);
  ti->add_option("--new-classes", inc.new_classes, "Comma list of class names or ids");
  ti->add_option("--config", inc.config)->check(CLI::ExistingFile);
  ti->callback([&] { run = [&] { return cmd_train_incremental(inc); }; });

  std::string ev_model, ev_data, ev_out;
  auto* e = app.add_subcommand("eval", "Evaluate a model (mAP50/70, bbox and segm)");
  e->add_option("--model", ev_model)->required()->check(CLI::ExistingFile);
  e->add_option("--dataset", ev_data)->required()->check(CLI::ExistingFile);
  e->add_option("--out", ev_out, "Report CSV (stdout when omitted)");
  e->callback([&] { run = [&] { return cmd_eval(ev_model, ev_data, ev_out); }; });

  StreamArgs st;
  auto* s = app.add_subcommand("simulate-stream", "Train while frames arrive and report post-acquisition time");
  add_train_options(s, st.train, false);
  s->add_option("--stream-fps", st.stream_fps);
  s->add_option("--extraction-fps", st.extraction_fps);
  s->add_option("--out", st.out, "Stream CSV (stdout when omitted)");
  s->callback([&] { run = [&] { return cmd_stream(st); }; });

  SweepArgs sw;
  auto* w = app.add_subcommand("sweep", "n_B sweep: training time and mAP per number of batches");
  add_train_options(w, sw.train, false);
  w->add_option("--test", sw.test)->required()->check(CLI::ExistingFile);
  w->add_option("--values", sw.values, "Comma list of n_B");
  w->add_option("--out", sw.out);
  w->callback([&] { run = [&] { return cmd_sweep(sw); }; });

  CvArgs cv;
  auto* c = app.add_subcommand("cross-validate", "Grid search of sigma and lambda per module");
  add_train_options(c, cv.train, false);
  c->add_option("--validation", cv.validation)->required()->check(CLI::ExistingFile);
  c->add_option("--sigmas", cv.sigmas);
  c->add_option("--lambdas", cv.lambdas);
  c->add_option("--out", cv.out, "Tuned config JSON");
  c->callback([&] { run = [&] { return cmd_cv(cv); }; });

  VerifyOptions vo;
  auto* v = app.add_subcommand("verify", "Sampling-uniformity and oracle checks");
  v->add_option("--seed", vo.seed);
  v->add_option("--trials", vo.trials);
  v->callback([&] { run = [&] { return cmd_verify(vo); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err);
  }
  try {
    return run();
  } catch (const UntrainableError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 4;
  } catch (const FormatError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 3;
  } catch (const ArgumentError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 1;
  }
}
