// Python module oseg._core: file-level training/evaluation plus a few
// numeric building blocks on numpy arrays.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "oseg/errors.hpp"
#include "oseg/orchestrator.hpp"
#include "oseg/verify.hpp"

namespace py = pybind11;
using namespace oseg;

namespace {

py::dict report_dict(const EvalReport& rep) {
  py::dict d;
  d["mAP50_bbox"] = rep.mean_ap(MatchKind::BBox, 0.5);
  d["mAP70_bbox"] = rep.mean_ap(MatchKind::BBox, 0.7);
  d["mAP50_segm"] = rep.mean_ap(MatchKind::Segm, 0.5);
  d["mAP70_segm"] = rep.mean_ap(MatchKind::Segm, 0.7);
  return d;
}

ProtocolConfig config_from(const std::string& json_text, const std::optional<std::string>& protocol) {
  ProtocolConfig cfg = json_text.empty() ? ProtocolConfig{} : ProtocolConfig::from_json(json_text);
  if (protocol) cfg.protocol = parse_protocol(*protocol);
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "On-line instance segmentation on pre-extracted features";
  m.attr("__version__") = kToolVersion;

  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<UntrainableError>(m, "UntrainableError", PyExc_RuntimeError);

  m.def(
      "generate_synthetic",
      [](const std::filesystem::path& out, std::size_t images, std::size_t classes, double noise, std::uint64_t seed,
         std::uint64_t first_id, std::vector<int> present) {
        SyntheticParams p;
        p.seed = seed;
        p.noise = noise;
        p.num_classes = classes;
        SyntheticWorld world(p);
        if (!present.empty()) world = world.with_classes(present);
        const auto recs = generate_synthetic(world, images, {}, first_id);
        write_dataset(out, world.header(images), recs);
      },
      py::arg("out"), py::arg("images"), py::arg("classes") = 5, py::arg("noise") = 0.1, py::arg("seed") = 0,
      py::arg("first_id") = 0, py::arg("present") = std::vector<int>{},
      "Write a synthetic feature dataset.");

  m.def(
      "default_config", [] { return ProtocolConfig{}.to_json(); }, "Default protocol config as JSON text.");

  m.def(
      "train",
      [](const std::filesystem::path& dataset, const std::filesystem::path& model, const std::string& config,
         std::optional<std::string> protocol) {
        const auto cfg = config_from(config, protocol);
        TrainResult res;
        {
          py::gil_scoped_release release;
          FileSource src(dataset);
          res = train(src, cfg);
        }
        save_model(model, res.model);
        py::dict d;
        d["extraction_passes"] = res.ledger.extraction_passes();
        d["modeled_training_seconds"] = res.ledger.modeled_training();
        d["wall_seconds"] = res.ledger.wall_total();
        d["classes"] = res.model.class_names;
        return d;
      },
      py::arg("dataset"), py::arg("model"), py::arg("config") = "", py::arg("protocol") = py::none(),
      "Train with the 'ours' or 'ours-serial' protocol and save the model.");

  m.def(
      "evaluate",
      [](const std::filesystem::path& model, const std::filesystem::path& dataset) {
        const SegModel mdl = load_model(model);
        FileSource src(dataset);
        EvalReport rep;
        {
          py::gil_scoped_release release;
          rep = evaluate_model(mdl, src, OracleFeaturizer::from_header(src.header()));
        }
        return report_dict(rep);
      },
      py::arg("model"), py::arg("dataset"), "mAP at IoU 0.5/0.7 for boxes and masks, as fractions.");

  m.def(
      "stream_report",
      [](std::size_t frames, double stream_fps, double extraction_fps, double training_seconds) {
        TimingLedger ledger;
        ledger.phases.push_back({"training", training_seconds, 0.0, false, false});
        const auto r = stream_report(frames, stream_fps, extraction_fps, ledger);
        py::dict d;
        d["acquisition_seconds"] = r.acquisition_end;
        d["residual_extraction_seconds"] = r.residual_extraction;
        d["post_acquisition_seconds"] = r.post_acquisition;
        return d;
      },
      py::arg("frames"), py::arg("stream_fps"), py::arg("extraction_fps"), py::arg("training_seconds") = 0.0);

  m.def(
      "sampling_equivalence_test",
      [](std::size_t pool, std::size_t subset, std::vector<std::size_t> chain, std::size_t trials, std::uint64_t seed,
         bool keep_first) {
        const auto r = sampling_equivalence_test(pool, subset, chain, trials, seed,
                                                 keep_first ? ChainSampler::KeepFirst : ChainSampler::Uniform);
        py::dict d;
        d["statistic"] = r.statistic;
        d["dof"] = r.degrees_of_freedom;
        d["p_value"] = r.p_value;
        d["passed"] = r.pass;
        return d;
      },
      py::arg("pool_size"), py::arg("subset_size"), py::arg("chain"), py::arg("trials"), py::arg("seed") = 0,
      py::arg("keep_first") = false);

  py::class_<KernelClassifier>(m, "KernelClassifier")
      .def("score", [](const KernelClassifier& k, const Matrix& x) { return k.score_rows(x); }, py::arg("x"))
      .def_property_readonly("centers", &KernelClassifier::centers)
      .def_property_readonly("sigma", &KernelClassifier::sigma)
      .def_property_readonly("lam", &KernelClassifier::lambda);

  m.def(
      "train_kernel_classifier",
      [](const Matrix& pos, const Matrix& neg, std::size_t num_centers, double sigma, double lam, std::uint64_t seed) {
        return train_kernel_classifier(pos, neg, {num_centers, sigma, lam}, seed);
      },
      py::arg("positives"), py::arg("negatives"), py::arg("num_centers"), py::arg("sigma"), py::arg("lam"),
      py::arg("seed") = 0, "Nystrom kernel ridge classifier with +1/-1 targets.");

  m.def(
      "verify",
      [] {
        std::vector<py::dict> out;
        for (const auto& c : verify_all()) {
          py::dict d;
          d["name"] = c.name;
          d["passed"] = c.pass;
          d["detail"] = c.detail;
          out.push_back(d);
        }
        return out;
      },
      "Sampling uniformity and oracle self-checks.");
}
