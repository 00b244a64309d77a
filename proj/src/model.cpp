#include "oseg/model.hpp"

#include <fstream>
#include <iterator>

#include "oseg/errors.hpp"
#include "oseg/serialization.hpp"

namespace oseg {

namespace {

void put_classifier(ByteWriter& w, const KernelClassifier& c) {
  w.matrix(c.centers());
  w.vector(c.weights());
  w.f64(c.sigma());
  w.f64(c.lambda());
}

KernelClassifier get_classifier(ByteReader& r) {
  Matrix centers = r.matrix();
  Vector weights = r.vector();
  const double sigma = r.f64();
  const double lambda = r.f64();
  try {
    return KernelClassifier(std::move(centers), std::move(weights), sigma, lambda);
  } catch (const std::exception& e) {
    r.fail(std::string("invalid classifier: ") + e.what());
  }
}

void put_optional(ByteWriter& w, const std::optional<KernelClassifier>& c) {
  w.u8(c ? 1 : 0);
  if (c) put_classifier(w, *c);
}

std::optional<KernelClassifier> get_optional(ByteReader& r) {
  const auto flag = r.u8();
  if (flag > 1) r.fail("bad presence flag");
  if (flag == 0) return std::nullopt;
  return get_classifier(r);
}

void put_regressor(ByteWriter& w, const RlsRegressor& g) {
  w.matrix(g.weights());
  w.vector(g.bias());
  w.f64(g.lambda());
}

RlsRegressor get_regressor(ByteReader& r) {
  Matrix weights = r.matrix();
  Vector bias = r.vector();
  const double lambda = r.f64();
  try {
    return RlsRegressor(std::move(weights), std::move(bias), lambda);
  } catch (const std::exception& e) {
    r.fail(std::string("invalid regressor: ") + e.what());
  }
}

void put_grid(ByteWriter& w, const AnchorGrid& g) {
  w.i32(g.stride());
  w.u32(static_cast<std::uint32_t>(g.num_shapes()));
  for (const auto& s : g.shapes()) {
    w.f64(s.width);
    w.f64(s.height);
  }
  w.i32(g.image_size().width);
  w.i32(g.image_size().height);
}

AnchorGrid get_grid(ByteReader& r) {
  const int stride = r.i32();
  const auto count = r.checked_count(r.u32(), 16);
  std::vector<AnchorShape> shapes(count);
  for (auto& s : shapes) {
    s.width = r.f64();
    s.height = r.f64();
  }
  ImageSize size;
  size.width = r.i32();
  size.height = r.i32();
  try {
    return AnchorGrid(stride, std::move(shapes), size);
  } catch (const std::exception& e) {
    r.fail(std::string("invalid anchor grid: ") + e.what());
  }
}

}  // namespace

std::string encode_model(const SegModel& m) {
  const std::size_t n = m.num_classes();
  if (m.detection.classifiers.size() != n || m.detection.regressors.size() != n || m.segmentation.classifiers.size() != n) {
    throw ArgumentError("encode_model: module class counts disagree with the class list");
  }
  if (m.rpn.classifiers.size() != m.rpn.grid.num_shapes() || m.rpn.regressors.size() != m.rpn.grid.num_shapes()) {
    throw ArgumentError("encode_model: RPN bank size disagrees with the anchor grid");
  }
  ByteWriter w;
  w.bytes("OSGM");
  w.u32(kModelVersion);
  w.u32(static_cast<std::uint32_t>(n));
  for (const auto& name : m.class_names) w.str(name);
  w.u64(m.dims.rpn);
  w.u64(m.dims.det);
  w.u64(m.dims.seg);
  w.u64(m.dims.mask_size);
  put_grid(w, m.rpn.grid);

  w.u64(m.rpn.proposals.pre_nms_top_k);
  w.f64(m.rpn.proposals.nms_iou);
  w.u64(m.rpn.proposals.post_nms_top_k);
  for (std::size_t a = 0; a < m.rpn.classifiers.size(); ++a) {
    put_optional(w, m.rpn.classifiers[a]);
    put_regressor(w, m.rpn.regressors[a]);
  }

  w.f64(m.detection.config.score_threshold);
  w.f64(m.detection.config.nms_iou);
  w.u64(m.detection.config.max_detections);
  for (std::size_t c = 0; c < n; ++c) {
    put_classifier(w, m.detection.classifiers[c]);
    put_regressor(w, m.detection.regressors[c]);
  }

  w.f64(m.segmentation.threshold);
  w.f64(m.segmentation.subsample);
  for (const auto& c : m.segmentation.classifiers) put_optional(w, c);
  return w.take();
}

SegModel decode_model(std::span<const char> bytes) {
  ByteReader r(bytes);
  if (r.bytes(4) != "OSGM") throw FormatError("not a model file (bad magic)", 0);
  if (const auto v = r.u32(); v != kModelVersion) throw FormatError("unsupported model version " + std::to_string(v), 4);
  SegModel m;
  const auto n = r.checked_count(r.u32(), 8);
  for (std::size_t c = 0; c < n; ++c) m.class_names.push_back(r.str());
  m.dims.rpn = r.u64();
  m.dims.det = r.u64();
  m.dims.seg = r.u64();
  m.dims.mask_size = r.u64();
  m.rpn.grid = get_grid(r);

  m.rpn.proposals.pre_nms_top_k = r.u64();
  m.rpn.proposals.nms_iou = r.f64();
  m.rpn.proposals.post_nms_top_k = r.u64();
  for (std::size_t a = 0; a < m.rpn.grid.num_shapes(); ++a) {
    m.rpn.classifiers.push_back(get_optional(r));
    m.rpn.regressors.push_back(get_regressor(r));
  }

  m.detection.config.score_threshold = r.f64();
  m.detection.config.nms_iou = r.f64();
  m.detection.config.max_detections = r.u64();
  for (std::size_t c = 0; c < n; ++c) {
    m.detection.classifiers.push_back(get_classifier(r));
    m.detection.regressors.push_back(get_regressor(r));
  }

  m.segmentation.threshold = r.f64();
  m.segmentation.subsample = r.f64();
  for (std::size_t c = 0; c < n; ++c) m.segmentation.classifiers.push_back(get_optional(r));
  if (r.remaining() != 0) r.fail("trailing bytes after model");
  return m;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArgumentError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw ArgumentError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_model(const std::filesystem::path& path, const SegModel& model) { write_file_atomic(path, encode_model(model)); }

SegModel load_model(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  return decode_model(bytes);
}

std::string segmentation_classifier_bytes(const SegModel& model, int cls) {
  if (cls < 0 || static_cast<std::size_t>(cls) >= model.segmentation.classifiers.size()) {
    throw ArgumentError("segmentation_classifier_bytes: class out of range");
  }
  ByteWriter w;
  put_optional(w, model.segmentation.classifiers[static_cast<std::size_t>(cls)]);
  return w.take();
}

}  // namespace oseg
