#include "oseg/feature_store.hpp"

#include <cstdio>
#include <json.hpp>

#include "oseg/errors.hpp"
#include "oseg/serialization.hpp"

namespace oseg {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'O', 'S', 'E', 'G'};

json grid_to_json(const AnchorGrid& g) {
  json shapes = json::array();
  for (const auto& s : g.shapes()) shapes.push_back({s.width, s.height});
  return {{"stride", g.stride()},
          {"image_width", g.image_size().width},
          {"image_height", g.image_size().height},
          {"anchor_shapes", shapes}};
}

AnchorGrid grid_from_json(const json& j) {
  std::vector<AnchorShape> shapes;
  for (const auto& s : j.at("anchor_shapes")) shapes.push_back({s.at(0).get<double>(), s.at(1).get<double>()});
  return AnchorGrid(j.at("stride").get<int>(), std::move(shapes),
                    {j.at("image_width").get<int>(), j.at("image_height").get<int>()});
}

json synthetic_to_json(const SyntheticParams& p) {
  return {{"seed", p.seed},
          {"noise", p.noise},
          {"num_classes", p.num_classes},
          {"classes", p.classes},
          {"min_objects", p.min_objects},
          {"max_objects", p.max_objects},
          {"box_jitter", p.box_jitter},
          {"proposals_high", p.proposals_high},
          {"proposals_mid", p.proposals_mid},
          {"proposals_low", p.proposals_low},
          {"proposals_background", p.proposals_background},
          {"inject_gt_proposals", p.inject_gt_proposals}};
}

SyntheticParams synthetic_from_json(const json& j) {
  SyntheticParams p;
  p.seed = j.at("seed").get<std::uint64_t>();
  p.noise = j.at("noise").get<double>();
  p.num_classes = j.at("num_classes").get<std::size_t>();
  p.classes = j.at("classes").get<std::vector<int>>();
  p.min_objects = j.at("min_objects").get<std::size_t>();
  p.max_objects = j.at("max_objects").get<std::size_t>();
  p.box_jitter = j.at("box_jitter").get<double>();
  p.proposals_high = j.at("proposals_high").get<std::size_t>();
  p.proposals_mid = j.at("proposals_mid").get<std::size_t>();
  p.proposals_low = j.at("proposals_low").get<std::size_t>();
  p.proposals_background = j.at("proposals_background").get<std::size_t>();
  p.inject_gt_proposals = j.at("inject_gt_proposals").get<bool>();
  return p;
}

void put_box(ByteWriter& w, const Box& b) {
  w.f64(b.x1);
  w.f64(b.y1);
  w.f64(b.x2);
  w.f64(b.y2);
}

Box get_box(ByteReader& r) {
  Box b;
  b.x1 = r.f64();
  b.y1 = r.f64();
  b.x2 = r.f64();
  b.y2 = r.f64();
  return b;
}

}  // namespace

std::vector<Box> FeatureRecord::gt_boxes() const {
  std::vector<Box> out;
  out.reserve(gt_objects.size());
  for (const auto& g : gt_objects) out.push_back(g.box);
  return out;
}

bool FeatureRecord::has_class(int cls) const {
  for (const auto& g : gt_objects) {
    if (g.class_id == cls) return true;
  }
  return false;
}

bool FeatureRecord::operator==(const FeatureRecord& o) const {
  auto same = [](const Matrix& a, const Matrix& b) { return a.rows() == b.rows() && a.cols() == b.cols() && a == b; };
  return image_id == o.image_id && image_size == o.image_size && same(rpn_map, o.rpn_map) &&
         proposal_boxes == o.proposal_boxes && proposal_sources == o.proposal_sources &&
         same(proposal_features, o.proposal_features) && gt_objects == o.gt_objects;
}

std::string DatasetHeader::to_json() const {
  json j = {{"format", "oseg-dataset"},
            {"version", version},
            {"dims", {{"rpn", dims.rpn}, {"det", dims.det}, {"seg", dims.seg}, {"mask_size", dims.mask_size}}},
            {"grid", grid_to_json(grid)},
            {"class_names", class_names},
            {"num_records", num_records},
            {"synthetic", synthetic ? synthetic_to_json(*synthetic) : json(nullptr)}};
  return j.dump();
}

DatasetHeader DatasetHeader::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("dataset header is not valid JSON: ") + e.what(), 0);
  }
  DatasetHeader h;
  try {
  h.version = j.at("version").get<std::uint32_t>();
  const json& d = j.at("dims");
  h.dims = {d.at("rpn").get<std::size_t>(), d.at("det").get<std::size_t>(), d.at("seg").get<std::size_t>(),
            d.at("mask_size").get<std::size_t>()};
  h.grid = grid_from_json(j.at("grid"));
  h.class_names = j.at("class_names").get<std::vector<std::string>>();
  h.num_records = j.at("num_records").get<std::uint64_t>();
  if (!j.at("synthetic").is_null()) h.synthetic = synthetic_from_json(j.at("synthetic"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed dataset header: ") + e.what(), 0);
  }
  if (h.class_names.empty()) throw ArgumentError("dataset header declares no classes");
  return h;
}

void validate_record(const FeatureRecord& r, const DatasetHeader& h) {
  const auto locs = static_cast<Eigen::Index>(h.grid.num_locations());
  if (r.image_size != h.grid.image_size()) throw ArgumentError("record image size differs from the anchor grid");
  if (r.rpn_map.rows() != locs || r.rpn_map.cols() != static_cast<Eigen::Index>(h.dims.rpn)) {
    throw ArgumentError("record rpn_map shape does not match the header");
  }
  if (!r.rpn_map.allFinite()) throw ArgumentError("record rpn_map is not finite");
  const auto p = static_cast<Eigen::Index>(r.proposal_boxes.size());
  if (r.proposal_sources.size() != r.proposal_boxes.size() || r.proposal_features.rows() != p ||
      (p > 0 && r.proposal_features.cols() != static_cast<Eigen::Index>(h.dims.det))) {
    throw ArgumentError("record proposal arrays are inconsistent");
  }
  if (!r.proposal_features.allFinite()) throw ArgumentError("record proposal features are not finite");
  for (const auto& b : r.proposal_boxes) require_valid(b);
  const std::size_t cells = h.dims.mask_size * h.dims.mask_size;
  for (const auto& g : r.gt_objects) {
    require_valid(g.box);
    if (g.class_id < 0 || static_cast<std::size_t>(g.class_id) >= h.num_classes()) {
      throw ArgumentError("record ground truth has an unknown class id");
    }
    if (g.mask.bits.size() != static_cast<std::size_t>(g.mask.width) * g.mask.height) {
      throw ArgumentError("mask bit count does not match its size");
    }
    const PixelFrame f = pixel_frame(g.box, r.image_size);
    if (g.mask.x0 < f.x0 || g.mask.y0 < f.y0 || g.mask.x0 + g.mask.width > f.x0 + f.width ||
        g.mask.y0 + g.mask.height > f.y0 + f.height) {
      throw ArgumentError("ground-truth mask extends outside its box");
    }
    if (g.mask_features.rows() != static_cast<Eigen::Index>(cells) ||
        g.mask_features.cols() != static_cast<Eigen::Index>(h.dims.seg) || g.pixel_labels.size() != cells) {
      throw ArgumentError("ground-truth mask features do not match the header");
    }
    if (!g.mask_features.allFinite()) throw ArgumentError("mask features are not finite");
  }
}

std::string encode_record(const FeatureRecord& r) {
  ByteWriter w;
  w.u64(r.image_id);
  w.u32(static_cast<std::uint32_t>(r.image_size.width));
  w.u32(static_cast<std::uint32_t>(r.image_size.height));
  w.matrix(r.rpn_map);
  w.u32(static_cast<std::uint32_t>(r.proposal_boxes.size()));
  for (std::size_t i = 0; i < r.proposal_boxes.size(); ++i) {
    put_box(w, r.proposal_boxes[i]);
    w.u8(static_cast<std::uint8_t>(r.proposal_sources[i]));
  }
  w.matrix(r.proposal_features);
  w.u32(static_cast<std::uint32_t>(r.gt_objects.size()));
  for (const auto& g : r.gt_objects) {
    w.i32(g.class_id);
    put_box(w, g.box);
    w.i32(g.mask.x0);
    w.i32(g.mask.y0);
    w.i32(g.mask.width);
    w.i32(g.mask.height);
    for (auto b : g.mask.bits) w.u8(b);
    w.matrix(g.mask_features);
    for (auto b : g.pixel_labels) w.u8(b);
  }
  return w.take();
}

FeatureRecord decode_record(std::span<const char> payload, std::uint64_t base_offset) {
  ByteReader r(payload, base_offset);
  FeatureRecord rec;
  rec.image_id = r.u64();
  rec.image_size.width = static_cast<int>(r.u32());
  rec.image_size.height = static_cast<int>(r.u32());
  rec.rpn_map = r.matrix();
  const auto p = r.checked_count(r.u32(), 33);
  rec.proposal_boxes.resize(p);
  rec.proposal_sources.resize(p);
  for (std::size_t i = 0; i < p; ++i) {
    rec.proposal_boxes[i] = get_box(r);
    const auto src = r.u8();
    if (src > 2) r.fail("unknown proposal source");
    rec.proposal_sources[i] = static_cast<ProposalSource>(src);
  }
  rec.proposal_features = r.matrix();
  const auto g = r.checked_count(r.u32(), 52);
  rec.gt_objects.resize(g);
  for (auto& obj : rec.gt_objects) {
    obj.class_id = r.i32();
    obj.box = get_box(r);
    obj.mask.x0 = r.i32();
    obj.mask.y0 = r.i32();
    obj.mask.width = r.i32();
    obj.mask.height = r.i32();
    if (obj.mask.width < 0 || obj.mask.height < 0) r.fail("negative mask size");
    const auto bits = r.checked_count(static_cast<std::uint64_t>(obj.mask.width) * obj.mask.height, 1);
    obj.mask.bits.resize(bits);
    for (auto& b : obj.mask.bits) b = r.u8();
    obj.mask_features = r.matrix();
    obj.pixel_labels.resize(r.checked_count(static_cast<std::uint64_t>(obj.mask_features.rows()), 1));
    for (auto& b : obj.pixel_labels) b = r.u8();
  }
  if (r.remaining() != 0) r.fail("trailing bytes in record");
  return rec;
}

DatasetWriter::DatasetWriter(const std::filesystem::path& path, DatasetHeader header)
    : out_(path, std::ios::binary | std::ios::trunc), header_(std::move(header)) {
  if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
  ByteWriter w;
  w.bytes(std::string_view(kMagic, 4));
  w.u32(header_.version);
  w.str(header_.to_json());
  out_.write(w.data().data(), static_cast<std::streamsize>(w.size()));
}

void DatasetWriter::write(const FeatureRecord& r) {
  if (closed_) throw std::logic_error("DatasetWriter: write after close");
  validate_record(r, header_);
  const std::string payload = encode_record(r);
  ByteWriter w;
  w.u64(payload.size());
  out_.write(w.data().data(), static_cast<std::streamsize>(w.size()));
  out_.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  ++written_;
}

void DatasetWriter::close() {
  if (closed_) return;
  closed_ = true;
  out_.close();
  if (!out_) throw std::runtime_error("DatasetWriter: I/O error while closing");
  if (written_ != header_.num_records) {
    throw ArgumentError("DatasetWriter: header announced " + std::to_string(header_.num_records) +
                        " records but " + std::to_string(written_) + " were written");
  }
}

DatasetWriter::~DatasetWriter() {
  if (!closed_) out_.close();
}

DatasetReader::DatasetReader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
  if (!in_) throw std::runtime_error("cannot open " + path.string());
  in_.seekg(0, std::ios::end);
  file_size_ = static_cast<std::uint64_t>(in_.tellg());
  in_.seekg(0);
  char prefix[16];
  if (file_size_ < sizeof prefix) throw FormatError("file too short for dataset preamble", 0);
  in_.read(prefix, sizeof prefix);
  if (std::string_view(prefix, 4) != std::string_view(kMagic, 4)) throw FormatError("bad magic, not an OSEG dataset", 0);
  ByteReader pre(std::span<const char>(prefix + 4, 12), 4);
  const auto version = pre.u32();
  if (version != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(version), 4);
  const std::uint64_t len = pre.u64();
  if (len > file_size_ - 16) throw FormatError("header length exceeds file size", 8);
  std::string text(len, '\0');
  in_.read(text.data(), static_cast<std::streamsize>(len));
  try {
    header_ = DatasetHeader::from_json(text);
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("malformed dataset header: ") + e.what(), 16);
  }
  first_record_offset_ = offset_ = 16 + len;
}

std::optional<FeatureRecord> DatasetReader::next() {
  if (offset_ == file_size_) {
    if (read_ != header_.num_records) {
      throw FormatError("dataset truncated: header announced " + std::to_string(header_.num_records) +
                            " records, found " + std::to_string(read_),
                        offset_);
    }
    return std::nullopt;
  }
  if (file_size_ - offset_ < 8) throw FormatError("truncated record length", offset_);
  char lenbuf[8];
  in_.seekg(static_cast<std::streamoff>(offset_));
  in_.read(lenbuf, 8);
  const std::uint64_t len = ByteReader(std::span<const char>(lenbuf, 8), offset_).u64();
  if (len > file_size_ - offset_ - 8) throw FormatError("truncated record", offset_);
  std::string payload(len, '\0');
  in_.read(payload.data(), static_cast<std::streamsize>(len));
  if (!in_) throw FormatError("read error", offset_);
  FeatureRecord rec = decode_record(payload, offset_ + 8);
  offset_ += 8 + len;
  ++read_;
  return rec;
}

void DatasetReader::rewind() {
  in_.clear();
  offset_ = first_record_offset_;
  read_ = 0;
}

void write_dataset(const std::filesystem::path& path, DatasetHeader header, std::span<const FeatureRecord> records) {
  header.num_records = records.size();
  DatasetWriter w(path, std::move(header));
  for (const auto& r : records) w.write(r);
  w.close();
}

std::vector<FeatureRecord> read_dataset(const std::filesystem::path& path, DatasetHeader* header) {
  DatasetReader reader(path);
  if (header) *header = reader.header();
  std::vector<FeatureRecord> out;
  while (auto r = reader.next()) out.push_back(std::move(*r));
  return out;
}

MemorySource::MemorySource(DatasetHeader header, std::span<const FeatureRecord> records)
    : header_(std::move(header)), records_(records) {
  header_.num_records = records.size();
}

const FeatureRecord* MemorySource::next() {
  if (at_ >= records_.size()) return nullptr;
  return &records_[at_++];
}

const FeatureRecord* FileSource::next() {
  current_ = reader_.next();
  return current_ ? &*current_ : nullptr;
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

}  // namespace oseg
