#pragma once

// Per-image feature records and the on-disk dataset container.
//
// File layout (all integers little-endian):
//
//   "OSEG"            4-byte magic
//   u32               format version (kDatasetVersion)
//   u64 + bytes       header, canonical JSON (see DatasetHeader)
//   repeated:         u64 payload length + record payload
//
// Record payload:
//   u64 image_id, u32 width, u32 height
//   matrix rpn_map                  (h*w) x f, row = row-major grid location
//   u32 P, then P x { 4 f64 box, u8 source }
//   matrix proposal_features        P x f_d
//   u32 G, then G x {
//     i32 class_id, 4 f64 box,
//     i32 x0, i32 y0, i32 width, i32 height, width*height u8 mask bits,
//     matrix mask_features          (s*s) x f_s, row = row-major cell
//     s*s u8 per-cell labels }
//
// A matrix is u64 rows, u64 cols, then rows*cols f64 in row-major order.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "oseg/geometry.hpp"
#include "oseg/kernel.hpp"

namespace oseg {

inline constexpr std::uint32_t kDatasetVersion = 1;

enum class ProposalSource : std::uint8_t {
  Stored = 0,       // region proposals extracted with the features
  GroundTruth = 1,  // a ground-truth box injected among the stored proposals
  Adapted = 2,      // produced by a trained on-line RPN
};

struct GtObject {
  int class_id = 0;
  Box box;
  BinaryMask mask;
  Matrix mask_features;                    // (s*s) x f_s
  std::vector<std::uint8_t> pixel_labels;  // s*s, 1 = object

  bool operator==(const GtObject& o) const {
    return class_id == o.class_id && box == o.box && mask == o.mask && pixel_labels == o.pixel_labels &&
           mask_features.rows() == o.mask_features.rows() && mask_features.cols() == o.mask_features.cols() &&
           mask_features == o.mask_features;
  }
};

struct FeatureRecord {
  std::uint64_t image_id = 0;
  ImageSize image_size;
  Matrix rpn_map;  // (h*w) x f
  std::vector<Box> proposal_boxes;
  std::vector<ProposalSource> proposal_sources;
  Matrix proposal_features;  // P x f_d
  std::vector<GtObject> gt_objects;

  std::vector<Box> gt_boxes() const;
  bool has_class(int cls) const;
  bool operator==(const FeatureRecord& o) const;
};

struct FeatureDims {
  std::size_t rpn = 64;
  std::size_t det = 64;
  std::size_t seg = 64;
  std::size_t mask_size = 28;  // s

  bool operator==(const FeatureDims&) const = default;
};

/// Generator parameters; stored in the header of synthetic datasets so the
/// feature oracle can be rebuilt from the file alone.
struct SyntheticParams {
  std::uint64_t seed = 0;
  double noise = 0.1;  // eta
  std::size_t num_classes = 5;
  std::vector<int> classes;  // classes that may appear; empty = all
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  double box_jitter = 2.0;  // max ground-truth shift off its anchor, px
  std::size_t proposals_high = 4;
  std::size_t proposals_mid = 4;
  std::size_t proposals_low = 4;
  std::size_t proposals_background = 16;
  bool inject_gt_proposals = true;

  bool operator==(const SyntheticParams&) const = default;
};

struct DatasetHeader {
  std::uint32_t version = kDatasetVersion;
  FeatureDims dims;
  AnchorGrid grid = AnchorGrid::default_grid();
  std::vector<std::string> class_names;
  std::optional<SyntheticParams> synthetic;
  std::uint64_t num_records = 0;

  std::size_t num_classes() const { return class_names.size(); }
  std::string to_json() const;
  static DatasetHeader from_json(const std::string& text);
  bool operator==(const DatasetHeader&) const = default;
};

/// Shape and finiteness checks of a record against its header.
void validate_record(const FeatureRecord& r, const DatasetHeader& h);

std::string encode_record(const FeatureRecord& r);
FeatureRecord decode_record(std::span<const char> payload, std::uint64_t base_offset);

class DatasetWriter {
 public:
  /// `header.num_records` must equal the number of records written.
  DatasetWriter(const std::filesystem::path& path, DatasetHeader header);
  void write(const FeatureRecord& r);
  void close();
  ~DatasetWriter();

 private:
  std::ofstream out_;
  DatasetHeader header_;
  std::uint64_t written_ = 0;
  bool closed_ = false;
};

/// Streaming reader: records are decoded one at a time in stored order.
class DatasetReader {
 public:
  explicit DatasetReader(const std::filesystem::path& path);

  const DatasetHeader& header() const { return header_; }
  /// nullopt at the clean end of the file; FormatError on corruption.
  std::optional<FeatureRecord> next();
  void rewind();

 private:
  std::ifstream in_;
  DatasetHeader header_;
  std::uint64_t first_record_offset_ = 0;
  std::uint64_t offset_ = 0;
  std::uint64_t file_size_ = 0;
  std::uint64_t read_ = 0;
};

void write_dataset(const std::filesystem::path& path, DatasetHeader header, std::span<const FeatureRecord> records);
std::vector<FeatureRecord> read_dataset(const std::filesystem::path& path, DatasetHeader* header = nullptr);

/// A rewindable sequence of records. `next` returns a pointer valid until
/// the following call.
class RecordSource {
 public:
  virtual ~RecordSource() = default;
  virtual const DatasetHeader& header() const = 0;
  virtual std::size_t size() const = 0;
  virtual const FeatureRecord* next() = 0;
  virtual void rewind() = 0;
};

class MemorySource final : public RecordSource {
 public:
  MemorySource(DatasetHeader header, std::span<const FeatureRecord> records);
  const DatasetHeader& header() const override { return header_; }
  std::size_t size() const override { return records_.size(); }
  const FeatureRecord* next() override;
  void rewind() override { at_ = 0; }

 private:
  DatasetHeader header_;
  std::span<const FeatureRecord> records_;
  std::size_t at_ = 0;
};

class FileSource final : public RecordSource {
 public:
  explicit FileSource(const std::filesystem::path& path) : reader_(path) {}
  const DatasetHeader& header() const override { return reader_.header(); }
  std::size_t size() const override { return static_cast<std::size_t>(reader_.header().num_records); }
  const FeatureRecord* next() override;
  void rewind() override { reader_.rewind(); }

 private:
  DatasetReader reader_;
  std::optional<FeatureRecord> current_;
};

/// FNV-1a 64 over the file bytes, hex encoded.
std::string file_digest(const std::filesystem::path& path);

}  // namespace oseg
