#pragma once

// Synthetic stand-in for the pre-trained backbone. Every feature is a blend
// of class prototypes weighted by overlap with the ground truth:
//
//   F_r(location) = sum_g IoU(best anchor at location, g) * P_r[c_g] + rest * B_r + eta * noise
//   F_d(box)      = sum_g IoU(box, g) * P_d[c_g]                     + rest * B_d + eta * noise
//   F_s(cell)     = sum_g mask_g(cell) * P_s[c_g]                    + rest * B_s + eta * noise
//
// where rest = max(0, 1 - sum of the weights) and B_* is the background
// prototype. Noise is a pure function of (seed, image id, location or
// half-pixel-quantized box, component), so the oracle reproduces the stored
// features for identical boxes.

#include <cstdint>
#include <span>
#include <vector>

#include "oseg/feature_store.hpp"

namespace oseg {

struct ObjectLayout {
  int class_id = 0;
  Box box;
  BinaryMask mask;
};

class SyntheticWorld {
 public:
  SyntheticWorld(SyntheticParams params, FeatureDims dims = {}, AnchorGrid grid = AnchorGrid::default_grid());

  const SyntheticParams& params() const { return params_; }
  const FeatureDims& dims() const { return dims_; }
  const AnchorGrid& grid() const { return grid_; }

  /// Same prototypes and noise, different set of classes that may appear.
  SyntheticWorld with_classes(std::vector<int> classes) const;

  /// Prototype rows; index num_classes() is the background.
  const Matrix& rpn_prototypes() const { return proto_rpn_; }
  const Matrix& det_prototypes() const { return proto_det_; }
  const Matrix& seg_prototypes() const { return proto_seg_; }

  /// Objects of an image; a pure function of (seed, image_id, classes).
  std::vector<ObjectLayout> layout(std::uint64_t image_id) const;

  FeatureRecord make_record(std::uint64_t image_id) const;

  /// Dataset header describing this world.
  DatasetHeader header(std::uint64_t num_records) const;

  Matrix rpn_map(std::uint64_t image_id, std::span<const ObjectLayout> objects) const;
  Vector detection_features(std::uint64_t image_id, std::span<const ObjectLayout> objects, const Box& box) const;
  Matrix mask_features(std::uint64_t image_id, std::span<const ObjectLayout> objects, const Box& box) const;

 private:
  SyntheticParams params_;
  FeatureDims dims_;
  AnchorGrid grid_;
  Matrix proto_rpn_, proto_det_, proto_seg_;
};

std::vector<ObjectLayout> layout_of(const FeatureRecord& record);

/// Records for image ids first_image_id .. first_image_id + num_images - 1,
/// drawing objects from `classes` (empty = the world's class set).
std::vector<FeatureRecord> generate_synthetic(const SyntheticWorld& world, std::size_t num_images,
                                              std::span<const int> classes = {},
                                              std::uint64_t first_image_id = 0);

struct OracleFeatures {
  Vector detection;  // f_d
  Matrix mask;       // (s*s) x f_s
};

/// Features of an arbitrary in-image box. Throws ArgumentError for boxes
/// outside the image.
OracleFeatures oracle_features(const SyntheticWorld& world, std::uint64_t image_id, const Box& box);
OracleFeatures oracle_features(const SyntheticWorld& world, const FeatureRecord& record, const Box& box);

/// Produces F_d / F_s for boxes that were not stored with the record (the
/// proposals of a trained on-line RPN).
class Featurizer {
 public:
  virtual ~Featurizer() = default;
  virtual Matrix detection_features(const FeatureRecord& record, std::span<const Box> boxes) const = 0;
  virtual Matrix mask_features(const FeatureRecord& record, const Box& box) const = 0;
};

class OracleFeaturizer final : public Featurizer {
 public:
  explicit OracleFeaturizer(SyntheticWorld world) : world_(std::move(world)) {}
  /// Rebuilds the world from a synthetic dataset header.
  static OracleFeaturizer from_header(const DatasetHeader& header);

  Matrix detection_features(const FeatureRecord& record, std::span<const Box> boxes) const override;
  Matrix mask_features(const FeatureRecord& record, const Box& box) const override;
  const SyntheticWorld& world() const { return world_; }

 private:
  SyntheticWorld world_;
};

}  // namespace oseg
