#pragma once

// The complete trained model and its binary container.
//
//   "OSGM" magic, u32 version, then (little-endian, see serialization.hpp):
//   u32 class count + names, feature dims, anchor grid,
//   RPN:  proposal config, A x { u8 present [classifier], regressor }
//   det:  detection config, N x { classifier, regressor }
//   seg:  f64 threshold, f64 r, N x { u8 present [classifier] }
//
//   classifier = matrix centers, vector weights, f64 sigma, f64 lambda
//   regressor  = matrix weights (f x 4), vector bias, f64 lambda

#include <filesystem>
#include <string>
#include <vector>

#include "oseg/feature_store.hpp"
#include "oseg/online_detection.hpp"
#include "oseg/online_rpn.hpp"
#include "oseg/online_segmentation.hpp"

namespace oseg {

inline constexpr std::uint32_t kModelVersion = 1;

struct SegModel {
  std::vector<std::string> class_names;
  FeatureDims dims;
  OnlineRpnModel rpn;
  OnlineDetectionModel detection;
  OnlineSegmentationModel segmentation;

  std::size_t num_classes() const { return class_names.size(); }
  bool operator==(const SegModel&) const = default;
};

std::string encode_model(const SegModel& model);
SegModel decode_model(std::span<const char> bytes);

void save_model(const std::filesystem::path& path, const SegModel& model);
SegModel load_model(const std::filesystem::path& path);

/// Bytes of one class's segmentation classifier (empty when untrained);
/// used to check that updates leave old classes untouched.
std::string segmentation_classifier_bytes(const SegModel& model, int cls);

/// Writes `bytes` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace oseg
