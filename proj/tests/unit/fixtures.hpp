#pragma once

#include <vector>

#include "oseg/orchestrator.hpp"

namespace fixtures {

inline oseg::SyntheticParams params(double noise, std::size_t classes, std::size_t min_obj = 1,
                                    std::size_t max_obj = 3, std::uint64_t seed = 17) {
  oseg::SyntheticParams p;
  p.seed = seed;
  p.noise = noise;
  p.num_classes = classes;
  p.min_objects = min_obj;
  p.max_objects = max_obj;
  return p;
}

struct Data {
  oseg::SyntheticWorld world;
  std::vector<oseg::FeatureRecord> records;
  oseg::DatasetHeader header;
  oseg::MemorySource source() const { return oseg::MemorySource(header, records); }
};

inline Data make_data(const oseg::SyntheticParams& p, std::size_t images, std::uint64_t first_id = 0,
                      oseg::AnchorGrid grid = oseg::AnchorGrid::default_grid()) {
  oseg::SyntheticWorld world(p, {}, grid);
  auto recs = oseg::generate_synthetic(world, images, {}, first_id);
  auto header = world.header(images);
  return {std::move(world), std::move(recs), std::move(header)};
}

inline oseg::BootstrapConfig fast_bootstrap(std::uint64_t seed = 1) {
  oseg::BootstrapConfig b;
  b.batch_size = 150;
  b.num_batches = 3;
  b.seed = seed;
  return b;
}

inline oseg::ProtocolConfig fast_protocol(std::uint64_t seed = 1) {
  oseg::ProtocolConfig c;
  c.batch_size = 150;
  c.num_batches = 3;
  c.rpn.num_centers = c.detection.num_centers = 200;
  c.segmentation.num_centers = 200;
  c.seed = seed;
  return c;
}

}  // namespace fixtures
