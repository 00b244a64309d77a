#pragma once

// Minibootstrap: approximate hard-negative mining for a bank of N binary
// kernel classifiers.
//
//   Stage 1  every image contributes at most ceil(n_B * BS / |I|) uniformly
//            drawn negatives per class, plus all of its positives.
//   Stage 2  the pooled negatives of a class are shuffled, truncated to
//            n_B * BS and split into n_B batches.
//   Stage 3  train on positives + batch 1, then for each further batch add
//            the negatives scoring at or above the hard threshold, retrain,
//            and prune the kept negatives scoring below the easy threshold.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "oseg/kernel.hpp"

namespace oseg {

struct BootstrapConfig {
  std::size_t batch_size = 2000;  // BS
  std::size_t num_batches = 10;   // n_B
  double hard_threshold = -1.0;
  double easy_threshold = -1.0;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t budget() const { return batch_size * num_batches; }
};

/// ceil(n_B * BS / num_images).
std::size_t per_image_quota(std::size_t num_batches, std::size_t batch_size, std::size_t num_images);

/// Sampling key that routes an image's draw to its per-image buffer stream
/// rather than a per-class stream.
inline constexpr std::uint64_t kBufferKey = 0xB0FFE5ULL;

/// What one image offers one class: its positives and the candidate
/// negatives to subsample. Draws for equal (stream, image, key) triples are
/// identical, so classes that see the same candidate set may share a key.
struct ClassCandidates {
  Matrix positives;
  Matrix negatives;
  std::uint64_t sampling_key = 0;
};

/// Uniform draw of min(quota, rows) negatives, keeping original row order.
Matrix sample_image_negatives(const Matrix& candidates, std::size_t quota, std::uint64_t seed,
                              std::uint64_t stream, std::uint64_t image_id, std::uint64_t key);

/// Uniform draw of min(quota, rows) rows with an explicit seed.
Matrix sample_rows(const Matrix& rows, std::size_t quota, std::uint64_t seed);

struct NegativePool {
  std::vector<Matrix> positives;               // [class]
  std::vector<std::vector<Matrix>> negatives;  // [class][image], image order = insertion order
  std::vector<std::uint64_t> image_ids;

  std::size_t num_classes() const { return positives.size(); }
  std::size_t num_images() const { return image_ids.size(); }
  std::size_t negative_count(std::size_t cls) const;
  /// Classes without a single positive.
  std::vector<int> untrainable_classes() const;
};

/// Streaming Stage 1: images are added one at a time, the pool never holds
/// more than the per-image quota of any image.
class PoolBuilder {
 public:
  PoolBuilder(std::size_t num_classes, std::size_t num_images, std::size_t feature_dim,
              const BootstrapConfig& config, std::uint64_t stream);

  void add_image(std::uint64_t image_id, std::span<const ClassCandidates> per_class);
  std::size_t quota() const { return quota_; }
  NegativePool finish() &&;

 private:
  NegativePool pool_;
  std::vector<std::vector<Matrix>> positive_chunks_;
  std::size_t expected_images_;
  std::size_t feature_dim_;
  std::size_t quota_;
  std::uint64_t seed_;
  std::uint64_t stream_;
};

/// Whole-dataset Stage 1 over precomputed per-image candidates.
NegativePool collect_pool(std::span<const std::vector<ClassCandidates>> per_image,
                          std::span<const std::uint64_t> image_ids, std::size_t feature_dim,
                          const BootstrapConfig& config, std::uint64_t stream);

struct ClassBatches {
  std::vector<Matrix> batches;
  std::size_t available = 0;  // negatives in the pool before truncation
  bool short_pool = false;    // fewer than n_B * BS negatives were available
};

/// Stage 2. Throws ArgumentError listing classes that have no negatives.
std::vector<ClassBatches> make_batches(const NegativePool& pool, const BootstrapConfig& config);

struct IterationStat {
  int cls = 0;
  std::size_t iteration = 0;  // 1-based batch index
  std::size_t pool_size = 0;  // negatives across this class's batches
  std::size_t hard_negatives = 0;
  std::size_t chosen_negatives = 0;  // after pruning
  std::size_t training_size = 0;
  double train_seconds = 0.0;
};

struct ClassFailure {
  int cls = 0;
  std::string reason;
};

struct BootstrapResult {
  std::vector<std::optional<KernelClassifier>> classifiers;  // nullopt: untrainable or failed
  std::vector<IterationStat> stats;
  std::vector<ClassFailure> failures;
  TrainCost cost;
};

/// Stage 3 for every class. Number of Nystrom centers is clamped to the
/// training-set size of each fit. A solver failure aborts only that class.
BootstrapResult run_minibootstrap(const NegativePool& pool, const std::vector<ClassBatches>& batches,
                                  const BootstrapConfig& config, const KernelParams& params);

/// Columns: class,iteration,pool_size,chosen_negatives,train_seconds
void write_stats_csv(std::ostream& out, std::span<const IterationStat> stats);

}  // namespace oseg
