#include "oseg/minibootstrap.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <ostream>

#include "oseg/errors.hpp"
#include "oseg/random.hpp"

namespace oseg {

namespace {

Matrix select_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

Matrix concat_rows(const std::vector<Matrix>& parts, Eigen::Index cols) {
  Eigen::Index total = 0;
  for (const auto& p : parts) total += p.rows();
  Matrix out(total, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    if (p.rows() == 0) continue;
    out.middleRows(at, p.rows()) = p;
    at += p.rows();
  }
  return out;
}

std::vector<std::size_t> rows_where(const Vector& scores, auto pred) {
  std::vector<std::size_t> out;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    if (pred(scores[i])) out.push_back(static_cast<std::size_t>(i));
  }
  return out;
}

}  // namespace

void BootstrapConfig::validate() const {
  if (batch_size < 1 || num_batches < 1) throw ArgumentError("minibootstrap: BS and n_B must be positive");
  if (!(hard_threshold >= easy_threshold)) {
    throw ArgumentError("minibootstrap: hard_threshold must be >= easy_threshold");
  }
}

std::size_t per_image_quota(std::size_t num_batches, std::size_t batch_size, std::size_t num_images) {
  if (num_batches < 1 || batch_size < 1 || num_images < 1) {
    throw ArgumentError("per_image_quota: arguments must be >= 1");
  }
  const std::size_t total = num_batches * batch_size;
  return (total + num_images - 1) / num_images;
}

Matrix sample_rows(const Matrix& rows, std::size_t quota, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(rows.rows());
  if (quota >= n) return rows;
  Rng rng(seed);
  const auto idx = sample_indices(n, quota, rng);
  return select_rows(rows, idx);
}

Matrix sample_image_negatives(const Matrix& candidates, std::size_t quota, std::uint64_t seed,
                              std::uint64_t stream, std::uint64_t image_id, std::uint64_t key) {
  return sample_rows(candidates, quota, derive_seed(seed, {stream, image_id, key}));
}

std::size_t NegativePool::negative_count(std::size_t cls) const {
  std::size_t n = 0;
  for (const auto& m : negatives.at(cls)) n += static_cast<std::size_t>(m.rows());
  return n;
}

std::vector<int> NegativePool::untrainable_classes() const {
  std::vector<int> out;
  for (std::size_t c = 0; c < positives.size(); ++c) {
    if (positives[c].rows() == 0) out.push_back(static_cast<int>(c));
  }
  return out;
}

PoolBuilder::PoolBuilder(std::size_t num_classes, std::size_t num_images, std::size_t feature_dim,
                         const BootstrapConfig& config, std::uint64_t stream)
    : expected_images_(num_images),
      feature_dim_(feature_dim),
      quota_(per_image_quota(config.num_batches, config.batch_size, num_images)),
      seed_(config.seed),
      stream_(stream) {
  config.validate();
  if (num_classes < 1) throw ArgumentError("collect_pool: need at least one class");
  pool_.positives.assign(num_classes, Matrix(0, static_cast<Eigen::Index>(feature_dim)));
  pool_.negatives.assign(num_classes, {});
  positive_chunks_.assign(num_classes, {});
}

void PoolBuilder::add_image(std::uint64_t image_id, std::span<const ClassCandidates> per_class) {
  if (per_class.size() != pool_.negatives.size()) throw ArgumentError("collect_pool: class count mismatch");
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const ClassCandidates& cand = per_class[c];
    if (cand.positives.rows() > 0) {
      if (static_cast<std::size_t>(cand.positives.cols()) != feature_dim_) throw ArgumentError("collect_pool: dimension mismatch");
      positive_chunks_[c].push_back(cand.positives);
    }
    Matrix neg = cand.negatives.rows() > 0
                     ? sample_image_negatives(cand.negatives, quota_, seed_, stream_, image_id, cand.sampling_key)
                     : Matrix(0, static_cast<Eigen::Index>(feature_dim_));
    if (static_cast<std::size_t>(neg.cols()) != feature_dim_) throw ArgumentError("collect_pool: dimension mismatch");
    pool_.negatives[c].push_back(std::move(neg));
  }
  pool_.image_ids.push_back(image_id);
}

NegativePool PoolBuilder::finish() && {
  if (pool_.image_ids.empty()) throw ArgumentError("collect_pool: dataset is empty");
  if (pool_.image_ids.size() != expected_images_) {
    throw ArgumentError("collect_pool: expected " + std::to_string(expected_images_) + " images, got " +
                        std::to_string(pool_.image_ids.size()));
  }
  for (std::size_t c = 0; c < positive_chunks_.size(); ++c) {
    pool_.positives[c] = concat_rows(positive_chunks_[c], static_cast<Eigen::Index>(feature_dim_));
  }
  return std::move(pool_);
}

NegativePool collect_pool(std::span<const std::vector<ClassCandidates>> per_image,
                          std::span<const std::uint64_t> image_ids, std::size_t feature_dim,
                          const BootstrapConfig& config, std::uint64_t stream) {
  if (per_image.empty()) throw ArgumentError("collect_pool: dataset is empty");
  if (per_image.size() != image_ids.size()) throw ArgumentError("collect_pool: image id count mismatch");
  PoolBuilder builder(per_image.front().size(), per_image.size(), feature_dim, config, stream);
  for (std::size_t i = 0; i < per_image.size(); ++i) builder.add_image(image_ids[i], per_image[i]);
  return std::move(builder).finish();
}

std::vector<ClassBatches> make_batches(const NegativePool& pool, const BootstrapConfig& config) {
  config.validate();
  std::vector<int> empty;
  for (std::size_t c = 0; c < pool.num_classes(); ++c) {
    if (pool.negative_count(c) == 0) empty.push_back(static_cast<int>(c));
  }
  if (!empty.empty()) {
    std::string msg = "make_batches: no negatives for class(es)";
    for (int c : empty) msg += " " + std::to_string(c);
    throw ArgumentError(msg);
  }

  std::vector<ClassBatches> out(pool.num_classes());
  for (std::size_t c = 0; c < pool.num_classes(); ++c) {
    const Eigen::Index cols = pool.negatives[c].front().cols();
    const Matrix all = concat_rows(pool.negatives[c], cols);
    std::vector<std::size_t> order(static_cast<std::size_t>(all.rows()));
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, {tag_hash("batches"), c}));
    rng.shuffle(order);
    const std::size_t kept = std::min(order.size(), config.budget());
    ClassBatches& cb = out[c];
    cb.available = order.size();
    cb.short_pool = order.size() < config.budget();
    for (std::size_t start = 0; start < kept && cb.batches.size() < config.num_batches; start += config.batch_size) {
      const std::size_t end = std::min(kept, start + config.batch_size);
      cb.batches.push_back(select_rows(all, std::span(order).subspan(start, end - start)));
    }
  }
  return out;
}

BootstrapResult run_minibootstrap(const NegativePool& pool, const std::vector<ClassBatches>& batches,
                                  const BootstrapConfig& config, const KernelParams& params) {
  config.validate();
  if (batches.size() != pool.num_classes()) throw ArgumentError("run_minibootstrap: batches/pool class mismatch");
  BootstrapResult result;
  result.classifiers.resize(pool.num_classes());

  for (std::size_t c = 0; c < pool.num_classes(); ++c) {
    const int cls = static_cast<int>(c);
    const Matrix& pos = pool.positives[c];
    const auto& cb = batches[c].batches;
    if (pos.rows() == 0) {
      result.failures.push_back({cls, "no positive samples"});
      continue;
    }
    if (cb.empty()) {
      result.failures.push_back({cls, "no negative batches"});
      continue;
    }
    std::size_t pool_size = 0;
    for (const auto& b : cb) pool_size += static_cast<std::size_t>(b.rows());

    auto fit = [&](const Matrix& negatives, std::size_t iteration, IterationStat& stat) {
      const auto t0 = std::chrono::steady_clock::now();
      KernelParams p = params;
      p.num_centers = std::min<std::size_t>(p.num_centers, static_cast<std::size_t>(pos.rows() + negatives.rows()));
      auto model = train_kernel_classifier(pos, negatives, p,
                                           derive_seed(config.seed, {tag_hash("centers"), c, iteration}),
                                           &result.cost);
      stat.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      stat.training_size = static_cast<std::size_t>(pos.rows() + negatives.rows());
      return model;
    };

    try {
      IterationStat first{cls, 1, pool_size, static_cast<std::size_t>(cb[0].rows()), 0, 0, 0.0};
      KernelClassifier model = fit(cb[0], 1, first);
      Matrix chosen = select_rows(
          cb[0], rows_where(model.score_rows(cb[0]), [&](double s) { return s >= config.easy_threshold; }));
      first.chosen_negatives = static_cast<std::size_t>(chosen.rows());
      result.stats.push_back(first);

      for (std::size_t j = 1; j < cb.size(); ++j) {
        IterationStat stat{cls, j + 1, pool_size, 0, 0, 0, 0.0};
        const Matrix hard = select_rows(
            cb[j], rows_where(model.score_rows(cb[j]), [&](double s) { return s >= config.hard_threshold; }));
        stat.hard_negatives = static_cast<std::size_t>(hard.rows());
        chosen = vstack(chosen, hard);
        if (chosen.rows() == 0) {
          // nothing hard and nothing kept: the current model already fits
          stat.training_size = static_cast<std::size_t>(pos.rows());
          result.stats.push_back(stat);
          continue;
        }
        model = fit(chosen, j + 1, stat);
        chosen = select_rows(chosen,
                             rows_where(model.score_rows(chosen), [&](double s) { return s >= config.easy_threshold; }));
        stat.chosen_negatives = static_cast<std::size_t>(chosen.rows());
        result.stats.push_back(stat);
      }
      result.classifiers[c] = std::move(model);
    } catch (const NumericalError& e) {
      result.failures.push_back({cls, e.what()});
    } catch (const ArgumentError& e) {
      result.failures.push_back({cls, e.what()});
    }
  }
  return result;
}

void write_stats_csv(std::ostream& out, std::span<const IterationStat> stats) {
  out << "class,iteration,pool_size,chosen_negatives,train_seconds\n";
  for (const auto& s : stats) {
    out << s.cls << ',' << s.iteration << ',' << s.pool_size << ',' << s.chosen_negatives << ',' << s.train_seconds
        << '\n';
  }
}

}  // namespace oseg
