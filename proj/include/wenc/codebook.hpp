#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "wenc/error.hpp"
#include "wenc/numerics.hpp"
#include "wenc/rng.hpp"

namespace wenc {

// Background model: K cluster centers stored as rows.
struct Codebook {
  Matrix centers;
  std::uint64_t seed = 0;
  // Mean squared distance to the nearest center on the fixed evaluation batch.
  double inertia = 0.0;

  int size() const { return static_cast<int>(centers.rows()); }
  int dim() const { return static_cast<int>(centers.cols()); }
};

inline constexpr int kDefaultCodebookSize = 100;
inline constexpr int kDefaultBatchSize = 1024;
inline constexpr int kIterationsPerCenter = 250;

struct MiniBatchOptions {
  int k = kDefaultCodebookSize;
  int batch_size = kDefaultBatchSize;
  // 0 selects kIterationsPerCenter * k.
  int iterations = 0;
  std::uint64_t seed = 0;
  // Upper bound on the evaluation batch used for the recorded inertia.
  int eval_batch_size = 10000;
};

// Invoked after each iteration with the 1-based iteration index and the
// current centers.
using KmeansObserver = std::function<void(int, const Matrix&)>;

namespace detail {

inline double squared_distance(const Eigen::Ref<const Vector>& a,
                               const Eigen::Ref<const Vector>& b) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double t = a(i) - b(i);
    s += t * t;
  }
  return s;
}

// Index of the closest row of `centers`; ties keep the smallest index.
inline int nearest_row(const Matrix& centers, const Eigen::Ref<const Vector>& x,
                       double* best_distance = nullptr) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < centers.rows(); ++k) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double t = x(i) - centers(k, i);
      s += t * t;
    }
    if (s < best_d) {
      best_d = s;
      best = static_cast<int>(k);
    }
  }
  if (best_distance) *best_distance = best_d;
  return best;
}

inline double mean_inertia(const Matrix& X, const std::vector<std::size_t>& rows,
                           const Matrix& centers) {
  if (rows.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t r : rows) {
    double d = 0.0;
    nearest_row(centers, X.row(static_cast<Eigen::Index>(r)).transpose(), &d);
    total += d;
  }
  return total / static_cast<double>(rows.size());
}

}  // namespace detail

inline int assign_nearest(const Codebook& cb, const Eigen::Ref<const Vector>& x) {
  require(x.size() == cb.dim(),
          "assign_nearest: descriptor dimension " + std::to_string(x.size()) +
              " does not match codebook dimension " + std::to_string(cb.dim()));
  return detail::nearest_row(cb.centers, x);
}

// Mini-batch k-means with per-center learning rate 1/count. Centers start at
// K distinct rows drawn uniformly with the seed; the seed also drives batch
// sampling. A center that wins no point over a full pass worth of batches
// (ceil(n / batch_size) iterations) is moved onto the point of the latest
// batch that is farthest from its nearest center.
inline Codebook train_minibatch_kmeans(const Matrix& X,
                                       const MiniBatchOptions& opts,
                                       const KmeansObserver& observer = {}) {
  const Eigen::Index n = X.rows();
  const int k = opts.k;
  require(k >= 1, "codebook size must be >= 1");
  require(n >= k, "mini-batch k-means needs n >= K (n = " + std::to_string(n) +
                      ", K = " + std::to_string(k) + ")");
  require(opts.batch_size >= 1, "batch size must be >= 1");
  require(opts.iterations >= 0, "iterations must be >= 0");
  if (!all_finite(X)) throw NumericError("k-means: non-finite descriptors");

  const int iterations =
      opts.iterations > 0 ? opts.iterations : kIterationsPerCenter * k;
  const auto un = static_cast<std::size_t>(n);
  const bool full_batch = static_cast<std::size_t>(opts.batch_size) >= un;
  const std::size_t batch = full_batch ? un : static_cast<std::size_t>(opts.batch_size);
  const int epoch = static_cast<int>((un + batch - 1) / batch);

  Rng rng(opts.seed);
  Rng eval_rng(derive_seed(opts.seed, 1));

  // Initialization: prefer rows whose values differ from those already taken.
  Codebook cb;
  cb.seed = opts.seed;
  cb.centers.resize(k, X.cols());
  {
    const std::vector<std::size_t> order = rng.sample_without_replacement(un, un);
    std::vector<std::size_t> chosen;
    std::vector<std::size_t> duplicates;
    for (std::size_t idx : order) {
      if (chosen.size() == static_cast<std::size_t>(k)) break;
      const auto row = X.row(static_cast<Eigen::Index>(idx));
      const bool dup = std::any_of(chosen.begin(), chosen.end(), [&](std::size_t c) {
        return X.row(static_cast<Eigen::Index>(c)) == row;
      });
      (dup ? duplicates : chosen).push_back(idx);
    }
    for (std::size_t i = 0; chosen.size() < static_cast<std::size_t>(k); ++i) {
      chosen.push_back(duplicates[i]);
    }
    for (int c = 0; c < k; ++c) {
      cb.centers.row(c) = X.row(static_cast<Eigen::Index>(chosen[static_cast<std::size_t>(c)]));
    }
  }

  const std::vector<std::size_t> eval_rows = eval_rng.sample_without_replacement(
      un, static_cast<std::size_t>(std::max(1, opts.eval_batch_size)));

  std::vector<double> counts(static_cast<std::size_t>(k), 0.0);
  std::vector<int> wins_this_epoch(static_cast<std::size_t>(k), 0);
  std::vector<std::size_t> rows(batch);
  std::vector<int> assignment(batch);

  for (int it = 1; it <= iterations; ++it) {
    if (full_batch) {
      std::iota(rows.begin(), rows.end(), std::size_t{0});
    } else {
      for (auto& r : rows) r = static_cast<std::size_t>(rng.uniform_index(un));
    }
    // Assignment against the centers as they stand before this batch.
    for (std::size_t b = 0; b < batch; ++b) {
      assignment[b] = detail::nearest_row(
          cb.centers, X.row(static_cast<Eigen::Index>(rows[b])).transpose());
    }
    for (std::size_t b = 0; b < batch; ++b) {
      const auto c = static_cast<std::size_t>(assignment[b]);
      counts[c] += 1.0;
      ++wins_this_epoch[c];
      const double eta = 1.0 / counts[c];
      cb.centers.row(static_cast<Eigen::Index>(c)) =
          (1.0 - eta) * cb.centers.row(static_cast<Eigen::Index>(c)) +
          eta * X.row(static_cast<Eigen::Index>(rows[b]));
    }

    if (it % epoch == 0) {
      std::vector<int> dead;
      for (int c = 0; c < k; ++c) {
        if (wins_this_epoch[static_cast<std::size_t>(c)] == 0) dead.push_back(c);
      }
      if (!dead.empty()) {
        std::vector<std::pair<double, std::size_t>> far;
        far.reserve(batch);
        for (std::size_t b = 0; b < batch; ++b) {
          double d = 0.0;
          detail::nearest_row(cb.centers,
                              X.row(static_cast<Eigen::Index>(rows[b])).transpose(), &d);
          far.emplace_back(d, rows[b]);
        }
        // Farthest first; ties by row index. Distinct rows per dead center.
        std::sort(far.begin(), far.end(), [](const auto& a, const auto& b) {
          return a.first != b.first ? a.first > b.first : a.second < b.second;
        });
        far.erase(std::unique(far.begin(), far.end(),
                              [](const auto& a, const auto& b) { return a.second == b.second; }),
                  far.end());
        for (std::size_t i = 0; i < dead.size() && i < far.size(); ++i) {
          if (far[i].first == 0.0) break;
          const auto c = static_cast<std::size_t>(dead[i]);
          cb.centers.row(dead[i]) = X.row(static_cast<Eigen::Index>(far[i].second));
          counts[c] = 0.0;
        }
      }
      std::fill(wins_this_epoch.begin(), wins_this_epoch.end(), 0);
    }
    if (observer) observer(it, cb.centers);
  }

  cb.inertia = detail::mean_inertia(X, eval_rows, cb.centers);
  return cb;
}

inline Codebook train_minibatch_kmeans(const Matrix& X, int k, int batch_size,
                                       int iterations, std::uint64_t seed) {
  MiniBatchOptions opts;
  opts.k = k;
  opts.batch_size = batch_size;
  opts.iterations = iterations;
  opts.seed = seed;
  return train_minibatch_kmeans(X, opts);
}

}  // namespace wenc
