#include <algorithm>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "wenc/codebook.hpp"
#include "wenc/rng.hpp"

namespace wenc {
namespace {

Matrix gaussian(int n, int d, std::uint64_t seed) {
  Rng rng(seed);
  Matrix X(n, d);
  for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = rng.normal();
  return X;
}

struct Blobs {
  Matrix X;
  Matrix truth;
  std::vector<int> label;
};

Blobs three_blobs(int per_blob, double sigma, std::uint64_t seed) {
  Blobs b;
  b.truth.resize(3, 2);
  b.truth << 0.0, 0.0, 10.0, 0.0, 5.0, 10.0 * std::sqrt(0.75);
  Rng rng(seed);
  b.X.resize(3 * per_blob, 2);
  for (int k = 0; k < 3; ++k) {
    for (int i = 0; i < per_blob; ++i) {
      const int r = k * per_blob + i;
      b.X(r, 0) = b.truth(k, 0) + sigma * rng.normal();
      b.X(r, 1) = b.truth(k, 1) + sigma * rng.normal();
      b.label.push_back(k);
    }
  }
  return b;
}

TEST(MiniBatchKmeans, RecoversSeparatedBlobs) {
  const Blobs b = three_blobs(200, 0.01, 4);
  const Codebook cb = train_minibatch_kmeans(b.X, 3, 64, 300, 17);
  // Oracle: per-blob sample means.
  Matrix means = Matrix::Zero(3, 2);
  for (int r = 0; r < b.X.rows(); ++r) means.row(b.label[static_cast<std::size_t>(r)]) += b.X.row(r);
  means /= 200.0;
  std::set<int> matched;
  for (int k = 0; k < 3; ++k) {
    const int c = oracle::nearest(cb.centers, means.row(k).transpose());
    EXPECT_LT((cb.centers.row(c) - means.row(k)).norm(), 0.1);
    matched.insert(c);
  }
  EXPECT_EQ(matched.size(), 3U);
}

TEST(MiniBatchKmeans, FullBatchSingleIterationWithKEqualsN) {
  const Matrix X = gaussian(7, 3, 2);
  const Codebook cb = train_minibatch_kmeans(X, 7, 7, 1, 5);
  std::vector<bool> used(7, false);
  for (int c = 0; c < 7; ++c) {
    bool found = false;
    for (int r = 0; r < 7; ++r) {
      if (!used[static_cast<std::size_t>(r)] && cb.centers.row(c) == X.row(r)) {
        used[static_cast<std::size_t>(r)] = true;
        found = true;
        break;
      }
    }
    EXPECT_TRUE(found) << "center " << c << " is not an input row";
  }
}

TEST(MiniBatchKmeans, Deterministic) {
  const Matrix X = gaussian(500, 4, 9);
  const Codebook a = train_minibatch_kmeans(X, 8, 32, 100, 123);
  const Codebook b = train_minibatch_kmeans(X, 8, 32, 100, 123);
  EXPECT_EQ(a.centers, b.centers);
  EXPECT_EQ(a.inertia, b.inertia);
  const Codebook c = train_minibatch_kmeans(X, 8, 32, 100, 124);
  EXPECT_NE(a.centers, c.centers);
}

TEST(MiniBatchKmeans, InitialCentersAreDistinctRows) {
  Matrix X = gaussian(40, 2, 3);
  for (int r = 20; r < 40; ++r) X.row(r) = X.row(0);  // half the rows duplicate row 0
  const Codebook cb = train_minibatch_kmeans(X, 10, 40, 1, 8);
  for (int a = 0; a < 10; ++a) {
    for (int b = a + 1; b < 10; ++b) EXPECT_NE(cb.centers.row(a), cb.centers.row(b));
  }
}

TEST(MiniBatchKmeans, FullBatchInertiaNonIncreasing) {
  const Matrix X = gaussian(300, 3, 12);
  std::vector<double> inertia;
  MiniBatchOptions opts;
  opts.k = 6;
  opts.batch_size = 300;
  opts.iterations = 25;
  opts.seed = 3;
  train_minibatch_kmeans(X, opts, [&](int, const Matrix& centers) {
    double s = 0.0;
    for (int r = 0; r < X.rows(); ++r) {
      const int k = oracle::nearest(centers, X.row(r).transpose());
      s += (X.row(r) - centers.row(k)).squaredNorm();
    }
    inertia.push_back(s);
  });
  ASSERT_EQ(inertia.size(), 25U);
  for (std::size_t i = 1; i < inertia.size(); ++i) {
    EXPECT_LE(inertia[i], inertia[i - 1] * (1.0 + 1e-12)) << "iteration " << i + 1;
  }
}

TEST(MiniBatchKmeans, InertiaRecordedOnEvalBatch) {
  const Matrix X = gaussian(200, 2, 5);
  MiniBatchOptions opts;
  opts.k = 4;
  opts.batch_size = 200;
  opts.iterations = 10;
  opts.seed = 1;
  opts.eval_batch_size = 200;
  const Codebook cb = train_minibatch_kmeans(X, opts);
  double s = 0.0;
  for (int r = 0; r < X.rows(); ++r) {
    s += (X.row(r) - cb.centers.row(oracle::nearest(cb.centers, X.row(r).transpose()))).squaredNorm();
  }
  EXPECT_NEAR(cb.inertia, s / 200.0, 1e-12);
}

TEST(MiniBatchKmeans, DefaultIterationsScaleWithK) {
  const Matrix X = gaussian(50, 2, 5);
  int calls = 0;
  MiniBatchOptions opts;
  opts.k = 2;
  opts.batch_size = 8;
  opts.seed = 0;
  train_minibatch_kmeans(X, opts, [&](int, const Matrix&) { ++calls; });
  EXPECT_EQ(calls, kIterationsPerCenter * 2);
}

TEST(MiniBatchKmeans, Preconditions) {
  const Matrix X = gaussian(5, 2, 1);
  EXPECT_THROW(train_minibatch_kmeans(X, 6, 2, 1, 0), PreconditionError);
  EXPECT_THROW(train_minibatch_kmeans(X, 0, 2, 1, 0), PreconditionError);
  EXPECT_THROW(train_minibatch_kmeans(X, 2, 0, 1, 0), PreconditionError);
  Matrix bad = X;
  bad(0, 0) = INFINITY;
  EXPECT_THROW(train_minibatch_kmeans(bad, 2, 2, 1, 0), NumericError);
}

TEST(MiniBatchKmeans, DeadCentersAreReseeded) {
  // One far outlier initial center wins nothing; after an epoch it moves.
  Matrix X(101, 1);
  for (int i = 0; i < 100; ++i) X(i, 0) = (i % 2 == 0) ? -1.0 - 0.001 * i : 1.0 + 0.001 * i;
  X(100, 0) = 1000.0;
  Codebook cb;
  bool moved = false;
  for (std::uint64_t seed = 0; seed < 50 && !moved; ++seed) {
    MiniBatchOptions opts;
    opts.k = 3;
    opts.batch_size = 10;
    opts.iterations = 60;
    opts.seed = seed;
    cb = train_minibatch_kmeans(X, opts);
    // Every center ends up holding some data within the bulk or the outlier.
    int near_bulk = 0;
    for (int c = 0; c < 3; ++c) near_bulk += std::abs(cb.centers(c, 0)) < 2.0 ? 1 : 0;
    moved = near_bulk >= 2;
  }
  EXPECT_TRUE(moved);
}

TEST(AssignNearest, Examples) {
  Codebook cb;
  cb.centers.resize(2, 2);
  cb.centers << 0.0, 0.0, 10.0, 10.0;
  EXPECT_EQ(assign_nearest(cb, Vector((Vector(2) << 1.0, 1.0).finished())), 0);
  EXPECT_EQ(assign_nearest(cb, Vector((Vector(2) << 5.0, 5.0).finished())), 0);
  EXPECT_EQ(assign_nearest(cb, Vector((Vector(2) << 6.0, 5.0).finished())), 1);
  EXPECT_THROW(assign_nearest(cb, Vector(Vector::Zero(3))), PreconditionError);
}

TEST(AssignNearest, MatchesExhaustiveScan) {
  Codebook cb;
  cb.centers = gaussian(16, 5, 31);
  const Matrix X = gaussian(1000, 5, 32);
  for (int r = 0; r < 1000; ++r) {
    const Vector x = X.row(r).transpose();
    ASSERT_EQ(assign_nearest(cb, x), oracle::nearest(cb.centers, x)) << "row " << r;
  }
}

}  // namespace
}  // namespace wenc
