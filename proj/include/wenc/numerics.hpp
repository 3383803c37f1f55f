#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "wenc/error.hpp"

namespace wenc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline bool all_finite(const Eigen::Ref<const Matrix>& m) {
  return m.allFinite();
}

enum class WhiteningMode { kPcaWhiten, kPcaRotateOnly, kZcaWhiten };

inline std::string_view to_string(WhiteningMode mode) {
  switch (mode) {
    case WhiteningMode::kPcaWhiten:
      return "pca_whiten";
    case WhiteningMode::kPcaRotateOnly:
      return "pca_rotate_only";
    case WhiteningMode::kZcaWhiten:
      return "zca_whiten";
  }
  return "?";
}

inline WhiteningMode parse_whitening_mode(std::string_view s) {
  if (s == "pca_whiten") return WhiteningMode::kPcaWhiten;
  if (s == "pca_rotate_only") return WhiteningMode::kPcaRotateOnly;
  if (s == "zca_whiten") return WhiteningMode::kZcaWhiten;
  throw ConfigError("unknown whitening mode '" + std::string(s) + "'");
}

// Affine decorrelation y = scale .* (rotation * (x - mean)), followed by
// rotation^T for ZCA. Rows of `rotation` are eigenvectors of the training
// covariance in order of decreasing eigenvalue, restricted to the kept range.
struct WhiteningTransform {
  Vector mean;
  Matrix rotation;
  Vector scale;
  WhiteningMode mode = WhiteningMode::kPcaWhiten;
  double eps = 0.0;
  int dropped_leading = 0;
  int dropped_trailing = 0;
  // Eigenvalues of the kept directions, descending. Informational.
  Vector eigenvalues;

  int input_dim() const { return static_cast<int>(mean.size()); }
  int output_dim() const {
    return mode == WhiteningMode::kZcaWhiten
               ? static_cast<int>(rotation.cols())
               : static_cast<int>(rotation.rows());
  }

  // Linear part of the map as a dense output_dim x input_dim matrix.
  Matrix linear_map() const {
    Matrix scaled = scale.asDiagonal() * rotation;
    if (mode == WhiteningMode::kZcaWhiten) return rotation.transpose() * scaled;
    return scaled;
  }

  static WhiteningTransform identity(int dim) {
    WhiteningTransform t;
    t.mean = Vector::Zero(dim);
    t.rotation = Matrix::Identity(dim, dim);
    t.scale = Vector::Ones(dim);
    t.mode = WhiteningMode::kPcaRotateOnly;
    t.eigenvalues = Vector::Ones(dim);
    return t;
  }
};

struct WhiteningOptions {
  WhiteningMode mode = WhiteningMode::kPcaWhiten;
  // Eigenvalue floor added before taking 1/sqrt. Defaults to
  // 1e-10 * (largest eigenvalue), or 1e-10 when the data has zero variance.
  std::optional<double> eps;
  int dropped_leading = 0;
  int dropped_trailing = 0;
};

inline constexpr double kDefaultRelativeEps = 1e-10;

namespace detail {

// Flips each row so that its largest-magnitude entry is positive. The first
// such entry wins on exact magnitude ties.
inline void canonicalize_signs(Matrix& rows) {
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    Eigen::Index arg = 0;
    double best = -1.0;
    for (Eigen::Index c = 0; c < rows.cols(); ++c) {
      const double a = std::abs(rows(r, c));
      if (a > best) {
        best = a;
        arg = c;
      }
    }
    if (rows(r, arg) < 0.0) rows.row(r) *= -1.0;
  }
}

}  // namespace detail

// Sample covariance (normalized by n - 1) of the rows of X.
inline Matrix sample_covariance(const Matrix& X, const Vector& mean) {
  const Matrix centered = X.rowwise() - mean.transpose();
  return (centered.transpose() * centered) /
         static_cast<double>(X.rows() - 1);
}

inline WhiteningTransform fit_whitening(const Matrix& X,
                                        const WhiteningOptions& opts = {}) {
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  require(n >= 2, "fit_whitening needs at least 2 samples, got " +
                      std::to_string(n));
  require(d >= 1, "fit_whitening needs at least one dimension");
  require(!opts.eps || *opts.eps >= 0.0, "whitening eps must be >= 0");
  require(opts.dropped_leading >= 0 && opts.dropped_trailing >= 0,
          "dropped dimension counts must be >= 0");
  require(opts.dropped_leading + opts.dropped_trailing < d,
          "cannot drop all " + std::to_string(d) + " dimensions");
  require(opts.mode != WhiteningMode::kZcaWhiten ||
              (opts.dropped_leading == 0 && opts.dropped_trailing == 0),
          "zca whitening keeps every dimension");
  if (!all_finite(X)) throw NumericError("fit_whitening: non-finite input");

  WhiteningTransform t;
  t.mode = opts.mode;
  t.dropped_leading = opts.dropped_leading;
  t.dropped_trailing = opts.dropped_trailing;
  t.mean = X.colwise().mean().transpose();
  const Matrix cov = sample_covariance(X, t.mean);

  Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
  if (solver.info() != Eigen::Success || !solver.eigenvalues().allFinite()) {
    throw NumericError("fit_whitening: eigendecomposition failed");
  }
  // Eigen returns ascending eigenvalues; reorder descending, stable in the
  // solver's index order for ties.
  const Vector& ascending = solver.eigenvalues();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(d));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::reverse(order.begin(), order.end());
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) {
                     return ascending(a) > ascending(b);
                   });

  const double largest = std::max(ascending(order.front()), 0.0);
  t.eps = opts.eps.value_or(largest > 0.0 ? kDefaultRelativeEps * largest
                                          : kDefaultRelativeEps);

  const Eigen::Index kept = d - opts.dropped_leading - opts.dropped_trailing;
  t.rotation.resize(kept, d);
  t.eigenvalues.resize(kept);
  for (Eigen::Index r = 0; r < kept; ++r) {
    const Eigen::Index src = order[static_cast<std::size_t>(r + opts.dropped_leading)];
    t.rotation.row(r) = solver.eigenvectors().col(src).transpose();
    t.eigenvalues(r) = std::max(ascending(src), 0.0);
  }
  detail::canonicalize_signs(t.rotation);

  if (opts.mode == WhiteningMode::kPcaRotateOnly) {
    t.scale = Vector::Ones(kept);
  } else {
    t.scale = (t.eigenvalues.array() + t.eps).rsqrt().matrix();
    if (!t.scale.allFinite()) {
      throw NumericError(
          "fit_whitening: zero eigenvalue with eps = 0 gives infinite scale");
    }
  }
  return t;
}

// Maps every row of X; returns n x output_dim.
inline Matrix apply_whitening(const WhiteningTransform& t, const Matrix& X) {
  require(X.cols() == t.input_dim(),
          "apply_whitening: input has " + std::to_string(X.cols()) +
              " columns, transform expects " + std::to_string(t.input_dim()));
  const Matrix centered = X.rowwise() - t.mean.transpose();
  Matrix projected = (centered * t.rotation.transpose()) * t.scale.asDiagonal();
  if (t.mode == WhiteningMode::kZcaWhiten) return projected * t.rotation;
  return projected;
}

inline Vector apply_whitening(const WhiteningTransform& t, const Vector& x) {
  require(x.size() == t.input_dim(),
          "apply_whitening: vector has dimension " + std::to_string(x.size()) +
              ", transform expects " + std::to_string(t.input_dim()));
  Vector projected = t.scale.cwiseProduct(t.rotation * (x - t.mean));
  if (t.mode == WhiteningMode::kZcaWhiten) {
    return t.rotation.transpose() * projected;
  }
  return projected;
}

struct CgdOptions {
  double tol = 1e-6;
  int max_iter = 1000;
};

struct CgdResult {
  Vector x;
  int iterations = 0;
  // Final ||A x - b||, recomputed from scratch.
  double residual_norm = 0.0;
  bool converged = false;
};

// Conjugate gradients for a symmetric positive (semi-)definite operator given
// as a callable Vector -> Vector. Stops once ||A x - b|| <= tol * ||b||.
template <typename LinearOp>
CgdResult cgd_solve(LinearOp&& apply_a, const Vector& b, const CgdOptions& opts,
                    const Vector& x0) {
  require(opts.tol > 0.0, "cgd tol must be > 0");
  require(opts.max_iter >= 1, "cgd max_iter must be >= 1");
  require(x0.size() == b.size(), "cgd initial guess has wrong dimension");
  if (!b.allFinite() || !x0.allFinite()) {
    throw NumericError("cgd_solve: non-finite right-hand side");
  }

  CgdResult out;
  const double b_norm = b.norm();
  if (b_norm == 0.0) {
    out.x = Vector::Zero(b.size());
    out.converged = true;
    return out;
  }
  const double target = opts.tol * b_norm;

  out.x = x0;
  Vector r = b - apply_a(out.x);
  double rr = r.squaredNorm();
  if (std::sqrt(rr) <= target) {
    out.residual_norm = std::sqrt(rr);
    out.converged = true;
    return out;
  }
  Vector p = r;
  for (int it = 1; it <= opts.max_iter; ++it) {
    const Vector ap = apply_a(p);
    const double pap = p.dot(ap);
    if (!std::isfinite(pap)) throw NumericError("cgd_solve: non-finite iterate");
    out.iterations = it;
    if (pap <= 0.0) break;  // search direction in the null space
    const double alpha = rr / pap;
    out.x.noalias() += alpha * p;
    r.noalias() -= alpha * ap;
    const double rr_next = r.squaredNorm();
    if (std::sqrt(rr_next) <= target) {
      rr = rr_next;
      break;
    }
    p = r + (rr_next / rr) * p;
    rr = rr_next;
  }
  if (!out.x.allFinite()) throw NumericError("cgd_solve: non-finite solution");
  out.residual_norm = (apply_a(out.x) - b).norm();
  out.converged = out.residual_norm <= target * (1.0 + 1e-8) ||
                  std::sqrt(rr) <= target;
  return out;
}

template <typename LinearOp>
CgdResult cgd_solve(LinearOp&& apply_a, const Vector& b,
                    const CgdOptions& opts = {}) {
  return cgd_solve(std::forward<LinearOp>(apply_a), b, opts,
                   Vector::Zero(b.size()));
}

inline Vector l2_normalize(const Vector& v) {
  if (!v.allFinite()) throw NumericError("l2_normalize: non-finite input");
  const double norm = v.norm();
  if (norm == 0.0) return v;
  return v / norm;
}

// Cosine similarity; 0 when either side is the zero vector.
inline double cosine_similarity(const Vector& a, const Vector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

}  // namespace wenc
