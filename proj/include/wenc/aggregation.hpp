#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "wenc/embedding.hpp"
#include "wenc/error.hpp"
#include "wenc/numerics.hpp"

namespace wenc {

struct Provenance {
  std::string embedding;
  std::string pooling;
  double lambda = 0.0;
  std::vector<std::string> normalizations;
  std::uint64_t codebook_seed = 0;
};

// Aggregated representation of one document.
struct GlobalDescriptor {
  Vector psi;
  int blocks = 1;
  int component_dim = 0;
  Provenance provenance;

  int dim() const { return static_cast<int>(psi.size()); }
};

enum class PoolingKind { kSum, kGmp };

inline std::string_view to_string(PoolingKind kind) {
  return kind == PoolingKind::kSum ? "sum" : "gmp";
}

inline PoolingKind parse_pooling_kind(std::string_view s) {
  if (s == "sum") return PoolingKind::kSum;
  if (s == "gmp") return PoolingKind::kGmp;
  throw ConfigError("unknown pooling '" + std::string(s) + "'");
}

inline constexpr double kGmpDefaultLambda = 1000.0;
// Regularization commonly recommended for GMP on image descriptors.
inline constexpr double kGmpUnitLambda = 1.0;

struct GmpOptions {
  double lambda = kGmpDefaultLambda;
  bool component_wise = false;
  CgdOptions cgd;
};

namespace detail {

inline GlobalDescriptor make_descriptor(const EmbeddedSet& e, Vector psi,
                                        PoolingKind kind, double lambda) {
  GlobalDescriptor g;
  g.psi = std::move(psi);
  g.blocks = e.blocks;
  g.component_dim = e.component_dim;
  g.provenance.embedding = std::string(to_string(e.kind));
  g.provenance.pooling = std::string(to_string(kind));
  g.provenance.lambda = kind == PoolingKind::kGmp ? lambda : 0.0;
  return g;
}

// Ridge solution argmin ||P^T xi - 1||^2 + lambda ||xi||^2 for the columns of
// P. All-zero columns do not affect xi and are dropped. With fewer columns
// than rows the dual system (P^T P + lambda I) beta = 1, xi = P beta is
// solved; otherwise the primal normal equations.
inline Vector solve_gmp_ridge(const Matrix& P, double lambda,
                              const CgdOptions& cgd, const char* label) {
  std::vector<Eigen::Index> keep;
  keep.reserve(static_cast<std::size_t>(P.cols()));
  for (Eigen::Index c = 0; c < P.cols(); ++c) {
    if (!P.col(c).isZero(0.0)) keep.push_back(c);
  }
  if (keep.empty()) return Vector::Zero(P.rows());
  Matrix phi(P.rows(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t i = 0; i < keep.size(); ++i) {
    phi.col(static_cast<Eigen::Index>(i)) = P.col(keep[i]);
  }
  const auto n = static_cast<double>(phi.cols());

  CgdResult res;
  Vector xi;
  if (phi.cols() < phi.rows()) {
    const Vector ones = Vector::Ones(phi.cols());
    const Vector beta0 = ones / (n + lambda);
    res = cgd_solve(
        [&](const Vector& v) -> Vector {
          Vector out = phi.transpose() * (phi * v);
          out += lambda * v;
          return out;
        },
        ones, cgd, beta0);
    xi = phi * res.x;
  } else {
    const Vector rhs = phi.rowwise().sum();
    // Warm start from the large-lambda limit.
    const Vector xi0 = rhs / (n + lambda);
    res = cgd_solve(
        [&](const Vector& v) -> Vector {
          Vector out = phi * (phi.transpose() * v);
          out += lambda * v;
          return out;
        },
        rhs, cgd, xi0);
    xi = std::move(res.x);
  }
  if (!res.converged) {
    std::ostringstream msg;
    msg << "GMP " << label << ": CGD stopped after " << res.iterations
        << " iterations with residual " << res.residual_norm;
    warn(msg.str());
  }
  return xi;
}

}  // namespace detail

inline GlobalDescriptor sum_pool(const EmbeddedSet& e) {
  require(e.size() >= 1, "sum_pool: empty embedding set");
  return detail::make_descriptor(e, e.phi.rowwise().sum(), PoolingKind::kSum, 0.0);
}

// Generalized max pooling with C = 1. Component-wise mode solves one ridge
// problem per block on that block's rows.
inline GlobalDescriptor gmp_pool(const EmbeddedSet& e, const GmpOptions& opts = {}) {
  require(e.size() >= 1, "gmp_pool: empty embedding set");
  require(std::isfinite(opts.lambda) && opts.lambda >= 0.0,
          "gmp lambda must be finite and >= 0");
  if (!all_finite(e.phi)) throw NumericError("gmp_pool: non-finite embeddings");
  Vector psi;
  if (!opts.component_wise || e.blocks <= 1) {
    psi = detail::solve_gmp_ridge(e.phi, opts.lambda, opts.cgd, "solve");
  } else {
    psi.resize(e.dim());
    for (int k = 0; k < e.blocks; ++k) {
      const Eigen::Index off = static_cast<Eigen::Index>(k) * e.component_dim;
      const std::string label = "block " + std::to_string(k);
      psi.segment(off, e.component_dim) = detail::solve_gmp_ridge(
          e.phi.middleRows(off, e.component_dim), opts.lambda, opts.cgd,
          label.c_str());
    }
  }
  return detail::make_descriptor(e, std::move(psi), PoolingKind::kGmp, opts.lambda);
}

inline GlobalDescriptor pool(const EmbeddedSet& e, PoolingKind kind,
                             const GmpOptions& opts = {}) {
  switch (kind) {
    case PoolingKind::kSum:
      return sum_pool(e);
    case PoolingKind::kGmp:
      return gmp_pool(e, opts);
  }
  throw ConfigError("unknown pooling kind");
}

inline GlobalDescriptor pool(const EmbeddedSet& e, std::string_view kind,
                             const GmpOptions& opts = {}) {
  return pool(e, parse_pooling_kind(kind), opts);
}

}  // namespace wenc
