#pragma once

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "wenc/codebook.hpp"
#include "wenc/error.hpp"
#include "wenc/numerics.hpp"

namespace wenc {

// Local descriptors of one document, one descriptor per row.
struct DescriptorSet {
  Matrix data;
  std::string doc_id;
  std::string writer_id;

  int size() const { return static_cast<int>(data.rows()); }
  int dim() const { return static_cast<int>(data.cols()); }
};

enum class EmbeddingKind { kVlad, kTemb };

inline std::string_view to_string(EmbeddingKind kind) {
  return kind == EmbeddingKind::kVlad ? "vlad" : "temb";
}

inline EmbeddingKind parse_embedding_kind(std::string_view s) {
  if (s == "vlad") return EmbeddingKind::kVlad;
  if (s == "temb") return EmbeddingKind::kTemb;
  throw ConfigError("unknown embedding '" + std::string(s) + "'");
}

// Per-descriptor embeddings as columns of `phi`. The embedding space is laid
// out as `blocks` consecutive components of `component_dim` entries each.
struct EmbeddedSet {
  Matrix phi;
  int blocks = 0;
  int component_dim = 0;
  EmbeddingKind kind = EmbeddingKind::kVlad;

  int size() const { return static_cast<int>(phi.cols()); }
  int dim() const { return static_cast<int>(phi.rows()); }
};

enum class LcsVariant { kWhiten, kPlusPlus };

inline std::string_view to_string(LcsVariant v) {
  return v == LcsVariant::kWhiten ? "whiten" : "plusplus";
}

inline LcsVariant parse_lcs_variant(std::string_view s) {
  if (s == "whiten" || s == "lcs_whiten") return LcsVariant::kWhiten;
  if (s == "plusplus" || s == "lcs_plus_plus" || s == "++") return LcsVariant::kPlusPlus;
  throw ConfigError("unknown LCS variant '" + std::string(s) + "'");
}

// One whitening per codebook cluster, applied to that cluster's residuals.
struct LcsTransforms {
  std::vector<WhiteningTransform> per_cluster;
  LcsVariant variant = LcsVariant::kWhiten;

  int output_dim() const {
    return per_cluster.empty() ? 0 : per_cluster.front().output_dim();
  }
};

namespace detail {

inline void check_descriptor_dim(const Codebook& cb, const Matrix& X,
                                 const char* op) {
  require(X.cols() == cb.dim(),
          std::string(op) + ": descriptor dimension " + std::to_string(X.cols()) +
              " does not match codebook dimension " + std::to_string(cb.dim()));
}

// Identity-like transform for clusters with too little data. The LCS++
// variant still drops the leading coordinate so every block has the same
// size.
inline WhiteningTransform degenerate_lcs_transform(int dim, LcsVariant variant) {
  WhiteningTransform t = WhiteningTransform::identity(dim);
  if (variant == LcsVariant::kPlusPlus) {
    t.rotation = Matrix::Identity(dim, dim).bottomRows(dim - 1);
    t.scale = Vector::Ones(dim - 1);
    t.eigenvalues = Vector::Ones(dim - 1);
    t.dropped_leading = 1;
  } else {
    t.mode = WhiteningMode::kPcaWhiten;
  }
  return t;
}

}  // namespace detail

// Hard-assignment VLAD: the residual to the nearest center is written into
// that center's block, everything else is zero. With residual_normalize the
// residual is L2-normalized first; with lcs the cluster's transform is then
// applied (LCS++ shrinks blocks to D_l - 1).
inline EmbeddedSet embed_vlad(const Codebook& cb, const Matrix& X,
                              bool residual_normalize,
                              const LcsTransforms* lcs = nullptr) {
  detail::check_descriptor_dim(cb, X, "embed_vlad");
  if (lcs) {
    require(static_cast<int>(lcs->per_cluster.size()) == cb.size(),
            "embed_vlad: LCS transform count does not match codebook size");
  }
  EmbeddedSet out;
  out.kind = EmbeddingKind::kVlad;
  out.blocks = cb.size();
  out.component_dim = lcs ? lcs->output_dim() : cb.dim();
  out.phi = Matrix::Zero(static_cast<Eigen::Index>(out.blocks) * out.component_dim,
                         X.rows());
  for (Eigen::Index t = 0; t < X.rows(); ++t) {
    const Vector x = X.row(t).transpose();
    const int k = assign_nearest(cb, x);
    Vector residual = x - cb.centers.row(k).transpose();
    if (residual_normalize) residual = l2_normalize(residual);
    if (lcs) residual = apply_whitening(lcs->per_cluster[static_cast<std::size_t>(k)], residual);
    out.phi.block(static_cast<Eigen::Index>(k) * out.component_dim, t,
                  out.component_dim, 1) = residual;
  }
  return out;
}

// Concatenated normalized residuals to every center, before any whitening or
// global normalization. Returns one row per descriptor.
inline Matrix temb_raw(const Codebook& cb, const Matrix& X) {
  detail::check_descriptor_dim(cb, X, "embed_temb");
  const int d = cb.dim();
  Matrix raw(X.rows(), static_cast<Eigen::Index>(cb.size()) * d);
  for (Eigen::Index t = 0; t < X.rows(); ++t) {
    for (int k = 0; k < cb.size(); ++k) {
      const Vector residual = (X.row(t) - cb.centers.row(k)).transpose();
      raw.block(t, static_cast<Eigen::Index>(k) * d, 1, d) =
          l2_normalize(residual).transpose();
    }
  }
  return raw;
}

// Triangulation embedding. Every center contributes a unit-norm residual
// direction (zero when x coincides with the center). The optional whitening
// acts on the full concatenated vector; the result is then L2-normalized.
// A whitened embedding has no block structure and is reported as one block.
inline EmbeddedSet embed_temb(const Codebook& cb, const Matrix& X,
                              const WhiteningTransform* whitening = nullptr) {
  Matrix raw = temb_raw(cb, X);
  EmbeddedSet out;
  out.kind = EmbeddingKind::kTemb;
  if (whitening) {
    raw = apply_whitening(*whitening, raw);
    out.blocks = 1;
    out.component_dim = static_cast<int>(raw.cols());
  } else {
    out.blocks = cb.size();
    out.component_dim = cb.dim();
  }
  out.phi.resize(raw.cols(), raw.rows());
  if (whitening) {
    for (Eigen::Index t = 0; t < raw.rows(); ++t) {
      out.phi.col(t) = l2_normalize(raw.row(t).transpose());
    }
    return out;
  }
  // Blocks are unit or zero, so the norm is sqrt(#nonzero blocks).
  const int d = cb.dim();
  for (Eigen::Index t = 0; t < raw.rows(); ++t) {
    int nonzero = 0;
    for (int k = 0; k < cb.size(); ++k) {
      if (!raw.block(t, static_cast<Eigen::Index>(k) * d, 1, d).isZero(0.0)) ++nonzero;
    }
    out.phi.col(t) = raw.row(t).transpose();
    if (nonzero > 0) out.phi.col(t) /= std::sqrt(static_cast<double>(nonzero));
  }
  return out;
}

// Per-cluster PCA of L2-normalized training residuals. kWhiten keeps every
// dimension and whitens; kPlusPlus rotates and discards the leading
// component. Clusters with fewer than two residuals get an identity map.
inline LcsTransforms fit_lcs(const Codebook& cb, const Matrix& X_train,
                             LcsVariant variant) {
  detail::check_descriptor_dim(cb, X_train, "fit_lcs");
  const int d = cb.dim();
  require(variant != LcsVariant::kPlusPlus || d >= 2,
          "LCS++ needs descriptors of dimension >= 2");
  std::vector<std::vector<Eigen::Index>> members(static_cast<std::size_t>(cb.size()));
  std::vector<Vector> residuals(static_cast<std::size_t>(X_train.rows()));
  for (Eigen::Index t = 0; t < X_train.rows(); ++t) {
    const Vector x = X_train.row(t).transpose();
    const int k = assign_nearest(cb, x);
    residuals[static_cast<std::size_t>(t)] = l2_normalize(x - cb.centers.row(k).transpose());
    members[static_cast<std::size_t>(k)].push_back(t);
  }

  LcsTransforms out;
  out.variant = variant;
  out.per_cluster.reserve(members.size());
  for (const auto& idx : members) {
    if (idx.size() < 2) {
      out.per_cluster.push_back(detail::degenerate_lcs_transform(d, variant));
      continue;
    }
    Matrix R(static_cast<Eigen::Index>(idx.size()), d);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      R.row(static_cast<Eigen::Index>(i)) =
          residuals[static_cast<std::size_t>(idx[i])].transpose();
    }
    WhiteningOptions opts;
    if (variant == LcsVariant::kWhiten) {
      opts.mode = WhiteningMode::kPcaWhiten;
    } else {
      opts.mode = WhiteningMode::kPcaRotateOnly;
      opts.dropped_leading = 1;
    }
    out.per_cluster.push_back(fit_whitening(R, opts));
  }
  return out;
}

// PCA whitening of raw triangulation embeddings with the D_l leading
// eigen-directions removed.
inline WhiteningTransform fit_temb_whitening(const Codebook& cb,
                                             const Matrix& X_train) {
  require(X_train.rows() >= 2, "fit_temb_whitening needs at least 2 descriptors");
  require(cb.size() >= 2,
          "T-Emb whitening drops D_l directions and needs K >= 2");
  WhiteningOptions opts;
  opts.mode = WhiteningMode::kPcaWhiten;
  opts.dropped_leading = cb.dim();
  return fit_whitening(temb_raw(cb, X_train), opts);
}

}  // namespace wenc
