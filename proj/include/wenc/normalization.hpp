#pragma once

#include <cmath>
#include <memory>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "wenc/aggregation.hpp"
#include "wenc/error.hpp"
#include "wenc/numerics.hpp"

namespace wenc {

inline constexpr double kDefaultPower = 0.5;

// Signed power: sign(v) * |v|^p per element.
inline Vector power_normalize(const Vector& psi, double p = kDefaultPower) {
  require(p > 0.0 && p <= 1.0, "power exponent must be in (0, 1]");
  if (!psi.allFinite()) throw NumericError("power_normalize: non-finite input");
  Vector out(psi.size());
  for (Eigen::Index i = 0; i < psi.size(); ++i) {
    const double v = psi(i);
    out(i) = v == 0.0 ? 0.0 : std::copysign(std::pow(std::abs(v), p), v);
  }
  return out;
}

inline Vector intra_normalize(const Vector& psi, int blocks, int component_dim) {
  require(blocks >= 1 && component_dim >= 1 &&
              psi.size() == static_cast<Eigen::Index>(blocks) * component_dim,
          "intra_normalize: length " + std::to_string(psi.size()) +
              " is not " + std::to_string(blocks) + " x " +
              std::to_string(component_dim));
  Vector out(psi.size());
  for (int k = 0; k < blocks; ++k) {
    const Eigen::Index off = static_cast<Eigen::Index>(k) * component_dim;
    out.segment(off, component_dim) =
        l2_normalize(psi.segment(off, component_dim));
  }
  return out;
}

// PCA rotation about the training mean followed by the signed power.
inline Vector rotation_normalize(const Vector& psi, const WhiteningTransform& rot,
                                 double p = kDefaultPower) {
  require(psi.size() == rot.input_dim(),
          "rotation_normalize: dimension mismatch");
  return power_normalize(rot.rotation * (psi - rot.mean), p);
}

struct NormalizationStep {
  enum class Kind { kPower, kIntra, kRotation, kGlobalPcaWhiten, kL2 };

  Kind kind = Kind::kL2;
  double p = kDefaultPower;
  // Fitted on training descriptors; only for kRotation and kGlobalPcaWhiten.
  std::shared_ptr<const WhiteningTransform> transform;

  bool needs_fit() const {
    return kind == Kind::kRotation || kind == Kind::kGlobalPcaWhiten;
  }

  static NormalizationStep power(double p = kDefaultPower) {
    return {Kind::kPower, p, nullptr};
  }
  static NormalizationStep intra() { return {Kind::kIntra, kDefaultPower, nullptr}; }
  static NormalizationStep l2() { return {Kind::kL2, kDefaultPower, nullptr}; }
  static NormalizationStep rotation(std::shared_ptr<const WhiteningTransform> t,
                                    double p = kDefaultPower) {
    return {Kind::kRotation, p, std::move(t)};
  }
  static NormalizationStep global_pca_whiten(
      std::shared_ptr<const WhiteningTransform> t) {
    return {Kind::kGlobalPcaWhiten, kDefaultPower, std::move(t)};
  }
};

// Canonical textual form used in configs and provenance, e.g. "power(0.5)".
inline std::string step_name(const NormalizationStep& s) {
  using K = NormalizationStep::Kind;
  std::ostringstream os;
  os.precision(17);
  switch (s.kind) {
    case K::kPower:
      os << "power(" << s.p << ")";
      break;
    case K::kIntra:
      os << "intra";
      break;
    case K::kRotation:
      os << "rotation(" << s.p << ")";
      break;
    case K::kGlobalPcaWhiten:
      os << "pca_whiten";
      break;
    case K::kL2:
      os << "l2";
      break;
  }
  return os.str();
}

// Parses one step token: power, power(0.5), intra, rotation, rotation(0.5),
// pca_whiten, l2. Fitted transforms are attached later.
inline NormalizationStep parse_step(std::string_view token) {
  std::string name(token);
  double p = kDefaultPower;
  if (const auto open = name.find('('); open != std::string::npos) {
    if (name.back() != ')') throw ConfigError("malformed step '" + name + "'");
    const std::string arg = name.substr(open + 1, name.size() - open - 2);
    try {
      std::size_t used = 0;
      p = std::stod(arg, &used);
      if (used != arg.size()) throw std::invalid_argument(arg);
    } catch (const std::exception&) {
      throw ConfigError("bad exponent in step '" + name + "'");
    }
    name = name.substr(0, open);
    if (name != "power" && name != "rotation") {
      throw ConfigError("step '" + name + "' takes no argument");
    }
    if (!(p > 0.0 && p <= 1.0)) {
      throw ConfigError("exponent in step '" + std::string(token) +
                        "' must be in (0, 1]");
    }
  }
  using K = NormalizationStep::Kind;
  if (name == "power" || name == "ssr") return {K::kPower, p, nullptr};
  if (name == "intra") return {K::kIntra, p, nullptr};
  if (name == "rotation") return {K::kRotation, p, nullptr};
  if (name == "pca_whiten") return {K::kGlobalPcaWhiten, p, nullptr};
  if (name == "l2") return {K::kL2, p, nullptr};
  throw ConfigError("unknown normalization step '" + name + "'");
}

struct NormalizationChain {
  std::vector<NormalizationStep> steps;

  // At most one step may carry a fitted transform.
  void validate() const {
    int fitted = 0;
    for (const auto& s : steps) fitted += s.needs_fit() ? 1 : 0;
    if (fitted > 1) {
      throw ConfigError(
          "normalization chain may hold at most one rotation or pca_whiten step");
    }
  }

  // Index of the step that needs a fitted transform, or -1.
  int fitted_step() const {
    for (std::size_t i = 0; i < steps.size(); ++i) {
      if (steps[i].needs_fit()) return static_cast<int>(i);
    }
    return -1;
  }

  std::string describe() const {
    std::string out;
    for (const auto& s : steps) {
      if (!out.empty()) out += ',';
      out += step_name(s);
    }
    return out;
  }

  static NormalizationChain ssr_l2() {
    return {{NormalizationStep::power(kDefaultPower), NormalizationStep::l2()}};
  }
};

inline GlobalDescriptor apply_step(const NormalizationStep& step,
                                   GlobalDescriptor g) {
  using K = NormalizationStep::Kind;
  switch (step.kind) {
    case K::kPower:
      g.psi = power_normalize(g.psi, step.p);
      break;
    case K::kIntra:
      g.psi = intra_normalize(g.psi, g.blocks, g.component_dim);
      break;
    case K::kL2:
      g.psi = l2_normalize(g.psi);
      break;
    case K::kRotation:
    case K::kGlobalPcaWhiten: {
      require(step.transform != nullptr,
              "normalization step '" + step_name(step) + "' has not been fitted");
      g.psi = step.kind == K::kRotation
                  ? rotation_normalize(g.psi, *step.transform, step.p)
                  : apply_whitening(*step.transform, g.psi);
      g.blocks = 1;
      g.component_dim = static_cast<int>(g.psi.size());
      break;
    }
  }
  g.provenance.normalizations.push_back(step_name(step));
  return g;
}

// Applies steps [first, last) in order.
inline GlobalDescriptor apply_steps(const NormalizationChain& chain,
                                    GlobalDescriptor g, std::size_t first,
                                    std::size_t last) {
  for (std::size_t i = first; i < last && i < chain.steps.size(); ++i) {
    g = apply_step(chain.steps[i], std::move(g));
  }
  return g;
}

inline GlobalDescriptor apply_chain(const NormalizationChain& chain,
                                    GlobalDescriptor g) {
  chain.validate();
  return apply_steps(chain, std::move(g), 0, chain.steps.size());
}

// Fits the transform for a rotation or pca_whiten step from training
// descriptors (one per row).
inline WhiteningTransform fit_chain_transform(const NormalizationStep& step,
                                              const Matrix& train) {
  require(step.needs_fit(), "step '" + step_name(step) + "' has nothing to fit");
  WhiteningOptions opts;
  opts.mode = step.kind == NormalizationStep::Kind::kRotation
                  ? WhiteningMode::kPcaRotateOnly
                  : WhiteningMode::kPcaWhiten;
  return fit_whitening(train, opts);
}

// Global descriptors of one encoding run: one row per document.
struct RunEncodings {
  std::vector<std::string> doc_ids;
  Matrix encodings;
};

namespace detail {
inline void check_same_documents(const std::vector<RunEncodings>& runs) {
  require(!runs.empty(), "joint whitening needs at least one run");
  const auto& ref = runs.front();
  require(static_cast<std::size_t>(ref.encodings.rows()) == ref.doc_ids.size(),
          "run encodings and document ids disagree in length");
  for (const auto& r : runs) {
    require(r.doc_ids == ref.doc_ids,
            "joint whitening: runs cover different documents or order");
    require(r.encodings.rows() == ref.encodings.rows(),
            "joint whitening: runs have different document counts");
  }
}
}  // namespace detail

// Per-document concatenation of the runs in the given order.
inline Matrix concatenate_runs(const std::vector<RunEncodings>& runs) {
  detail::check_same_documents(runs);
  Eigen::Index cols = 0;
  for (const auto& r : runs) cols += r.encodings.cols();
  Matrix out(runs.front().encodings.rows(), cols);
  Eigen::Index off = 0;
  for (const auto& r : runs) {
    out.middleCols(off, r.encodings.cols()) = r.encodings;
    off += r.encodings.cols();
  }
  return out;
}

inline WhiteningTransform fit_joint_pca_whitening(
    const std::vector<RunEncodings>& runs, const WhiteningOptions& opts = {}) {
  return fit_whitening(concatenate_runs(runs), opts);
}

inline Matrix apply_joint_pca_whitening(const WhiteningTransform& t,
                                        const std::vector<RunEncodings>& runs) {
  return apply_whitening(t, concatenate_runs(runs));
}

}  // namespace wenc
