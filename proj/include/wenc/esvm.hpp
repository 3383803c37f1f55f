#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "wenc/error.hpp"
#include "wenc/numerics.hpp"

namespace wenc {

// Linear exemplar SVM for one probe document.
struct EsvmModel {
  Vector weights;
  double bias = 0.0;
  double c_pos = 0.0;
  double c_neg = 0.0;
  std::string probe_id;
  // Primal objective at the returned (weights, bias).
  double objective = 0.0;
  int iterations = 0;
};

struct EsvmSolverOptions {
  // Stop when the maximal KKT violation drops below this.
  double tol = 1e-8;
  int max_iter = 1000000;
};

// 1/2 ||w||^2 + c_pos * hinge(1 - f(x+)) + c_neg * sum_j hinge(1 + f(x_j-)).
inline double esvm_objective(const Vector& w, double b, const Vector& positive,
                             const Matrix& negatives, double c_pos, double c_neg) {
  double obj = 0.5 * w.squaredNorm();
  obj += c_pos * std::max(0.0, 1.0 - (w.dot(positive) + b));
  const Vector neg_scores = negatives * w;
  for (Eigen::Index j = 0; j < neg_scores.size(); ++j) {
    obj += c_neg * std::max(0.0, 1.0 + neg_scores(j) + b);
  }
  return obj;
}

inline double score(const EsvmModel& model, const Vector& x) {
  require(x.size() == model.weights.size(),
          "esvm score: dimension " + std::to_string(x.size()) +
              " does not match model dimension " +
              std::to_string(model.weights.size()));
  return model.weights.dot(x) + model.bias;
}

// Trains exemplar SVMs against a fixed negative pool (rows of `negatives`).
// The pool's Gram matrix is computed once and shared by every probe.
//
// The dual with an unregularized bias carries the constraint
// sum_i y_i alpha_i = 0, so coordinates are updated in pairs chosen by
// second-order working-set selection. Pair selection is a deterministic
// function of the data; ties go to the lowest index.
class EsvmTrainer {
 public:
  explicit EsvmTrainer(Matrix negatives, EsvmSolverOptions opts = {})
      : negatives_(std::move(negatives)), opts_(opts) {
    require(negatives_.rows() >= 1, "ESVM needs at least one negative");
    if (!all_finite(negatives_)) throw NumericError("ESVM: non-finite negatives");
    gram_ = negatives_ * negatives_.transpose();
  }

  int negatives() const { return static_cast<int>(negatives_.rows()); }
  int dim() const { return static_cast<int>(negatives_.cols()); }
  const Matrix& negative_matrix() const { return negatives_; }

  EsvmModel train(const Vector& positive, double c_pos, double c_neg,
                  std::string probe_id = {}) const {
    require(positive.size() == negatives_.cols(),
            "ESVM: positive has dimension " + std::to_string(positive.size()) +
                ", negatives have " + std::to_string(negatives_.cols()));
    require(c_pos > 0.0 && c_neg > 0.0, "ESVM costs must be > 0");
    if (!positive.allFinite()) throw NumericError("ESVM: non-finite positive");

    const Eigen::Index m = negatives_.rows();
    const Eigen::Index l = m + 1;
    // Index 0 is the positive (y = +1), 1..m the negatives (y = -1).
    std::vector<double> y(static_cast<std::size_t>(l), -1.0);
    y[0] = 1.0;
    std::vector<double> cost(static_cast<std::size_t>(l), c_neg);
    cost[0] = c_pos;

    const Vector cross = negatives_ * positive;
    Matrix Q(l, l);
    Q(0, 0) = positive.squaredNorm();
    Q.block(1, 0, m, 1) = -cross;
    Q.block(0, 1, 1, m) = -cross.transpose();
    Q.block(1, 1, m, m) = gram_;

    std::vector<double> alpha(static_cast<std::size_t>(l), 0.0);
    std::vector<double> G(static_cast<std::size_t>(l), -1.0);

    auto at_upper = [&](std::size_t t) { return alpha[t] >= cost[t]; };
    auto at_lower = [&](std::size_t t) { return alpha[t] <= 0.0; };
    constexpr double kTau = 1e-12;

    int iter = 0;
    const auto ul = static_cast<std::size_t>(l);
    while (iter < opts_.max_iter) {
      // Maximal violating index i.
      double gmax = -std::numeric_limits<double>::infinity();
      std::size_t i = ul;
      for (std::size_t t = 0; t < ul; ++t) {
        const double v = y[t] > 0 ? (at_upper(t) ? -INFINITY : -G[t])
                                  : (at_lower(t) ? -INFINITY : G[t]);
        if (v > gmax) {
          gmax = v;
          i = t;
        }
      }
      if (i == ul) break;
      // Partner j by largest second-order objective decrease.
      double gmax2 = -std::numeric_limits<double>::infinity();
      double best_obj = std::numeric_limits<double>::infinity();
      std::size_t j = ul;
      const auto ei = static_cast<Eigen::Index>(i);
      for (std::size_t t = 0; t < ul; ++t) {
        const auto et = static_cast<Eigen::Index>(t);
        double grad_diff;
        double quad;
        if (y[t] > 0) {
          if (at_lower(t)) continue;
          gmax2 = std::max(gmax2, G[t]);
          grad_diff = gmax + G[t];
          quad = Q(ei, ei) + Q(et, et) - 2.0 * y[i] * Q(ei, et);
        } else {
          if (at_upper(t)) continue;
          gmax2 = std::max(gmax2, -G[t]);
          grad_diff = gmax - G[t];
          quad = Q(ei, ei) + Q(et, et) + 2.0 * y[i] * Q(ei, et);
        }
        if (grad_diff > 0.0) {
          const double obj = -(grad_diff * grad_diff) / (quad > 0.0 ? quad : kTau);
          if (obj < best_obj) {
            best_obj = obj;
            j = t;
          }
        }
      }
      if (gmax + gmax2 < opts_.tol || j == ul) break;
      ++iter;

      const auto ej = static_cast<Eigen::Index>(j);
      const double ci = cost[i];
      const double cj = cost[j];
      const double old_ai = alpha[i];
      const double old_aj = alpha[j];
      // Q already folds in the labels, so Q(i, j) = y_i y_j K_ij.
      if (y[i] != y[j]) {
        double quad = Q(ei, ei) + Q(ej, ej) + 2.0 * Q(ei, ej);
        if (quad <= 0.0) quad = kTau;
        const double delta = (-G[i] - G[j]) / quad;
        const double diff = alpha[i] - alpha[j];
        alpha[i] += delta;
        alpha[j] += delta;
        if (diff > 0.0) {
          if (alpha[j] < 0.0) {
            alpha[j] = 0.0;
            alpha[i] = diff;
          }
        } else if (alpha[i] < 0.0) {
          alpha[i] = 0.0;
          alpha[j] = -diff;
        }
        if (diff > ci - cj) {
          if (alpha[i] > ci) {
            alpha[i] = ci;
            alpha[j] = ci - diff;
          }
        } else if (alpha[j] > cj) {
          alpha[j] = cj;
          alpha[i] = cj + diff;
        }
      } else {
        double quad = Q(ei, ei) + Q(ej, ej) - 2.0 * Q(ei, ej);
        if (quad <= 0.0) quad = kTau;
        const double delta = (G[i] - G[j]) / quad;
        const double sum = alpha[i] + alpha[j];
        alpha[i] -= delta;
        alpha[j] += delta;
        if (sum > ci) {
          if (alpha[i] > ci) {
            alpha[i] = ci;
            alpha[j] = sum - ci;
          }
        } else if (alpha[j] < 0.0) {
          alpha[j] = 0.0;
          alpha[i] = sum;
        }
        if (sum > cj) {
          if (alpha[j] > cj) {
            alpha[j] = cj;
            alpha[i] = sum - cj;
          }
        } else if (alpha[i] < 0.0) {
          alpha[i] = 0.0;
          alpha[j] = sum;
        }
      }
      const double dai = alpha[i] - old_ai;
      const double daj = alpha[j] - old_aj;
      for (std::size_t t = 0; t < ul; ++t) {
        const auto et = static_cast<Eigen::Index>(t);
        G[t] += Q(et, ei) * dai + Q(et, ej) * daj;
      }
    }
    if (iter >= opts_.max_iter) {
      warn("ESVM solver hit the iteration limit for probe '" + probe_id + "'");
    }

    // Bias from free support vectors, else the midpoint of the feasible range.
    double ub = std::numeric_limits<double>::infinity();
    double lb = -std::numeric_limits<double>::infinity();
    double sum_free = 0.0;
    int n_free = 0;
    for (std::size_t t = 0; t < ul; ++t) {
      const double yg = y[t] * G[t];
      if (at_upper(t)) {
        if (y[t] < 0) ub = std::min(ub, yg);
        else lb = std::max(lb, yg);
      } else if (at_lower(t)) {
        if (y[t] > 0) ub = std::min(ub, yg);
        else lb = std::max(lb, yg);
      } else {
        ++n_free;
        sum_free += yg;
      }
    }
    const double rho = n_free > 0 ? sum_free / n_free : 0.5 * (ub + lb);

    EsvmModel model;
    model.weights = alpha[0] * positive;
    for (Eigen::Index t = 1; t < l; ++t) {
      model.weights.noalias() -= alpha[static_cast<std::size_t>(t)] * negatives_.row(t - 1).transpose();
    }
    model.bias = -rho;
    model.c_pos = c_pos;
    model.c_neg = c_neg;
    model.probe_id = std::move(probe_id);
    model.iterations = iter;
    model.objective = esvm_objective(model.weights, model.bias, positive,
                                     negatives_, c_pos, c_neg);
    if (!model.weights.allFinite() || !std::isfinite(model.bias)) {
      throw NumericError("ESVM: non-finite solution");
    }
    return model;
  }

 private:
  Matrix negatives_;
  Matrix gram_;
  EsvmSolverOptions opts_;
};

inline EsvmModel train_esvm(const Vector& positive, const Matrix& negatives,
                            double c_pos, double c_neg,
                            const EsvmSolverOptions& opts = {},
                            std::string probe_id = {}) {
  return EsvmTrainer(negatives, opts).train(positive, c_pos, c_neg,
                                            std::move(probe_id));
}

}  // namespace wenc
