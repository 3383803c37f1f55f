#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "wenc/error.hpp"
#include "wenc/esvm.hpp"
#include "wenc/evaluation.hpp"

namespace wenc {

struct EsvmConfig {
  std::vector<double> c_grid{0.01, 0.1, 1.0, 10.0, 100.0};
  EsvmSolverOptions solver;
};

struct CSelection {
  double c = 0.0;
  // Costs for an ESVM trained against the whole training set.
  double c_pos = 0.0;
  double c_neg = 0.0;
  // mAP of the in-training simulation, aligned with the sorted grid.
  std::vector<double> grid;
  std::vector<double> grid_map;
};

// Positive cost scaled by the negative count so a single positive is not
// outweighed by the pool.
inline std::pair<double, double> balanced_costs(double c, int negatives) {
  return {c * static_cast<double>(negatives), c};
}

// Replays the exemplar protocol inside the training set for every candidate
// c: each training document is a probe, the training documents of other
// writers are its negatives, and the remaining training documents form the
// gallery. Returns the c with the highest mAP, the smallest on ties.
inline CSelection select_c(const Matrix& train_encodings,
                           const std::vector<std::string>& train_writers,
                           const EsvmConfig& cfg) {
  if (cfg.c_grid.empty()) throw ConfigError("ESVM c grid is empty");
  for (double c : cfg.c_grid) {
    if (!(c > 0.0)) throw ConfigError("ESVM c grid entries must be > 0");
  }
  require(static_cast<std::size_t>(train_encodings.rows()) == train_writers.size(),
          "select_c: one writer label per training encoding");
  const std::set<std::string> writers(train_writers.begin(), train_writers.end());
  require(writers.size() >= 2, "select_c needs at least 2 training writers");

  std::vector<double> grid = cfg.c_grid;
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  const int n = static_cast<int>(train_encodings.rows());
  std::vector<double> ap_sum(grid.size(), 0.0);
  int probes = 0;

  for (const auto& writer : writers) {
    std::vector<int> own;
    std::vector<int> others;
    for (int i = 0; i < n; ++i) {
      (train_writers[static_cast<std::size_t>(i)] == writer ? own : others).push_back(i);
    }
    if (own.size() < 2) continue;
    Matrix negatives(static_cast<Eigen::Index>(others.size()), train_encodings.cols());
    for (std::size_t i = 0; i < others.size(); ++i) {
      negatives.row(static_cast<Eigen::Index>(i)) = train_encodings.row(others[i]);
    }
    const EsvmTrainer trainer(std::move(negatives), cfg.solver);
    for (int probe : own) {
      ++probes;
      std::set<int> relevant;
      for (int g : own) {
        if (g != probe) relevant.insert(g);
      }
      const Vector x = train_encodings.row(probe).transpose();
      for (std::size_t ci = 0; ci < grid.size(); ++ci) {
        const auto [c_pos, c_neg] = balanced_costs(grid[ci], trainer.negatives());
        const EsvmModel model = trainer.train(x, c_pos, c_neg);
        std::vector<std::pair<double, int>> scored;
        for (int g = 0; g < n; ++g) {
          if (g == probe) continue;
          scored.emplace_back(score(model, train_encodings.row(g).transpose()), g);
        }
        std::stable_sort(scored.begin(), scored.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        std::vector<int> ranking;
        ranking.reserve(scored.size());
        for (const auto& s : scored) ranking.push_back(s.second);
        ap_sum[ci] += average_precision(ranking, relevant);
      }
    }
  }
  require(probes > 0, "select_c: no training writer has two documents");

  CSelection out;
  out.grid = grid;
  out.grid_map.resize(grid.size());
  std::size_t best = 0;
  for (std::size_t ci = 0; ci < grid.size(); ++ci) {
    out.grid_map[ci] = ap_sum[ci] / probes;
    if (out.grid_map[ci] > out.grid_map[best]) best = ci;
  }
  out.c = grid[best];
  std::tie(out.c_pos, out.c_neg) = balanced_costs(out.c, n);
  return out;
}

// One exemplar model per row of `probes`, all trained against `trainer`'s
// negatives.
inline EsvmScorer make_esvm_scorer(const EsvmTrainer& trainer, const Matrix& probes,
                                   double c, const std::vector<std::string>& ids = {}) {
  const auto [c_pos, c_neg] = balanced_costs(c, trainer.negatives());
  EsvmScorer scorer;
  scorer.models.reserve(static_cast<std::size_t>(probes.rows()));
  for (Eigen::Index i = 0; i < probes.rows(); ++i) {
    std::string id = static_cast<std::size_t>(i) < ids.size() ? ids[static_cast<std::size_t>(i)] : "";
    scorer.models.push_back(trainer.train(probes.row(i).transpose(), c_pos, c_neg, std::move(id)));
  }
  return scorer;
}

}  // namespace wenc
