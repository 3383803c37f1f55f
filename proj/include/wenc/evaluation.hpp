#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "wenc/error.hpp"
#include "wenc/esvm.hpp"
#include "wenc/numerics.hpp"

namespace wenc {

struct CosineScorer {};

// One model per document, indexed like the run's encodings.
struct EsvmScorer {
  std::vector<EsvmModel> models;
};

using Scorer = std::variant<CosineScorer, EsvmScorer>;

struct RetrievalRun {
  Matrix encodings;  // one document per row
  std::vector<std::string> writer_of;
  Scorer scorer = CosineScorer{};

  int size() const { return static_cast<int>(encodings.rows()); }
};

struct MetricsReport {
  double map = 0.0;
  double top1 = 0.0;
  double hard2 = 0.0;
  double hard3 = 0.0;
  double soft5 = 0.0;
  double soft10 = 0.0;
  int queries = 0;
  int skipped = 0;
  // Indexed by document; NaN for skipped queries. Empty for averaged reports.
  std::vector<double> per_query_ap;
};

namespace detail {

inline void check_run(const RetrievalRun& run) {
  require(run.size() >= 2, "retrieval needs at least 2 documents");
  require(run.writer_of.size() == static_cast<std::size_t>(run.size()),
          "every document needs exactly one writer");
  if (const auto* e = std::get_if<EsvmScorer>(&run.scorer)) {
    require(e->models.size() == static_cast<std::size_t>(run.size()),
            "ESVM scorer needs one model per document");
  }
}

}  // namespace detail

// Similarities of every document to `query` (query entry left as -inf).
// Zero-norm encodings under cosine get -inf so they sort last.
inline std::vector<double> similarities(int query, const RetrievalRun& run) {
  const int n = run.size();
  std::vector<double> sim(static_cast<std::size_t>(n),
                          -std::numeric_limits<double>::infinity());
  const Vector q = run.encodings.row(query).transpose();
  if (std::holds_alternative<CosineScorer>(run.scorer)) {
    const double qn = q.norm();
    for (int g = 0; g < n; ++g) {
      if (g == query) continue;
      const double gn = run.encodings.row(g).norm();
      if (qn == 0.0 || gn == 0.0) continue;
      sim[static_cast<std::size_t>(g)] = run.encodings.row(g).dot(q) / (qn * gn);
    }
  } else {
    const auto& model = std::get<EsvmScorer>(run.scorer).models[static_cast<std::size_t>(query)];
    for (int g = 0; g < n; ++g) {
      if (g == query) continue;
      sim[static_cast<std::size_t>(g)] = score(model, run.encodings.row(g).transpose());
    }
  }
  return sim;
}

// All documents except the query, most similar first. Ties keep ascending
// document index.
inline std::vector<int> rank_gallery(int query, const RetrievalRun& run) {
  detail::check_run(run);
  require(query >= 0 && query < run.size(), "query index out of range");
  const std::vector<double> sim = similarities(query, run);
  if (std::holds_alternative<CosineScorer>(run.scorer)) {
    int zero = 0;
    for (int g = 0; g < run.size(); ++g) {
      if (g != query && std::isinf(sim[static_cast<std::size_t>(g)])) ++zero;
    }
    if (zero > 0) {
      warn("query " + std::to_string(query) + ": " + std::to_string(zero) +
           " zero-norm encodings ranked last");
    }
  }
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(run.size() - 1));
  for (int g = 0; g < run.size(); ++g) {
    if (g != query) order.push_back(g);
  }
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return sim[static_cast<std::size_t>(a)] > sim[static_cast<std::size_t>(b)];
  });
  return order;
}

// Mean over relevant documents of precision at their ranks.
inline double average_precision(const std::vector<int>& ranking,
                                const std::set<int>& relevant) {
  require(!relevant.empty(), "average_precision: empty relevant set");
  int hits = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < ranking.size(); ++r) {
    if (relevant.count(ranking[r])) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  require(hits == static_cast<int>(relevant.size()),
          "average_precision: relevant documents missing from the ranking");
  return sum / static_cast<double>(relevant.size());
}

// Leave-one-out evaluation over every document. Queries from writers with a
// single document are skipped. Hard-k counts as a miss when fewer than k
// other documents of the writer exist.
inline MetricsReport evaluate(const RetrievalRun& run) {
  detail::check_run(run);
  const int n = run.size();
  MetricsReport rep;
  rep.per_query_ap.assign(static_cast<std::size_t>(n),
                          std::numeric_limits<double>::quiet_NaN());
  double ap_sum = 0.0;
  int top1 = 0, hard2 = 0, hard3 = 0, soft5 = 0, soft10 = 0;
  for (int q = 0; q < n; ++q) {
    std::set<int> relevant;
    for (int g = 0; g < n; ++g) {
      if (g != q && run.writer_of[static_cast<std::size_t>(g)] ==
                        run.writer_of[static_cast<std::size_t>(q)]) {
        relevant.insert(g);
      }
    }
    if (relevant.empty()) {
      ++rep.skipped;
      warn("document " + std::to_string(q) + " (writer '" +
           run.writer_of[static_cast<std::size_t>(q)] +
           "') has no other document of its writer; query skipped");
      continue;
    }
    const std::vector<int> ranking = rank_gallery(q, run);
    const double ap = average_precision(ranking, relevant);
    rep.per_query_ap[static_cast<std::size_t>(q)] = ap;
    ap_sum += ap;
    ++rep.queries;

    auto same = [&](std::size_t r) { return relevant.count(ranking[r]) > 0; };
    auto all_top = [&](std::size_t k) {
      if (ranking.size() < k) return false;
      for (std::size_t r = 0; r < k; ++r) {
        if (!same(r)) return false;
      }
      return true;
    };
    auto any_top = [&](std::size_t k) {
      for (std::size_t r = 0; r < k && r < ranking.size(); ++r) {
        if (same(r)) return true;
      }
      return false;
    };
    top1 += same(0) ? 1 : 0;
    hard2 += all_top(2) ? 1 : 0;
    hard3 += all_top(3) ? 1 : 0;
    soft5 += any_top(5) ? 1 : 0;
    soft10 += any_top(10) ? 1 : 0;
  }
  if (rep.queries == 0) {
    throw EvaluationError("evaluation: every query was skipped");
  }
  const auto q = static_cast<double>(rep.queries);
  rep.map = ap_sum / q;
  rep.top1 = top1 / q;
  rep.hard2 = hard2 / q;
  rep.hard3 = hard3 / q;
  rep.soft5 = soft5 / q;
  rep.soft10 = soft10 / q;
  return rep;
}

// Arithmetic mean of every metric; per-query values are dropped. Values are
// summed in sorted order so the result does not depend on run order.
inline MetricsReport average_runs(const std::vector<MetricsReport>& reports) {
  require(!reports.empty(), "average_runs: no reports");
  auto mean_of = [&](auto field) {
    std::vector<double> v;
    v.reserve(reports.size());
    for (const auto& rep : reports) v.push_back(static_cast<double>(rep.*field));
    std::sort(v.begin(), v.end());
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  MetricsReport out;
  out.map = mean_of(&MetricsReport::map);
  out.top1 = mean_of(&MetricsReport::top1);
  out.hard2 = mean_of(&MetricsReport::hard2);
  out.hard3 = mean_of(&MetricsReport::hard3);
  out.soft5 = mean_of(&MetricsReport::soft5);
  out.soft10 = mean_of(&MetricsReport::soft10);
  out.queries = static_cast<int>(std::lround(mean_of(&MetricsReport::queries)));
  out.skipped = static_cast<int>(std::lround(mean_of(&MetricsReport::skipped)));
  return out;
}

}  // namespace wenc
