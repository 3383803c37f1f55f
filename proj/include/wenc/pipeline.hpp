#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "wenc/aggregation.hpp"
#include "wenc/codebook.hpp"
#include "wenc/embedding.hpp"
#include "wenc/error.hpp"
#include "wenc/esvm.hpp"
#include "wenc/esvm_select.hpp"
#include "wenc/evaluation.hpp"
#include "wenc/io.hpp"
#include "wenc/normalization.hpp"
#include "wenc/numerics.hpp"
#include "wenc/rng.hpp"

namespace wenc {

enum class LocalWhitening { kNone, kPca, kZca };
enum class ScorerKind { kCosine, kEsvm };

inline std::string_view to_string(LocalWhitening w) {
  switch (w) {
    case LocalWhitening::kNone:
      return "none";
    case LocalWhitening::kPca:
      return "pca";
    case LocalWhitening::kZca:
      return "zca";
  }
  return "?";
}

inline std::string_view to_string(ScorerKind s) {
  return s == ScorerKind::kCosine ? "cosine" : "esvm";
}

inline constexpr std::size_t kDefaultMaxTrainDescriptors = 500000;
inline constexpr std::size_t kDefaultTembMaxTrain = 50000;
inline constexpr int kPresetRuns = 5;

struct PipelineConfig {
  std::string name = "custom";

  bool l2_normalize_descriptors = true;
  LocalWhitening local_whitening = LocalWhitening::kNone;

  int k = kDefaultCodebookSize;
  int batch_size = kDefaultBatchSize;
  int iterations = 0;  // 0: kIterationsPerCenter * k
  std::size_t max_train_descriptors = kDefaultMaxTrainDescriptors;

  EmbeddingKind embedding = EmbeddingKind::kVlad;
  bool residual_normalize = false;
  std::optional<LcsVariant> lcs;
  bool temb_whitening = true;
  std::size_t temb_max_train = kDefaultTembMaxTrain;

  PoolingKind pooling = PoolingKind::kSum;
  GmpOptions gmp;

  // Steps without fitted transforms; see parse_step.
  std::vector<NormalizationStep> chain = NormalizationChain::ssr_l2().steps;

  ScorerKind scorer = ScorerKind::kCosine;
  EsvmConfig esvm;

  // Concatenate the per-seed encodings and whiten them jointly before
  // evaluating once.
  bool joint_whitening = false;

  int runs = 1;
  // Empty means 1..runs.
  std::vector<std::uint64_t> seeds;

  std::vector<std::uint64_t> resolved_seeds() const {
    if (!seeds.empty()) return seeds;
    std::vector<std::uint64_t> s;
    for (int i = 1; i <= runs; ++i) s.push_back(static_cast<std::uint64_t>(i));
    return s;
  }

  void validate() const {
    if (k < 1) throw ConfigError("codebook.k must be >= 1");
    if (batch_size < 1) throw ConfigError("codebook.batch_size must be >= 1");
    if (iterations < 0) throw ConfigError("codebook.iterations must be >= 0");
    if (max_train_descriptors < 1) throw ConfigError("codebook.max_train must be >= 1");
    if (runs < 1) throw ConfigError("runs must be >= 1");
    if (!seeds.empty() && seeds.size() != static_cast<std::size_t>(runs)) {
      throw ConfigError("seeds lists " + std::to_string(seeds.size()) +
                        " values but runs = " + std::to_string(runs));
    }
    if (!(gmp.lambda >= 0.0) || !std::isfinite(gmp.lambda)) {
      throw ConfigError("pooling.lambda must be finite and >= 0");
    }
    if (!(gmp.cgd.tol > 0.0) || gmp.cgd.max_iter < 1) {
      throw ConfigError("pooling.cgd_tol must be > 0 and pooling.cgd_max_iter >= 1");
    }
    if (lcs && embedding != EmbeddingKind::kVlad) {
      throw ConfigError("embedding.lcs applies to vlad only");
    }
    if (embedding == EmbeddingKind::kTemb && temb_whitening && k < 2) {
      throw ConfigError("T-Emb whitening needs codebook.k >= 2");
    }
    NormalizationChain{chain}.validate();
    if (scorer == ScorerKind::kEsvm) {
      if (esvm.c_grid.empty()) throw ConfigError("esvm.c_grid is empty");
      for (double c : esvm.c_grid) {
        if (!(c > 0.0)) throw ConfigError("esvm.c_grid entries must be > 0");
      }
    }
  }
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& v) {
  Int out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  int depth = 0;
  for (char ch : v) {
    if (ch == '(') ++depth;
    if (ch == ')') --depth;
    if (ch == ',' && depth == 0) {
      out.push_back(cur);
      cur.clear();
    } else if (ch != ' ' && ch != '\t') {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {
      "vlad-baseline",  "vlad++",          "vlad-lcs++",      "temb",
      "temb16",         "vlad-gmp1",       "vlad-gmp1000",    "vlad++-gmp1000",
      "temb16-gmp1000", "vlad-esvm",       "vlad++-esvm",     "temb16-esvm",
      "vlad++-rotnorm", "temb-rotnorm",    "temb-pcawh",      "temb16-joint-pca",
      "temb-joint-pca", "vlad++-joint-pca"};
  return names;
}

// Pipeline variants named after the configurations they reproduce. Every
// preset averages kPresetRuns seeds.
inline PipelineConfig preset_config(std::string_view name) {
  PipelineConfig c;
  c.name = std::string(name);
  c.runs = kPresetRuns;
  auto vlad_plus_plus = [&] {
    c.residual_normalize = true;
    c.lcs = LcsVariant::kWhiten;
  };
  auto temb = [&](int k) {
    c.embedding = EmbeddingKind::kTemb;
    c.k = k;
    c.temb_whitening = true;
  };
  auto gmp = [&](double lambda) {
    c.pooling = PoolingKind::kGmp;
    c.gmp.lambda = lambda;
  };
  auto rotnorm = [&] {
    c.chain = {NormalizationStep{NormalizationStep::Kind::kRotation, kDefaultPower, nullptr},
               NormalizationStep::l2()};
  };
  if (name == "vlad-baseline") {
  } else if (name == "vlad++") {
    vlad_plus_plus();
  } else if (name == "vlad-lcs++") {
    c.residual_normalize = true;
    c.lcs = LcsVariant::kPlusPlus;
  } else if (name == "temb") {
    temb(100);
  } else if (name == "temb16") {
    temb(16);
  } else if (name == "vlad-gmp1") {
    gmp(kGmpUnitLambda);
  } else if (name == "vlad-gmp1000") {
    gmp(kGmpDefaultLambda);
  } else if (name == "vlad++-gmp1000") {
    vlad_plus_plus();
    gmp(kGmpDefaultLambda);
  } else if (name == "temb16-gmp1000") {
    temb(16);
    gmp(kGmpDefaultLambda);
  } else if (name == "vlad-esvm") {
    gmp(kGmpDefaultLambda);
    c.scorer = ScorerKind::kEsvm;
  } else if (name == "vlad++-esvm") {
    vlad_plus_plus();
    gmp(kGmpDefaultLambda);
    c.scorer = ScorerKind::kEsvm;
  } else if (name == "temb16-esvm") {
    temb(16);
    gmp(kGmpDefaultLambda);
    c.scorer = ScorerKind::kEsvm;
  } else if (name == "vlad++-rotnorm") {
    vlad_plus_plus();
    rotnorm();
  } else if (name == "temb-rotnorm") {
    temb(100);
    rotnorm();
  } else if (name == "temb-pcawh") {
    temb(100);
    c.chain.push_back(NormalizationStep{NormalizationStep::Kind::kGlobalPcaWhiten,
                                        kDefaultPower, nullptr});
    c.chain.push_back(NormalizationStep::l2());
  } else if (name == "temb16-joint-pca") {
    temb(16);
    c.joint_whitening = true;
  } else if (name == "temb-joint-pca") {
    temb(100);
    c.joint_whitening = true;
  } else if (name == "vlad++-joint-pca") {
    vlad_plus_plus();
    c.joint_whitening = true;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "'");
  }
  return c;
}

// Applies one dotted key. "preset" replaces the whole configuration, so it
// belongs first.
inline void set_config_value(PipelineConfig& c, const std::string& key,
                             const std::string& value) {
  using detail::parse_bool;
  using detail::parse_double;
  if (key == "preset") {
    c = preset_config(value);
  } else if (key == "name") {
    c.name = value;
  } else if (key == "descriptors.l2_normalize") {
    c.l2_normalize_descriptors = parse_bool(key, value);
  } else if (key == "local.whitening") {
    if (value == "none") c.local_whitening = LocalWhitening::kNone;
    else if (value == "pca") c.local_whitening = LocalWhitening::kPca;
    else if (value == "zca") c.local_whitening = LocalWhitening::kZca;
    else throw ConfigError(key + ": expected none, pca or zca");
  } else if (key == "codebook.k") {
    c.k = detail::parse_int<int>(key, value);
  } else if (key == "codebook.batch_size") {
    c.batch_size = detail::parse_int<int>(key, value);
  } else if (key == "codebook.iterations") {
    c.iterations = detail::parse_int<int>(key, value);
  } else if (key == "codebook.max_train") {
    c.max_train_descriptors = detail::parse_int<std::size_t>(key, value);
  } else if (key == "embedding.kind") {
    c.embedding = parse_embedding_kind(value);
  } else if (key == "embedding.residual_normalize") {
    c.residual_normalize = parse_bool(key, value);
  } else if (key == "embedding.lcs") {
    if (value == "none") c.lcs.reset();
    else c.lcs = parse_lcs_variant(value);
  } else if (key == "embedding.temb_whitening") {
    c.temb_whitening = parse_bool(key, value);
  } else if (key == "embedding.temb_max_train") {
    c.temb_max_train = detail::parse_int<std::size_t>(key, value);
  } else if (key == "pooling.kind") {
    c.pooling = parse_pooling_kind(value);
  } else if (key == "pooling.lambda") {
    c.gmp.lambda = parse_double(key, value);
  } else if (key == "pooling.component_wise") {
    c.gmp.component_wise = parse_bool(key, value);
  } else if (key == "pooling.cgd_tol") {
    c.gmp.cgd.tol = parse_double(key, value);
  } else if (key == "pooling.cgd_max_iter") {
    c.gmp.cgd.max_iter = detail::parse_int<int>(key, value);
  } else if (key == "normalization.chain") {
    c.chain.clear();
    if (value != "none") {
      for (const auto& tok : detail::split_list(value)) c.chain.push_back(parse_step(tok));
    }
  } else if (key == "scorer") {
    if (value == "cosine") c.scorer = ScorerKind::kCosine;
    else if (value == "esvm") c.scorer = ScorerKind::kEsvm;
    else throw ConfigError(key + ": expected cosine or esvm");
  } else if (key == "esvm.c_grid") {
    c.esvm.c_grid.clear();
    for (const auto& tok : detail::split_list(value)) c.esvm.c_grid.push_back(parse_double(key, tok));
  } else if (key == "esvm.tol") {
    c.esvm.solver.tol = parse_double(key, value);
  } else if (key == "esvm.max_iter") {
    c.esvm.solver.max_iter = detail::parse_int<int>(key, value);
  } else if (key == "joint.whitening") {
    c.joint_whitening = parse_bool(key, value);
  } else if (key == "runs") {
    c.runs = detail::parse_int<int>(key, value);
  } else if (key == "seeds") {
    c.seeds.clear();
    for (const auto& tok : detail::split_list(value)) {
      c.seeds.push_back(detail::parse_int<std::uint64_t>(key, tok));
    }
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

inline PipelineConfig parse_config(std::string_view text, PipelineConfig base = {},
                                   const std::string& source = "config") {
  for (const auto& [k, v] : parse_key_values(text, source)) set_config_value(base, k, v);
  return base;
}

// Canonical text form; parse_config(to_config_text(c)) reproduces c.
inline std::string to_config_text(const PipelineConfig& c) {
  using detail::format_double;
  std::ostringstream os;
  auto b = [](bool v) { return v ? "true" : "false"; };
  os << "name = " << c.name << '\n';
  os << "descriptors.l2_normalize = " << b(c.l2_normalize_descriptors) << '\n';
  os << "local.whitening = " << to_string(c.local_whitening) << '\n';
  os << "codebook.k = " << c.k << '\n';
  os << "codebook.batch_size = " << c.batch_size << '\n';
  os << "codebook.iterations = " << c.iterations << '\n';
  os << "codebook.max_train = " << c.max_train_descriptors << '\n';
  os << "embedding.kind = " << to_string(c.embedding) << '\n';
  os << "embedding.residual_normalize = " << b(c.residual_normalize) << '\n';
  os << "embedding.lcs = " << (c.lcs ? std::string(to_string(*c.lcs)) : "none") << '\n';
  os << "embedding.temb_whitening = " << b(c.temb_whitening) << '\n';
  os << "embedding.temb_max_train = " << c.temb_max_train << '\n';
  os << "pooling.kind = " << to_string(c.pooling) << '\n';
  os << "pooling.lambda = " << format_double(c.gmp.lambda) << '\n';
  os << "pooling.component_wise = " << b(c.gmp.component_wise) << '\n';
  os << "pooling.cgd_tol = " << format_double(c.gmp.cgd.tol) << '\n';
  os << "pooling.cgd_max_iter = " << c.gmp.cgd.max_iter << '\n';
  os << "normalization.chain = "
     << (c.chain.empty() ? std::string("none") : NormalizationChain{c.chain}.describe()) << '\n';
  os << "scorer = " << to_string(c.scorer) << '\n';
  os << "esvm.c_grid = ";
  for (std::size_t i = 0; i < c.esvm.c_grid.size(); ++i) {
    os << (i ? "," : "") << format_double(c.esvm.c_grid[i]);
  }
  os << '\n';
  os << "esvm.tol = " << format_double(c.esvm.solver.tol) << '\n';
  os << "esvm.max_iter = " << c.esvm.solver.max_iter << '\n';
  os << "joint.whitening = " << b(c.joint_whitening) << '\n';
  os << "runs = " << c.runs << '\n';
  if (!c.seeds.empty()) {
    os << "seeds = ";
    for (std::size_t i = 0; i < c.seeds.size(); ++i) os << (i ? "," : "") << c.seeds[i];
    os << '\n';
  }
  return os.str();
}

// Manifest plus the loaded (and optionally L2-normalized) descriptors.
struct Corpus {
  std::vector<ManifestEntry> entries;
  std::vector<Matrix> descriptors;

  std::size_t size() const { return entries.size(); }
};

inline Matrix l2_normalize_rows(Matrix X) {
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const double n = X.row(r).norm();
    if (n > 0.0) X.row(r) /= n;
  }
  return X;
}

inline Corpus load_corpus(const Manifest& manifest, bool l2_normalize) {
  Corpus c;
  c.entries = manifest.entries;
  c.descriptors.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    Matrix X = load_descriptors(e.path).data;
    if (!all_finite(X)) {
      throw NumericError("descriptor file '" + e.path.string() + "' holds non-finite values");
    }
    c.descriptors.push_back(l2_normalize ? l2_normalize_rows(std::move(X)) : std::move(X));
  }
  return c;
}

struct FittedModels {
  std::uint64_t seed = 0;
  std::optional<WhiteningTransform> local_whitening;
  Codebook codebook;
  std::optional<LcsTransforms> lcs;
  std::optional<WhiteningTransform> temb_whitening;
  // Transform of the chain's rotation or pca_whiten step.
  std::optional<WhiteningTransform> chain_transform;
  std::optional<double> esvm_c;

  NormalizationChain chain(const PipelineConfig& cfg) const {
    NormalizationChain out{cfg.chain};
    const int f = out.fitted_step();
    if (f >= 0 && chain_transform) {
      out.steps[static_cast<std::size_t>(f)].transform =
          std::make_shared<const WhiteningTransform>(*chain_transform);
    }
    return out;
  }
};

// Local descriptors after the optional decorrelation.
inline Matrix prepare_local(const FittedModels& m, const Matrix& X) {
  return m.local_whitening ? apply_whitening(*m.local_whitening, X) : X;
}

inline EmbeddedSet embed_document(const PipelineConfig& cfg, const FittedModels& m,
                                  const Matrix& X) {
  const Matrix local = prepare_local(m, X);
  if (cfg.embedding == EmbeddingKind::kVlad) {
    return embed_vlad(m.codebook, local, cfg.residual_normalize, m.lcs ? &*m.lcs : nullptr);
  }
  return embed_temb(m.codebook, local, m.temb_whitening ? &*m.temb_whitening : nullptr);
}

// Embeds, pools and applies chain steps [0, last_step).
inline GlobalDescriptor encode_document(const PipelineConfig& cfg, const FittedModels& m,
                                        const Matrix& X, const NormalizationChain& chain,
                                        std::size_t last_step) {
  require(X.rows() >= 1, "cannot encode a document without descriptors");
  GlobalDescriptor g = pool(embed_document(cfg, m, X), cfg.pooling, cfg.gmp);
  g.provenance.codebook_seed = m.codebook.seed;
  return apply_steps(chain, std::move(g), 0, last_step);
}

inline GlobalDescriptor encode_document(const PipelineConfig& cfg, const FittedModels& m,
                                        const Matrix& X) {
  const NormalizationChain chain = m.chain(cfg);
  return encode_document(cfg, m, X, chain, chain.steps.size());
}

struct EncodedCorpus {
  std::vector<std::string> doc_ids;
  std::vector<std::string> writer_ids;
  std::vector<Split> splits;
  Matrix encodings;  // one row per document

  std::size_t size() const { return doc_ids.size(); }

  EncodedCorpus subset(Split s) const {
    EncodedCorpus out;
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < size(); ++i) {
      if (splits[i] != s) continue;
      rows.push_back(static_cast<Eigen::Index>(i));
      out.doc_ids.push_back(doc_ids[i]);
      out.writer_ids.push_back(writer_ids[i]);
      out.splits.push_back(s);
    }
    out.encodings.resize(static_cast<Eigen::Index>(rows.size()), encodings.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out.encodings.row(static_cast<Eigen::Index>(i)) = encodings.row(rows[i]);
    }
    return out;
  }
};

namespace detail {

inline std::vector<std::size_t> documents_with_descriptors(const Corpus& corpus,
                                                          std::optional<Split> split,
                                                          bool warn_empty) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (split && corpus.entries[i].split != *split) continue;
    if (corpus.descriptors[i].rows() == 0) {
      if (warn_empty) {
        warn("document '" + corpus.entries[i].doc_id +
             "' has no descriptors; skipped and excluded from evaluation");
      }
      continue;
    }
    out.push_back(i);
  }
  return out;
}

// Encodes the given documents through chain steps [0, last_step).
inline EncodedCorpus encode_documents(const PipelineConfig& cfg, const FittedModels& m,
                                      const Corpus& corpus,
                                      const std::vector<std::size_t>& docs,
                                      const NormalizationChain& chain,
                                      std::size_t last_step) {
  EncodedCorpus out;
  for (std::size_t n = 0; n < docs.size(); ++n) {
    const std::size_t i = docs[n];
    const GlobalDescriptor g =
        encode_document(cfg, m, corpus.descriptors[i], chain, last_step);
    if (n == 0) out.encodings.resize(static_cast<Eigen::Index>(docs.size()), g.dim());
    out.encodings.row(static_cast<Eigen::Index>(n)) = g.psi.transpose();
    out.doc_ids.push_back(corpus.entries[i].doc_id);
    out.writer_ids.push_back(corpus.entries[i].writer_id);
    out.splits.push_back(corpus.entries[i].split);
  }
  return out;
}

inline double select_esvm_c(const EncodedCorpus& train, const EsvmConfig& cfg) {
  std::set<std::string> writers(train.writer_ids.begin(), train.writer_ids.end());
  if (writers.size() < 2) {
    throw ConfigError("ESVM c selection needs at least 2 training writers, found " +
                      std::to_string(writers.size()));
  }
  try {
    return select_c(train.encodings, train.writer_ids, cfg).c;
  } catch (const PreconditionError& e) {
    throw ConfigError(std::string("ESVM c selection: ") + e.what());
  }
}

}  // namespace detail

// Fits every model the configuration needs, from training documents only:
// local whitening, codebook, LCS or T-Emb whitening, the chain's fitted step
// and the ESVM margin parameter.
inline FittedModels fit_stage(const PipelineConfig& cfg, const Corpus& corpus,
                              std::uint64_t seed) {
  cfg.validate();
  const auto train_docs = detail::documents_with_descriptors(corpus, Split::kTrain, false);
  if (train_docs.empty()) throw ConfigError("training split has no documents with descriptors");

  std::size_t total = 0;
  for (std::size_t i : train_docs) total += static_cast<std::size_t>(corpus.descriptors[i].rows());
  const Eigen::Index dim = corpus.descriptors[train_docs.front()].cols();
  for (std::size_t i : train_docs) {
    if (corpus.descriptors[i].cols() != dim) {
      throw ConfigError("training documents disagree in descriptor dimension");
    }
  }

  // Seeded subsample of the pooled training descriptors, kept in corpus order.
  Rng sampler(derive_seed(seed, 0x5eed));
  std::vector<std::size_t> picks =
      sampler.sample_without_replacement(total, std::min(total, cfg.max_train_descriptors));
  std::sort(picks.begin(), picks.end());
  Matrix X(static_cast<Eigen::Index>(picks.size()), dim);
  {
    std::size_t doc = 0;
    std::size_t offset = 0;
    for (std::size_t r = 0; r < picks.size(); ++r) {
      while (picks[r] >= offset + static_cast<std::size_t>(corpus.descriptors[train_docs[doc]].rows())) {
        offset += static_cast<std::size_t>(corpus.descriptors[train_docs[doc]].rows());
        ++doc;
      }
      X.row(static_cast<Eigen::Index>(r)) =
          corpus.descriptors[train_docs[doc]].row(static_cast<Eigen::Index>(picks[r] - offset));
    }
  }

  FittedModels m;
  m.seed = seed;
  if (cfg.local_whitening != LocalWhitening::kNone) {
    if (X.rows() < 2) throw ConfigError("local whitening needs at least 2 training descriptors");
    WhiteningOptions wo;
    wo.mode = cfg.local_whitening == LocalWhitening::kPca ? WhiteningMode::kPcaWhiten
                                                          : WhiteningMode::kZcaWhiten;
    m.local_whitening = fit_whitening(X, wo);
    X = apply_whitening(*m.local_whitening, X);
  }

  if (X.rows() < cfg.k) {
    throw ConfigError("codebook: " + std::to_string(X.rows()) +
                      " training descriptors for K = " + std::to_string(cfg.k));
  }
  MiniBatchOptions ko;
  ko.k = cfg.k;
  ko.batch_size = cfg.batch_size;
  ko.iterations = cfg.iterations;
  ko.seed = seed;
  m.codebook = train_minibatch_kmeans(X, ko);

  if (cfg.embedding == EmbeddingKind::kVlad && cfg.lcs) {
    m.lcs = fit_lcs(m.codebook, X, *cfg.lcs);
  }
  if (cfg.embedding == EmbeddingKind::kTemb && cfg.temb_whitening) {
    const auto rows = static_cast<std::size_t>(X.rows());
    Matrix sub = X;
    if (rows > cfg.temb_max_train) {
      Rng r(derive_seed(seed, 0x7e3b));
      auto idx = r.sample_without_replacement(rows, cfg.temb_max_train);
      std::sort(idx.begin(), idx.end());
      sub.resize(static_cast<Eigen::Index>(idx.size()), X.cols());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        sub.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(idx[i]));
      }
    }
    if (sub.rows() < 2) throw ConfigError("T-Emb whitening needs at least 2 training descriptors");
    m.temb_whitening = fit_temb_whitening(m.codebook, sub);
  }

  const NormalizationChain declared{cfg.chain};
  if (const int f = declared.fitted_step(); f >= 0) {
    const EncodedCorpus partial = detail::encode_documents(
        cfg, m, corpus, train_docs, declared, static_cast<std::size_t>(f));
    if (partial.encodings.rows() < 2) {
      throw ConfigError("normalization step '" + step_name(declared.steps[static_cast<std::size_t>(f)]) +
                        "' needs at least 2 training documents");
    }
    m.chain_transform = fit_chain_transform(declared.steps[static_cast<std::size_t>(f)],
                                            partial.encodings);
  }

  if (cfg.scorer == ScorerKind::kEsvm && !cfg.joint_whitening) {
    const NormalizationChain chain = m.chain(cfg);
    const EncodedCorpus train =
        detail::encode_documents(cfg, m, corpus, train_docs, chain, chain.steps.size());
    m.esvm_c = detail::select_esvm_c(train, cfg.esvm);
  }
  return m;
}

// Encodes every document with descriptors, in manifest order.
inline EncodedCorpus encode_corpus(const PipelineConfig& cfg, const FittedModels& m,
                                   const Corpus& corpus) {
  const auto docs = detail::documents_with_descriptors(corpus, std::nullopt, true);
  const NormalizationChain chain = m.chain(cfg);
  return detail::encode_documents(cfg, m, corpus, docs, chain, chain.steps.size());
}

// Leave-one-out evaluation over the test documents. The ESVM scorer uses the
// training documents as negatives and the fitted (or freshly selected) c.
inline MetricsReport evaluate_encodings(const PipelineConfig& cfg, const EncodedCorpus& enc,
                                        std::optional<double> esvm_c = std::nullopt) {
  const EncodedCorpus test = enc.subset(Split::kTest);
  RetrievalRun run;
  run.encodings = test.encodings;
  run.writer_of = test.writer_ids;
  if (test.size() < 2) throw EvaluationError("evaluation needs at least 2 test documents");
  if (cfg.scorer == ScorerKind::kEsvm) {
    const EncodedCorpus train = enc.subset(Split::kTrain);
    if (train.size() < 1) throw ConfigError("ESVM scoring needs training documents as negatives");
    const double c = esvm_c ? *esvm_c : detail::select_esvm_c(train, cfg.esvm);
    const EsvmTrainer trainer(train.encodings, cfg.esvm.solver);
    run.scorer = make_esvm_scorer(trainer, test.encodings, c, test.doc_ids);
  }
  return evaluate(run);
}

struct RunResult {
  MetricsReport report;
  std::vector<MetricsReport> per_seed;
  std::vector<FittedModels> models;
  std::vector<std::uint64_t> seeds;
  std::optional<WhiteningTransform> joint_transform;
};

// Fit, encode and evaluate once per seed and average. With joint whitening
// the per-seed encodings are concatenated, whitened on the training
// documents, L2-normalized and evaluated once.
inline RunResult run_pipeline(const PipelineConfig& cfg, const Corpus& corpus) {
  cfg.validate();
  RunResult result;
  std::vector<EncodedCorpus> encoded;
  for (std::uint64_t seed : cfg.resolved_seeds()) {
    try {
      FittedModels m = fit_stage(cfg, corpus, seed);
      EncodedCorpus enc = encode_corpus(cfg, m, corpus);
      if (!cfg.joint_whitening) {
        result.per_seed.push_back(evaluate_encodings(cfg, enc, m.esvm_c));
      }
      result.models.push_back(std::move(m));
      result.seeds.push_back(seed);
      encoded.push_back(std::move(enc));
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      warn("seed " + std::to_string(seed) + " failed: " + e.what());
    }
  }
  if (result.seeds.empty()) throw EvaluationError("every seed failed");

  if (!cfg.joint_whitening) {
    result.report = average_runs(result.per_seed);
    return result;
  }

  std::vector<RunEncodings> runs;
  for (const auto& e : encoded) runs.push_back({e.doc_ids, e.encodings});
  const Matrix joint = concatenate_runs(runs);
  const EncodedCorpus& first = encoded.front();
  std::vector<Eigen::Index> train_rows;
  for (std::size_t i = 0; i < first.size(); ++i) {
    if (first.splits[i] == Split::kTrain) train_rows.push_back(static_cast<Eigen::Index>(i));
  }
  if (train_rows.size() < 2) throw ConfigError("joint whitening needs at least 2 training documents");
  Matrix train(static_cast<Eigen::Index>(train_rows.size()), joint.cols());
  for (std::size_t i = 0; i < train_rows.size(); ++i) {
    train.row(static_cast<Eigen::Index>(i)) = joint.row(train_rows[i]);
  }
  result.joint_transform = fit_whitening(train, WhiteningOptions{});
  EncodedCorpus combined = first;
  combined.encodings = l2_normalize_rows(apply_whitening(*result.joint_transform, joint));
  result.report = evaluate_encodings(cfg, combined);
  result.per_seed.push_back(result.report);
  return result;
}

inline RunResult run_pipeline(const PipelineConfig& cfg, const Manifest& manifest) {
  return run_pipeline(cfg, load_corpus(manifest, cfg.l2_normalize_descriptors));
}

// ---- persistence ----

inline Archive models_to_archive(const PipelineConfig& cfg, const FittedModels& m) {
  Archive a;
  a.put_text("kind", "model");
  a.put_text("config", to_config_text(cfg));
  a.put_text("seed", std::to_string(m.seed));
  if (m.local_whitening) store_whitening(a, "local_whitening", *m.local_whitening);
  a.put_matrix("codebook.centers", m.codebook.centers);
  a.put_text("codebook.seed", std::to_string(m.codebook.seed));
  a.put_scalar("codebook.inertia", m.codebook.inertia);
  if (m.lcs) {
    a.put_text("lcs.variant", std::string(to_string(m.lcs->variant)));
    a.put_text("lcs.count", std::to_string(m.lcs->per_cluster.size()));
    for (std::size_t k = 0; k < m.lcs->per_cluster.size(); ++k) {
      store_whitening(a, "lcs." + std::to_string(k), m.lcs->per_cluster[k]);
    }
  }
  if (m.temb_whitening) store_whitening(a, "temb_whitening", *m.temb_whitening);
  if (m.chain_transform) store_whitening(a, "chain_transform", *m.chain_transform);
  if (m.esvm_c) a.put_scalar("esvm.c", *m.esvm_c);
  return a;
}

inline std::pair<PipelineConfig, FittedModels> models_from_archive(const Archive& a) {
  if (!a.has("kind") || a.text("kind") != "model") {
    throw FormatError("archive does not hold fitted models", 0);
  }
  auto parse_u64 = [](const std::string& s, const char* what) {
    try {
      return detail::parse_int<std::uint64_t>(what, s);
    } catch (const ConfigError& e) {
      throw FormatError(e.what(), 0);
    }
  };
  PipelineConfig cfg = parse_config(a.text("config"), {}, "model config");
  FittedModels m;
  m.seed = parse_u64(a.text("seed"), "seed");
  if (a.has("local_whitening.mode")) m.local_whitening = load_whitening(a, "local_whitening");
  m.codebook.centers = a.matrix("codebook.centers");
  m.codebook.seed = parse_u64(a.text("codebook.seed"), "codebook.seed");
  m.codebook.inertia = a.scalar("codebook.inertia");
  if (a.has("lcs.variant")) {
    LcsTransforms lcs;
    lcs.variant = parse_lcs_variant(a.text("lcs.variant"));
    const auto count = parse_u64(a.text("lcs.count"), "lcs.count");
    for (std::uint64_t k = 0; k < count; ++k) {
      lcs.per_cluster.push_back(load_whitening(a, "lcs." + std::to_string(k)));
    }
    m.lcs = std::move(lcs);
  }
  if (a.has("temb_whitening.mode")) m.temb_whitening = load_whitening(a, "temb_whitening");
  if (a.has("chain_transform.mode")) m.chain_transform = load_whitening(a, "chain_transform");
  if (a.has("esvm.c")) m.esvm_c = a.scalar("esvm.c");
  return {cfg, m};
}

inline Archive encodings_to_archive(const EncodedCorpus& e) {
  Archive a;
  a.put_text("kind", "encodings");
  auto join = [](const auto& items, auto&& f) {
    std::string s;
    for (const auto& it : items) {
      s += f(it);
      s += '\n';
    }
    return s;
  };
  auto id = [](const std::string& s) { return s; };
  a.put_text("doc_ids", join(e.doc_ids, id));
  a.put_text("writer_ids", join(e.writer_ids, id));
  a.put_text("splits", join(e.splits, [](Split s) { return std::string(to_string(s)); }));
  a.put_matrix("encodings", e.encodings);
  return a;
}

inline EncodedCorpus encodings_from_archive(const Archive& a) {
  if (!a.has("kind") || a.text("kind") != "encodings") {
    throw FormatError("archive does not hold encodings", 0);
  }
  auto lines = [](const std::string& s) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos < s.size()) {
      const auto nl = s.find('\n', pos);
      out.push_back(s.substr(pos, nl - pos));
      if (nl == std::string::npos) break;
      pos = nl + 1;
    }
    return out;
  };
  EncodedCorpus e;
  e.doc_ids = lines(a.text("doc_ids"));
  e.writer_ids = lines(a.text("writer_ids"));
  for (const auto& s : lines(a.text("splits"))) {
    if (s == "train") e.splits.push_back(Split::kTrain);
    else if (s == "test") e.splits.push_back(Split::kTest);
    else throw FormatError("encodings: bad split '" + s + "'", 0);
  }
  e.encodings = a.matrix("encodings");
  if (e.writer_ids.size() != e.doc_ids.size() || e.splits.size() != e.doc_ids.size() ||
      static_cast<std::size_t>(e.encodings.rows()) != e.doc_ids.size()) {
    throw FormatError("encodings: document lists and matrix disagree in length", 0);
  }
  return e;
}

// Key-value report with fractions, followed by a percent table in comments.
inline std::string format_report(const MetricsReport& r, const PipelineConfig& cfg,
                                 int runs) {
  using detail::format_double;
  std::ostringstream os;
  os << "# retrieval report\n";
  os << "name = " << cfg.name << '\n';
  os << "runs = " << runs << '\n';
  os << "queries = " << r.queries << '\n';
  os << "skipped = " << r.skipped << '\n';
  os << "map = " << format_double(r.map) << '\n';
  os << "top1 = " << format_double(r.top1) << '\n';
  os << "hard2 = " << format_double(r.hard2) << '\n';
  os << "hard3 = " << format_double(r.hard3) << '\n';
  os << "soft5 = " << format_double(r.soft5) << '\n';
  os << "soft10 = " << format_double(r.soft10) << '\n';
  char line[96];
  os << "#\n# metric      percent\n";
  const std::pair<const char*, double> rows[] = {
      {"mAP", r.map},      {"Top-1", r.top1},   {"Hard-2", r.hard2},
      {"Hard-3", r.hard3}, {"Soft-5", r.soft5}, {"Soft-10", r.soft10}};
  for (const auto& [label, v] : rows) {
    std::snprintf(line, sizeof line, "# %-10s %8.2f\n", label, 100.0 * v);
    os << line;
  }
  return os.str();
}

// ---- synthetic corpora ----

struct SyntheticOptions {
  int writers = 20;  // writers in the test split
  int docs_per_writer = 4;
  int descriptors_per_doc = 100;
  int dim = 32;
  double writer_spread = 1.0;
  double noise = 0.3;
  std::uint64_t seed = 1;
  // Additional writers for the training split; -1 selects max(2, writers / 2).
  int train_writers = -1;
  // Shared style atoms that every writer perturbs.
  int atoms = 8;
};

// Each writer owns a perturbed copy of a shared set of style atoms; each
// descriptor is a uniformly chosen writer atom plus isotropic noise.
// Writes desc/<doc_id>.wdsc and manifest.tsv below `dir`.
inline Manifest generate_synthetic(const SyntheticOptions& o, const fs::path& dir) {
  require(o.writers >= 1 && o.docs_per_writer >= 1 && o.descriptors_per_doc >= 1 &&
              o.dim >= 1 && o.atoms >= 1,
          "synthetic corpus counts must be >= 1");
  require(o.writer_spread >= 0.0 && o.noise >= 0.0, "spread and noise must be >= 0");
  const int train_writers = o.train_writers >= 0 ? o.train_writers : std::max(2, o.writers / 2);
  Rng rng(o.seed);
  Matrix base(o.atoms, o.dim);
  for (Eigen::Index i = 0; i < base.size(); ++i) base.data()[i] = rng.normal();

  Manifest m;
  char name[64];
  const int total = o.writers + train_writers;
  for (int w = 0; w < total; ++w) {
    const bool is_train = w >= o.writers;
    std::snprintf(name, sizeof name, is_train ? "train%03d" : "test%03d",
                  is_train ? w - o.writers : w);
    const std::string writer = name;
    Matrix atoms = base;
    for (Eigen::Index i = 0; i < atoms.size(); ++i) {
      atoms.data()[i] += o.writer_spread * rng.normal();
    }
    for (int d = 0; d < o.docs_per_writer; ++d) {
      Eigen::MatrixXf rows(o.descriptors_per_doc, o.dim);
      for (int r = 0; r < o.descriptors_per_doc; ++r) {
        const auto a = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(o.atoms)));
        for (int c = 0; c < o.dim; ++c) {
          rows(r, c) = static_cast<float>(atoms(a, c) + o.noise * rng.normal());
        }
      }
      ManifestEntry e;
      e.doc_id = writer + "_d" + std::to_string(d);
      e.writer_id = writer;
      e.split = is_train ? Split::kTrain : Split::kTest;
      e.path = dir / "desc" / (e.doc_id + ".wdsc");
      write_descriptors(e.path, rows);
      m.entries.push_back(std::move(e));
    }
  }
  write_file(dir / "manifest.tsv", format_manifest(m, dir));
  return m;
}

}  // namespace wenc
