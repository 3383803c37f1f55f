#include <algorithm>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "temp_dir.hpp"
#include "wenc/pipeline.hpp"

namespace wenc {
namespace {

using testing_util::TempDir;

SyntheticOptions small_corpus() {
  SyntheticOptions o;
  o.writers = 6;
  o.docs_per_writer = 3;
  o.descriptors_per_doc = 30;
  o.dim = 8;
  o.atoms = 5;
  o.noise = 0.3;
  o.seed = 7;
  return o;
}

PipelineConfig small_config(const std::string& preset = "vlad-baseline") {
  PipelineConfig c = preset_config(preset);
  c.k = 4;
  c.batch_size = 64;
  c.iterations = 40;
  c.runs = 1;
  c.esvm.c_grid = {0.1, 1.0};
  return c;
}

struct Fixture {
  TempDir dir{"wenc-pipe"};
  Manifest manifest;
  Corpus corpus;
  explicit Fixture(const SyntheticOptions& o = small_corpus()) {
    manifest = generate_synthetic(o, dir.path());
    corpus = load_corpus(manifest, true);
  }
};

TEST(Config, TextRoundTrip) {
  for (const auto& name : preset_names()) {
    PipelineConfig c = preset_config(name);
    c.seeds = {3, 1, 4, 1, 5};
    const std::string text = to_config_text(c);
    EXPECT_EQ(to_config_text(parse_config(text)), text) << name;
  }
}

TEST(Config, KeysAndErrors) {
  PipelineConfig c = parse_config(
      "preset = vlad++\ncodebook.k = 12\npooling.kind = gmp\npooling.lambda = 2.5\n"
      "normalization.chain = power(0.25), intra, l2\nseeds = 9, 8\nruns = 2\n");
  EXPECT_EQ(c.name, "vlad++");
  EXPECT_EQ(c.k, 12);
  EXPECT_EQ(c.pooling, PoolingKind::kGmp);
  EXPECT_EQ(c.gmp.lambda, 2.5);
  ASSERT_EQ(c.chain.size(), 3U);
  EXPECT_EQ(c.chain[0].p, 0.25);
  EXPECT_EQ(c.resolved_seeds(), (std::vector<std::uint64_t>{9, 8}));
  EXPECT_NO_THROW(c.validate());

  EXPECT_THROW(parse_config("codebook.k = ten\n"), ConfigError);
  EXPECT_THROW(parse_config("bogus.key = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("preset = nope\n"), ConfigError);
  EXPECT_THROW(parse_config("scorer = l1\n"), ConfigError);
  EXPECT_THROW(parse_config("pooling.kind = max\n"), ConfigError);
  EXPECT_THROW(parse_config("runs = 2\nseeds = 1\n").validate(), ConfigError);
  EXPECT_THROW(parse_config("normalization.chain = rotation, pca_whiten\n").validate(), ConfigError);
  EXPECT_THROW(parse_config("embedding.kind = temb\nembedding.lcs = whiten\n").validate(),
               ConfigError);
  EXPECT_THROW(parse_config("codebook.k = 0\n").validate(), ConfigError);
}

TEST(Presets, WireDocumentedComponents) {
  const PipelineConfig base = preset_config("vlad-baseline");
  EXPECT_EQ(base.embedding, EmbeddingKind::kVlad);
  EXPECT_FALSE(base.residual_normalize);
  EXPECT_FALSE(base.lcs.has_value());
  EXPECT_EQ(base.pooling, PoolingKind::kSum);
  EXPECT_EQ(NormalizationChain{base.chain}.describe(), "power(0.5),l2");
  EXPECT_EQ(base.k, 100);
  EXPECT_EQ(base.runs, 5);

  const PipelineConfig pp = preset_config("vlad++");
  EXPECT_TRUE(pp.residual_normalize);
  EXPECT_EQ(pp.lcs, LcsVariant::kWhiten);

  EXPECT_EQ(preset_config("vlad-lcs++").lcs, LcsVariant::kPlusPlus);

  const PipelineConfig t = preset_config("temb");
  EXPECT_EQ(t.embedding, EmbeddingKind::kTemb);
  EXPECT_TRUE(t.temb_whitening);
  EXPECT_EQ(t.k, 100);
  EXPECT_EQ(preset_config("temb16").k, 16);

  const PipelineConfig g = preset_config("vlad-gmp1000");
  EXPECT_EQ(g.pooling, PoolingKind::kGmp);
  EXPECT_EQ(g.gmp.lambda, 1000.0);
  EXPECT_EQ(preset_config("vlad-gmp1").gmp.lambda, 1.0);

  const PipelineConfig e = preset_config("vlad-esvm");
  EXPECT_EQ(e.scorer, ScorerKind::kEsvm);
  EXPECT_EQ(e.pooling, PoolingKind::kGmp);

  EXPECT_EQ(NormalizationChain{preset_config("vlad++-rotnorm").chain}.describe(), "rotation(0.5),l2");
  EXPECT_EQ(NormalizationChain{preset_config("temb-pcawh").chain}.describe(),
            "power(0.5),l2,pca_whiten,l2");
  EXPECT_TRUE(preset_config("temb16-joint-pca").joint_whitening);
  for (const auto& name : preset_names()) EXPECT_NO_THROW(preset_config(name).validate()) << name;
}

TEST(Synthetic, DeterministicFiles) {
  TempDir a("wenc-syn-a");
  TempDir b("wenc-syn-b");
  const Manifest ma = generate_synthetic(small_corpus(), a.path());
  const Manifest mb = generate_synthetic(small_corpus(), b.path());
  ASSERT_EQ(ma.entries.size(), mb.entries.size());
  EXPECT_EQ(read_file(a / "manifest.tsv"), read_file(b / "manifest.tsv"));
  for (std::size_t i = 0; i < ma.entries.size(); ++i) {
    EXPECT_EQ(read_file(ma.entries[i].path), read_file(mb.entries[i].path));
  }
  const Manifest reloaded = load_manifest(a / "manifest.tsv");
  EXPECT_EQ(reloaded.entries.size(), ma.entries.size());
  EXPECT_EQ(reloaded.entries[0].path, ma.entries[0].path);
  // 6 test writers and 3 training writers, 3 documents each.
  EXPECT_EQ(ma.entries.size(), 27U);
}

TEST(FitStage, PlainConfigFitsOnlyCodebook) {
  Fixture f;
  const FittedModels m = fit_stage(small_config(), f.corpus, 1);
  EXPECT_EQ(m.codebook.size(), 4);
  EXPECT_EQ(m.codebook.dim(), 8);
  EXPECT_FALSE(m.local_whitening);
  EXPECT_FALSE(m.lcs);
  EXPECT_FALSE(m.temb_whitening);
  EXPECT_FALSE(m.chain_transform);
  EXPECT_FALSE(m.esvm_c);
}

TEST(FitStage, DeterministicSerialization) {
  Fixture f;
  for (const char* preset : {"vlad-baseline", "vlad++", "temb16", "vlad++-rotnorm", "vlad-esvm"}) {
    const PipelineConfig c = small_config(preset);
    const std::string a = models_to_archive(c, fit_stage(c, f.corpus, 3)).serialize();
    const std::string b = models_to_archive(c, fit_stage(c, f.corpus, 3)).serialize();
    EXPECT_EQ(a, b) << preset;
  }
}

TEST(FitStage, LocalWhiteningPrecedesCodebook) {
  Fixture f;
  PipelineConfig c = small_config();
  c.local_whitening = LocalWhitening::kPca;
  const FittedModels m = fit_stage(c, f.corpus, 2);
  ASSERT_TRUE(m.local_whitening);
  EXPECT_EQ(m.codebook.dim(), 8);

  // Pooled training descriptors: the whitening axes match an oracle
  // eigendecomposition, and k-means on the whitened rows reproduces the
  // fitted codebook.
  Matrix X(0, 8);
  for (std::size_t i = 0; i < f.corpus.size(); ++i) {
    if (f.corpus.entries[i].split != Split::kTrain) continue;
    Matrix grown(X.rows() + f.corpus.descriptors[i].rows(), 8);
    grown << X, f.corpus.descriptors[i];
    X = grown;
  }
  const auto eig = oracle::jacobi_eigen(oracle::covariance(X));
  for (int i = 0; i < 8; ++i) {
    const double dot = std::abs(eig.vectors.col(i).dot(m.local_whitening->rotation.row(i).transpose()));
    EXPECT_NEAR(dot, 1.0, 1e-6);
  }
  MiniBatchOptions ko;
  ko.k = c.k;
  ko.batch_size = c.batch_size;
  ko.iterations = c.iterations;
  ko.seed = 2;
  const Codebook ref = train_minibatch_kmeans(apply_whitening(*m.local_whitening, X), ko);
  EXPECT_EQ(ref.centers, m.codebook.centers);
}

TEST(FitStage, FitsDemandedModels) {
  Fixture f;
  const FittedModels pp = fit_stage(small_config("vlad++"), f.corpus, 1);
  ASSERT_TRUE(pp.lcs);
  EXPECT_EQ(pp.lcs->per_cluster.size(), 4U);
  const FittedModels lpp = fit_stage(small_config("vlad-lcs++"), f.corpus, 1);
  EXPECT_EQ(lpp.lcs->output_dim(), 7);
  const FittedModels t = fit_stage(small_config("temb16"), f.corpus, 1);
  ASSERT_TRUE(t.temb_whitening);
  EXPECT_EQ(t.temb_whitening->output_dim(), 4 * 8 - 8);
  const FittedModels r = fit_stage(small_config("vlad++-rotnorm"), f.corpus, 1);
  ASSERT_TRUE(r.chain_transform);
  EXPECT_EQ(r.chain_transform->mode, WhiteningMode::kPcaRotateOnly);
  const FittedModels e = fit_stage(small_config("vlad-esvm"), f.corpus, 1);
  ASSERT_TRUE(e.esvm_c);
  EXPECT_TRUE(*e.esvm_c == 0.1 || *e.esvm_c == 1.0);
}

TEST(FitStage, InsufficientDataIsConfigError) {
  Fixture f;
  PipelineConfig c = small_config();
  c.k = 100000;
  EXPECT_THROW(fit_stage(c, f.corpus, 1), ConfigError);
  Corpus no_train = f.corpus;
  for (auto& e : no_train.entries) e.split = Split::kTest;
  EXPECT_THROW(fit_stage(small_config(), no_train, 1), ConfigError);
}

TEST(TrainTestIsolation, PerturbedTestDataLeavesModelsUnchanged) {
  Fixture f;
  for (const char* preset : {"vlad-baseline", "vlad++", "temb-pcawh", "vlad++-rotnorm", "vlad-esvm"}) {
    const PipelineConfig c = small_config(preset);
    const std::string before = models_to_archive(c, fit_stage(c, f.corpus, 4)).serialize();

    // Overwrite every test document on disk with unrelated values.
    for (const auto& e : f.manifest.entries) {
      if (e.split != Split::kTest) continue;
      Eigen::MatrixXf junk = Eigen::MatrixXf::Constant(13, 8, 5.0f);
      junk(0, 0) = -3.0f;
      write_descriptors(e.path, junk);
    }
    const Corpus perturbed = load_corpus(f.manifest, true);
    const std::string after = models_to_archive(c, fit_stage(c, perturbed, 4)).serialize();
    EXPECT_EQ(before, after) << preset;
    // Restore for the next preset.
    f.manifest = generate_synthetic(small_corpus(), f.dir.path());
  }
}

TEST(EncodeCorpus, MinimalPipelineIsResidualSum) {
  Corpus corpus;
  ManifestEntry e;
  e.doc_id = "only";
  e.writer_id = "w";
  e.split = Split::kTrain;
  corpus.entries.push_back(e);
  Matrix X(3, 2);
  X << 1.0, 2.0, 3.0, -1.0, 0.5, 0.5;
  corpus.descriptors.push_back(X);
  PipelineConfig c;
  c.k = 1;
  c.iterations = 5;
  c.chain.clear();
  const FittedModels m = fit_stage(c, corpus, 1);
  const EncodedCorpus enc = encode_corpus(c, m, corpus);
  ASSERT_EQ(enc.encodings.rows(), 1);
  const Vector ref = oracle::vlad_residual_sum(m.codebook.centers, X);
  EXPECT_LT((enc.encodings.row(0).transpose() - ref).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(EncodeCorpus, DescriptorOrderInvariant) {
  Fixture f;
  for (const char* preset : {"vlad-baseline", "vlad-gmp1000", "temb16"}) {
    const PipelineConfig c = small_config(preset);
    const FittedModels m = fit_stage(c, f.corpus, 1);
    const Matrix X = f.corpus.descriptors[0];
    const Matrix R = X.colwise().reverse();
    const Vector a = encode_document(c, m, X).psi;
    const Vector b = encode_document(c, m, R).psi;
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-8) << preset;
  }
}

TEST(EncodeCorpus, BaselineMatchesOracleComposition) {
  Fixture f;
  const PipelineConfig c = small_config();
  const FittedModels m = fit_stage(c, f.corpus, 5);
  const EncodedCorpus enc = encode_corpus(c, m, f.corpus);
  ASSERT_EQ(enc.size(), f.corpus.size());
  for (std::size_t i = 0; i < f.corpus.size(); ++i) {
    Vector v = oracle::vlad_residual_sum(m.codebook.centers, f.corpus.descriptors[i]);
    for (Eigen::Index j = 0; j < v.size(); ++j) v(j) = (v(j) < 0 ? -1.0 : 1.0) * std::sqrt(std::abs(v(j)));
    v /= v.norm();
    EXPECT_LT((enc.encodings.row(static_cast<Eigen::Index>(i)).transpose() - v).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(enc.doc_ids[i], f.corpus.entries[i].doc_id);
  }
}

TEST(EncodeCorpus, EmptyDocumentSkippedWithWarning) {
  Fixture f;
  std::vector<std::string> seen;
  ScopedWarningSink sink([&](const std::string& m) { seen.push_back(m); });
  Corpus c = f.corpus;
  c.descriptors[0] = Matrix(0, 8);
  const PipelineConfig cfg = small_config();
  const FittedModels m = fit_stage(cfg, c, 1);
  const EncodedCorpus enc = encode_corpus(cfg, m, c);
  EXPECT_EQ(enc.size(), c.size() - 1);
  EXPECT_EQ(std::count(enc.doc_ids.begin(), enc.doc_ids.end(), c.entries[0].doc_id), 0);
  EXPECT_FALSE(seen.empty());
}

TEST(Run, SingleSeedEqualsEvaluate) {
  Fixture f;
  PipelineConfig c = small_config();
  c.seeds = {11};
  const RunResult r = run_pipeline(c, f.corpus);
  const FittedModels m = fit_stage(c, f.corpus, 11);
  const MetricsReport direct = evaluate_encodings(c, encode_corpus(c, m, f.corpus));
  EXPECT_EQ(r.report.map, direct.map);
  EXPECT_EQ(r.report.top1, direct.top1);
  EXPECT_EQ(r.report.soft10, direct.soft10);
  EXPECT_EQ(r.report.queries, 18);
}

TEST(Run, ReproducibleAcrossRuns) {
  Fixture f;
  PipelineConfig c = small_config();
  c.runs = 3;
  const std::string a = format_report(run_pipeline(c, f.manifest).report, c, 3);
  const std::string b = format_report(run_pipeline(c, f.manifest).report, c, 3);
  EXPECT_EQ(a, b);
  EXPECT_NE(a.find("map = "), std::string::npos);
  EXPECT_NE(a.find("# mAP"), std::string::npos);
}

TEST(Run, JointWhiteningEvaluatesOnce) {
  Fixture f;
  PipelineConfig c = small_config("vlad++-joint-pca");
  c.runs = 2;
  const RunResult r = run_pipeline(c, f.corpus);
  ASSERT_TRUE(r.joint_transform);
  EXPECT_EQ(r.per_seed.size(), 1U);
  EXPECT_EQ(r.models.size(), 2U);
  EXPECT_EQ(r.joint_transform->input_dim(), 2 * r.models[0].codebook.size() * 8);
}

TEST(Run, SeparableCorpusIsPerfect) {
  SyntheticOptions o = small_corpus();
  o.noise = 0.0;
  o.writer_spread = 3.0;
  Fixture f(o);
  const RunResult r = run_pipeline(small_config(), f.corpus);
  EXPECT_EQ(r.report.map, 1.0);
}

TEST(Run, AllSeedsFailingIsEvaluationError) {
  Fixture f;
  std::vector<std::string> seen;
  ScopedWarningSink sink([&](const std::string& m) { seen.push_back(m); });
  // Every training document plus a single test document: nothing to rank.
  Corpus trimmed;
  bool kept_test = false;
  for (std::size_t i = 0; i < f.corpus.size(); ++i) {
    const bool is_test = f.corpus.entries[i].split == Split::kTest;
    if (is_test && kept_test) continue;
    kept_test = kept_test || is_test;
    trimmed.entries.push_back(f.corpus.entries[i]);
    trimmed.descriptors.push_back(f.corpus.descriptors[i]);
  }
  PipelineConfig cfg = small_config();
  cfg.runs = 2;
  EXPECT_THROW(run_pipeline(cfg, trimmed), EvaluationError);
  EXPECT_EQ(seen.size(), 2U);
}

TEST(Persistence, ModelsRoundTripEncodeIdentically) {
  Fixture f;
  for (const char* preset : {"vlad++", "vlad-lcs++", "temb16", "vlad++-rotnorm", "vlad-esvm"}) {
    const PipelineConfig c = small_config(preset);
    const FittedModels m = fit_stage(c, f.corpus, 2);
    const Archive a = Archive::deserialize(models_to_archive(c, m).serialize());
    const auto [c2, m2] = models_from_archive(a);
    EXPECT_EQ(to_config_text(c2), to_config_text(c));
    const EncodedCorpus e1 = encode_corpus(c, m, f.corpus);
    const EncodedCorpus e2 = encode_corpus(c2, m2, f.corpus);
    EXPECT_EQ(e1.encodings, e2.encodings) << preset;
    EXPECT_EQ(m2.esvm_c, m.esvm_c);
  }
}

TEST(Persistence, EncodingsRoundTrip) {
  Fixture f;
  const PipelineConfig c = small_config();
  const EncodedCorpus e = encode_corpus(c, fit_stage(c, f.corpus, 1), f.corpus);
  const EncodedCorpus back =
      encodings_from_archive(Archive::deserialize(encodings_to_archive(e).serialize()));
  EXPECT_EQ(back.doc_ids, e.doc_ids);
  EXPECT_EQ(back.writer_ids, e.writer_ids);
  EXPECT_EQ(back.splits, e.splits);
  EXPECT_EQ(back.encodings, e.encodings);
  EXPECT_THROW(models_from_archive(encodings_to_archive(e)), FormatError);
  EXPECT_THROW(encodings_from_archive(models_to_archive(c, fit_stage(c, f.corpus, 1))), FormatError);
}

}  // namespace
}  // namespace wenc
