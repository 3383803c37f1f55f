// Command line front end: synth, fit, encode, evaluate, run, inspect.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <CLI11.hpp>

#include "wenc/wenc.hpp"

namespace fs = std::filesystem;

namespace {

struct ConfigArgs {
  std::string config_file;
  std::string preset;
  std::vector<std::string> overrides;

  void add_to(CLI::App* cmd) {
    cmd->add_option("-c,--config", config_file, "Key-value configuration file");
    cmd->add_option("-p,--preset", preset, "Named preset, applied before the file and overrides");
    cmd->add_option("-s,--set", overrides, "Override one key, e.g. --set codebook.k=16")
        ->take_all();
  }

  bool given() const { return !config_file.empty() || !preset.empty() || !overrides.empty(); }

  wenc::PipelineConfig build(wenc::PipelineConfig base = {}) const {
    if (!preset.empty()) base = wenc::preset_config(preset);
    if (!config_file.empty()) {
      base = wenc::parse_config(wenc::read_file(config_file), std::move(base), config_file);
    }
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) {
        throw wenc::ConfigError("--set expects key=value, got '" + kv + "'");
      }
      wenc::set_config_value(base, kv.substr(0, eq), kv.substr(eq + 1));
    }
    base.validate();
    return base;
  }
};

void write_or_print(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    wenc::write_file(path, text);
  }
}

int cmd_synth(const wenc::SyntheticOptions& o, const std::string& out) {
  const wenc::Manifest m = wenc::generate_synthetic(o, out);
  std::cout << "wrote " << m.entries.size() << " documents and "
            << (fs::path(out) / "manifest.tsv").string() << '\n';
  return 0;
}

int cmd_fit(const ConfigArgs& args, const std::string& manifest,
            std::optional<std::uint64_t> seed, const std::string& out) {
  const wenc::PipelineConfig cfg = args.build();
  const wenc::Corpus corpus =
      wenc::load_corpus(wenc::load_manifest(manifest), cfg.l2_normalize_descriptors);
  const std::uint64_t s = seed ? *seed : cfg.resolved_seeds().front();
  const wenc::FittedModels m = wenc::fit_stage(cfg, corpus, s);
  wenc::models_to_archive(cfg, m).save(out);
  std::cout << "fitted '" << cfg.name << "' with seed " << s << " -> " << out << '\n';
  return 0;
}

int cmd_encode(const std::string& model, const std::string& manifest, const std::string& out) {
  const auto [cfg, m] = wenc::models_from_archive(wenc::Archive::load(model));
  const wenc::Corpus corpus =
      wenc::load_corpus(wenc::load_manifest(manifest), cfg.l2_normalize_descriptors);
  const wenc::EncodedCorpus enc = wenc::encode_corpus(cfg, m, corpus);
  wenc::Archive a = wenc::encodings_to_archive(enc);
  a.put_text("config", wenc::to_config_text(cfg));
  if (m.esvm_c) a.put_scalar("esvm.c", *m.esvm_c);
  a.save(out);
  std::cout << "encoded " << enc.size() << " documents (dim " << enc.encodings.cols() << ") -> "
            << out << '\n';
  return 0;
}

int cmd_evaluate(const ConfigArgs& args, const std::string& encodings, const std::string& out) {
  const wenc::Archive a = wenc::Archive::load(encodings);
  const wenc::EncodedCorpus enc = wenc::encodings_from_archive(a);
  wenc::PipelineConfig base;
  if (a.has("config")) base = wenc::parse_config(a.text("config"), {}, encodings + " config");
  const wenc::PipelineConfig cfg = args.given() ? args.build(base) : base;
  std::optional<double> c;
  if (a.has("esvm.c")) c = a.scalar("esvm.c");
  const wenc::MetricsReport r = wenc::evaluate_encodings(cfg, enc, c);
  write_or_print(out, wenc::format_report(r, cfg, 1));
  return 0;
}

int cmd_run(const ConfigArgs& args, const std::string& manifest, const std::string& out,
            const std::string& models_dir) {
  const wenc::PipelineConfig cfg = args.build();
  const wenc::RunResult r = wenc::run_pipeline(cfg, wenc::load_manifest(manifest));
  if (!models_dir.empty()) {
    for (std::size_t i = 0; i < r.models.size(); ++i) {
      wenc::models_to_archive(cfg, r.models[i])
          .save(fs::path(models_dir) / ("model_seed" + std::to_string(r.seeds[i]) + ".wmdl"));
    }
  }
  const std::string report = wenc::format_report(r.report, cfg, static_cast<int>(r.seeds.size()));
  if (!out.empty() && out != "-") wenc::write_file(out, report);
  std::cout << report;
  return 0;
}

std::string shape(const wenc::Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

int cmd_inspect(const std::string& path) {
  const std::string bytes = wenc::read_file(path);
  if (bytes.compare(0, 4, wenc::kDescriptorMagic) == 0) {
    const Eigen::MatrixXf rows = wenc::decode_descriptors(bytes, path);
    std::cout << "type = descriptors\nrows = " << rows.rows() << "\ndim = " << rows.cols() << '\n';
    return 0;
  }
  if (bytes.compare(0, 4, wenc::Archive::kMagic) != 0) {
    throw wenc::FormatError(path + ": unrecognized file type", 0);
  }
  const wenc::Archive a = wenc::Archive::deserialize(bytes, path);
  const std::string kind = a.has("kind") ? a.text("kind") : "unknown";
  std::cout << "type = archive\nkind = " << kind << '\n';
  if (kind == "model") {
    const auto [cfg, m] = wenc::models_from_archive(a);
    std::cout << "seed = " << m.seed << "\ncodebook = " << shape(m.codebook.centers)
              << "\ninertia = " << m.codebook.inertia << '\n';
    if (m.esvm_c) std::cout << "esvm.c = " << *m.esvm_c << '\n';
  } else if (kind == "encodings") {
    const wenc::EncodedCorpus e = wenc::encodings_from_archive(a);
    std::size_t train = 0;
    for (auto s : e.splits) train += s == wenc::Split::kTrain ? 1 : 0;
    std::cout << "documents = " << e.size() << "\ntrain = " << train
              << "\ntest = " << e.size() - train << "\ndim = " << e.encodings.cols() << '\n';
  }
  std::cout << "# entries\n";
  for (const auto& [name, value] : a.entries()) {
    if (const auto* m = std::get_if<wenc::Matrix>(&value)) {
      std::cout << "#   " << name << " matrix " << shape(*m) << '\n';
    } else {
      std::cout << "#   " << name << " text " << std::get<std::string>(value).size() << " bytes\n";
    }
  }
  if (a.has("config")) {
    std::cout << "# config\n";
    for (const auto& [k, v] : wenc::parse_key_values(a.text("config"))) {
      std::cout << "#   " << k << " = " << v << '\n';
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Writer retrieval encoding: embed, pool, normalize and evaluate local descriptors"};
  app.require_subcommand(1);

  wenc::SyntheticOptions syn;
  std::string syn_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic descriptor corpus");
  synth->add_option("-o,--out", syn_out, "Output directory")->required();
  synth->add_option("--writers", syn.writers, "Test writers")->capture_default_str();
  synth->add_option("--train-writers", syn.train_writers, "Training writers (-1: writers/2, at least 2)")
      ->capture_default_str();
  synth->add_option("--docs", syn.docs_per_writer, "Documents per writer")->capture_default_str();
  synth->add_option("--descriptors", syn.descriptors_per_doc, "Descriptors per document")
      ->capture_default_str();
  synth->add_option("--dim", syn.dim, "Descriptor dimension")->capture_default_str();
  synth->add_option("--atoms", syn.atoms, "Shared style atoms")->capture_default_str();
  synth->add_option("--spread", syn.writer_spread, "Writer perturbation of the atoms")
      ->capture_default_str();
  synth->add_option("--noise", syn.noise, "Descriptor noise")->capture_default_str();
  synth->add_option("--seed", syn.seed, "Generator seed")->capture_default_str();

  ConfigArgs fit_args;
  std::string fit_manifest, fit_out;
  std::optional<std::uint64_t> fit_seed;
  auto* fit = app.add_subcommand("fit", "Fit the models of one seed on the training split");
  fit_args.add_to(fit);
  fit->add_option("-m,--manifest", fit_manifest, "Corpus manifest")->required();
  fit->add_option("--seed", fit_seed, "Seed (default: first configured seed)");
  fit->add_option("-o,--out", fit_out, "Model archive to write")->required();

  std::string enc_model, enc_manifest, enc_out;
  auto* encode = app.add_subcommand("encode", "Encode every document with a fitted model");
  encode->add_option("--model", enc_model, "Model archive")->required();
  encode->add_option("-m,--manifest", enc_manifest, "Corpus manifest")->required();
  encode->add_option("-o,--out", enc_out, "Encodings archive to write")->required();

  ConfigArgs eval_args;
  std::string eval_in, eval_out;
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate retrieval on the test split of encodings");
  eval_args.add_to(evaluate);
  evaluate->add_option("-e,--encodings", eval_in, "Encodings archive")->required();
  evaluate->add_option("-o,--out", eval_out, "Report file (default: stdout)");

  ConfigArgs run_args;
  std::string run_manifest, run_out, run_models;
  auto* run = app.add_subcommand("run", "Fit, encode and evaluate every seed and average");
  run_args.add_to(run);
  run->add_option("-m,--manifest", run_manifest, "Corpus manifest")->required();
  run->add_option("-o,--out", run_out, "Report file");
  run->add_option("--models-dir", run_models, "Directory for per-seed model archives");

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "Describe a descriptor file or archive");
  inspect->add_option("file", inspect_path, "File to inspect")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(wenc::ExitCode::kUsage);
  }

  try {
    if (*synth) return cmd_synth(syn, syn_out);
    if (*fit) return cmd_fit(fit_args, fit_manifest, fit_seed, fit_out);
    if (*encode) return cmd_encode(enc_model, enc_manifest, enc_out);
    if (*evaluate) return cmd_evaluate(eval_args, eval_in, eval_out);
    if (*run) return cmd_run(run_args, run_manifest, run_out, run_models);
    if (*inspect) return cmd_inspect(inspect_path);
  } catch (const wenc::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(wenc::ExitCode::kData);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(wenc::ExitCode::kNumeric);
  }
  return static_cast<int>(wenc::ExitCode::kUsage);
}
