#pragma once

// Command-line front end. `run_cli` returns the process exit code:
// 0 success, 2 usage/config/input error, 3 pipeline failure, 4 partial failure.

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bodvw/evalharness.hpp"

namespace bodvw::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitPipeline = 3;
inline constexpr int kExitPartial = 4;

/// Flag-settable experiment keys. Each is exposed as --key-with-dashes.
inline const std::vector<std::string>& experiment_keys() {
  static const std::vector<std::string> keys = {
      "manifest",      "variant",        "layer",          "k",
      "runs",          "split_ratio",    "kmeans_max_iterations",
      "kmeans_tolerance", "kmeans_restarts", "kmeans_refine", "svm_gamma", "svm_c_grid",
      "svm_folds",     "svm_tolerance",  "svm_cache_mb",   "features",
      "model",         "model_hash",     "synthetic_seed", "output_dir",
      "cluster_grid",  "tap_p1",         "tap_p2",         "tap_p3",
      "tap_p4",        "tap_p5"};
  return keys;
}

inline std::string flag_name(std::string key) {
  for (auto& ch : key)
    if (ch == '_') ch = '-';
  return "--" + key;
}

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::string cache_dir;
  bool verbose = false;
};

/// Resolved settings: file values, then global flags, then subcommand flags.
inline ExperimentConfig resolve_config(const Globals& g, const std::map<std::string, std::string>& flags) {
  config::KeyValues kv;
  if (!g.config_path.empty()) kv = config::load(g.config_path);
  if (g.seed) kv["seed"] = std::to_string(*g.seed);
  if (!g.cache_dir.empty()) kv["cache_dir"] = g.cache_dir;
  for (const auto& [k, v] : flags) kv[k] = v;
  auto cfg = apply_key_values(ExperimentConfig{}, kv);
  cfg.workers = g.workers.value_or(default_workers());
  return cfg;
}

class Logger {
 public:
  explicit Logger(bool verbose) : verbose_(verbose) {}
  void info(const std::string& msg) const { std::cerr << msg << '\n'; }
  void debug(const std::string& msg) const {
    if (verbose_) std::cerr << msg << '\n';
  }

 private:
  bool verbose_;
};

inline nlohmann::json artifact_header(const ExperimentConfig& cfg, const std::string& command) {
  return {{"tool_version", kToolVersion}, {"command", command}, {"config", cfg.to_json()}};
}

inline std::string sidecar_path(const std::string& path) { return path + ".json"; }

inline void write_sidecar(const std::string& path, nlohmann::json j) {
  io::write_text_file(sidecar_path(path), j.dump(2) + "\n");
}

inline nlohmann::json read_sidecar(const std::string& path) {
  const auto p = sidecar_path(path);
  if (!std::filesystem::exists(p)) return nlohmann::json::object();
  try {
    return nlohmann::json::parse(io::read_text_file(p));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(p + ": " + e.what());
  }
}

inline DatasetManifest require_manifest(const ExperimentConfig& cfg) {
  if (cfg.manifest.empty()) throw ConfigError("no manifest given (--manifest or manifest= in the config)");
  return load_manifest(cfg.manifest);
}

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_extract(const ExperimentConfig& cfg, const Logger& log) {
  if (cfg.model.empty()) throw ConfigError("extract needs --model");
  if (cfg.cache_dir.empty()) throw ConfigError("extract needs --cache-dir");
  if (!std::filesystem::exists(cfg.model)) throw IoError("model file not found: " + cfg.model);
  const auto manifest = require_manifest(cfg);
  OnnxFeatureProvider provider(cfg.model, cfg.cache_dir, cfg.taps);
  provider.model();  // fail before touching the cache if the graph is unusable
  std::atomic<std::size_t> failed{0};
  std::mutex err_mu;
  parallel_for(manifest.entries.size(), cfg.workers, [&](std::size_t i) {
    const auto& e = manifest.entries[i];
    try {
      provider.get(manifest, e, cfg.layer);
      log.debug("ok " + e.image_path);
    } catch (const Error& ex) {
      ++failed;
      std::lock_guard lock(err_mu);
      log.info("error: " + e.image_path + ": " + ex.what());
    }
  });
  std::cout << "extracted " << provider.stats().extracted << ", skipped " << provider.stats().cache_hits
            << ", failed " << failed << '\n';
  return failed ? kExitUsage : kExitOk;
}

/// Per-image normalized deep features for every manifest entry.
inline std::vector<DeepFeatureSet> manifest_features(const ExperimentConfig& cfg, const DatasetManifest& m,
                                                     FeatureProvider& provider) {
  std::vector<DeepFeatureSet> sets(m.entries.size());
  parallel_for(sets.size(), cfg.workers, [&](std::size_t i) {
    auto map = provider.get(m, m.entries[i], cfg.layer);
    validate_feature_map(map);
    sets[i] = deep_features(map, cfg.variant);
    sets[i].provenance = m.entries[i].image_path;
  });
  return sets;
}

inline int cmd_build_codebook(const ExperimentConfig& cfg, const std::string& out, const Logger& log) {
  const auto manifest = require_manifest(cfg);
  auto provider = make_provider(cfg);
  const auto sets = manifest_features(cfg, manifest, *provider);
  KMeansConfig km = cfg.kmeans;
  km.k = cfg.k;
  km.seed = cfg.base_seed;
  log.debug("clustering " + std::to_string(sets.size()) + " images into k=" + std::to_string(cfg.k));
  const auto book = train_codebook(sets, km, cfg.workers);
  save_codebook(book, out);
  auto side = artifact_header(cfg, "build-codebook");
  side["codebook"] = {{"hash", book.hash},       {"k", book.k},
                      {"dim", book.dim},         {"layer", book.layer.name()},
                      {"norm", to_string(book.norm)}, {"inertia", book.inertia},
                      {"iterations", book.iterations_run}, {"config_hash", book.config_hash},
                      {"images", book.sources.size()}};
  write_sidecar(out, side);
  std::cout << "codebook " << out << " k=" << book.k << " inertia=" << format_double(book.inertia)
            << " hash=" << book.hash << '\n';
  return kExitOk;
}

/// Refuses a codebook that cannot serve the configured layer/variant.
inline void check_codebook(const Codebook& book, const ExperimentConfig& cfg) {
  if (book.layer != cfg.layer)
    throw CompatibilityError("codebook was trained at " + book.layer.name() + " but the pipeline taps " +
                             cfg.layer.name());
  if (book.norm != feature_norm_for(cfg.variant))
    throw CompatibilityError(std::string("codebook expects ") + to_string(book.norm) + " features, variant " +
                             to_string(cfg.variant) + " produces " + to_string(feature_norm_for(cfg.variant)));
}

inline int cmd_encode(ExperimentConfig cfg, const std::string& codebook_path, const std::string& out,
                      bool layer_given) {
  const auto book = load_codebook(codebook_path);
  if (!layer_given) cfg.layer = book.layer;
  check_codebook(book, cfg);
  const auto manifest = require_manifest(cfg);
  auto provider = make_provider(cfg);
  const auto sets = manifest_features(cfg, manifest, *provider);
  std::vector<FeatureRow> rows(sets.size());
  for (std::size_t i = 0; i < sets.size(); ++i) {
    rows[i].path = manifest.entries[i].image_path;
    rows[i].label = manifest.categories[manifest.entries[i].label];
    rows[i].weights = encode_features(sets[i], book, cfg.variant, {book.hash}).weights;
  }
  write_feature_csv(out, rows);
  auto side = artifact_header(cfg, "encode");
  side["codebook_hash"] = book.hash;
  side["categories"] = manifest.categories;
  write_sidecar(out, side);
  std::cout << "encoded " << rows.size() << " images to " << out << '\n';
  return kExitOk;
}

inline int cmd_train(const ExperimentConfig& cfg, const std::string& features_path, const std::string& out,
                     std::optional<double> fixed_c) {
  const auto rows = read_feature_csv(features_path);
  if (rows.empty()) throw InvalidArgument(features_path + ": no rows");
  const auto side = read_sidecar(features_path);
  svm::LabeledData data;
  if (side.contains("categories")) {
    data.classes = side["categories"].get<std::vector<std::string>>();
  } else {
    std::set<std::string> labels;
    for (const auto& r : rows) labels.insert(r.label);
    data.classes.assign(labels.begin(), labels.end());
  }
  std::vector<std::vector<double>> x;
  for (const auto& r : rows) {
    const auto it = std::find(data.classes.begin(), data.classes.end(), r.label);
    if (it == data.classes.end()) throw FormatError(features_path + ": unknown label '" + r.label + "'");
    x.push_back(r.weights);
    data.y.push_back(static_cast<std::size_t>(it - data.classes.begin()));
    data.provenance.push_back(r.path);
  }
  data.X = svm::FeatureMatrix::from_rows(x);

  svm::SvmModel model;
  nlohmann::json cv = nlohmann::json::array();
  if (fixed_c) {
    model = svm::train_multiclass(data, *fixed_c, cfg.gamma, cfg.smo, cfg.workers);
  } else {
    auto spec = cfg.grid;
    spec.fold_seed = cfg.base_seed;
    auto result = svm::grid_search_C(data, spec, cfg.gamma, cfg.smo, cfg.workers);
    for (const auto& row : result.table) cv.push_back({{"C", row.C}, {"mean_accuracy", row.mean_accuracy}});
    model = std::move(result.model);
  }
  model.metadata = artifact_header(cfg, "train");
  model.metadata["features"] = side;
  model.metadata["cv_table"] = cv;
  if (side.contains("codebook_hash")) model.metadata["codebook_hash"] = side["codebook_hash"];
  if (side.contains("config")) {
    model.metadata["layer"] = side["config"].value("layer", "");
    model.metadata["variant"] = side["config"].value("variant", "");
  }
  svm::save_model(model, out);
  std::cout << "model " << out << " C=" << model.C << " classes=" << model.classes.size() << '\n';
  return kExitOk;
}

inline int cmd_predict(ExperimentConfig cfg, const std::string& model_path, const std::string& codebook_path,
                       const std::vector<std::string>& images, bool layer_given, bool variant_given,
                       const Logger& log) {
  const auto model = svm::load_model(model_path);
  const auto book = load_codebook(codebook_path);
  const auto& meta = model.metadata;
  if (meta.contains("codebook_hash") && meta["codebook_hash"].get<std::string>() != book.hash)
    throw CompatibilityError("svm model was trained against codebook " + meta["codebook_hash"].get<std::string>() +
                             ", got " + book.hash);
  if (model.dim != book.k)
    throw CompatibilityError("svm model expects " + std::to_string(model.dim) + " features, codebook has k=" +
                             std::to_string(book.k));
  if (!layer_given) cfg.layer = book.layer;
  if (!variant_given && meta.contains("variant") && !meta["variant"].get<std::string>().empty())
    cfg.variant = parse_variant(meta["variant"].get<std::string>());
  if (meta.contains("layer") && !meta["layer"].get<std::string>().empty() &&
      PoolingLayerId::parse(meta["layer"].get<std::string>()) != cfg.layer)
    throw CompatibilityError("svm model was trained on " + meta["layer"].get<std::string>() + " features, pipeline taps " +
                             cfg.layer.name());
  check_codebook(book, cfg);
  if (images.empty()) return kExitOk;

  auto provider = make_provider(cfg);
  DatasetManifest adhoc;
  adhoc.name = "predict";
  adhoc.categories = model.classes;
  std::vector<std::string> lines(images.size());
  std::atomic<std::size_t> failed{0};
  parallel_for(images.size(), cfg.workers, [&](std::size_t i) {
    try {
      const auto map = provider->get(adhoc, {images[i], 0}, cfg.layer);
      validate_feature_map(map);
      const auto bovw = encode_image(map, book, cfg.variant, {book.hash});
      lines[i] = detail::csv_field(images[i]) + "," + model.classes[svm::predict(model, bovw.weights)];
    } catch (const Error& e) {
      ++failed;
      lines[i] = detail::csv_field(images[i]) + ",ERROR";
      log.info("error: " + images[i] + ": " + e.what());
    }
  });
  for (const auto& l : lines) std::cout << l << '\n';
  return failed ? kExitPartial : kExitOk;
}

inline int cmd_evaluate(const ExperimentConfig& cfg, const Logger& log) {
  const auto manifest = require_manifest(cfg);
  auto provider = make_provider(cfg);
  auto report = run_experiment(cfg, manifest, *provider, {cfg.workers, [&](const std::string& m) { log.debug(m); }});
  std::filesystem::create_directories(cfg.output_dir);
  const auto stem = (std::filesystem::path(cfg.output_dir) / ("report_" + std::string(to_string(cfg.variant)))).string();
  export_report(report, stem + ".json", ReportFormat::kJson);
  export_report(report, stem + ".md", ReportFormat::kMarkdown);
  if (!report.complete) {
    log.info("error: " + report.error);
    return kExitPipeline;
  }
  std::cout << to_string(cfg.variant) << " " << cfg.layer.name() << " k=" << cfg.k << ": mean accuracy "
            << detail::fixed(report.mean_accuracy) << "% over " << report.runs.size() << " runs -> " << stem
            << ".json\n";
  return kExitOk;
}

inline int cmd_ablate(const ExperimentConfig& cfg, const std::string& axis, const Logger& log) {
  if (axis != "layers" && axis != "clusters") throw ConfigError("ablate axis must be 'layers' or 'clusters'");
  const auto manifest = require_manifest(cfg);
  auto provider = make_provider(cfg);
  RunOptions opts{cfg.workers, [&](const std::string& m) { log.debug(m); }};
  const auto table = axis == "layers" ? ablate_layers(cfg, manifest, *provider, opts)
                                      : ablate_clusters(cfg, manifest, *provider, opts);
  std::filesystem::create_directories(cfg.output_dir);
  const auto stem = (std::filesystem::path(cfg.output_dir) / ("ablation_" + axis)).string();
  io::write_text_file(stem + ".json", ablation_to_json(table).dump(2) + "\n");
  io::write_text_file(stem + ".md", ablation_markdown(table));
  io::write_text_file(stem + ".csv", ablation_csv(table));
  std::cout << ablation_markdown(table);
  for (const auto& row : table.rows)
    if (!row.complete) return kExitPipeline;
  return kExitOk;
}

/// Writes a manifest of placeholder paths for use with `features=synthetic`.
inline int cmd_synth(const std::string& out, std::size_t classes, std::size_t per_class) {
  if (classes < 2 || per_class < 2) throw ConfigError("synth needs at least 2 classes of 2 images");
  DatasetManifest m;
  m.name = "synthetic";
  for (std::size_t c = 0; c < classes; ++c) m.categories.push_back("class_" + std::to_string(c));
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i)
      m.entries.push_back({"synthetic/" + m.categories[c] + "/" + std::to_string(i) + ".png", c});
  save_manifest(m, out);
  std::cout << "wrote " << m.entries.size() << " entries to " << out << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline int run_cli(int argc, char** argv) {
  CLI::App app{"Bag of deep visual words for chest X-ray classification", "bodvw"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  app.fallthrough();

  Globals g;
  std::uint64_t seed = 0;
  std::size_t workers = 0;
  app.add_option("--config", g.config_path, "Key-value config file")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "Base RNG seed");
  auto* workers_opt = app.add_option("--workers", workers, "Worker threads (default: all cores)")->check(CLI::PositiveNumber);
  app.add_option("--cache-dir", g.cache_dir, "Feature-map cache directory");
  app.add_flag("-v,--verbose", g.verbose, "Log progress to stderr");

  std::map<std::string, std::string> flags;
  auto add_experiment_flags = [&](CLI::App* sub) {
    for (const auto& key : experiment_keys()) {
      sub->add_option_function<std::string>(flag_name(key), [&flags, key](const std::string& v) { flags[key] = v; },
                                            "Override '" + key + "'");
    }
  };
  auto given = [&](const std::string& key) { return flags.count(key) > 0; };

  auto* extract = app.add_subcommand("extract", "Extract and cache pooling-layer feature maps");
  auto* build = app.add_subcommand("build-codebook", "Cluster training deep features into a codebook");
  auto* encode = app.add_subcommand("encode", "Encode images as BoVW vectors (feature CSV)");
  auto* train = app.add_subcommand("train", "Fit the RBF SVM on a feature CSV");
  auto* predict = app.add_subcommand("predict", "Classify images with a trained model");
  auto* evaluate = app.add_subcommand("evaluate", "Run the repeated split protocol and write reports");
  auto* ablate = app.add_subcommand("ablate", "Sweep pooling layers or cluster counts");
  auto* synth = app.add_subcommand("synth", "Write a placeholder manifest for synthetic features");
  for (auto* sub : {extract, build, encode, train, predict, evaluate, ablate}) add_experiment_flags(sub);

  std::string out, codebook_path, features_path, model_path, axis;
  std::vector<std::string> images;
  std::optional<double> fixed_c;
  std::size_t synth_classes = 3, synth_per_class = 50;
  build->add_option("-o,--out", out, "Codebook file")->required();
  encode->add_option("--codebook", codebook_path, "Codebook file")->required()->check(CLI::ExistingFile);
  encode->add_option("-o,--out", out, "Feature CSV")->required();
  train->add_option("--data", features_path, "Feature CSV")->required()->check(CLI::ExistingFile);
  train->add_option("-o,--out", out, "SVM model JSON")->required();
  train->add_option("--C", fixed_c, "Skip the grid search and use this C");
  predict->add_option("--svm", model_path, "SVM model JSON")->required()->check(CLI::ExistingFile);
  predict->add_option("--codebook", codebook_path, "Codebook file")->required()->check(CLI::ExistingFile);
  predict->add_option("images", images, "Image paths");
  ablate->add_option("axis", axis, "layers | clusters")->required()->check(CLI::IsMember({"layers", "clusters"}));
  synth->add_option("-o,--out", out, "Manifest CSV")->required();
  synth->add_option("--classes", synth_classes, "Number of classes");
  synth->add_option("--per-class", synth_per_class, "Images per class");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  if (seed_opt->count()) g.seed = seed;
  if (workers_opt->count()) g.workers = workers;
  const Logger log(g.verbose);

  try {
    if (synth->parsed()) return cmd_synth(out, synth_classes, synth_per_class);
    const auto cfg = resolve_config(g, flags);
    log.debug("resolved config: " + cfg.to_json().dump());
    if (extract->parsed()) return cmd_extract(cfg, log);
    if (build->parsed()) return cmd_build_codebook(cfg, out, log);
    if (encode->parsed()) return cmd_encode(cfg, codebook_path, out, given("layer"));
    if (train->parsed()) return cmd_train(cfg, features_path, out, fixed_c);
    if (predict->parsed())
      return cmd_predict(cfg, model_path, codebook_path, images, given("layer"), given("variant"), log);
    if (evaluate->parsed()) return cmd_evaluate(cfg, log);
    if (ablate->parsed()) return cmd_ablate(cfg, axis, log);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const CompatibilityError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitPipeline;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitPipeline;
  }
  return kExitUsage;
}

}  // namespace bodvw::cli
