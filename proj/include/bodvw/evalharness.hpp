#pragma once

// Experimental protocol: stratified re-splits, per-run codebook/SVM training,
// confusion-matrix metrics, ablations and report export.

#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bodvw/cnn_adapter.hpp"
#include "bodvw/codebook.hpp"
#include "bodvw/config.hpp"
#include "bodvw/deepfeatures.hpp"
#include "bodvw/encoder.hpp"
#include "bodvw/imageio.hpp"
#include "bodvw/parallel.hpp"
#include "bodvw/svm.hpp"
#include "bodvw/version.hpp"

namespace bodvw {

// ---------------------------------------------------------------------------
// Splits

/// Per category, round-half-up(ratio * n_c) shuffled images go to train.
inline std::pair<DatasetManifest, DatasetManifest> stratified_split(const DatasetManifest& m, double ratio,
                                                                    std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must be in (0, 1)");
  validate_manifest(m);
  std::mt19937_64 rng(seed);
  std::vector<bool> to_train(m.entries.size(), false);
  for (std::size_t c = 0; c < m.categories.size(); ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < m.entries.size(); ++i)
      if (m.entries[i].label == c) members.push_back(i);
    const auto n = members.size();
    // The small bias keeps exact halves from rounding down through 0.7 * n style
    // representation error.
    const auto n_train = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 0.5 + 1e-9));
    if (n < 2 || n_train == 0 || n_train >= n)
      throw ConfigError("category '" + m.categories[c] + "' has " + std::to_string(n) +
                        " images, too few to split");
    for (std::size_t i = n; i > 1; --i) {
      const auto r = static_cast<std::size_t>(static_cast<double>(rng() >> 11) * 0x1.0p-53 * static_cast<double>(i));
      std::swap(members[i - 1], members[std::min(r, i - 1)]);
    }
    for (std::size_t p = 0; p < n_train; ++p) to_train[members[p]] = true;
  }
  DatasetManifest train = m, test = m;
  train.entries.clear();
  test.entries.clear();
  for (std::size_t i = 0; i < m.entries.size(); ++i) (to_train[i] ? train : test).entries.push_back(m.entries[i]);
  train.name = m.name + ":train";
  test.name = m.name + ":test";
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Metrics

struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::size_t> counts;  // rows = true, columns = predicted

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t n) : classes(n), counts(n * n, 0) {}

  std::size_t& at(std::size_t truth, std::size_t predicted) { return counts[truth * classes + predicted]; }
  [[nodiscard]] std::size_t at(std::size_t truth, std::size_t predicted) const {
    return counts[truth * classes + predicted];
  }
  [[nodiscard]] std::size_t total() const {
    std::size_t t = 0;
    for (auto c : counts) t += c;
    return t;
  }
  [[nodiscard]] std::size_t trace() const {
    std::size_t t = 0;
    for (std::size_t c = 0; c < classes; ++c) t += at(c, c);
    return t;
  }
  /// Percentage of correct predictions.
  [[nodiscard]] double accuracy() const {
    const auto n = total();
    return n == 0 ? 0.0 : 100.0 * static_cast<double>(trace()) / static_cast<double>(n);
  }

  bool operator==(const ConfusionMatrix&) const = default;
};

struct ClassMetrics {
  double precision = 0.0;  // fractions in [0, 1]
  double recall = 0.0;
  double f1 = 0.0;

  bool operator==(const ClassMetrics&) const = default;
};

/// precision = TP/(TP+FP), recall = TP/(TP+FN), f1 = 2RP/(R+P); 0/0 := 0.
inline std::vector<ClassMetrics> metrics(const ConfusionMatrix& cm) {
  std::vector<ClassMetrics> out(cm.classes);
  for (std::size_t c = 0; c < cm.classes; ++c) {
    std::size_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (std::size_t o = 0; o < cm.classes; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    auto& m = out[c];
    m.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    m.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    m.f1 = m.precision + m.recall == 0.0 ? 0.0 : 2.0 * (m.recall * m.precision) / (m.recall + m.precision);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature providers

/// Source of pooling-layer feature maps for manifest entries. Implementations
/// must be safe to call concurrently.
class FeatureProvider {
 public:
  virtual ~FeatureProvider() = default;
  virtual FeatureMap get(const DatasetManifest& m, const ManifestEntry& e, PoolingLayerId layer) = 0;
  [[nodiscard]] virtual std::string describe() const = 0;
};

struct ExtractionStats {
  std::atomic<std::size_t> extracted{0};
  std::atomic<std::size_t> cache_hits{0};
};

/// Decode, preprocess and run the interchange model, with an optional disk cache.
class OnnxFeatureProvider : public FeatureProvider {
 public:
  /// Without a readable model file, `model_hash_hint` allows cache-only use.
  OnnxFeatureProvider(std::string model_path, std::string cache_dir, TapOverrides overrides = {},
                      std::string model_hash_hint = {})
      : model_path_(std::move(model_path)), overrides_(std::move(overrides)) {
    if (std::filesystem::exists(model_path_)) {
      model_hash_ = hashing::sha256_hex(io::read_file(model_path_));
    } else if (!model_hash_hint.empty()) {
      model_hash_ = std::move(model_hash_hint);
    } else {
      throw IoError("model file not found: " + model_path_);
    }
    if (!cache_dir.empty()) cache_ = std::make_unique<FeatureCache>(std::move(cache_dir));
  }

  FeatureMap get(const DatasetManifest& m, const ManifestEntry& e, PoolingLayerId layer) override {
    const auto path = m.resolve(e);
    const auto bytes = io::read_file(path);
    const auto key = feature_cache_key(path, hashing::sha256_hex(bytes), layer, model_hash_);
    if (cache_) {
      if (auto hit = cache_->lookup(key, layer)) {
        ++stats_.cache_hits;
        return std::move(*hit);
      }
    }
    auto map = InferenceSession(model()).extract(preprocess(load_image(path), path), layer);
    ++stats_.extracted;
    if (cache_) cache_->store(key, map);
    return map;
  }

  [[nodiscard]] std::string describe() const override { return "onnx:" + model_path_; }
  [[nodiscard]] const std::string& model_hash() const { return model_hash_; }
  [[nodiscard]] const ExtractionStats& stats() const { return stats_; }

  std::shared_ptr<const Vgg16Model> model() {
    std::call_once(load_once_, [&] {
      if (!std::filesystem::exists(model_path_))
        throw IoError("model file not found and feature not cached: " + model_path_);
      model_ = Vgg16Model::load(model_path_, overrides_);
    });
    return model_;
  }

 private:
  std::string model_path_;
  TapOverrides overrides_;
  std::string model_hash_;
  std::unique_ptr<FeatureCache> cache_;
  std::once_flag load_once_;
  std::shared_ptr<const Vgg16Model> model_;
  ExtractionStats stats_;
};

/// Deterministic stand-in maps: each class owns `prototypes_per_class`
/// non-negative unit prototypes on disjoint channel blocks, and every position
/// of an image draws a prototype from an image-specific mixture over its
/// class's prototypes, scaled and lightly perturbed. A small fraction of
/// positions are all-zero.
struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t prototypes_per_class = 5;
  double noise = 0.02;
  double zero_fraction = 0.03;
};

class SyntheticFeatureProvider : public FeatureProvider {
 public:
  explicit SyntheticFeatureProvider(SyntheticSpec spec = {}) : spec_(spec) {}

  FeatureMap get(const DatasetManifest& m, const ManifestEntry& e, PoolingLayerId layer) override {
    const auto shape = layer_shape(layer);
    const auto protos = prototypes(m.categories.size(), shape.depth);
    const auto digest = hashing::sha256_hex(e.image_path);
    std::mt19937_64 rng(std::stoull(digest.substr(0, 16), nullptr, 16) ^ spec_.seed);
    auto u01 = [&] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };

    const auto per = spec_.prototypes_per_class;
    std::vector<double> mix(per);
    double total = 0.0;
    for (auto& w : mix) total += (w = 0.2 + u01());
    FeatureMap map(layer, e.image_path);
    for (std::size_t pos = 0; pos < shape.positions(); ++pos) {
      float* v = map.values.data() + pos * shape.depth;
      if (u01() < spec_.zero_fraction) continue;
      double pick = u01() * total;
      std::size_t p = 0;
      while (p + 1 < per && pick >= mix[p]) pick -= mix[p++];
      const double scale = 0.5 + 2.5 * u01();
      const auto& proto = protos[e.label * per + p];
      for (std::size_t l = 0; l < shape.depth; ++l)
        v[l] = static_cast<float>(scale * (proto[l] + spec_.noise * u01()));
    }
    return map;
  }

  [[nodiscard]] std::string describe() const override { return "synthetic:" + std::to_string(spec_.seed); }
  [[nodiscard]] const SyntheticSpec& spec() const { return spec_; }

  /// Unit-norm prototypes, classes * prototypes_per_class rows of length depth.
  [[nodiscard]] std::vector<std::vector<double>> prototypes(std::size_t classes, std::size_t depth) const {
    const std::size_t count = classes * spec_.prototypes_per_class;
    const std::size_t block = std::max<std::size_t>(1, depth / count);
    std::mt19937_64 rng(spec_.seed * 0x2545F4914F6CDD1DULL + 17);
    std::vector<std::vector<double>> out(count, std::vector<double>(depth, 0.0));
    for (std::size_t p = 0; p < count; ++p) {
      double norm = 0.0;
      for (std::size_t b = 0; b < block; ++b) {
        const double v = 0.5 + static_cast<double>(rng() >> 11) * 0x1.0p-53;
        out[p][(p * block + b) % depth] = v;
        norm += v * v;
      }
      for (auto& v : out[p]) v /= std::sqrt(norm);
    }
    return out;
  }

 private:
  SyntheticSpec spec_;
};

// ---------------------------------------------------------------------------
// Experiment configuration

struct ExperimentConfig {
  std::string manifest;
  Variant variant = Variant::kBoDVW;
  PoolingLayerId layer{4};
  std::size_t k = 400;
  std::size_t runs = 5;
  double split_ratio = 0.7;
  std::uint64_t base_seed = 0;
  KMeansConfig kmeans{};  // k and seed are overridden per run
  double gamma = svm::kDefaultGamma;
  svm::GridSearchSpec grid{};
  svm::SmoOptions smo{};
  std::string features = "onnx";  // onnx | synthetic
  std::string model;
  std::string model_hash;
  std::string cache_dir;
  TapOverrides taps{};
  SyntheticSpec synthetic{};
  std::vector<std::size_t> cluster_grid = {100, 150, 200, 250, 300, 350, 400, 450, 500};
  std::string output_dir = ".";
  std::size_t workers = 1;  // execution only; never changes results

  void validate() const {
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError("split_ratio must be in (0, 1)");
    if (runs < 1) throw ConfigError("runs must be >= 1");
    if (k < 2) throw ConfigError("k must be >= 2");
    if (!(gamma > 0.0)) throw ConfigError("svm_gamma must be positive");
    if (features != "onnx" && features != "synthetic")
      throw ConfigError("features must be 'onnx' or 'synthetic'");
    KMeansConfig probe = kmeans;
    probe.k = k;
    probe.validate();
    grid.validate();
    if (cluster_grid.empty()) throw ConfigError("cluster_grid must not be empty");
  }

  /// Everything that determines the numbers, including the fixed pipeline choices.
  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json taps_json = nlohmann::json::object();
    for (std::size_t i = 0; i < taps.size(); ++i)
      if (!taps[i].empty()) taps_json["p_" + std::to_string(i + 1)] = taps[i];
    return {{"manifest", manifest},
            {"variant", to_string(variant)},
            {"layer", layer.name()},
            {"k", k},
            {"runs", runs},
            {"split_ratio", split_ratio},
            {"split_rounding", "round_half_up_per_category"},
            {"base_seed", base_seed},
            {"seed_schedule", "run r uses base_seed + r for split, k-means and CV folds"},
            {"features", features},
            {"model", model},
            {"taps", taps_json},
            {"preprocessing", kPreprocessTag},
            {"synthetic",
             {{"seed", synthetic.seed},
              {"prototypes_per_class", synthetic.prototypes_per_class},
              {"noise", synthetic.noise},
              {"zero_fraction", synthetic.zero_fraction}}},
            {"normalization_epsilon", kNormEpsilon},
            {"feature_normalization", to_string(feature_norm_for(variant))},
            {"histogram_normalization", variant == Variant::kBoDVW ? "l2" : "l1"},
            {"kmeans",
             {{"init", kmeans.init},
              {"refine", kmeans.refine},
              {"n_restarts", kmeans.n_restarts},
              {"max_iterations", kmeans.max_iterations},
              {"rel_tolerance", kmeans.rel_tolerance},
              {"distance", "squared_euclidean"},
              {"empty_cluster", "reseed_farthest_point"},
              {"pool", "all training images, retrained per run"}}},
            {"svm",
             {{"kernel", "rbf"},
              {"gamma", gamma},
              {"C_grid", grid.c_grid},
              {"folds", grid.folds},
              {"cv", "stratified, ties to smallest C, refit on full train split"},
              {"multiclass", "one_vs_one_majority_vote"},
              {"smo_selection", "maximal_violating_pair"},
              {"smo_tolerance", smo.tolerance},
              {"standardize", "z-score fitted on train split, after histogram normalization"}}}};
  }
};

/// Applies flat key/value settings on top of `cfg`. Unknown keys are errors.
inline ExperimentConfig apply_key_values(ExperimentConfig cfg, const config::KeyValues& kv) {
  using namespace config;
  for (const auto& [key, v] : kv) {
    if (key == "schema_version") continue;
    else if (key == "manifest") cfg.manifest = v;
    else if (key == "variant") cfg.variant = parse_variant(v);
    else if (key == "layer") cfg.layer = PoolingLayerId::parse(v);
    else if (key == "k") cfg.k = to_count(key, v);
    else if (key == "runs") cfg.runs = to_count(key, v);
    else if (key == "split_ratio") cfg.split_ratio = to_double(key, v);
    else if (key == "seed") cfg.base_seed = static_cast<std::uint64_t>(to_count(key, v));
    else if (key == "kmeans_max_iterations") cfg.kmeans.max_iterations = to_count(key, v);
    else if (key == "kmeans_tolerance") cfg.kmeans.rel_tolerance = to_double(key, v);
    else if (key == "kmeans_restarts") cfg.kmeans.n_restarts = to_count(key, v);
    else if (key == "kmeans_refine") cfg.kmeans.refine = v;
    else if (key == "svm_gamma") cfg.gamma = to_double(key, v);
    else if (key == "svm_c_grid") cfg.grid.c_grid = to_double_list(key, v);
    else if (key == "svm_folds") cfg.grid.folds = to_count(key, v);
    else if (key == "svm_tolerance") cfg.smo.tolerance = to_double(key, v);
    else if (key == "svm_cache_mb") cfg.smo.cache_bytes = to_count(key, v) << 20;
    else if (key == "features") cfg.features = v;
    else if (key == "model") cfg.model = v;
    else if (key == "model_hash") cfg.model_hash = v;
    else if (key == "cache_dir") cfg.cache_dir = v;
    else if (key == "synthetic_seed") cfg.synthetic.seed = static_cast<std::uint64_t>(to_count(key, v));
    else if (key == "output_dir") cfg.output_dir = v;
    else if (key == "workers") cfg.workers = std::max<std::size_t>(1, to_count(key, v));
    else if (key == "cluster_grid") {
      cfg.cluster_grid.clear();
      for (double d : to_double_list(key, v)) cfg.cluster_grid.push_back(static_cast<std::size_t>(d));
    } else if (key.size() == 6 && key.starts_with("tap_p") && key[5] >= '1' && key[5] <= '5') {
      cfg.taps[static_cast<std::size_t>(key[5] - '1')] = v;
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

inline std::unique_ptr<FeatureProvider> make_provider(const ExperimentConfig& cfg) {
  if (cfg.features == "synthetic") return std::make_unique<SyntheticFeatureProvider>(cfg.synthetic);
  return std::make_unique<OnnxFeatureProvider>(cfg.model, cfg.cache_dir, cfg.taps, cfg.model_hash);
}

// ---------------------------------------------------------------------------
// Reports

struct CvEntry {
  double C = 0.0;
  double mean_accuracy = 0.0;  // percent
  std::vector<double> fold_accuracy;

  bool operator==(const CvEntry&) const = default;
};

struct RunResult {
  std::size_t run = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;  // percent
  double best_C = 0.0;
  std::vector<CvEntry> cv_table;
  ConfusionMatrix confusion;
  std::vector<ClassMetrics> per_class;  // percent
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::size_t pool_size = 0;
  double codebook_inertia = 0.0;
  std::uint32_t codebook_iterations = 0;
  std::string codebook_hash;

  bool operator==(const RunResult&) const = default;
};

struct EvalReport {
  int schema_version = 1;
  std::string tool_version = kToolVersion;
  nlohmann::json config;
  std::vector<std::string> classes;
  std::vector<RunResult> runs;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  std::vector<ClassMetrics> per_class_mean;  // percent
  bool complete = true;
  std::string error;
  /// Wall-clock seconds per stage plus worker count; excluded from equality of
  /// results since it varies between identical runs.
  nlohmann::json runtime = nlohmann::json::object();

  [[nodiscard]] std::vector<double> accuracies() const {
    std::vector<double> a;
    for (const auto& r : runs) a.push_back(r.accuracy);
    return a;
  }

  bool operator==(const EvalReport&) const = default;
};

inline nlohmann::json report_to_json(const EvalReport& r, bool include_runtime = true) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& run : r.runs) {
    nlohmann::json cv = nlohmann::json::array();
    for (const auto& e : run.cv_table)
      cv.push_back({{"C", e.C}, {"mean_accuracy", e.mean_accuracy}, {"fold_accuracy", e.fold_accuracy}});
    nlohmann::json per_class = nlohmann::json::array();
    for (const auto& m : run.per_class)
      per_class.push_back({{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}});
    nlohmann::json confusion = nlohmann::json::array();
    for (std::size_t t = 0; t < run.confusion.classes; ++t) {
      std::vector<std::size_t> row;
      for (std::size_t p = 0; p < run.confusion.classes; ++p) row.push_back(run.confusion.at(t, p));
      confusion.push_back(row);
    }
    runs.push_back({{"run", run.run},
                    {"seed", run.seed},
                    {"accuracy", run.accuracy},
                    {"best_C", run.best_C},
                    {"cv_table", cv},
                    {"confusion", confusion},
                    {"per_class", per_class},
                    {"n_train", run.n_train},
                    {"n_test", run.n_test},
                    {"pool_size", run.pool_size},
                    {"codebook", {{"inertia", run.codebook_inertia},
                                  {"iterations", run.codebook_iterations},
                                  {"hash", run.codebook_hash}}}});
  }
  nlohmann::json per_class_mean = nlohmann::json::array();
  for (std::size_t c = 0; c < r.per_class_mean.size(); ++c)
    per_class_mean.push_back({{"class", r.classes.at(c)},
                              {"precision", r.per_class_mean[c].precision},
                              {"recall", r.per_class_mean[c].recall},
                              {"f1", r.per_class_mean[c].f1}});
  nlohmann::json j = {{"schema", "bodvw-report"},
                      {"schema_version", r.schema_version},
                      {"tool_version", r.tool_version},
                      {"config", r.config},
                      {"classes", r.classes},
                      {"runs", runs},
                      {"accuracies", r.accuracies()},
                      {"mean_accuracy", r.mean_accuracy},
                      {"std_accuracy", r.std_accuracy},
                      {"per_class_mean", per_class_mean},
                      {"complete", r.complete},
                      {"error", r.error}};
  if (include_runtime) j["runtime"] = r.runtime;
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema") != "bodvw-report") throw FormatError("report: unknown schema");
    EvalReport r;
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != 1) throw FormatError("report: unsupported schema_version");
    r.tool_version = j.at("tool_version").get<std::string>();
    r.config = j.at("config");
    r.classes = j.at("classes").get<std::vector<std::string>>();
    for (const auto& rj : j.at("runs")) {
      RunResult run;
      run.run = rj.at("run").get<std::size_t>();
      run.seed = rj.at("seed").get<std::uint64_t>();
      run.accuracy = rj.at("accuracy").get<double>();
      run.best_C = rj.at("best_C").get<double>();
      for (const auto& e : rj.at("cv_table"))
        run.cv_table.push_back({e.at("C").get<double>(), e.at("mean_accuracy").get<double>(),
                                e.at("fold_accuracy").get<std::vector<double>>()});
      const auto rows = rj.at("confusion").get<std::vector<std::vector<std::size_t>>>();
      run.confusion = ConfusionMatrix(rows.size());
      for (std::size_t t = 0; t < rows.size(); ++t)
        for (std::size_t p = 0; p < rows.size(); ++p) run.confusion.at(t, p) = rows[t].at(p);
      for (const auto& m : rj.at("per_class"))
        run.per_class.push_back({m.at("precision").get<double>(), m.at("recall").get<double>(), m.at("f1").get<double>()});
      run.n_train = rj.at("n_train").get<std::size_t>();
      run.n_test = rj.at("n_test").get<std::size_t>();
      run.pool_size = rj.at("pool_size").get<std::size_t>();
      run.codebook_inertia = rj.at("codebook").at("inertia").get<double>();
      run.codebook_iterations = rj.at("codebook").at("iterations").get<std::uint32_t>();
      run.codebook_hash = rj.at("codebook").at("hash").get<std::string>();
      r.runs.push_back(std::move(run));
    }
    r.mean_accuracy = j.at("mean_accuracy").get<double>();
    r.std_accuracy = j.at("std_accuracy").get<double>();
    for (const auto& m : j.at("per_class_mean"))
      r.per_class_mean.push_back({m.at("precision").get<double>(), m.at("recall").get<double>(), m.at("f1").get<double>()});
    r.complete = j.at("complete").get<bool>();
    r.error = j.at("error").get<std::string>();
    if (j.contains("runtime")) r.runtime = j.at("runtime");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
}

namespace detail {

inline std::string fixed(double v, int digits = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

}  // namespace detail

inline std::string report_markdown(const EvalReport& r) {
  std::ostringstream md;
  const auto& cfg = r.config;
  md << "# BoVW evaluation report\n\n";
  if (!r.complete) md << "**INCOMPLETE:** " << r.error << "\n\n";
  md << "| Setting | Value |\n|---|---|\n";
  for (const char* key : {"manifest", "variant", "layer", "k", "runs", "split_ratio", "base_seed", "features"})
    if (cfg.contains(key)) md << "| " << key << " | " << (cfg[key].is_string() ? cfg[key].get<std::string>() : cfg[key].dump()) << " |\n";
  md << "\n## Accuracy over runs\n\n| Run | Seed | Accuracy (%) | Best C |\n|---|---|---|---|\n";
  for (const auto& run : r.runs)
    md << "| " << run.run + 1 << " | " << run.seed << " | " << detail::fixed(run.accuracy) << " | "
       << run.best_C << " |\n";
  md << "\n**Mean accuracy: " << detail::fixed(r.mean_accuracy) << "%** (std " << detail::fixed(r.std_accuracy)
     << ")\n\n## Average class-wise metrics (%)\n\n| Class | Precision (%) | Recall (%) | F1-score (%) |\n|---|---|---|---|\n";
  for (std::size_t c = 0; c < r.per_class_mean.size(); ++c)
    md << "| " << r.classes[c] << " | " << detail::fixed(r.per_class_mean[c].precision) << " | "
       << detail::fixed(r.per_class_mean[c].recall) << " | " << detail::fixed(r.per_class_mean[c].f1) << " |\n";
  md << "\n## Confusion matrices (rows: true, columns: predicted)\n";
  for (const auto& run : r.runs) {
    md << "\nRun " << run.run + 1 << "\n\n|  |";
    for (const auto& c : r.classes) md << " " << c << " |";
    md << "\n|---|";
    for (std::size_t c = 0; c < r.classes.size(); ++c) md << "---|";
    md << "\n";
    for (std::size_t t = 0; t < run.confusion.classes; ++t) {
      md << "| " << r.classes[t] << " |";
      for (std::size_t p = 0; p < run.confusion.classes; ++p) md << " " << run.confusion.at(t, p) << " |";
      md << "\n";
    }
  }
  return md.str();
}

enum class ReportFormat { kJson, kMarkdown };

inline void export_report(const EvalReport& r, const std::string& path, ReportFormat format) {
  try {
    if (format == ReportFormat::kJson) io::write_text_file(path, report_to_json(r).dump(2) + "\n");
    else io::write_text_file(path, report_markdown(r));
  } catch (const IoError& e) {
    throw IoError(std::string("cannot write report: ") + e.what());
  }
}

inline EvalReport load_report(const std::string& path) {
  try {
    return report_from_json(nlohmann::json::parse(io::read_text_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Experiment runner

struct RunOptions {
  std::size_t workers = 1;
  std::function<void(const std::string&)> log;
};

/// Throws if a fitted artifact saw any test image or anything outside train.
inline void check_no_leakage(const std::vector<std::string>& fitted_on, const DatasetManifest& train,
                             const DatasetManifest& test, const std::string& stage) {
  std::set<std::string> train_paths, test_paths;
  for (const auto& e : train.entries) train_paths.insert(e.image_path);
  for (const auto& e : test.entries) test_paths.insert(e.image_path);
  for (const auto& p : fitted_on) {
    if (test_paths.count(p)) throw Error("leakage: " + stage + " was fitted on test image '" + p + "'");
    if (!train_paths.count(p)) throw Error("leakage: " + stage + " was fitted on non-training image '" + p + "'");
  }
}

namespace detail {

class StageClock {
 public:
  explicit StageClock(nlohmann::json& sink, std::string stage)
      : sink_(sink), stage_(std::move(stage)), start_(std::chrono::steady_clock::now()) {}
  ~StageClock() {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    sink_[stage_] = sink_.value(stage_, 0.0) + s;
  }

 private:
  nlohmann::json& sink_;
  std::string stage_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

inline EvalReport run_experiment(const ExperimentConfig& cfg, const DatasetManifest& manifest,
                                 FeatureProvider& provider, const RunOptions& opts = {}) {
  cfg.validate();
  validate_manifest(manifest);
  auto log = [&](const std::string& msg) {
    if (opts.log) opts.log(msg);
  };
  EvalReport report;
  report.config = cfg.to_json();
  report.classes = manifest.categories;
  nlohmann::json timings = nlohmann::json::object();
  const auto workers = std::max<std::size_t>(1, opts.workers);

  try {
    // Feature maps do not depend on the split, so extract every image once.
    std::vector<FeatureMap> maps(manifest.entries.size());
    {
      detail::StageClock clock(timings, "extract");
      log("extracting " + std::to_string(maps.size()) + " feature maps at " + cfg.layer.name());
      parallel_for(maps.size(), workers, [&](std::size_t i) {
        maps[i] = provider.get(manifest, manifest.entries[i], cfg.layer);
        validate_feature_map(maps[i]);
      });
    }
    std::map<std::string, std::size_t> index_of;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) index_of[manifest.entries[i].image_path] = i;

    for (std::size_t r = 0; r < cfg.runs; ++r) {
      RunResult run;
      run.run = r;
      run.seed = cfg.base_seed + r;
      const auto [train, test] = stratified_split(manifest, cfg.split_ratio, run.seed);
      run.n_train = train.entries.size();
      run.n_test = test.entries.size();
      log("run " + std::to_string(r + 1) + "/" + std::to_string(cfg.runs) + ": " +
          std::to_string(run.n_train) + " train, " + std::to_string(run.n_test) + " test");

      std::vector<DeepFeatureSet> train_sets(train.entries.size());
      Codebook book;
      {
        detail::StageClock clock(timings, "codebook");
        parallel_for(train_sets.size(), workers, [&](std::size_t i) {
          train_sets[i] = deep_features(maps[index_of.at(train.entries[i].image_path)], cfg.variant);
          train_sets[i].provenance = train.entries[i].image_path;
        });
        KMeansConfig km = cfg.kmeans;
        km.k = cfg.k;
        km.seed = run.seed;
        book = train_codebook(train_sets, km, workers);
        for (const auto& s : train_sets) run.pool_size += s.count;
      }
      check_no_leakage(book.sources, train, test, "codebook");
      run.codebook_inertia = book.inertia;
      run.codebook_iterations = book.iterations_run;
      run.codebook_hash = book.hash;

      auto encode_split = [&](const DatasetManifest& split, const std::vector<DeepFeatureSet>* ready) {
        svm::LabeledData data;
        data.classes = manifest.categories;
        data.X = svm::FeatureMatrix(split.entries.size(), book.k);
        data.y.resize(split.entries.size());
        data.provenance.resize(split.entries.size());
        parallel_for(split.entries.size(), workers, [&](std::size_t i) {
          const auto& e = split.entries[i];
          const auto set = ready ? (*ready)[i] : deep_features(maps[index_of.at(e.image_path)], cfg.variant);
          const auto bovw = encode_features(set, book, cfg.variant);
          std::copy(bovw.weights.begin(), bovw.weights.end(), data.X.row(i).begin());
          data.y[i] = e.label;
          data.provenance[i] = e.image_path;
        });
        return data;
      };
      svm::LabeledData train_data, test_data;
      {
        detail::StageClock clock(timings, "encode");
        train_data = encode_split(train, &train_sets);
        train_sets.clear();
        test_data = encode_split(test, nullptr);
      }

      svm::GridSearchResult search;
      {
        detail::StageClock clock(timings, "svm");
        auto spec = cfg.grid;
        spec.fold_seed = run.seed;
        search = svm::grid_search_C(train_data, spec, cfg.gamma, cfg.smo, workers);
      }
      check_no_leakage(search.model.training_provenance, train, test, "svm");
      run.best_C = search.best_C;
      for (const auto& row : search.table) {
        CvEntry e{row.C, 100.0 * row.mean_accuracy, {}};
        for (double a : row.fold_accuracy) e.fold_accuracy.push_back(100.0 * a);
        run.cv_table.push_back(std::move(e));
      }

      {
        detail::StageClock clock(timings, "predict");
        run.confusion = ConfusionMatrix(manifest.categories.size());
        std::vector<std::size_t> predicted(test_data.y.size());
        parallel_for(predicted.size(), workers,
                     [&](std::size_t i) { predicted[i] = svm::predict(search.model, test_data.X.row(i)); });
        for (std::size_t i = 0; i < predicted.size(); ++i) ++run.confusion.at(test_data.y[i], predicted[i]);
      }
      run.accuracy = run.confusion.accuracy();
      for (const auto& m : metrics(run.confusion))
        run.per_class.push_back({100.0 * m.precision, 100.0 * m.recall, 100.0 * m.f1});
      log("run " + std::to_string(r + 1) + ": accuracy " + detail::fixed(run.accuracy) + "% (C=" +
          detail::fixed(run.best_C, 0) + ")");
      report.runs.push_back(std::move(run));
    }
  } catch (const Error& e) {
    report.complete = false;
    report.error = e.what();
  }

  if (!report.runs.empty()) {
    const double n = static_cast<double>(report.runs.size());
    double sum = 0.0;
    for (const auto& run : report.runs) sum += run.accuracy;
    report.mean_accuracy = sum / n;
    double var = 0.0;
    for (const auto& run : report.runs) var += (run.accuracy - report.mean_accuracy) * (run.accuracy - report.mean_accuracy);
    report.std_accuracy = std::sqrt(var / n);
    report.per_class_mean.assign(report.classes.size(), {});
    for (const auto& run : report.runs)
      for (std::size_t c = 0; c < report.classes.size(); ++c) {
        report.per_class_mean[c].precision += run.per_class[c].precision / n;
        report.per_class_mean[c].recall += run.per_class[c].recall / n;
        report.per_class_mean[c].f1 += run.per_class[c].f1 / n;
      }
  }
  report.runtime = {{"workers", workers}, {"seconds", timings}, {"features", provider.describe()}};
  return report;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string setting;
  double mean_accuracy = 0.0;
  std::vector<double> accuracies;
  bool complete = true;
};

struct AblationTable {
  std::string axis;  // "layers" or "clusters"
  std::vector<AblationRow> rows;
  std::vector<EvalReport> reports;
  nlohmann::json config;
};

inline AblationTable ablate_layers(const ExperimentConfig& cfg, const DatasetManifest& manifest,
                                   FeatureProvider& provider, const RunOptions& opts = {}) {
  AblationTable table;
  table.axis = "layers";
  table.config = cfg.to_json();
  for (auto layer : kAllPoolingLayers) {
    auto c = cfg;
    c.layer = layer;
    auto rep = run_experiment(c, manifest, provider, opts);
    table.rows.push_back({layer.name(), rep.mean_accuracy, rep.accuracies(), rep.complete});
    table.reports.push_back(std::move(rep));
  }
  return table;
}

inline AblationTable ablate_clusters(const ExperimentConfig& cfg, const DatasetManifest& manifest,
                                     FeatureProvider& provider, const RunOptions& opts = {}) {
  AblationTable table;
  table.axis = "clusters";
  table.config = cfg.to_json();
  for (auto k : cfg.cluster_grid) {
    auto c = cfg;
    c.k = k;
    auto rep = run_experiment(c, manifest, provider, opts);
    table.rows.push_back({"k=" + std::to_string(k), rep.mean_accuracy, rep.accuracies(), rep.complete});
    table.reports.push_back(std::move(rep));
  }
  return table;
}

inline nlohmann::json ablation_to_json(const AblationTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"setting", r.setting}, {"mean_accuracy", r.mean_accuracy}, {"accuracies", r.accuracies},
                    {"complete", r.complete}});
  nlohmann::json reports = nlohmann::json::array();
  for (const auto& r : t.reports) reports.push_back(report_to_json(r));
  return {{"schema", "bodvw-ablation"}, {"schema_version", 1}, {"tool_version", kToolVersion},
          {"axis", t.axis}, {"config", t.config}, {"rows", rows}, {"reports", reports}};
}

inline std::string ablation_markdown(const AblationTable& t) {
  std::ostringstream md;
  md << "# Ablation over " << t.axis << "\n\n| Setting | Mean accuracy (%) | Runs |\n|---|---|---|\n";
  for (const auto& r : t.rows) {
    md << "| " << r.setting << " | " << detail::fixed(r.mean_accuracy) << (r.complete ? "" : " (incomplete)") << " |";
    for (std::size_t i = 0; i < r.accuracies.size(); ++i) md << (i ? ", " : " ") << detail::fixed(r.accuracies[i]);
    md << " |\n";
  }
  return md.str();
}

inline std::string ablation_csv(const AblationTable& t) {
  std::string csv = "setting,mean_accuracy\n";
  for (const auto& r : t.rows) csv += r.setting + "," + format_double(r.mean_accuracy) + "\n";
  return csv;
}

}  // namespace bodvw
