#pragma once

// RBF-kernel soft-margin SVM: SMO on the dual, one-vs-one multiclass voting,
// z-score standardization and stratified k-fold selection of C.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <list>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "bodvw/binary_io.hpp"
#include "bodvw/error.hpp"
#include "bodvw/hashing.hpp"
#include "bodvw/parallel.hpp"

namespace bodvw::svm {

inline constexpr double kDefaultGamma = 1e-05;
inline constexpr double kStdFloor = 1e-12;

/// Dense row-major matrix of samples.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  static FeatureMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return {};
    FeatureMatrix m(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != m.cols) throw InvalidArgument("ragged feature rows");
      std::copy(rows[i].begin(), rows[i].end(), m.data.begin() + static_cast<std::ptrdiff_t>(i * m.cols));
    }
    return m;
  }

  [[nodiscard]] std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  [[nodiscard]] std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }

  [[nodiscard]] FeatureMatrix select(std::span<const std::size_t> idx) const {
    FeatureMatrix m(idx.size(), cols);
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(row(idx[i]).begin(), cols, m.row(i).begin());
    return m;
  }
};

// ---------------------------------------------------------------------------
// Standardizer

struct Standardizer {
  std::vector<double> means;
  std::vector<double> stds;

  [[nodiscard]] std::vector<double> apply(std::span<const double> x) const {
    if (x.size() != means.size())
      throw InvalidArgument("standardizer: dimension " + std::to_string(x.size()) + " != " +
                            std::to_string(means.size()));
    std::vector<double> out(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) out[j] = (x[j] - means[j]) / stds[j];
    return out;
  }

  bool operator==(const Standardizer&) const = default;
};

/// Population mean and standard deviation per column.
inline Standardizer fit_standardizer(const FeatureMatrix& X) {
  if (X.rows < 2) throw InvalidArgument("standardizer: need at least 2 rows");
  Standardizer s;
  s.means.assign(X.cols, 0.0);
  s.stds.assign(X.cols, 0.0);
  for (std::size_t i = 0; i < X.rows; ++i)
    for (std::size_t j = 0; j < X.cols; ++j) s.means[j] += X.row(i)[j];
  for (auto& m : s.means) m /= static_cast<double>(X.rows);
  for (std::size_t i = 0; i < X.rows; ++i)
    for (std::size_t j = 0; j < X.cols; ++j) {
      const double d = X.row(i)[j] - s.means[j];
      s.stds[j] += d * d;
    }
  for (auto& v : s.stds) v = std::max(std::sqrt(v / static_cast<double>(X.rows)), kStdFloor);
  return s;
}

inline std::vector<double> apply_standardizer(const Standardizer& s, std::span<const double> x) {
  return s.apply(x);
}

// ---------------------------------------------------------------------------
// Kernel

inline double rbf_kernel(std::span<const double> x, std::span<const double> y, double gamma) {
  if (x.size() != y.size()) throw InvalidArgument("rbf_kernel: dimension mismatch");
  double d2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    d2 += d * d;
  }
  return std::exp(-gamma * d2);
}

/// LRU cache of rows of Q_ij = y_i y_j K(x_i, x_j), bounded by a byte budget.
class KernelCache {
 public:
  KernelCache(const FeatureMatrix& X, std::span<const int> y, double gamma, std::size_t budget_bytes)
      : X_(X), y_(y), gamma_(gamma), slot_(X.rows) {
    const std::size_t row_bytes = std::max<std::size_t>(1, X.rows * sizeof(double));
    capacity_ = std::max<std::size_t>(2, budget_bytes / row_bytes);
  }

  const std::vector<double>& row(std::size_t i) {
    if (auto& it = slot_[i]) {
      lru_.splice(lru_.begin(), lru_, *it);
      return (*it)->second;
    }
    if (lru_.size() >= capacity_) {
      slot_[lru_.back().first].reset();
      lru_.pop_back();
    }
    std::vector<double> q(X_.rows);
    for (std::size_t j = 0; j < X_.rows; ++j)
      q[j] = static_cast<double>(y_[i] * y_[j]) * rbf_kernel(X_.row(i), X_.row(j), gamma_);
    lru_.emplace_front(i, std::move(q));
    slot_[i] = lru_.begin();
    return lru_.front().second;
  }

 private:
  using Entry = std::pair<std::size_t, std::vector<double>>;
  const FeatureMatrix& X_;
  std::span<const int> y_;
  double gamma_;
  std::size_t capacity_;
  std::list<Entry> lru_;
  std::vector<std::optional<std::list<Entry>::iterator>> slot_;
};

// ---------------------------------------------------------------------------
// Binary SMO

struct SmoOptions {
  double tolerance = 1e-3;
  std::size_t cache_bytes = std::size_t{64} << 20;
  std::size_t max_iterations = 0;  // 0: max(10^7, 100 n)
};

struct BinaryModel {
  std::size_t dim = 0;
  double gamma = kDefaultGamma;
  double C = 1.0;
  /// Support vectors (rows with alpha > 0), row-major.
  std::vector<double> support_vectors;
  /// alpha_i * y_i for each support vector.
  std::vector<double> coefficients;
  double rho = 0.0;
  /// Training-set indices of the support vectors.
  std::vector<std::size_t> support_indices;
  /// Full dual solution over the training rows (diagnostics).
  std::vector<double> alpha;
  double objective = 0.0;
  std::size_t iterations = 0;

  [[nodiscard]] std::size_t n_support() const { return coefficients.size(); }

  /// f(x) = sum_i coef_i K(sv_i, x) - rho; positive means class +1.
  [[nodiscard]] double decision(std::span<const double> x) const {
    if (x.size() != dim) throw InvalidArgument("decision: dimension mismatch");
    double f = -rho;
    for (std::size_t s = 0; s < coefficients.size(); ++s)
      f += coefficients[s] * rbf_kernel({support_vectors.data() + s * dim, dim}, x, gamma);
    return f;
  }

  [[nodiscard]] int predict(std::span<const double> x) const { return decision(x) > 0.0 ? 1 : -1; }
};

namespace detail {

inline bool in_up(int y, double a, double C) { return (y > 0 && a < C) || (y < 0 && a > 0.0); }
inline bool in_low(int y, double a, double C) { return (y > 0 && a > 0.0) || (y < 0 && a < C); }

/// m(alpha) - M(alpha) for a given gradient of 1/2 a'Qa - e'a.
inline double violation_gap(std::span<const int> y, std::span<const double> alpha,
                            std::span<const double> grad, double C) {
  double m = -std::numeric_limits<double>::infinity();
  double M = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < y.size(); ++t) {
    const double v = -y[t] * grad[t];
    if (in_up(y[t], alpha[t], C)) m = std::max(m, v);
    if (in_low(y[t], alpha[t], C)) M = std::min(M, v);
  }
  if (!std::isfinite(m) || !std::isfinite(M)) return 0.0;
  return m - M;
}

inline void check_binary_inputs(const FeatureMatrix& X, std::span<const int> y, double C, double gamma) {
  if (X.rows != y.size()) throw InvalidArgument("svm: label count does not match rows");
  if (!(C > 0.0)) throw InvalidArgument("svm: C must be positive");
  if (!(gamma > 0.0)) throw InvalidArgument("svm: gamma must be positive");
  bool pos = false, neg = false;
  for (int v : y) {
    if (v == 1) pos = true;
    else if (v == -1) neg = true;
    else throw InvalidArgument("svm: binary labels must be -1 or +1");
  }
  if (!pos || !neg) throw InvalidArgument("svm: both classes must be present");
  for (double v : X.data)
    if (!std::isfinite(v)) throw InvalidArgument("svm: non-finite feature value");
}

}  // namespace detail

/// Maximal KKT violation m(alpha) - M(alpha), recomputed from scratch.
inline double kkt_residual(const FeatureMatrix& X, std::span<const int> y, std::span<const double> alpha,
                           double C, double gamma) {
  std::vector<double> grad(X.rows, -1.0);
  for (std::size_t i = 0; i < X.rows; ++i)
    for (std::size_t j = 0; j < X.rows; ++j)
      if (alpha[j] != 0.0) grad[i] += y[i] * y[j] * rbf_kernel(X.row(i), X.row(j), gamma) * alpha[j];
  return std::max(0.0, detail::violation_gap(y, alpha, grad, C));
}

/// Dual objective 1/2 a'Qa - e'a (minimization form).
inline double dual_objective(const FeatureMatrix& X, std::span<const int> y, std::span<const double> alpha,
                             double gamma) {
  double quad = 0.0, lin = 0.0;
  for (std::size_t i = 0; i < X.rows; ++i) {
    lin += alpha[i];
    if (alpha[i] == 0.0) continue;
    for (std::size_t j = 0; j < X.rows; ++j)
      if (alpha[j] != 0.0) quad += alpha[i] * alpha[j] * y[i] * y[j] * rbf_kernel(X.row(i), X.row(j), gamma);
  }
  return 0.5 * quad - lin;
}

/// Soft-margin C-SVM dual via SMO with maximal-violating-pair selection.
inline BinaryModel train_binary(const FeatureMatrix& X, std::span<const int> y, double C, double gamma,
                                const SmoOptions& opts = {}) {
  detail::check_binary_inputs(X, y, C, gamma);
  const std::size_t n = X.rows;
  constexpr double kTau = 1e-12;
  KernelCache cache(X, y, gamma, opts.cache_bytes);
  std::vector<double> alpha(n, 0.0), grad(n, -1.0);
  const std::size_t max_iter =
      opts.max_iterations ? opts.max_iterations : std::max<std::size_t>(10'000'000, 100 * n);

  std::size_t iter = 0;
  for (; iter < max_iter; ++iter) {
    std::size_t i = n, j = n;
    double m = -std::numeric_limits<double>::infinity(), M = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < n; ++t) {
      const double v = -y[t] * grad[t];
      if (detail::in_up(y[t], alpha[t], C) && v > m) {
        m = v;
        i = t;
      }
      if (detail::in_low(y[t], alpha[t], C) && v < M) {
        M = v;
        j = t;
      }
    }
    if (i == n || j == n || m - M < opts.tolerance) break;

    const std::vector<double> Qi = cache.row(i);
    const std::vector<double>& Qj = cache.row(j);
    const double old_ai = alpha[i], old_aj = alpha[j];
    // Two-variable subproblem, clipped to the box along the equality line.
    if (y[i] != y[j]) {
      double quad = Qi[i] + Qj[j] + 2.0 * Qi[j];
      if (quad <= 0.0) quad = kTau;
      const double delta = (-grad[i] - grad[j]) / quad;
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
      if (diff > 0.0) {
        if (alpha[i] > C) {
          alpha[i] = C;
          alpha[j] = C - diff;
        }
      } else if (alpha[j] > C) {
        alpha[j] = C;
        alpha[i] = C + diff;
      }
    } else {
      double quad = Qi[i] + Qj[j] - 2.0 * Qi[j];
      if (quad <= 0.0) quad = kTau;
      const double delta = (grad[i] - grad[j]) / quad;
      const double sum = alpha[i] + alpha[j];
      alpha[i] -= delta;
      alpha[j] += delta;
      if (sum > C) {
        if (alpha[i] > C) {
          alpha[i] = C;
          alpha[j] = sum - C;
        }
      } else if (alpha[j] < 0.0) {
        alpha[j] = 0.0;
        alpha[i] = sum;
      }
      if (sum > C) {
        if (alpha[j] > C) {
          alpha[j] = C;
          alpha[i] = sum - C;
        }
      } else if (alpha[i] < 0.0) {
        alpha[i] = 0.0;
        alpha[j] = sum;
      }
    }
    const double dai = alpha[i] - old_ai, daj = alpha[j] - old_aj;
    for (std::size_t t = 0; t < n; ++t) grad[t] += Qi[t] * dai + Qj[t] * daj;
  }

  // Offset from free vectors, or the midpoint of the feasible interval.
  double ub = std::numeric_limits<double>::infinity(), lb = -ub, sum_free = 0.0;
  std::size_t n_free = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double yg = y[t] * grad[t];
    if (alpha[t] >= C) {
      if (y[t] < 0) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else if (alpha[t] <= 0.0) {
      if (y[t] > 0) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else {
      ++n_free;
      sum_free += yg;
    }
  }

  BinaryModel model;
  model.dim = X.cols;
  model.gamma = gamma;
  model.C = C;
  model.rho = n_free > 0 ? sum_free / static_cast<double>(n_free) : (ub + lb) / 2.0;
  model.iterations = iter;
  double obj = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    obj += alpha[t] * (grad[t] - 1.0);
    if (alpha[t] > 0.0) {
      model.support_indices.push_back(t);
      model.coefficients.push_back(alpha[t] * y[t]);
      model.support_vectors.insert(model.support_vectors.end(), X.row(t).begin(), X.row(t).end());
    }
  }
  model.objective = obj / 2.0;
  model.alpha = std::move(alpha);
  return model;
}

// ---------------------------------------------------------------------------
// One-vs-one multiclass

struct PairModel {
  std::size_t class_a = 0;  // +1 side
  std::size_t class_b = 0;  // -1 side
  BinaryModel model;
};

struct SvmModel {
  std::vector<std::string> classes;
  std::vector<PairModel> pairs;
  double gamma = kDefaultGamma;
  double C = 1.0;
  std::size_t dim = 0;
  Standardizer standardizer;
  /// Free-form provenance (variant, layer, codebook hash, config, ...).
  nlohmann::json metadata = nlohmann::json::object();
  /// Images the model was fitted on. Not persisted.
  std::vector<std::string> training_provenance;
};

/// Sample labels as class indices into `classes`.
struct LabeledData {
  FeatureMatrix X;
  std::vector<std::size_t> y;
  std::vector<std::string> classes;
  std::vector<std::string> provenance;  // optional, one per row when present
};

inline std::vector<double> round_to_float(std::span<const double> x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(static_cast<float>(x[i]));
  return out;
}

/// Fits the standardizer on X and one binary SMO model per class pair.
/// Standardized rows are rounded to float32 so support vectors persist exactly.
inline SvmModel train_multiclass(const LabeledData& data, double C, double gamma,
                                 const SmoOptions& opts = {}, std::size_t workers = 1) {
  const auto& X = data.X;
  if (X.rows != data.y.size()) throw InvalidArgument("svm: label count does not match rows");
  const std::size_t n_classes = data.classes.size();
  if (n_classes < 2) throw InvalidArgument("svm: need at least 2 classes");
  std::vector<std::size_t> counts(n_classes, 0);
  for (auto c : data.y) {
    if (c >= n_classes) throw InvalidArgument("svm: label index out of range");
    ++counts[c];
  }
  for (std::size_t c = 0; c < n_classes; ++c)
    if (counts[c] == 0) throw InvalidArgument("svm: class '" + data.classes[c] + "' has no samples");

  SvmModel model;
  model.classes = data.classes;
  model.gamma = gamma;
  model.C = C;
  model.dim = X.cols;
  model.standardizer = fit_standardizer(X);
  model.training_provenance = data.provenance;

  FeatureMatrix Z(X.rows, X.cols);
  for (std::size_t i = 0; i < X.rows; ++i) {
    const auto z = round_to_float(model.standardizer.apply(X.row(i)));
    std::copy(z.begin(), z.end(), Z.row(i).begin());
  }

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < n_classes; ++a)
    for (std::size_t b = a + 1; b < n_classes; ++b) pairs.emplace_back(a, b);
  model.pairs.resize(pairs.size());
  parallel_for(pairs.size(), workers, [&](std::size_t p) {
    const auto [a, b] = pairs[p];
    std::vector<std::size_t> idx;
    std::vector<int> yy;
    for (std::size_t i = 0; i < X.rows; ++i) {
      if (data.y[i] == a) {
        idx.push_back(i);
        yy.push_back(1);
      } else if (data.y[i] == b) {
        idx.push_back(i);
        yy.push_back(-1);
      }
    }
    auto sub = Z.select(idx);
    auto bin = train_binary(sub, yy, C, gamma, opts);
    for (auto& s : bin.support_indices) s = idx[s];
    model.pairs[p] = {a, b, std::move(bin)};
  });
  return model;
}

/// Per-class votes plus summed signed margins for one sample.
struct VoteResult {
  std::size_t label = 0;
  std::vector<std::size_t> votes;
  std::vector<double> margins;
};

inline VoteResult vote(const SvmModel& model, std::span<const double> x) {
  const auto z = model.standardizer.apply(x);
  VoteResult r;
  r.votes.assign(model.classes.size(), 0);
  r.margins.assign(model.classes.size(), 0.0);
  for (const auto& p : model.pairs) {
    const double f = p.model.decision(z);
    ++r.votes[f > 0.0 ? p.class_a : p.class_b];
    r.margins[p.class_a] += f;
    r.margins[p.class_b] -= f;
  }
  // Most votes; ties by larger summed margin, then by lowest index.
  for (std::size_t c = 1; c < model.classes.size(); ++c) {
    const auto best = r.label;
    if (r.votes[c] > r.votes[best] || (r.votes[c] == r.votes[best] && r.margins[c] > r.margins[best]))
      r.label = c;
  }
  return r;
}

inline std::size_t predict(const SvmModel& model, std::span<const double> x) {
  if (x.size() != model.dim)
    throw InvalidArgument("predict: dimension " + std::to_string(x.size()) + " != " + std::to_string(model.dim));
  return vote(model, x).label;
}

// ---------------------------------------------------------------------------
// Grid search over C

struct GridSearchSpec {
  std::vector<double> c_grid = {1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100};
  std::size_t folds = 5;
  std::uint64_t fold_seed = 0;

  void validate() const {
    if (folds < 2) throw ConfigError("grid search: folds must be >= 2");
    if (c_grid.empty()) throw ConfigError("grid search: empty C grid");
    for (double c : c_grid)
      if (!(c > 0.0)) throw ConfigError("grid search: C values must be positive");
  }
};

struct CvRow {
  double C = 0.0;
  std::vector<double> fold_accuracy;  // fractions
  double mean_accuracy = 0.0;
};

struct GridSearchResult {
  double best_C = 0.0;
  std::vector<CvRow> table;
  SvmModel model;  // retrained on all rows at best_C
};

/// Stratified fold index per row: each class is shuffled and dealt round-robin.
inline std::vector<std::size_t> stratified_folds(std::span<const std::size_t> y, std::size_t n_classes,
                                                 std::size_t folds, std::uint64_t seed) {
  std::vector<std::size_t> fold(y.size(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (y[i] == c) members.push_back(i);
    if (members.size() < folds)
      throw InvalidArgument("grid search: class " + std::to_string(c) + " has " +
                            std::to_string(members.size()) + " samples, fewer than " +
                            std::to_string(folds) + " folds (stratification impossible)");
    for (std::size_t i = members.size(); i > 1; --i) {
      const auto r = static_cast<std::size_t>(static_cast<double>(rng() >> 11) * 0x1.0p-53 * static_cast<double>(i));
      std::swap(members[i - 1], members[std::min(r, i - 1)]);
    }
    for (std::size_t p = 0; p < members.size(); ++p) fold[members[p]] = p % folds;
  }
  return fold;
}

inline GridSearchResult grid_search_C(const LabeledData& data, const GridSearchSpec& spec,
                                      double gamma = kDefaultGamma, const SmoOptions& opts = {},
                                      std::size_t workers = 1) {
  spec.validate();
  const auto fold = stratified_folds(data.y, data.classes.size(), spec.folds, spec.fold_seed);
  const std::size_t cells = spec.c_grid.size() * spec.folds;
  std::vector<double> acc(cells, 0.0);
  parallel_for(cells, workers, [&](std::size_t cell) {
    const double C = spec.c_grid[cell / spec.folds];
    const std::size_t f = cell % spec.folds;
    std::vector<std::size_t> train_idx, val_idx;
    for (std::size_t i = 0; i < data.y.size(); ++i) (fold[i] == f ? val_idx : train_idx).push_back(i);
    LabeledData train{data.X.select(train_idx), {}, data.classes, {}};
    for (auto i : train_idx) train.y.push_back(data.y[i]);
    const auto model = train_multiclass(train, C, gamma, opts);
    std::size_t correct = 0;
    for (auto i : val_idx) correct += predict(model, data.X.row(i)) == data.y[i];
    acc[cell] = static_cast<double>(correct) / static_cast<double>(val_idx.size());
  });

  GridSearchResult result;
  double best = -1.0;
  for (std::size_t g = 0; g < spec.c_grid.size(); ++g) {
    CvRow row{spec.c_grid[g], {}, 0.0};
    for (std::size_t f = 0; f < spec.folds; ++f) row.fold_accuracy.push_back(acc[g * spec.folds + f]);
    for (double a : row.fold_accuracy) row.mean_accuracy += a;
    row.mean_accuracy /= static_cast<double>(spec.folds);
    // Strict improvement only, and ties prefer the smaller C.
    if (row.mean_accuracy > best || (row.mean_accuracy == best && row.C < result.best_C)) {
      best = row.mean_accuracy;
      result.best_C = row.C;
    }
    result.table.push_back(std::move(row));
  }
  result.model = train_multiclass(data, result.best_C, gamma, opts, workers);
  return result;
}

// ---------------------------------------------------------------------------
// Model file (JSON with base64 little-endian arrays)

inline constexpr int kModelFormatVersion = 1;

namespace detail {

template <typename T>
std::string encode_array(std::span<const double> values) {
  std::vector<T> typed(values.begin(), values.end());
  return hashing::base64_encode({reinterpret_cast<const std::uint8_t*>(typed.data()), typed.size() * sizeof(T)});
}

template <typename T>
std::vector<double> decode_array(const std::string& text, std::size_t expected) {
  const auto bytes = hashing::base64_decode(text);
  if (bytes.size() != expected * sizeof(T)) throw FormatError("svm model: array length mismatch");
  std::vector<T> typed(expected);
  std::memcpy(typed.data(), bytes.data(), bytes.size());
  return {typed.begin(), typed.end()};
}

}  // namespace detail

inline nlohmann::json model_to_json(const SvmModel& m) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : m.pairs) {
    pairs.push_back({{"class_a", p.class_a},
                     {"class_b", p.class_b},
                     {"rho", p.model.rho},
                     {"n_sv", p.model.n_support()},
                     {"support_vectors", detail::encode_array<float>(p.model.support_vectors)},
                     {"coefficients", detail::encode_array<double>(p.model.coefficients)}});
  }
  return {{"format", "bodvw-svm"},
          {"version", kModelFormatVersion},
          {"kernel", "rbf"},
          {"gamma", m.gamma},
          {"C", m.C},
          {"dim", m.dim},
          {"classes", m.classes},
          {"standardizer",
           {{"means", detail::encode_array<double>(m.standardizer.means)},
            {"stds", detail::encode_array<double>(m.standardizer.stds)}}},
          {"dtypes", {{"support_vectors", "float32le"}, {"coefficients", "float64le"}, {"standardizer", "float64le"}}},
          {"pairs", pairs},
          {"metadata", m.metadata}};
}

inline SvmModel model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "bodvw-svm") throw FormatError("svm model: unknown format");
    if (j.at("version").get<int>() != kModelFormatVersion)
      throw FormatError("svm model: unsupported version " + j.at("version").dump());
    SvmModel m;
    m.gamma = j.at("gamma").get<double>();
    m.C = j.at("C").get<double>();
    m.dim = j.at("dim").get<std::size_t>();
    m.classes = j.at("classes").get<std::vector<std::string>>();
    m.standardizer.means = detail::decode_array<double>(j.at("standardizer").at("means").get<std::string>(), m.dim);
    m.standardizer.stds = detail::decode_array<double>(j.at("standardizer").at("stds").get<std::string>(), m.dim);
    for (const auto& pj : j.at("pairs")) {
      PairModel p;
      p.class_a = pj.at("class_a").get<std::size_t>();
      p.class_b = pj.at("class_b").get<std::size_t>();
      if (p.class_a >= m.classes.size() || p.class_b >= m.classes.size())
        throw FormatError("svm model: class index out of range");
      const auto n_sv = pj.at("n_sv").get<std::size_t>();
      p.model.dim = m.dim;
      p.model.gamma = m.gamma;
      p.model.C = m.C;
      p.model.rho = pj.at("rho").get<double>();
      p.model.support_vectors = detail::decode_array<float>(pj.at("support_vectors").get<std::string>(), n_sv * m.dim);
      p.model.coefficients = detail::decode_array<double>(pj.at("coefficients").get<std::string>(), n_sv);
      m.pairs.push_back(std::move(p));
    }
    if (j.contains("metadata")) m.metadata = j.at("metadata");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("svm model: ") + e.what());
  }
}

inline void save_model(const SvmModel& m, const std::string& path) {
  io::write_text_file(path, model_to_json(m).dump(2) + "\n");
}

inline SvmModel load_model(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
  return model_from_json(j);
}

}  // namespace bodvw::svm
