#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tpn/autodiff.hpp"
#include "tpn/error.hpp"
#include "tpn/tensor.hpp"

namespace tpn {

/// Which data a prototype set was computed from.
enum class Domain { source, target, combined };

inline std::string to_string(Domain d) {
  switch (d) {
    case Domain::source: return "s";
    case Domain::target: return "t";
    case Domain::combined: return "st";
  }
  return "?";
}

inline Domain domain_from_string(const std::string& s) {
  if (s == "s" || s == "source") return Domain::source;
  if (s == "t" || s == "target") return Domain::target;
  if (s == "st" || s == "combined") return Domain::combined;
  throw DomainError("unknown prototype set '" + s + "' (expected s, t or st)");
}

/// Class centroids living on a tape. Rows of invalid classes are zero.
template <std::floating_point T>
struct BasicPrototypeSet {
  BasicVar<T> centroids;  // [C x m]
  std::vector<bool> valid;
  std::vector<std::size_t> counts;
  Domain tag = Domain::source;

  std::size_t classes() const noexcept { return valid.size(); }
  bool all_valid() const {
    for (bool v : valid)
      if (!v) return false;
    return true;
  }
};

using PrototypeSet = BasicPrototypeSet<double>;

/// Detached centroids, e.g. the frozen inference classifier.
template <std::floating_point T>
struct BasicPrototypeTable {
  BasicTensor<T> centroids;  // [C x m]
  std::vector<bool> valid;
  Domain tag = Domain::source;

  std::size_t classes() const noexcept { return valid.size(); }
};

using PrototypeTable = BasicPrototypeTable<double>;

template <std::floating_point T>
BasicPrototypeTable<T> detach(const BasicPrototypeSet<T>& set) {
  return {set.centroids.value(), set.valid, set.tag};
}

inline void check_labels(std::span<const int> labels, std::size_t classes, const char* op) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ShapeError(std::string(op) + ": label " + std::to_string(labels[i]) + " at " + std::to_string(i) +
                       " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

/// Per-class mean embedding. Classes with no members are flagged invalid.
/// The mean is taken as a product with a constant averaging matrix, so
/// gradients reach every member embedding.
template <std::floating_point T>
BasicPrototypeSet<T> compute_prototypes(const BasicVar<T>& embeddings, std::span<const int> labels,
                                        std::size_t classes, Domain tag) {
  detail::require_rank("compute_prototypes", embeddings, 2);
  const std::size_t n = embeddings.shape()[0];
  if (labels.size() != n) {
    throw ShapeError("compute_prototypes: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " embeddings");
  }
  check_labels(labels, classes, "compute_prototypes");
  std::vector<std::size_t> counts(classes, 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  BasicTensor<T> averaging(Shape{classes, n});
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    averaging(c, i) = T{1} / static_cast<T>(counts[c]);
  }
  BasicPrototypeSet<T> set;
  set.centroids = matmul(embeddings.tape().constant(std::move(averaging)), embeddings);
  set.counts = counts;
  set.valid.resize(classes);
  for (std::size_t c = 0; c < classes; ++c) set.valid[c] = counts[c] > 0;
  set.tag = tag;
  return set;
}

/// Value-only convenience overload.
template <std::floating_point T>
BasicPrototypeTable<T> compute_prototypes(const BasicTensor<T>& embeddings, std::span<const int> labels,
                                          std::size_t classes, Domain tag) {
  BasicTape<T> tape;
  return detach(compute_prototypes(tape.constant(embeddings), labels, classes, tag));
}

/// Replaces the rows of invalid classes in `primary` by those of `fallback`.
template <std::floating_point T>
BasicPrototypeSet<T> with_fallback(const BasicPrototypeSet<T>& primary, const BasicPrototypeSet<T>& fallback) {
  if (primary.classes() != fallback.classes() || primary.centroids.shape() != fallback.centroids.shape()) {
    throw ShapeError("with_fallback: prototype sets differ in shape");
  }
  if (primary.all_valid()) return primary;
  const std::size_t classes = primary.classes(), m = primary.centroids.shape()[1];
  BasicTensor<T> keep(Shape{classes, m}), replace(Shape{classes, m});
  BasicPrototypeSet<T> out = primary;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t j = 0; j < m; ++j) (primary.valid[c] ? keep : replace)(c, j) = T{1};
    out.valid[c] = primary.valid[c] || fallback.valid[c];
  }
  auto& tape = primary.centroids.tape();
  out.centroids = add(mul(primary.centroids, tape.constant(std::move(keep))),
                      mul(fallback.centroids, tape.constant(std::move(replace))));
  return out;
}

template <std::floating_point T>
BasicPrototypeTable<T> with_fallback(const BasicPrototypeTable<T>& primary, const BasicPrototypeTable<T>& fallback) {
  if (primary.classes() != fallback.classes() || primary.centroids.shape() != fallback.centroids.shape()) {
    throw ShapeError("with_fallback: prototype sets differ in shape");
  }
  BasicPrototypeTable<T> out = primary;
  for (std::size_t c = 0; c < primary.classes(); ++c) {
    if (primary.valid[c]) continue;
    auto src = fallback.centroids.row(c);
    std::copy(src.begin(), src.end(), out.centroids.row(c).begin());
    out.valid[c] = fallback.valid[c];
  }
  return out;
}

/// Softmax over negative squared Euclidean distances to the prototypes.
template <std::floating_point T>
BasicVar<T> classify(const BasicVar<T>& embeddings, const BasicPrototypeSet<T>& protos) {
  for (std::size_t c = 0; c < protos.classes(); ++c) {
    if (!protos.valid[c]) {
      throw ShapeError("classify: prototype for class " + std::to_string(c) + " of set '" + to_string(protos.tag) +
                       "' is invalid");
    }
  }
  return softmax(negate(squared_euclidean_distance(embeddings, protos.centroids)));
}

template <std::floating_point T>
BasicTensor<T> classify(const BasicTensor<T>& embeddings, const BasicPrototypeTable<T>& protos) {
  BasicTape<T> tape;
  BasicPrototypeSet<T> set{tape.constant(protos.centroids), protos.valid, {}, protos.tag};
  return classify(tape.constant(embeddings), set).value();
}

/// Mean negative log-likelihood of the correct class. Probabilities are
/// clamped to 1e-12 before the log.
template <std::floating_point T>
BasicVar<T> supervised_loss(const BasicVar<T>& scores, std::span<const int> labels) {
  detail::require_rank("supervised_loss", scores, 2);
  check_labels(labels, scores.shape()[1], "supervised_loss");
  std::vector<std::size_t> cols(labels.begin(), labels.end());
  return reduce_mean(negate(log(clamp(pick(scores, std::move(cols)), T(1e-12), T{1}))));
}

/// Row-wise argmax; ties go to the lowest index.
template <std::floating_point T>
std::vector<int> argmax_rows(const BasicTensor<T>& scores) {
  const std::size_t n = scores.rank() == 2 ? scores.shape()[0] : 1, p = scores.cols();
  std::vector<int> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < p; ++c)
      if (scores[i * p + c] > scores[i * p + best]) best = c;
    out[i] = static_cast<int>(best);
  }
  return out;
}

inline double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw ShapeError("accuracy: length mismatch");
  if (truth.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

/// Samples whose top score exceeds the threshold, with their argmax class.
struct PseudoLabels {
  std::vector<std::size_t> assigned;  // row indices into the scored batch
  std::vector<int> classes;           // parallel to `assigned`
  std::vector<std::size_t> rejected;

  std::size_t total() const noexcept { return assigned.size() + rejected.size(); }
  double assigned_fraction() const {
    return total() ? static_cast<double>(assigned.size()) / static_cast<double>(total()) : 0.0;
  }
};

/// Strict comparison: a top score equal to the threshold is rejected.
template <std::floating_point T>
PseudoLabels pseudo_label(const BasicTensor<T>& scores, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw DomainError("pseudo_label: threshold " + std::to_string(threshold) + " outside (0, 1]");
  }
  if (scores.rank() != 2) throw ShapeError("pseudo_label: scores must be [n x C]");
  const auto best = argmax_rows(scores);
  const std::size_t p = scores.shape()[1];
  PseudoLabels out;
  for (std::size_t i = 0; i < best.size(); ++i) {
    if (static_cast<double>(scores[i * p + static_cast<std::size_t>(best[i])]) > threshold) {
      out.assigned.push_back(i);
      out.classes.push_back(best[i]);
    } else {
      out.rejected.push_back(i);
    }
  }
  return out;
}

/// Fraction of assigned pseudo-labels that disagree with the oracle labels.
/// `oracle` is indexed like the scored batch. Empty assignment gives nullopt.
inline std::optional<double> noise_ratio(const PseudoLabels& labels, std::span<const int> oracle) {
  if (labels.assigned.empty()) return std::nullopt;
  std::size_t wrong = 0;
  for (std::size_t k = 0; k < labels.assigned.size(); ++k) {
    const std::size_t i = labels.assigned[k];
    if (i >= oracle.size()) throw ShapeError("noise_ratio: sample index beyond oracle labels");
    wrong += labels.classes[k] != oracle[i];
  }
  return static_cast<double>(wrong) / static_cast<double>(labels.assigned.size());
}

/// gamma * eps_t + (1 - gamma) * eps_s
inline double weighted_error(double eps_t, double eps_s, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw DomainError("weighted_error: gamma outside [0, 1]");
  if (gamma == 0.0) return eps_s;
  if (gamma == 1.0) return eps_t;
  return gamma * eps_t + (1.0 - gamma) * eps_s;
}

}  // namespace tpn
