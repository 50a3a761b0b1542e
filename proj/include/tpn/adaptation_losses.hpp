#pragma once

// Domain discrepancy terms: class-level prototype distances in an RKHS,
// sample-level symmetric KL between the score distributions of the three
// prototype classifiers, and the holistic MMD baseline.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "tpn/autodiff.hpp"
#include "tpn/error.hpp"
#include "tpn/prototypical.hpp"
#include "tpn/tensor.hpp"

namespace tpn {

enum class KernelKind { linear, rbf };
enum class BandwidthPolicy { fixed, median };

struct KernelSpec {
  KernelKind kind = KernelKind::rbf;
  BandwidthPolicy bandwidth = BandwidthPolicy::median;
  double sigma2 = 1.0;  // used when bandwidth == fixed
};

/// A kernel with its bandwidth pinned for one evaluation.
struct ResolvedKernel {
  KernelKind kind = KernelKind::linear;
  double sigma2 = 1.0;

  static ResolvedKernel linear() { return {KernelKind::linear, 1.0}; }
  static ResolvedKernel rbf(double sigma2) {
    if (!(sigma2 > 0.0)) throw DomainError("rbf kernel: sigma^2 must be positive, got " + std::to_string(sigma2));
    return {KernelKind::rbf, sigma2};
  }
};

/// Median of the squared distances over all unordered pairs of rows (the
/// mean of the two central values for an even pair count). Fewer than two
/// rows give 0.
template <std::floating_point T>
double median_pairwise_sq_distance(const BasicTensor<T>& points) {
  const std::size_t n = points.rows(), m = points.cols();
  std::vector<double> d;
  d.reserve(n * (n - (n > 0)) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        const double diff = static_cast<double>(points[i * m + k]) - static_cast<double>(points[j * m + k]);
        s += diff * diff;
      }
      d.push_back(s);
    }
  if (d.empty()) return 0.0;
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  const double upper = d[mid];
  if (d.size() % 2) return upper;
  const double lower = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

/// Pins the bandwidth. The median heuristic falls back to sigma^2 = 1 when
/// every pair coincides.
template <std::floating_point T>
ResolvedKernel resolve_kernel(const KernelSpec& spec, const BasicTensor<T>& points) {
  if (spec.kind == KernelKind::linear) return ResolvedKernel::linear();
  if (spec.bandwidth == BandwidthPolicy::fixed) return ResolvedKernel::rbf(spec.sigma2);
  const double med = median_pairwise_sq_distance(points);
  return ResolvedKernel::rbf(med > 0.0 ? med : 1.0);
}

/// Bandwidth from the stacked rows of the three prototype sets.
template <std::floating_point T>
ResolvedKernel resolve_kernel(const KernelSpec& spec, const BasicPrototypeSet<T>& s, const BasicPrototypeSet<T>& t,
                              const BasicPrototypeSet<T>& st) {
  if (spec.kind == KernelKind::linear || spec.bandwidth == BandwidthPolicy::fixed) {
    return resolve_kernel(spec, BasicTensor<T>(Shape{0, 1}));
  }
  std::vector<T> rows;
  for (const auto* set : {&s, &t, &st}) {
    const auto& v = set->centroids.value().storage();
    rows.insert(rows.end(), v.begin(), v.end());
  }
  const std::size_t m = s.centroids.shape()[1];
  const std::size_t n = rows.size() / m;
  return resolve_kernel(spec, BasicTensor<T>(Shape{n, m}, std::move(rows)));
}

/// k(a,a) + k(b,b) - 2 k(a,b) for two vectors.
inline double rkhs_sq_distance(std::span<const double> a, std::span<const double> b, const ResolvedKernel& kernel) {
  if (a.size() != b.size()) throw ShapeError("rkhs_sq_distance: dimension mismatch");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  if (kernel.kind == KernelKind::linear) return d;
  if (!(kernel.sigma2 > 0.0)) throw DomainError("rkhs_sq_distance: sigma^2 must be positive");
  return 2.0 * (1.0 - std::exp(-d / (2.0 * kernel.sigma2)));
}

/// Row-paired RKHS squared distances: [n x m], [n x m] -> [n].
template <std::floating_point T>
BasicVar<T> rkhs_sq_distance(const BasicVar<T>& a, const BasicVar<T>& b, const ResolvedKernel& kernel) {
  BasicVar<T> d = row_sum(square(sub(a, b)));
  if (kernel.kind == KernelKind::linear) return d;
  if (!(kernel.sigma2 > 0.0)) throw DomainError("rkhs_sq_distance: sigma^2 must be positive");
  return affine(exp(scale(d, static_cast<T>(-1.0 / (2.0 * kernel.sigma2)))), T{-2}, T{2});
}

template <std::floating_point T>
struct BasicClassLevelLoss {
  BasicVar<T> loss;
  /// One row per jointly valid class: (s,t), (s,st), (t,st) distances.
  BasicTensor<T> components;
  std::vector<std::size_t> classes_used;
  std::size_t classes_skipped = 0;
  bool skipped_all = false;
};

using ClassLevelLoss = BasicClassLevelLoss<double>;

/// Mean over classes valid in all three sets of the three pairwise RKHS
/// distances between that class's prototypes.
template <std::floating_point T>
BasicClassLevelLoss<T> class_level_loss(const BasicPrototypeSet<T>& s, const BasicPrototypeSet<T>& t,
                                        const BasicPrototypeSet<T>& st, const ResolvedKernel& kernel) {
  const std::size_t classes = s.classes();
  if (t.classes() != classes || st.classes() != classes) throw ShapeError("class_level_loss: class count mismatch");
  BasicClassLevelLoss<T> out;
  for (std::size_t c = 0; c < classes; ++c) {
    if (s.valid[c] && t.valid[c] && st.valid[c]) out.classes_used.push_back(c);
  }
  out.classes_skipped = classes - out.classes_used.size();
  auto& tape = s.centroids.tape();
  if (out.classes_used.empty()) {
    out.skipped_all = true;
    out.loss = tape.constant(BasicTensor<T>::scalar(T{0}));
    out.components = BasicTensor<T>(Shape{0, 3});
    return out;
  }
  const auto& idx = out.classes_used;
  auto ms = gather_rows(s.centroids, idx), mt = gather_rows(t.centroids, idx), mst = gather_rows(st.centroids, idx);
  auto d_st = rkhs_sq_distance(ms, mt, kernel);
  auto d_sst = rkhs_sq_distance(ms, mst, kernel);
  auto d_tst = rkhs_sq_distance(mt, mst, kernel);
  const std::size_t j = idx.size();
  out.components = BasicTensor<T>(Shape{j, 3});
  for (std::size_t r = 0; r < j; ++r) {
    out.components(r, 0) = d_st.value()[r];
    out.components(r, 1) = d_sst.value()[r];
    out.components(r, 2) = d_tst.value()[r];
  }
  out.loss = scale(reduce_sum(add(add(d_st, d_sst), d_tst)), T{1} / static_cast<T>(j));
  return out;
}

/// Squared RKHS distance between the two domains' mean embeddings.
template <std::floating_point T>
BasicVar<T> mmd(const BasicVar<T>& source, const BasicVar<T>& target, const ResolvedKernel& kernel) {
  detail::require_same_tape("mmd", source, target);
  detail::require_rank("mmd", source, 2);
  detail::require_rank("mmd", target, 2);
  const std::size_t ns = source.shape()[0], nt = target.shape()[0];
  if (ns == 0 || nt == 0) throw DomainError("mmd: both sample sets must be non-empty");
  if (source.shape()[1] != target.shape()[1]) throw ShapeError("mmd: embedding widths differ");
  auto& tape = source.tape();
  if (kernel.kind == KernelKind::linear) {
    auto mean_s = matmul(tape.constant(BasicTensor<T>(Shape{1, ns}, T{1} / static_cast<T>(ns))), source);
    auto mean_t = matmul(tape.constant(BasicTensor<T>(Shape{1, nt}, T{1} / static_cast<T>(nt))), target);
    return reduce_sum(square(sub(mean_s, mean_t)));
  }
  if (!(kernel.sigma2 > 0.0)) throw DomainError("mmd: sigma^2 must be positive");
  const T gamma = static_cast<T>(-1.0 / (2.0 * kernel.sigma2));
  auto kbar = [&](const BasicVar<T>& a, const BasicVar<T>& b) {
    return reduce_mean(exp(scale(squared_euclidean_distance(a, b), gamma)));
  };
  return sub(add(kbar(source, source), kbar(target, target)), scale(kbar(source, target), T{2}));
}

/// Bandwidth for mmd from the pooled samples.
template <std::floating_point T>
ResolvedKernel resolve_kernel(const KernelSpec& spec, const BasicVar<T>& source, const BasicVar<T>& target) {
  if (spec.kind == KernelKind::linear || spec.bandwidth == BandwidthPolicy::fixed) {
    return resolve_kernel(spec, BasicTensor<T>(Shape{0, 1}));
  }
  std::vector<T> rows(source.value().storage());
  rows.insert(rows.end(), target.value().storage().begin(), target.value().storage().end());
  const std::size_t m = source.shape()[1];
  const std::size_t n = rows.size() / m;
  return resolve_kernel(spec, BasicTensor<T>(Shape{n, m}, std::move(rows)));
}

inline constexpr double kProbabilityFloor = 1e-8;

/// Per-row symmetric KL, 0.5 * (KL(p||q) + KL(q||p)), after clamping each
/// row into [1e-8, 1] and renormalizing. Computed as
/// 0.5 * sum (p - q)(log p - log q), which is exactly symmetric.
template <std::floating_point T>
BasicVar<T> symmetric_kl(const BasicVar<T>& p, const BasicVar<T>& q) {
  detail::require_same_shape("symmetric_kl", p, q);
  auto prep = [](const BasicVar<T>& x) {
    auto y = x.shape().size() == 1 ? reshape(x, Shape{1, x.shape()[0]}) : x;
    return normalize_rows(clamp(y, static_cast<T>(kProbabilityFloor), T{1}));
  };
  auto pp = prep(p), qq = prep(q);
  return scale(row_sum(mul(sub(pp, qq), sub(log(pp), log(qq)))), T{0.5});
}

inline double symmetric_kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ShapeError("symmetric_kl: length mismatch");
  Tape tape;
  auto pv = tape.constant(Tensor::vector(std::vector<double>(p.begin(), p.end())));
  auto qv = tape.constant(Tensor::vector(std::vector<double>(q.begin(), q.end())));
  return symmetric_kl(pv, qv).value().item();
}

template <std::floating_point T>
struct BasicSampleLevelLoss {
  BasicVar<T> loss;
  /// One row per sample: (s,t), (s,st), (t,st) symmetric KL.
  BasicTensor<T> components;
};

using SampleLevelLoss = BasicSampleLevelLoss<double>;

/// Mean over samples of the three pairwise symmetric KL terms between the
/// score rows each prototype set assigns to that sample.
template <std::floating_point T>
BasicSampleLevelLoss<T> sample_level_loss(const BasicVar<T>& scores_s, const BasicVar<T>& scores_t,
                                          const BasicVar<T>& scores_st) {
  if (scores_s.shape() != scores_t.shape() || scores_s.shape() != scores_st.shape()) {
    throw ShapeError("sample_level_loss: score matrices " + shape_string(scores_s.shape()) + ", " +
                     shape_string(scores_t.shape()) + ", " + shape_string(scores_st.shape()) + " differ");
  }
  detail::require_rank("sample_level_loss", scores_s, 2);
  const std::size_t n = scores_s.shape()[0];
  if (n == 0) throw ShapeError("sample_level_loss: no samples");
  auto a = symmetric_kl(scores_s, scores_t);
  auto b = symmetric_kl(scores_s, scores_st);
  auto c = symmetric_kl(scores_t, scores_st);
  BasicSampleLevelLoss<T> out;
  out.components = BasicTensor<T>(Shape{n, 3});
  for (std::size_t i = 0; i < n; ++i) {
    out.components(i, 0) = a.value()[i];
    out.components(i, 1) = b.value()[i];
    out.components(i, 2) = c.value()[i];
  }
  out.loss = scale(reduce_sum(add(add(a, b), c)), T{1} / static_cast<T>(n));
  return out;
}

struct LossBreakdown {
  double supervised = 0.0;  // L_S
  double class_level = 0.0;  // L_G
  double sample_level = 0.0;  // L_T
  double total = 0.0;
  double alpha = 1.0;
  double beta = 1.0;
  std::size_t classes_skipped = 0;
  Tensor class_components = Tensor(Shape{0, 3});
  Tensor sample_components = Tensor(Shape{0, 3});
};

/// total = L_S + alpha * L_G + beta * L_T
inline LossBreakdown total_objective(double supervised, double class_level, double sample_level, double alpha = 1.0,
                                     double beta = 1.0) {
  const std::pair<const char*, double> parts[] = {
      {"L_S", supervised}, {"L_G", class_level}, {"L_T", sample_level}, {"alpha", alpha}, {"beta", beta}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) throw NumericalError(std::string("total_objective: ") + name + " is not finite", name);
  }
  LossBreakdown b;
  b.supervised = supervised;
  b.class_level = class_level;
  b.sample_level = sample_level;
  b.alpha = alpha;
  b.beta = beta;
  b.total = supervised + alpha * class_level + beta * sample_level;
  return b;
}

}  // namespace tpn
