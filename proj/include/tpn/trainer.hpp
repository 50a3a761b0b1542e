#pragma once

// Alternating optimization: each iteration pseudo-labels a freshly sampled
// target batch with the source prototypes, then takes one Adam step on
//   L_S + alpha * L_G + beta * L_T
// built from the source, target and combined prototypes of the episode.

#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "tpn/adam.hpp"
#include "tpn/adaptation_losses.hpp"
#include "tpn/autodiff.hpp"
#include "tpn/datasets.hpp"
#include "tpn/embedding_net.hpp"
#include "tpn/error.hpp"
#include "tpn/prototypical.hpp"
#include "tpn/rng.hpp"

namespace tpn {

enum class AdaptationMode {
  tpn,  // class-level + sample-level losses on pseudo-labeled prototypes
  mmd,  // holistic MMD between batch embeddings, weighted by alpha
};

inline std::string to_string(AdaptationMode m) { return m == AdaptationMode::tpn ? "tpn" : "mmd"; }

inline AdaptationMode adaptation_mode_from_string(const std::string& s) {
  if (s == "tpn") return AdaptationMode::tpn;
  if (s == "mmd") return AdaptationMode::mmd;
  throw DomainError("unknown adaptation mode '" + s + "' (expected tpn or mmd)");
}

struct TrainConfig {
  double alpha = 1.0;
  double beta = 1.0;
  double threshold = 0.6;
  std::size_t pretrain_iters = 500;
  std::size_t max_iters = 3000;
  std::size_t k_per_class = 8;
  std::size_t target_batch = 64;
  AdamHyper adam{};
  KernelSpec kernel{};
  AdaptationMode mode = AdaptationMode::tpn;
  std::uint64_t seed = 0;
  std::size_t eval_every = 100;

  void validate() const {
    if (!(threshold > 0.0 && threshold <= 1.0)) throw DomainError("train: threshold must lie in (0, 1]");
    if (k_per_class == 0) throw DomainError("train: k_per_class must be positive");
    if (target_batch == 0) throw DomainError("train: target_batch must be positive");
    if (eval_every == 0) throw DomainError("train: eval_every must be positive");
    if (!std::isfinite(alpha) || !std::isfinite(beta) || alpha < 0 || beta < 0) {
      throw DomainError("train: alpha and beta must be finite and non-negative");
    }
    if (!(adam.lr > 0.0)) throw DomainError("train: learning rate must be positive");
  }
};

/// Indices of one training batch. The source part is class-major with
/// exactly k samples per class.
struct Episode {
  std::vector<std::size_t> source_indices;
  std::vector<int> source_labels;
  std::vector<std::size_t> target_indices;
  PseudoLabels pseudo;  // filled by the labeling step; rows index target_indices
};

/// Class-balanced source batches plus uniformly drawn target batches. The
/// source and target draws use separate streams, so the source sequence does
/// not depend on the target batch size.
class EpisodeSampler {
 public:
  EpisodeSampler(std::span<const int> source_labels, std::size_t classes, std::size_t target_size, std::size_t k,
                 std::size_t target_batch, std::uint64_t seed)
      : by_class_(classes), target_size_(target_size), k_(k), target_batch_(target_batch),
        source_rng_(derive_seed(seed, 41)), target_rng_(derive_seed(seed, 42)) {
    check_labels(source_labels, classes, "EpisodeSampler");
    for (std::size_t i = 0; i < source_labels.size(); ++i) {
      by_class_[static_cast<std::size_t>(source_labels[i])].push_back(i);
    }
    for (std::size_t c = 0; c < classes; ++c) {
      if (by_class_[c].empty()) throw DomainError("EpisodeSampler: class " + std::to_string(c) + " has no source samples");
    }
  }

  Episode next_source() {
    Episode ep;
    for (std::size_t c = 0; c < by_class_.size(); ++c) {
      for (std::size_t k : source_rng_.sample_indices(by_class_[c].size(), k_)) {
        ep.source_indices.push_back(by_class_[c][k]);
        ep.source_labels.push_back(static_cast<int>(c));
      }
    }
    return ep;
  }

  Episode next() {
    Episode ep = next_source();
    ep.target_indices = target_rng_.sample_indices(target_size_, target_batch_);
    return ep;
  }

 private:
  std::vector<std::vector<std::size_t>> by_class_;
  std::size_t target_size_;
  std::size_t k_;
  std::size_t target_batch_;
  Rng source_rng_;
  Rng target_rng_;
};

struct StepMetrics {
  LossBreakdown losses;
  std::size_t assigned = 0;
  std::size_t target_batch = 0;
  bool adaptation_skipped = false;  // no target sample passed the threshold
  ResolvedKernel kernel{};
};

/// Supervised prototypical step on the source part of the episode only.
inline LossBreakdown source_step(EmbeddingNet& net, AdamState& adam, const Episode& ep, const Tensor& source_inputs,
                                 std::size_t classes, const AdamHyper& hyper) {
  Tape tape;
  const auto theta = net.bind(tape);
  auto es = net.embed(theta, tape.constant(take_rows(source_inputs, ep.source_indices)));
  const auto protos = compute_prototypes(es, ep.source_labels, classes, Domain::source);
  auto loss = supervised_loss(classify(es, protos), ep.source_labels);
  LossBreakdown b = total_objective(loss.value().item(), 0.0, 0.0, 0.0, 0.0);
  adam_step(net.parameters(), tape.backward(loss), adam, hyper);
  return b;
}

struct EpisodeObjective {
  Var objective;  // what gets differentiated
  StepMetrics metrics;
  PseudoLabels pseudo;
};

/// Assembles the full objective for one episode from its embeddings. Step 1
/// labels the target rows with the source prototypes unless `fixed_pseudo`
/// is given; step 2 builds the target and combined prototypes. Terms with a
/// zero weight are evaluated for logging but kept out of the differentiated
/// objective. `fixed_kernel` pins the bandwidth instead of resolving it.
inline EpisodeObjective episode_objective(const Var& es, const Var& et, std::span<const int> source_labels,
                                          std::size_t classes, const TrainConfig& cfg,
                                          const PseudoLabels* fixed_pseudo = nullptr,
                                          const ResolvedKernel* fixed_kernel = nullptr) {
  const auto proto_s = compute_prototypes(es, source_labels, classes, Domain::source);
  auto l_s = supervised_loss(classify(es, proto_s), source_labels);

  EpisodeObjective out;
  out.pseudo = fixed_pseudo ? *fixed_pseudo : pseudo_label(classify(et, proto_s).value(), cfg.threshold);
  const PseudoLabels& pseudo = out.pseudo;

  StepMetrics& m = out.metrics;
  m.assigned = pseudo.assigned.size();
  m.target_batch = et.shape()[0];
  Var objective = l_s;
  double l_g = 0.0, l_t = 0.0;
  std::size_t skipped_classes = 0;
  Tensor class_components(Shape{0, 3}), sample_components(Shape{0, 3});

  if (cfg.mode == AdaptationMode::mmd) {
    m.kernel = fixed_kernel ? *fixed_kernel : resolve_kernel(cfg.kernel, es, et);
    auto l_mmd = mmd(es, et, m.kernel);
    l_g = l_mmd.value().item();
    if (cfg.alpha != 0.0) objective = add(objective, scale(l_mmd, cfg.alpha));
  } else if (pseudo.assigned.empty()) {
    m.adaptation_skipped = true;
    skipped_classes = classes;
  } else {
    auto eta = gather_rows(et, pseudo.assigned);
    const auto proto_t_raw = compute_prototypes(eta, pseudo.classes, classes, Domain::target);
    auto samples = concat_rows(es, eta);
    std::vector<int> sample_labels(source_labels.begin(), source_labels.end());
    sample_labels.insert(sample_labels.end(), pseudo.classes.begin(), pseudo.classes.end());
    const auto proto_st = compute_prototypes(samples, sample_labels, classes, Domain::combined);
    const auto proto_t = with_fallback(proto_t_raw, proto_s);

    m.kernel = fixed_kernel ? *fixed_kernel : resolve_kernel(cfg.kernel, proto_s, proto_t, proto_st);
    const auto lg = class_level_loss(proto_s, proto_t_raw, proto_st, m.kernel);
    const auto lt = sample_level_loss(classify(samples, proto_s), classify(samples, proto_t), classify(samples, proto_st));
    l_g = lg.loss.value().item();
    l_t = lt.loss.value().item();
    skipped_classes = lg.classes_skipped;
    class_components = lg.components;
    sample_components = lt.components;
    if (cfg.alpha != 0.0 && !lg.skipped_all) objective = add(objective, scale(lg.loss, cfg.alpha));
    if (cfg.beta != 0.0) objective = add(objective, scale(lt.loss, cfg.beta));
  }

  const double beta = cfg.mode == AdaptationMode::mmd ? 0.0 : cfg.beta;
  m.losses = total_objective(l_s.value().item(), l_g, l_t, cfg.alpha, beta);
  m.losses.classes_skipped = skipped_classes;
  m.losses.class_components = std::move(class_components);
  m.losses.sample_components = std::move(sample_components);
  out.objective = objective;
  return out;
}

/// One alternating iteration: embed source and target batches in one pass,
/// assemble the objective and take an Adam step on it.
inline StepMetrics train_step(EmbeddingNet& net, AdamState& adam, Episode& ep, const Tensor& source_inputs,
                              const Tensor& target_inputs, std::size_t classes, const TrainConfig& cfg) {
  Tape tape;
  const auto theta = net.bind(tape);
  const std::size_t ns = ep.source_indices.size(), nt = ep.target_indices.size();
  auto x = concat_rows(tape.constant(take_rows(source_inputs, ep.source_indices)),
                       tape.constant(take_rows(target_inputs, ep.target_indices)));
  auto e = net.embed(theta, x);
  auto built = episode_objective(slice_rows(e, 0, ns), slice_rows(e, ns, ns + nt), ep.source_labels, classes, cfg);
  ep.pseudo = std::move(built.pseudo);
  adam_step(net.parameters(), tape.backward(built.objective), adam, cfg.adam);
  return built.metrics;
}

/// Supervised-only warm start on class-balanced source episodes.
inline void pretrain(EmbeddingNet& net, AdamState& adam, const Dataset& source, std::size_t classes,
                     const TrainConfig& cfg) {
  EpisodeSampler sampler(source.labels, classes, 0, cfg.k_per_class, 1, derive_seed(cfg.seed, 51));
  std::optional<std::size_t> last_finite;
  for (std::size_t it = 0; it < cfg.pretrain_iters; ++it) {
    const Episode ep = sampler.next_source();
    try {
      source_step(net, adam, ep, source.inputs, classes, cfg.adam);
    } catch (const NumericalError& e) {
      throw NumericalError(std::string("pretrain diverged at iteration ") + std::to_string(it + 1) +
                               " (last finite iteration: " + (last_finite ? std::to_string(*last_finite) : "none") +
                               "): " + e.what(),
                           e.component());
    }
    last_finite = it + 1;
  }
}

/// The three inference classifiers computed over whole datasets.
struct FrozenPrototypes {
  PrototypeTable source;
  PrototypeTable target;
  PrototypeTable combined;
  std::vector<bool> target_fallback;  // classes whose target prototype was substituted
  PseudoLabels pseudo;                // final labeling pass over the target data

  const PrototypeTable& get(Domain d) const {
    switch (d) {
      case Domain::source: return source;
      case Domain::target: return target;
      case Domain::combined: return combined;
    }
    return combined;
  }
};

/// Full-data prototypes for the current parameters: source from labels,
/// target from a pseudo-labeling pass against the source prototypes,
/// combined from both. Target classes with no accepted sample fall back to
/// the source prototype.
inline FrozenPrototypes freeze_prototypes(const EmbeddingNet& net, const Dataset& source, const Tensor& target,
                                          std::size_t classes, double threshold) {
  const Tensor es = net.embed(source.inputs);
  const Tensor et = net.embed(target);
  FrozenPrototypes f;
  f.source = compute_prototypes(es, source.labels, classes, Domain::source);
  for (std::size_t c = 0; c < classes; ++c) {
    if (!f.source.valid[c]) throw DomainError("freeze: source data has no sample of class " + std::to_string(c));
  }
  f.pseudo = pseudo_label(classify(et, f.source), threshold);
  const Tensor eta = take_rows(et, f.pseudo.assigned);
  const PrototypeTable t_raw = compute_prototypes(eta, f.pseudo.classes, classes, Domain::target);
  f.target_fallback.resize(classes);
  for (std::size_t c = 0; c < classes; ++c) f.target_fallback[c] = !t_raw.valid[c];
  f.target = with_fallback(t_raw, f.source);

  std::vector<double> rows(es.storage());
  rows.insert(rows.end(), eta.storage().begin(), eta.storage().end());
  std::vector<int> labels(source.labels);
  labels.insert(labels.end(), f.pseudo.classes.begin(), f.pseudo.classes.end());
  const std::size_t m = es.shape()[1];
  f.combined = compute_prototypes(Tensor(Shape{labels.size(), m}, std::move(rows)), labels, classes, Domain::combined);
  return f;
}

struct Prediction {
  Tensor scores;
  std::vector<int> labels;
};

inline Prediction predict(const EmbeddingNet& net, const FrozenPrototypes& protos, const Tensor& inputs,
                          Domain which = Domain::combined) {
  Prediction p;
  p.scores = classify(net.embed(inputs), protos.get(which));
  p.labels = argmax_rows(p.scores);
  return p;
}

struct TrainRecord {
  std::size_t iteration = 0;
  LossBreakdown losses;
  double src_acc = 0.0;
  std::optional<double> tgt_acc;
  std::optional<double> rho;
  double assigned_frac = 0.0;
  double batch_assigned_frac = 0.0;  // share of this step's target batch that passed the threshold
  double eps_s = 0.0;  // 0-1 error of the combined classifier on source data
  double eps_t = 0.0;  // 0-1 error of the combined classifier against target pseudo-labels
  bool adaptation_skipped = false;
};

struct TrainLog {
  std::vector<TrainRecord> records;
  std::size_t skipped_steps = 0;  // iterations where no target sample was assigned
};

/// Fixed-precision CSV; empty fields when oracle labels are absent.
inline void write_train_log_csv(std::ostream& out, const TrainLog& log) {
  out << "iteration,L_S,L_G,L_T,total,src_acc,tgt_acc,rho,assigned_frac\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return std::string(buf);
  };
  for (const auto& r : log.records) {
    out << r.iteration << ',' << num(r.losses.supervised) << ',' << num(r.losses.class_level) << ','
        << num(r.losses.sample_level) << ',' << num(r.losses.total) << ',' << num(r.src_acc) << ','
        << (r.tgt_acc ? num(*r.tgt_acc) : "") << ',' << (r.rho ? num(*r.rho) : "") << ',' << num(r.assigned_frac)
        << '\n';
  }
}

/// Diagnostics for the current parameters over the full training data.
inline TrainRecord evaluate(const EmbeddingNet& net, const Dataset& source, const Tensor& target,
                            std::span<const int> oracle, std::size_t classes, double threshold) {
  const FrozenPrototypes f = freeze_prototypes(net, source, target, classes, threshold);
  TrainRecord r;
  const auto src_pred = predict(net, f, source.inputs);
  r.src_acc = accuracy(src_pred.labels, source.labels);
  r.eps_s = 1.0 - r.src_acc;
  const auto tgt_pred = predict(net, f, target);
  if (!f.pseudo.assigned.empty()) {
    std::size_t wrong = 0;
    for (std::size_t k = 0; k < f.pseudo.assigned.size(); ++k)
      wrong += tgt_pred.labels[f.pseudo.assigned[k]] != f.pseudo.classes[k];
    r.eps_t = static_cast<double>(wrong) / static_cast<double>(f.pseudo.assigned.size());
  }
  r.assigned_frac = f.pseudo.assigned_fraction();
  if (!oracle.empty()) {
    r.tgt_acc = accuracy(tgt_pred.labels, oracle);
    r.rho = noise_ratio(f.pseudo, oracle);
  }
  return r;
}

struct FitResult {
  EmbeddingNet net;
  TrainLog log;
  FrozenPrototypes prototypes;
};

/// Pretraining, then `max_iters` alternating steps, then frozen prototypes.
/// Records are taken after iteration 1, every `eval_every` iterations and
/// after the last one. `oracle` (may be empty) is used for diagnostics only.
inline FitResult fit(const NetworkConfig& net_cfg, const Dataset& source, const Tensor& target,
                     std::span<const int> oracle, std::size_t classes, const TrainConfig& cfg,
                     const std::function<void(const TrainRecord&)>& on_record = {}) {
  cfg.validate();
  if (source.size() == 0 || target.rank() != 2 || target.shape()[0] == 0) {
    throw DomainError("fit: source and target data must be non-empty");
  }
  if (source.dims() != target.shape()[1] || source.dims() != net_cfg.input_features()) {
    throw ShapeError("fit: input widths differ (source " + std::to_string(source.dims()) + ", target " +
                     std::to_string(target.shape()[1]) + ", network " + std::to_string(net_cfg.input_features()) + ")");
  }
  if (!oracle.empty() && oracle.size() != target.shape()[0]) throw ShapeError("fit: oracle labels do not match target");

  FitResult result{EmbeddingNet(net_cfg), {}, {}};
  AdamState adam;
  pretrain(result.net, adam, source, classes, cfg);

  EpisodeSampler sampler(source.labels, classes, target.shape()[0], cfg.k_per_class, cfg.target_batch,
                         derive_seed(cfg.seed, 52));
  for (std::size_t it = 1; it <= cfg.max_iters; ++it) {
    Episode ep = sampler.next();
    const StepMetrics m = train_step(result.net, adam, ep, source.inputs, target, classes, cfg);
    result.log.skipped_steps += m.adaptation_skipped;
    if (it == 1 || it % cfg.eval_every == 0 || it == cfg.max_iters) {
      TrainRecord r = evaluate(result.net, source, target, oracle, classes, cfg.threshold);
      r.iteration = it;
      r.losses = m.losses;
      r.adaptation_skipped = m.adaptation_skipped;
      r.batch_assigned_frac = static_cast<double>(m.assigned) / static_cast<double>(m.target_batch);
      result.log.records.push_back(r);
      if (on_record) on_record(result.log.records.back());
    }
  }
  result.prototypes = freeze_prototypes(result.net, source, target, classes, cfg.threshold);
  return result;
}

}  // namespace tpn
