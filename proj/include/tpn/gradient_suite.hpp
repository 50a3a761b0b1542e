#pragma once

// Finite-difference checks of every loss term on random toy episodes. The
// pseudo-labels and the kernel bandwidth are fixed at the base point, as
// they are treated as constants during a training step.

#include <string>
#include <vector>

#include "tpn/adaptation_losses.hpp"
#include "tpn/autodiff.hpp"
#include "tpn/rng.hpp"
#include "tpn/trainer.hpp"

namespace tpn {

struct GradientCheckResult {
  std::string term;
  double max_rel_error = 0.0;
};

struct GradientSuiteOptions {
  std::size_t episodes = 20;
  std::size_t classes = 3;
  std::size_t dim = 4;
  std::size_t per_class = 2;  // source samples per class
  std::size_t target = 6;
  double step = 1e-6;
  std::uint64_t seed = 2024;
};

/// One row per term: L_S, L_G (rbf), L_G (linear), L_T and the full objective.
inline std::vector<GradientCheckResult> run_gradient_suite(const GradientSuiteOptions& opt = {}) {
  std::vector<GradientCheckResult> out{{"L_S", 0}, {"L_G rbf", 0}, {"L_G linear", 0}, {"L_T", 0}, {"total", 0}};
  Rng rng(opt.seed);
  const std::size_t ns = opt.classes * opt.per_class, nt = opt.target;
  std::vector<int> ys;
  for (std::size_t c = 0; c < opt.classes; ++c)
    for (std::size_t k = 0; k < opt.per_class; ++k) ys.push_back(static_cast<int>(c));

  for (std::size_t episode = 0; episode < opt.episodes; ++episode) {
    Tensor x(Shape{ns + nt, opt.dim});
    for (auto& v : x.data()) v = rng.normal();
    PseudoLabels pseudo;
    for (std::size_t i = 0; i < nt; ++i) {
      pseudo.assigned.push_back(i);
      pseudo.classes.push_back(static_cast<int>(rng.below(opt.classes)));
    }

    auto prototypes = [&](const Var& e) {
      auto es = slice_rows(e, 0, ns), et = slice_rows(e, ns, ns + nt);
      auto s = compute_prototypes(es, ys, opt.classes, Domain::source);
      auto t = compute_prototypes(et, pseudo.classes, opt.classes, Domain::target);
      std::vector<int> all(ys);
      all.insert(all.end(), pseudo.classes.begin(), pseudo.classes.end());
      auto st = compute_prototypes(e, all, opt.classes, Domain::combined);
      return std::tuple{s, t, st};
    };

    ResolvedKernel rbf;
    {
      Tape tape;
      auto [s, t, st] = prototypes(tape.constant(x));
      rbf = resolve_kernel(KernelSpec{}, s, with_fallback(t, s), st);
    }

    auto record = [&](std::size_t row, auto&& f) {
      out[row].max_rel_error = std::max(out[row].max_rel_error, static_cast<double>(grad_check(f, x, opt.step)));
    };
    record(0, [&](Tape&, const Var& e) {
      auto es = slice_rows(e, 0, ns);
      return supervised_loss(classify(es, compute_prototypes(es, ys, opt.classes, Domain::source)), ys);
    });
    record(1, [&](Tape&, const Var& e) {
      auto [s, t, st] = prototypes(e);
      return class_level_loss(s, t, st, rbf).loss;
    });
    record(2, [&](Tape&, const Var& e) {
      auto [s, t, st] = prototypes(e);
      return class_level_loss(s, t, st, ResolvedKernel::linear()).loss;
    });
    record(3, [&](Tape&, const Var& e) {
      auto [s, t, st] = prototypes(e);
      const auto tf = with_fallback(t, s);
      return sample_level_loss(classify(e, s), classify(e, tf), classify(e, st)).loss;
    });
    record(4, [&](Tape&, const Var& e) {
      TrainConfig cfg;
      return episode_objective(slice_rows(e, 0, ns), slice_rows(e, ns, ns + nt), ys, opt.classes, cfg, &pseudo, &rbf)
          .objective;
    });
  }
  return out;
}

}  // namespace tpn
