// Command-line driver: train, compare, dump-embeddings, gen-data, check.
//
// Exit codes: 0 success, 1 usage or invalid spec, 2 data or format error,
// 3 numerical failure.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tpn/tpn.hpp"

namespace {

using namespace tpn;

constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kNumerical = 3;

void print_record(const TrainRecord& r) {
  std::fprintf(stderr, "iter %6zu  L_S %.4f  L_G %.4f  L_T %.4f  src %.3f", r.iteration, r.losses.supervised,
               r.losses.class_level, r.losses.sample_level, r.src_acc);
  if (r.tgt_acc) std::fprintf(stderr, "  tgt %.3f", *r.tgt_acc);
  if (r.rho) std::fprintf(stderr, "  rho %.3f", *r.rho);
  std::fprintf(stderr, "  assigned %.2f\n", r.assigned_frac);
}

struct TrainArgs {
  std::string spec;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> iters;
  std::string out;
  bool quiet = false;
};

RunSpec load_with_overrides(const std::string& path, const std::optional<std::uint64_t>& seed,
                            const std::optional<std::size_t>& iters) {
  RunSpec spec = load_run_spec(path);
  if (seed) spec.seed = *seed;
  if (iters) spec.train.max_iters = *iters;
  return spec;
}

int cmd_train(const TrainArgs& a) {
  const RunSpec spec = load_with_overrides(a.spec, a.seed, a.iters);
  std::filesystem::path dir = !a.out.empty() ? a.out : !spec.output_dir.empty() ? spec.output_dir : "runs/" + spec.name;
  const RunResult r = run_experiment(spec, a.quiet ? std::function<void(const TrainRecord&)>{} : print_record);
  write_run_outputs(r, dir, utc_timestamp());
  std::printf("%s seed %llu: test target acc %.4f (s %.4f, t %.4f, st %.4f), test source acc %.4f\n",
              spec.name.c_str(), static_cast<unsigned long long>(spec.seed), r.test_target_acc, r.target_by_set.source,
              r.target_by_set.target, r.target_by_set.combined, r.test_source_acc);
  std::printf("wrote %s\n", dir.string().c_str());
  return 0;
}

struct CompareArgs {
  std::vector<std::string> specs;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::optional<std::size_t> iters;
  std::string csv;
};

int cmd_compare(const CompareArgs& a) {
  if (a.specs.size() < 2) throw SpecError("compare: need at least two specs");
  std::vector<RunSpec> specs;
  for (const auto& path : a.specs) specs.push_back(load_with_overrides(path, std::nullopt, a.iters));
  const auto reference = dataset_json(specs.front().dataset);
  for (std::size_t i = 1; i < specs.size(); ++i) {
    if (dataset_json(specs[i].dataset) != reference) {
      throw ShapeError("compare: dataset of '" + a.specs[i] + "' differs from '" + a.specs[0] + "'");
    }
  }

  std::vector<std::vector<double>> acc(specs.size());
  for (std::uint64_t seed : a.seeds) {
    for (std::size_t s = 0; s < specs.size(); ++s) {
      RunSpec run = specs[s];
      run.seed = seed;
      acc[s].push_back(run_experiment(run).test_target_acc);
      std::fprintf(stderr, "seed %llu  %-20s %.4f\n", static_cast<unsigned long long>(seed), run.name.c_str(),
                   acc[s].back());
    }
  }

  std::ostringstream table;
  table << "seed";
  for (const auto& s : specs) table << ',' << s.name;
  table << '\n';
  char buf[32];
  for (std::size_t k = 0; k < a.seeds.size(); ++k) {
    table << a.seeds[k];
    for (const auto& col : acc) {
      std::snprintf(buf, sizeof buf, "%.4f", col[k]);
      table << ',' << buf;
    }
    table << '\n';
  }
  for (const char* stat : {"mean", "std"}) {
    table << stat;
    for (const auto& col : acc) {
      const double n = static_cast<double>(col.size());
      const double mean = std::accumulate(col.begin(), col.end(), 0.0) / n;
      double var = 0.0;
      for (double v : col) var += (v - mean) * (v - mean);
      const double value = std::string(stat) == "mean" ? mean : (col.size() > 1 ? std::sqrt(var / (n - 1)) : 0.0);
      std::snprintf(buf, sizeof buf, "%.4f", value);
      table << ',' << buf;
    }
    table << '\n';
  }
  std::cout << table.str();
  if (!a.csv.empty()) {
    std::ofstream f(a.csv);
    if (!f) throw FormatError("cannot write '" + a.csv + "'", 0);
    f << table.str();
  }
  return 0;
}

struct DumpArgs {
  std::string checkpoint;
  std::string spec;
  std::optional<std::uint64_t> seed;
  std::string split = "train";
  std::string which = "st";
  std::string out;
};

int cmd_dump(const DumpArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  if (!ck.prototypes) throw FormatError("checkpoint '" + a.checkpoint + "' has no prototype block", 0);
  const RunSpec spec = load_with_overrides(a.spec, a.seed, std::nullopt);
  const ExperimentData data = build_data(spec.dataset, spec.seed);
  const EmbeddingNet net = ck.net();

  struct Part {
    const Tensor* inputs;
    const std::vector<int>* labels;
    const char* domain;
  };
  std::vector<Part> parts;
  if (a.split == "train") {
    parts = {{&data.train.source.inputs, &data.train.source.labels, "source"},
             {&data.train.target, &data.train.target_oracle, "target"}};
  } else {
    parts = {{&data.source_test.inputs, &data.source_test.labels, "source"},
             {&data.target_test.inputs, &data.target_test.labels, "target"}};
  }
  const Domain which = domain_from_string(a.which);

  std::ofstream file;
  if (!a.out.empty()) {
    file.open(a.out);
    if (!file) throw FormatError("cannot write '" + a.out + "'", 0);
  }
  std::ostream& out = a.out.empty() ? std::cout : file;
  const std::size_t m = net.config().embedding_dim;
  for (std::size_t j = 0; j < m; ++j) out << 'e' << j << ',';
  out << "label,domain,pred\n";
  char buf[32];
  for (const auto& p : parts) {
    if (p.inputs->shape()[1] != net.config().input_features()) {
      throw ShapeError("dump-embeddings: checkpoint expects " + std::to_string(net.config().input_features()) +
                       " input features, dataset has " + std::to_string(p.inputs->shape()[1]));
    }
    const Tensor e = net.embed(*p.inputs);
    const auto pred = argmax_rows(classify(e, ck.prototypes->get(which)));
    for (std::size_t i = 0; i < e.rows(); ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        std::snprintf(buf, sizeof buf, "%.17g", e(i, j));
        out << buf << ',';
      }
      if (!p.labels->empty()) out << (*p.labels)[i];
      out << ',' << p.domain << ',' << pred[i] << '\n';
    }
  }
  return 0;
}

struct GenArgs {
  std::string spec;
  std::string generator = "blobs";
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_gen(const GenArgs& a) {
  DatasetSpec d;
  std::uint64_t seed = a.seed;
  if (!a.spec.empty()) {
    const RunSpec spec = load_run_spec(a.spec);
    d = spec.dataset;
    seed = spec.seed;
  } else {
    d.generator = a.generator;
  }
  if (d.generator == "idx") throw SpecError("gen-data: only synthetic generators (blobs, moons) can be exported");
  const DomainPair pair = build_data(d, seed).train;
  if (a.out.empty()) {
    write_domain_csv(std::cout, pair);
  } else {
    std::ofstream f(a.out);
    if (!f) throw FormatError("cannot write '" + a.out + "'", 0);
    write_domain_csv(f, pair);
  }
  return 0;
}

int cmd_check(const GradientSuiteOptions& opt, double tolerance) {
  bool ok = true;
  for (const auto& r : run_gradient_suite(opt)) {
    const bool pass = r.max_rel_error <= tolerance;
    ok = ok && pass;
    std::printf("%-12s max rel error %.3e  %s\n", r.term.c_str(), r.max_rel_error, pass ? "ok" : "FAILED");
  }
  return ok ? 0 : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype-based unsupervised domain adaptation: training and diagnostics"};
  app.require_subcommand(1);
  int code = 0;

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train one run spec and write its outputs");
  t->add_option("spec", train.spec, "JSON run spec")->required()->check(CLI::ExistingFile);
  t->add_option("--seed", train.seed, "Override the spec seed");
  t->add_option("--iters", train.iters, "Override train.max_iters");
  t->add_option("-o,--out", train.out, "Output directory (default: spec output_dir or runs/<name>)");
  t->add_flag("-q,--quiet", train.quiet, "No per-record progress");

  CompareArgs compare;
  auto* c = app.add_subcommand("compare", "Target test accuracy of several specs over a list of seeds");
  c->add_option("specs", compare.specs, "Two or more JSON run specs sharing one dataset")->required()->check(CLI::ExistingFile);
  c->add_option("--seeds", compare.seeds, "Comma-separated seeds")->delimiter(',')->allow_extra_args(false)->capture_default_str();
  c->add_option("--iters", compare.iters, "Override train.max_iters for every spec");
  c->add_option("--csv", compare.csv, "Also write the table to this file");

  DumpArgs dump;
  auto* d = app.add_subcommand("dump-embeddings", "Write embeddings, labels and predictions as CSV");
  d->add_option("--checkpoint", dump.checkpoint, "checkpoint.bin from a train run")->required()->check(CLI::ExistingFile);
  d->add_option("--spec", dump.spec, "Run spec describing the dataset")->required()->check(CLI::ExistingFile);
  d->add_option("--seed", dump.seed, "Override the spec seed");
  d->add_option("--split", dump.split, "train or test")->check(CLI::IsMember({"train", "test"}))->capture_default_str();
  d->add_option("--prototypes", dump.which, "Prototype set used for pred: s, t or st")
      ->check(CLI::IsMember({"s", "t", "st"}))
      ->capture_default_str();
  d->add_option("-o,--out", dump.out, "Output CSV (default: stdout)");

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Export a synthetic domain pair as CSV");
  g->add_option("--spec", gen.spec, "Take the dataset block and seed from a run spec")->check(CLI::ExistingFile);
  g->add_option("--generator", gen.generator, "blobs or moons (with defaults)")
      ->check(CLI::IsMember({"blobs", "moons"}))
      ->capture_default_str();
  g->add_option("--seed", gen.seed, "Seed when no spec is given")->capture_default_str();
  g->add_option("-o,--out", gen.out, "Output CSV (default: stdout)");

  GradientSuiteOptions suite;
  double tolerance = 1e-4;
  auto* k = app.add_subcommand("check", "Finite-difference check of every loss term on toy episodes");
  k->add_option("--episodes", suite.episodes, "Random episodes")->capture_default_str();
  k->add_option("--seed", suite.seed, "Episode seed")->capture_default_str();
  k->add_option("--tolerance", tolerance, "Maximum relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kUsage;
  }

  try {
    if (*t) code = cmd_train(train);
    else if (*c) code = cmd_compare(compare);
    else if (*d) code = cmd_dump(dump);
    else if (*g) code = cmd_gen(gen);
    else if (*k) code = cmd_check(suite, tolerance);
  } catch (const SpecError& e) {
    std::cerr << "tpn: invalid spec: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericalError& e) {
    std::cerr << "tpn: numerical failure in " << e.component() << ": " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "tpn: " << e.what() << '\n';
    return kData;
  }
  return code;
}
