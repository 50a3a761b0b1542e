#pragma once

// Run specifications and the experiment driver behind the command-line tool.
// A spec is a JSON document; one top-level seed drives data generation,
// initialisation and training, so (spec, seed) fully determines a run.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tpn/checkpoint.hpp"
#include "tpn/datasets.hpp"
#include "tpn/embedding_net.hpp"
#include "tpn/trainer.hpp"

namespace tpn {

/// A spec field is missing, mistyped or out of range. The message starts
/// with the field path, e.g. "train.alpha: expected a number".
class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct IdxSource {
  std::string images;
  std::string labels;
  std::size_t subsample = 0;
};

struct DatasetSpec {
  std::string generator = "blobs";  // blobs | moons | idx
  BlobsConfig blobs{};
  MoonsConfig moons{};
  std::size_t classes = 10;  // idx only
  IdxSource source, target;
  std::optional<IdxSource> source_test, target_test;
};

struct RunSpec {
  std::string name = "run";
  std::uint64_t seed = 0;
  DatasetSpec dataset{};
  NetworkConfig model{};
  TrainConfig train{};
  std::string output_dir;
};

namespace detail {

/// Strict reader over one JSON object: every key must be consumed.
class SpecReader {
 public:
  SpecReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw SpecError(label() + "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  void read(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    seen_.push_back(key);
    const auto& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw SpecError(field(key) + ": expected true or false");
      out = v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw SpecError(field(key) + ": expected a string");
      out = v.get<std::string>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
        throw SpecError(field(key) + ": expected a non-negative integer");
      }
      out = v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw SpecError(field(key) + ": expected a number");
      out = v.get<T>();
    } else {
      try {
        out = v.get<T>();
      } catch (const nlohmann::json::exception&) {
        throw SpecError(field(key) + ": has the wrong type");
      }
    }
  }

  template <class T>
  void require(const std::string& key, T& out) {
    if (!j_.contains(key)) throw SpecError(field(key) + ": missing");
    read(key, out);
  }

  SpecReader child(const std::string& key) {
    seen_.push_back(key);
    return SpecReader(j_.at(key), field(key));
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) throw SpecError(field(key) + ": unknown field");
    }
  }

 private:
  std::string label() const { return path_.empty() ? "spec: " : path_ + ": "; }

  const nlohmann::json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

inline IdxSource read_idx_source(SpecReader r, bool subsample_allowed) {
  IdxSource s;
  r.require("images", s.images);
  r.require("labels", s.labels);
  if (subsample_allowed) r.read("subsample", s.subsample);
  r.finish();
  return s;
}

template <class E, class F>
E read_enum(SpecReader& r, const std::string& key, E fallback, F parse) {
  std::string text;
  r.read(key, text);
  if (text.empty()) return fallback;
  try {
    return parse(text);
  } catch (const DomainError& e) {
    throw SpecError(r.field(key) + ": " + e.what());
  }
}

}  // namespace detail

inline RunSpec parse_run_spec(const nlohmann::json& j) {
  using detail::SpecReader;
  RunSpec spec;
  SpecReader top(j, "");
  top.read("name", spec.name);
  top.read("seed", spec.seed);
  top.read("output_dir", spec.output_dir);

  if (top.has("dataset")) {
    auto d = top.child("dataset");
    auto& ds = spec.dataset;
    d.require("generator", ds.generator);
    if (ds.generator == "blobs") {
      d.read("classes", ds.blobs.classes);
      d.read("n_per_class", ds.blobs.n_per_class);
      d.read("rotation_deg", ds.blobs.rotation_deg);
      d.read("translation", ds.blobs.translation);
      d.read("noise", ds.blobs.noise);
      d.read("radius", ds.blobs.radius);
    } else if (ds.generator == "moons") {
      d.read("n", ds.moons.n);
      d.read("rotation_deg", ds.moons.rotation_deg);
      d.read("noise", ds.moons.noise);
    } else if (ds.generator == "idx") {
      d.read("classes", ds.classes);
      ds.source = detail::read_idx_source(d.child("source"), true);
      ds.target = detail::read_idx_source(d.child("target"), true);
      if (d.has("source_test")) ds.source_test = detail::read_idx_source(d.child("source_test"), true);
      if (d.has("target_test")) ds.target_test = detail::read_idx_source(d.child("target_test"), true);
    } else {
      throw SpecError("dataset.generator: unknown generator '" + ds.generator + "' (expected blobs, moons or idx)");
    }
    d.finish();
  }

  if (top.has("model")) {
    auto m = top.child("model");
    auto& n = spec.model;
    n.arch = detail::read_enum(m, "arch", n.arch, architecture_from_string);
    m.read("input_dim", n.input_dim);
    m.read("hidden", n.hidden);
    m.read("image_channels", n.image_channels);
    m.read("image_height", n.image_height);
    m.read("image_width", n.image_width);
    m.read("conv_filters", n.conv_filters);
    m.read("conv_kernel", n.conv_kernel);
    m.read("fc_width", n.fc_width);
    m.read("embedding_dim", n.embedding_dim);
    m.finish();
    try {
      n.validate();
    } catch (const ShapeError& e) {
      throw SpecError(std::string("model: ") + e.what());
    }
  }

  if (top.has("train")) {
    auto t = top.child("train");
    auto& c = spec.train;
    t.read("alpha", c.alpha);
    t.read("beta", c.beta);
    t.read("threshold", c.threshold);
    t.read("pretrain_iters", c.pretrain_iters);
    t.read("max_iters", c.max_iters);
    t.read("k_per_class", c.k_per_class);
    t.read("target_batch", c.target_batch);
    t.read("eval_every", c.eval_every);
    c.mode = detail::read_enum(t, "mode", c.mode, adaptation_mode_from_string);
    if (t.has("kernel")) {
      auto k = t.child("kernel");
      c.kernel.kind = detail::read_enum(k, "kind", c.kernel.kind, [](const std::string& s) {
        if (s == "rbf") return KernelKind::rbf;
        if (s == "linear") return KernelKind::linear;
        throw DomainError("unknown kernel '" + s + "' (expected rbf or linear)");
      });
      c.kernel.bandwidth = detail::read_enum(k, "bandwidth", c.kernel.bandwidth, [](const std::string& s) {
        if (s == "median") return BandwidthPolicy::median;
        if (s == "fixed") return BandwidthPolicy::fixed;
        throw DomainError("unknown bandwidth policy '" + s + "' (expected median or fixed)");
      });
      k.read("sigma2", c.kernel.sigma2);
      k.finish();
      if (c.kernel.bandwidth == BandwidthPolicy::fixed && !(c.kernel.sigma2 > 0.0)) {
        throw SpecError("train.kernel.sigma2: must be positive");
      }
    }
    if (t.has("adam")) {
      auto a = t.child("adam");
      a.read("lr", c.adam.lr);
      a.read("beta1", c.adam.beta1);
      a.read("beta2", c.adam.beta2);
      a.read("eps", c.adam.eps);
      a.read("weight_decay", c.adam.weight_decay);
      a.finish();
    }
    t.finish();
    try {
      c.validate();
    } catch (const DomainError& e) {
      throw SpecError(e.what());
    }
  }
  top.finish();
  return spec;
}

inline RunSpec load_run_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SpecError("cannot open spec file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw SpecError("spec file '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_run_spec(j);
}

/// The dataset block as JSON, used to check that compared specs agree.
inline nlohmann::json dataset_json(const DatasetSpec& d) {
  nlohmann::json j{{"generator", d.generator}};
  if (d.generator == "blobs") {
    j.update({{"classes", d.blobs.classes},
              {"n_per_class", d.blobs.n_per_class},
              {"rotation_deg", d.blobs.rotation_deg},
              {"translation", d.blobs.translation},
              {"noise", d.blobs.noise},
              {"radius", d.blobs.radius}});
  } else if (d.generator == "moons") {
    j.update({{"n", d.moons.n}, {"rotation_deg", d.moons.rotation_deg}, {"noise", d.moons.noise}});
  } else {
    auto src = [](const IdxSource& s) {
      return nlohmann::json{{"images", s.images}, {"labels", s.labels}, {"subsample", s.subsample}};
    };
    j.update({{"classes", d.classes}, {"source", src(d.source)}, {"target", src(d.target)}});
    if (d.source_test) j["source_test"] = src(*d.source_test);
    if (d.target_test) j["target_test"] = src(*d.target_test);
  }
  return j;
}

/// Training pair plus held-out evaluation data.
struct ExperimentData {
  DomainPair train;
  Dataset source_test;
  Dataset target_test;
};

inline ExperimentData build_data(const DatasetSpec& d, std::uint64_t seed) {
  ExperimentData out;
  auto held_out = [&](DomainPair pair) {
    out.source_test = std::move(pair.source);
    out.target_test.inputs = std::move(pair.target);
    out.target_test.labels = std::move(pair.target_oracle);
  };
  if (d.generator == "blobs") {
    BlobsConfig c = d.blobs;
    c.seed = seed;
    out.train = gen_shifted_blobs(c);
    c.seed = derive_seed(seed, 99);
    held_out(gen_shifted_blobs(c));
  } else if (d.generator == "moons") {
    MoonsConfig c = d.moons;
    c.seed = seed;
    out.train = gen_two_moons_shift(c);
    c.seed = derive_seed(seed, 99);
    held_out(gen_two_moons_shift(c));
  } else {
    auto load = [&](const IdxSource& s, std::uint64_t stream) {
      IdxLoadOptions opt;
      opt.classes = d.classes;
      opt.subsample = s.subsample;
      opt.seed = derive_seed(seed, stream);
      return load_idx(s.images, s.labels, opt);
    };
    out.train.source = load(d.source, 1);
    const Dataset target = load(d.target, 2);
    out.train.target = target.inputs;
    out.train.target_oracle = target.labels;
    out.train.classes = d.classes;
    out.train.generator = "idx";
    out.train.seed = seed;
    out.source_test = d.source_test ? load(*d.source_test, 3) : out.train.source;
    out.target_test = d.target_test ? load(*d.target_test, 4) : target;
  }
  return out;
}

struct SetAccuracy {
  double source = 0.0, target = 0.0, combined = 0.0;
  double agreement = 0.0;  // share of points on which all three sets predict the same class
};

struct RunResult {
  RunSpec spec;
  FitResult fit;
  double test_source_acc = 0.0;
  double test_target_acc = 0.0;  // combined (st) classifier, the default
  SetAccuracy target_by_set;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted] on the target test set
};

inline SetAccuracy accuracy_by_set(const FitResult& r, const Dataset& d) {
  const auto s = predict(r.net, r.prototypes, d.inputs, Domain::source).labels;
  const auto t = predict(r.net, r.prototypes, d.inputs, Domain::target).labels;
  const auto st = predict(r.net, r.prototypes, d.inputs, Domain::combined).labels;
  SetAccuracy a;
  a.source = accuracy(s, d.labels);
  a.target = accuracy(t, d.labels);
  a.combined = accuracy(st, d.labels);
  std::size_t same = 0;
  for (std::size_t i = 0; i < st.size(); ++i) same += s[i] == st[i] && t[i] == st[i];
  a.agreement = st.empty() ? 1.0 : static_cast<double>(same) / static_cast<double>(st.size());
  return a;
}

/// Runs one spec with its own seed. Writes nothing.
inline RunResult run_experiment(const RunSpec& spec, const std::function<void(const TrainRecord&)>& on_record = {}) {
  const ExperimentData data = build_data(spec.dataset, spec.seed);
  NetworkConfig net = spec.model;
  net.seed = spec.seed;
  TrainConfig cfg = spec.train;
  cfg.seed = spec.seed;
  const std::size_t classes = data.train.classes;
  RunResult out{spec, fit(net, data.train.source, data.train.target, data.train.target_oracle, classes, cfg, on_record), 0.0, 0.0, {}, {}};

  out.test_source_acc = accuracy(predict(out.fit.net, out.fit.prototypes, data.source_test.inputs).labels,
                                 data.source_test.labels);
  const auto pred = predict(out.fit.net, out.fit.prototypes, data.target_test.inputs).labels;
  out.test_target_acc = accuracy(pred, data.target_test.labels);
  out.target_by_set = accuracy_by_set(out.fit, data.target_test);
  out.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    ++out.confusion[static_cast<std::size_t>(data.target_test.labels[i])][static_cast<std::size_t>(pred[i])];
  }
  return out;
}

inline void write_confusion_csv(std::ostream& out, const std::vector<std::vector<std::size_t>>& m) {
  out << "true\\pred";
  for (std::size_t c = 0; c < m.size(); ++c) out << ',' << c;
  out << '\n';
  for (std::size_t r = 0; r < m.size(); ++r) {
    out << r;
    for (auto v : m[r]) out << ',' << v;
    out << '\n';
  }
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

/// Everything in the summary except `created_at` is a function of the spec.
inline nlohmann::json summary_json(const RunResult& r, const std::string& timestamp) {
  const auto& recs = r.fit.log.records;
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j{{"name", r.spec.name},
                   {"seed", r.spec.seed},
                   {"dataset", dataset_json(r.spec.dataset)},
                   {"mode", to_string(r.spec.train.mode)},
                   {"alpha", r.spec.train.alpha},
                   {"beta", r.spec.train.beta},
                   {"iterations", r.spec.train.max_iters},
                   {"skipped_steps", r.fit.log.skipped_steps},
                   {"test",
                    {{"source_acc", r.test_source_acc},
                     {"target_acc", r.test_target_acc},
                     {"target_acc_by_set",
                      {{"s", r.target_by_set.source}, {"t", r.target_by_set.target}, {"st", r.target_by_set.combined}}},
                     {"set_agreement", r.target_by_set.agreement}}},
                   {"created_at", timestamp}};
  if (!recs.empty()) {
    j["train"] = {{"src_acc", recs.back().src_acc},
                  {"tgt_acc", opt(recs.back().tgt_acc)},
                  {"assigned_frac", recs.back().assigned_frac},
                  {"rho_first", opt(recs.front().rho)},
                  {"rho_last", opt(recs.back().rho)}};
  }
  return j;
}

/// Writes train_log.csv, checkpoint.bin, confusion.csv and summary.json.
inline void write_run_outputs(const RunResult& r, const std::filesystem::path& dir, const std::string& timestamp) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw FormatError("cannot write '" + (dir / name).string() + "'", 0);
    return f;
  };
  {
    auto f = open("train_log.csv");
    write_train_log_csv(f, r.fit.log);
  }
  {
    auto f = open("confusion.csv");
    write_confusion_csv(f, r.confusion);
  }
  {
    auto f = open("summary.json");
    f << summary_json(r, timestamp).dump(2) << '\n';
  }
  save_checkpoint((dir / "checkpoint.bin").string(), r.fit.net.config(), r.fit.net.parameters(), &r.fit.prototypes);
}

}  // namespace tpn
