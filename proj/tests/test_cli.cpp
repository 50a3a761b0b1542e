#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tpn/tpn.hpp"

using namespace tpn;
namespace fs = std::filesystem;

namespace {

using nlohmann::json;

std::string spec_error(const json& j) {
  try {
    (void)parse_run_spec(j);
  } catch (const SpecError& e) {
    return e.what();
  }
  return "";
}

RunSpec small_blobs(std::uint64_t seed = 1) {
  RunSpec s = load_run_spec(TPN_SOURCE_DIR "/configs/blobs_tpn.json");
  s.seed = seed;
  s.dataset.blobs.n_per_class = 60;
  s.train.pretrain_iters = 100;
  s.train.max_iters = 60;
  s.train.eval_every = 20;
  return s;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("tpn_test_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + TPN_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST(RunSpec, EveryShippedConfigParses) {
  for (const auto& entry : fs::directory_iterator(TPN_SOURCE_DIR "/configs")) {
    if (entry.path().extension() != ".json") continue;
    EXPECT_NO_THROW((void)load_run_spec(entry.path().string())) << entry.path();
  }
}

TEST(RunSpec, DefaultsAndOverrides) {
  const RunSpec s = parse_run_spec(json{{"seed", 4}, {"train", {{"alpha", 0.5}, {"adam", {{"lr", 0.01}}}}}});
  EXPECT_EQ(s.name, "run");
  EXPECT_EQ(s.seed, 4u);
  EXPECT_EQ(s.train.alpha, 0.5);
  EXPECT_EQ(s.train.beta, 1.0);
  EXPECT_EQ(s.train.adam.lr, 0.01);
  EXPECT_EQ(s.train.adam.weight_decay, 5e-4);
  EXPECT_EQ(s.dataset.generator, "blobs");
}

TEST(RunSpec, ErrorsNameTheField) {
  EXPECT_EQ(spec_error(json{{"bogus", 1}}), "bogus: unknown field");
  EXPECT_EQ(spec_error(json{{"train", {{"kernel", {{"sigma", 1}}}}}}), "train.kernel.sigma: unknown field");
  EXPECT_EQ(spec_error(json{{"train", {{"max_iters", -3}}}}), "train.max_iters: expected a non-negative integer");
  EXPECT_EQ(spec_error(json{{"train", {{"alpha", "big"}}}}), "train.alpha: expected a number");
  EXPECT_NE(spec_error(json{{"train", {{"mode", "dann"}}}}).find("train.mode: "), std::string::npos);
  EXPECT_NE(spec_error(json{{"dataset", {{"generator", "svhn"}}}}).find("dataset.generator"), std::string::npos);
  EXPECT_EQ(spec_error(json{{"dataset", {{"generator", "idx"}, {"source", {{"images", "a"}}}}}}),
            "dataset.source.labels: missing");
  EXPECT_NE(spec_error(json{{"train", {{"threshold", 1.5}}}}).find("threshold"), std::string::npos);
  EXPECT_NE(spec_error(json{{"model", {{"hidden", {64, 0}}}}}), "");
  EXPECT_EQ(spec_error(json::array()), "spec: expected an object");
}

TEST(RunSpec, BlobKeysDoNotLeakIntoMoons) {
  EXPECT_EQ(spec_error(json{{"dataset", {{"generator", "moons"}, {"radius", 2}}}}), "dataset.radius: unknown field");
}

TEST(Experiment, SummaryIsAFunctionOfTheSpec) {
  const RunSpec spec = small_blobs();
  auto a = summary_json(run_experiment(spec), "2000-01-01T00:00:00Z");
  auto b = summary_json(run_experiment(spec), "2099-12-31T23:59:59Z");
  EXPECT_NE(a, b);
  a.erase("created_at");
  b.erase("created_at");
  EXPECT_EQ(a.dump(), b.dump());
  EXPECT_EQ(a["iterations"], 60);
  EXPECT_TRUE(a["test"].contains("set_agreement"));
}

TEST(Experiment, OutputsRoundTripThroughTheCheckpoint) {
  const RunSpec spec = small_blobs(3);
  const RunResult r = run_experiment(spec);
  const fs::path dir = scratch("outputs");
  write_run_outputs(r, dir, "2000-01-01T00:00:00Z");
  for (const char* name : {"train_log.csv", "checkpoint.bin", "confusion.csv", "summary.json"})
    EXPECT_TRUE(fs::exists(dir / name)) << name;

  const Checkpoint ck = load_checkpoint((dir / "checkpoint.bin").string());
  ASSERT_TRUE(ck.prototypes.has_value());
  const ExperimentData data = build_data(spec.dataset, spec.seed);
  EXPECT_EQ(ck.net().embed(data.target_test.inputs), r.fit.net.embed(data.target_test.inputs));
  EXPECT_EQ(predict(ck.net(), *ck.prototypes, data.target_test.inputs).labels,
            predict(r.fit.net, r.fit.prototypes, data.target_test.inputs).labels);

  const std::string confusion = read_file(dir / "confusion.csv");
  EXPECT_EQ(confusion.substr(0, confusion.find('\n')), "true\\pred,0,1,2,3");
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("exit");
  std::ofstream(dir / "unknown.json") << R"({"name": "x", "bogus": 1})";
  std::ofstream(dir / "broken.json") << R"({"name": )";
  std::ofstream(dir / "missing_data.json")
      << R"({"dataset": {"generator": "idx", "source": {"images": "nope", "labels": "nope"},)"
         R"( "target": {"images": "nope", "labels": "nope"}}})";
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("train " + (dir / "absent.json").string()), 1);
  EXPECT_EQ(run_cli("train " + (dir / "unknown.json").string()), 1);
  EXPECT_EQ(run_cli("train " + (dir / "broken.json").string()), 1);
  EXPECT_EQ(run_cli("train " + (dir / "missing_data.json").string()), 2);
  EXPECT_EQ(run_cli("check --episodes 2"), 0);
  EXPECT_EQ(run_cli("check --episodes 2 --tolerance 0"), 3);
}

TEST(Cli, CompareRejectsSpecsOnDifferentData) {
  EXPECT_EQ(run_cli("compare --iters 1 --seeds 1 " TPN_SOURCE_DIR "/configs/blobs_tpn.json " TPN_SOURCE_DIR
                    "/configs/moons_tpn.json"),
            2);
}

TEST(Cli, TrainThenDumpReproducesTheFrozenPrototypes) {
  const fs::path dir = scratch("dump");
  const std::string spec = TPN_SOURCE_DIR "/configs/blobs_tpn.json";
  ASSERT_EQ(run_cli("train " + spec + " --iters 40 --seed 5 -q -o " + dir.string()), 0);
  ASSERT_EQ(run_cli("dump-embeddings --checkpoint " + (dir / "checkpoint.bin").string() + " --spec " + spec +
                    " --seed 5 --split train --prototypes s -o " + (dir / "emb.csv").string()),
            0);
  const Checkpoint ck = load_checkpoint((dir / "checkpoint.bin").string());
  ASSERT_TRUE(ck.prototypes.has_value());
  const std::size_t m = ck.network.embedding_dim, classes = ck.prototypes->source.valid.size();

  std::ifstream in(dir / "emb.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "e0,e1,e2,e3,e4,e5,e6,e7,e8,e9,label,domain,pred");
  std::vector<std::vector<double>> sum(classes, std::vector<double>(m, 0.0));
  std::vector<std::size_t> count(classes, 0);
  std::size_t rows = 0, source_rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    ASSERT_EQ(cells.size(), m + 3);
    if (cells[m + 1] != "source") continue;
    ++source_rows;
    const auto c = static_cast<std::size_t>(std::stoi(cells[m]));
    for (std::size_t j = 0; j < m; ++j) sum[c][j] += std::stod(cells[j]);
    ++count[c];
  }
  const RunSpec parsed = load_run_spec(spec);
  const std::size_t per_domain = parsed.dataset.blobs.classes * parsed.dataset.blobs.n_per_class;
  EXPECT_EQ(rows, 2 * per_domain);
  EXPECT_EQ(source_rows, per_domain);
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t j = 0; j < m; ++j)
      EXPECT_NEAR(sum[c][j] / static_cast<double>(count[c]), ck.prototypes->source.centroids(c, j), 1e-6);
}

TEST(Cli, GenDataIsDeterministic) {
  const fs::path dir = scratch("gen");
  ASSERT_EQ(run_cli("gen-data --generator moons --seed 7 -o " + (dir / "a.csv").string()), 0);
  ASSERT_EQ(run_cli("gen-data --generator moons --seed 7 -o " + (dir / "b.csv").string()), 0);
  const std::string a = read_file(dir / "a.csv");
  EXPECT_EQ(a, read_file(dir / "b.csv"));
  EXPECT_EQ(a.substr(0, a.find('\n')), "x0,x1,label,domain");
}

TEST(Cli, CompareTableHasOneRowPerSeedPlusAggregates) {
  const fs::path dir = scratch("compare");
  const std::string spec = TPN_SOURCE_DIR "/configs/blobs_tpn.json";
  ASSERT_EQ(run_cli("compare " + spec + " " + spec + " --seeds 1,2,3,4,5 --iters 2 --csv " +
                    (dir / "table.csv").string()),
            0);
  std::ifstream in(dir / "table.csv");
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  ASSERT_EQ(lines.size(), 8u);
  EXPECT_EQ(lines[0], "seed,blobs_tpn,blobs_tpn");
  EXPECT_EQ(lines[6].rfind("mean,", 0), 0u);
  EXPECT_EQ(lines[7].rfind("std,", 0), 0u);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string row = lines[i].substr(lines[i].find(',') + 1);
    const auto comma = row.find(',');
    EXPECT_EQ(row.substr(0, comma), row.substr(comma + 1)) << lines[i];
  }
}
