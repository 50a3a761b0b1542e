#include <gtest/gtest.h>

#include <filesystem>
#include <unistd.h>

#include "tpn/checkpoint.hpp"

using namespace tpn;

namespace {

FrozenPrototypes sample_prototypes() {
  FrozenPrototypes f;
  f.source = {Tensor::matrix({{0.1, -0.2}, {1e-300, 3.5}}), {true, true}, Domain::source};
  f.target = {Tensor::matrix({{0.25, 0.5}, {1e-300, 3.5}}), {true, true}, Domain::target};
  f.combined = {Tensor::matrix({{0.2, 0.1}, {7, -7}}), {true, true}, Domain::combined};
  f.target_fallback = {false, true};
  return f;
}

NetworkConfig tiny() {
  NetworkConfig c;
  c.hidden = {3};
  c.embedding_dim = 2;
  c.seed = 77;
  return c;
}

std::uint64_t offset_of(const std::vector<std::uint8_t>& bytes) {
  try {
    (void)parse_checkpoint(bytes);
  } catch (const FormatError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "expected FormatError";
  return 0;
}

}  // namespace

TEST(Checkpoint, PreambleLayout) {
  const auto bytes = serialize_checkpoint(tiny(), init_parameters<double>(tiny()));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "TPNPARAM");
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[9] | bytes[10] | bytes[11] | bytes[12] | bytes[13] | bytes[14] | bytes[15], 0);
  std::uint64_t h = 0;
  for (int i = 0; i < 8; ++i) h |= std::uint64_t{bytes[16 + static_cast<std::size_t>(i)]} << (8 * i);
  EXPECT_EQ(bytes[24], '{');
  EXPECT_EQ(bytes[24 + h - 1], '}');
  // 2x3 + 3 + 3x2 + 2 doubles
  EXPECT_EQ(bytes.size(), 24 + h + 8 * 17);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto params = init_parameters<double>(tiny());
  const auto f = sample_prototypes();
  const auto back = parse_checkpoint(serialize_checkpoint(tiny(), params, &f));
  EXPECT_TRUE(back.parameters == params);
  EXPECT_EQ(back.network.hidden, tiny().hidden);
  EXPECT_EQ(back.network.seed, 77u);
  ASSERT_TRUE(back.prototypes);
  EXPECT_EQ(back.prototypes->source.centroids, f.source.centroids);
  EXPECT_EQ(back.prototypes->target.centroids, f.target.centroids);
  EXPECT_EQ(back.prototypes->combined.centroids, f.combined.centroids);
  EXPECT_EQ(back.prototypes->target_fallback, f.target_fallback);
}

TEST(Checkpoint, LeNetConfigSurvives) {
  NetworkConfig c;
  c.arch = Architecture::lenet2conv;
  c.image_height = c.image_width = 18;
  c.conv_filters = {2, 3};
  c.conv_kernel = 3;
  c.fc_width = 5;
  const auto params = init_parameters<double>(c);
  const auto back = parse_checkpoint(serialize_checkpoint(c, params));
  EXPECT_EQ(back.network.arch, Architecture::lenet2conv);
  EXPECT_EQ(back.network.conv_filters, c.conv_filters);
  EXPECT_FALSE(back.prototypes);
  EXPECT_TRUE(back.net().parameters() == params);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / ("tpn_ck_" + std::to_string(::getpid()) + ".bin");
  const auto params = init_parameters<double>(tiny());
  save_checkpoint(path.string(), tiny(), params);
  EXPECT_TRUE(load_checkpoint(path.string()).parameters == params);
  std::filesystem::remove(path);
  EXPECT_THROW((void)load_checkpoint(path.string()), FormatError);
}

TEST(Checkpoint, CorruptionReportsByteOffsets) {
  const auto good = serialize_checkpoint(tiny(), init_parameters<double>(tiny()));
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_EQ(offset_of(bad_magic), 0u);

  auto bad_version = good;
  bad_version[8] = 9;
  EXPECT_EQ(offset_of(bad_version), 8u);

  auto short_payload = good;
  short_payload.resize(good.size() - 4);
  EXPECT_GT(offset_of(short_payload), 24u);

  auto short_header = good;
  short_header.resize(40);
  EXPECT_EQ(offset_of(short_header), 40u);

  auto bad_json = good;
  bad_json[24] = '#';
  EXPECT_GE(offset_of(bad_json), 24u);

  EXPECT_EQ(offset_of(std::vector<std::uint8_t>(good.begin(), good.begin() + 10)), 10u);
}

TEST(Checkpoint, ParametersMustMatchTheNetwork) {
  Parameters wrong;
  wrong.add("fc0.weight", Tensor(Shape{2, 3}));
  EXPECT_THROW((void)parse_checkpoint(serialize_checkpoint(tiny(), wrong)), FormatError);
}

TEST(NetworkConfigJson, UnknownKeysAreRejected) {
  nlohmann::json j = tiny();
  EXPECT_EQ(j.get<NetworkConfig>().hidden, tiny().hidden);
  j["hiden"] = {4};
  EXPECT_THROW((void)j.get<NetworkConfig>(), DomainError);
}
