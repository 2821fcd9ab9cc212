#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "pfseg/checkpoint.hpp"
#include "pfseg/config.hpp"
#include "pfseg/verify.hpp"

using namespace pfseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto d = fs::temp_directory_path() / ("pfseg_ckpt_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
  fs::create_directories(d);
  return d;
}

SegModel<float> trained_looking(AdapterKind kind) {
  ModelConfig c;
  c.adapter.kind = kind;
  auto m = SegModel<float>::make(c);
  Rng rng(9);
  ParamList<float> learn;
  for (const auto& p : m.parameters())
    if (classify_parameter(p.name, c) == ParamRole::Learnable) learn.push_back(p);
  randomize(learn, rng, 0.05);
  return m;
}

}  // namespace

TEST(Checkpoint, SerializeRoundTrip) {
  Checkpoint c;
  c.metadata["k"] = "v";
  c.entries.push_back({"a", DType::F64, {2}, {}});
  const double vals[2] = {1.5, -2.25};
  c.entries[0].bytes.assign(reinterpret_cast<const unsigned char*>(vals), reinterpret_cast<const unsigned char*>(vals) + 16);
  const auto back = deserialize(serialize(c));
  EXPECT_EQ(back.metadata.at("k"), "v");
  ASSERT_EQ(back.entries.size(), 1u);
  EXPECT_EQ(back.entries[0].values(), (std::vector<double>{1.5, -2.25}));
}

TEST(Checkpoint, EveryFlippedByteIsDetected) {
  Checkpoint c;
  c.metadata["x"] = "y";
  c.entries.push_back({"t", DType::F32, {3}, std::vector<unsigned char>(12, 7)});
  const auto bytes = serialize(c);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    auto bad = bytes;
    bad[i] ^= 0x40;
    EXPECT_THROW(deserialize(bad), Error) << "byte " << i;
  }
  auto cut = bytes;
  cut.resize(cut.size() - 3);
  EXPECT_THROW(deserialize(cut), Error);
}

TEST(Checkpoint, CorruptionMessage) {
  Checkpoint c;
  c.entries.push_back({"t", DType::F32, {3}, std::vector<unsigned char>(12, 7)});
  auto bytes = serialize(c);
  bytes[20] ^= 1;
  try {
    deserialize(bytes, "f.pfs");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Checkpoint);
    EXPECT_NE(std::string(e.what()).find("checksum mismatch"), std::string::npos);
  }
}

TEST(Checkpoint, ModelRoundTripIsBitwise) {
  const auto dir = temp_dir();
  for (auto k : {AdapterKind::HP, AdapterKind::LW}) {
    const auto m = trained_looking(k);
    save_checkpoint((dir / "m.pfs").string(), to_checkpoint(m));
    const auto back = model_from_checkpoint<float>(load_checkpoint((dir / "m.pfs").string()));
    const auto a = m.parameters(), b = back.parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].name, b[i].name);
      EXPECT_TRUE(std::ranges::equal(a[i].tensor.data(), b[i].tensor.data())) << a[i].name;
    }
  }
  fs::remove_all(dir);
}

TEST(Checkpoint, DeployAndMergedRoundTrip) {
  const auto m = trained_looking(AdapterKind::LW).fused().lora_merged();
  const auto c = to_checkpoint(m);
  EXPECT_EQ(c.metadata.at("mode"), "deploy");
  EXPECT_EQ(c.metadata.at("lora"), "merged");
  const auto back = model_from_checkpoint<float>(deserialize(serialize(c)));
  Rng rng(1);
  auto x = Tensor<float>::uniform({1, 3, 32, 32}, rng, 0, 1);
  NoGradGuard g;
  EXPECT_EQ(max_abs_diff(back.forward(x), m.forward(x)), 0.0);
}

TEST(Checkpoint, ManifestListsPartition) {
  auto m = trained_looking(AdapterKind::LW);
  const auto c = to_checkpoint(m);
  const auto manifest = parse_json(c.metadata.at("manifest"), "manifest");
  const auto part = freeze_partition(m);
  EXPECT_EQ(manifest["learnable"].size(), part.learnable.size());
  EXPECT_EQ(manifest["frozen"].size(), part.frozen.size());
}

TEST(Checkpoint, NameMismatchRejected) {
  auto c = to_checkpoint(trained_looking(AdapterKind::LW));
  c.entries.pop_back();
  EXPECT_THROW(model_from_checkpoint<float>(c), Error);
  auto d = to_checkpoint(trained_looking(AdapterKind::LW));
  d.entries.push_back({"extra", DType::F32, {1}, std::vector<unsigned char>(4, 0)});
  EXPECT_THROW(model_from_checkpoint<float>(d), Error);
}

TEST(Checkpoint, MissingFileIsIoError) {
  try {
    load_checkpoint("/nonexistent/x.pfs");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
  }
}

TEST(Checkpoint, DoubleLoadsFromFloat) {
  const auto m = trained_looking(AdapterKind::Plain);
  const auto back = model_from_checkpoint<double>(to_checkpoint(m));
  const auto a = m.parameters();
  const auto b = back.parameters();
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::int64_t j = 0; j < a[i].tensor.numel(); ++j) ASSERT_EQ(static_cast<double>(a[i].tensor.data()[j]), b[i].tensor.data()[j]);
}
