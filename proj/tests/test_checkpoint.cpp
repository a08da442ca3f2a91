#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <iterator>

#include "brainmass/checkpoint.hpp"
#include "brainmass/errors.hpp"
#include "test_util.hpp"

using namespace brainmass;

namespace {

EncoderConfig tiny() { return EncoderConfig{8, 2, 2, 16, 4, 0.25}; }

Checkpoint sample(std::uint64_t seed) {
  Checkpoint c;
  c.meta.encoder = tiny();
  c.meta.train = {{"epochs", 3}};
  c.meta.epoch = 2;
  c.meta.best_loss = 1.5;
  c.model = init_model<float>(tiny(), seed, 0.1);
  return c;
}

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::filesystem::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST(Checkpoint, BitwiseRoundTrip) {
  testutil::TempDir dir("ckpt");
  const auto c = sample(4);
  save_checkpoint(dir / "a.bin", c);
  const auto back = load_checkpoint(dir / "a.bin");
  EXPECT_EQ(back.meta.encoder, c.meta.encoder);
  EXPECT_EQ(back.meta.epoch, 2u);
  EXPECT_EQ(back.meta.best_loss, 1.5);
  EXPECT_EQ(back.meta.train, c.meta.train);
  const auto a = c.model.all_parameters(), b = back.model.all_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    ASSERT_EQ(a[i].tensor.size(), b[i].tensor.size());
    EXPECT_EQ(std::memcmp(a[i].tensor.values().data(), b[i].tensor.values().data(), a[i].tensor.size() * sizeof(float)), 0);
  }
  EXPECT_EQ(parameter_digest(c.model), parameter_digest(back.model));
  for (const auto& p : back.model.target_parameters()) EXPECT_FALSE(p.tensor.requires_grad());

  save_checkpoint(dir / "b.bin", back);
  EXPECT_EQ(slurp(dir / "a.bin"), slurp(dir / "b.bin"));
}

TEST(Checkpoint, UntrainedLossSurvives) {
  testutil::TempDir dir("ckpt");
  auto c = sample(1);
  c.meta.best_loss = std::numeric_limits<double>::infinity();
  save_checkpoint(dir / "a.bin", c);
  EXPECT_TRUE(std::isinf(load_checkpoint(dir / "a.bin").meta.best_loss));
}

TEST(Checkpoint, LayoutHeader) {
  testutil::TempDir dir("ckpt");
  save_checkpoint(dir / "a.bin", sample(1));
  const auto bytes = slurp(dir / "a.bin");
  ASSERT_GT(bytes.size(), 14u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 6), "BMASS1");
  std::uint64_t meta_len = 0;
  for (int i = 7; i >= 0; --i) meta_len = (meta_len << 8) | static_cast<unsigned char>(bytes[6 + static_cast<std::size_t>(i)]);
  const auto meta = nlohmann::json::parse(std::string(bytes.begin() + 14, bytes.begin() + 14 + static_cast<long>(meta_len)));
  EXPECT_TRUE(meta.contains("encoder"));
  const std::size_t n_values = [] {
    std::size_t n = 0;
    for (const auto& p : init_model<float>(tiny(), 0, 0.1).all_parameters()) n += p.tensor.size();
    return n;
  }();
  EXPECT_EQ(bytes.size(), 14 + meta_len + 4 * n_values + 8);
}

TEST(Checkpoint, TruncationIsCorruption) {
  testutil::TempDir dir("ckpt");
  save_checkpoint(dir / "a.bin", sample(2));
  auto bytes = slurp(dir / "a.bin");
  for (std::size_t cut : {bytes.size() - 1, bytes.size() - 9, bytes.size() / 2, std::size_t{10}}) {
    spit(dir / "t.bin", std::vector<char>(bytes.begin(), bytes.begin() + static_cast<long>(cut)));
    EXPECT_THROW(load_checkpoint(dir / "t.bin"), CorruptionError) << cut;
  }
}

TEST(Checkpoint, FlippedBlobByteIsCorruption) {
  testutil::TempDir dir("ckpt");
  save_checkpoint(dir / "a.bin", sample(2));
  auto bytes = slurp(dir / "a.bin");
  bytes[bytes.size() - 20] ^= 0x10;
  spit(dir / "f.bin", bytes);
  EXPECT_THROW(load_checkpoint(dir / "f.bin"), CorruptionError);
}

TEST(Checkpoint, BadMagicIsFormatError) {
  testutil::TempDir dir("ckpt");
  save_checkpoint(dir / "a.bin", sample(2));
  auto bytes = slurp(dir / "a.bin");
  bytes[0] = 'X';
  spit(dir / "m.bin", bytes);
  EXPECT_THROW(load_checkpoint(dir / "m.bin"), FormatError);
  spit(dir / "short.bin", {'B', 'M'});
  EXPECT_THROW(load_checkpoint(dir / "short.bin"), FormatError);
}

TEST(Checkpoint, MissingFileIsIoError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/brainmass.bin"), IoError);
}

TEST(Checkpoint, ConfigMismatchNamesBoth) {
  testutil::TempDir dir("ckpt");
  save_checkpoint(dir / "a.bin", sample(2));
  EncoderConfig other = tiny();
  other.n_layers = 3;
  try {
    load_checkpoint(dir / "a.bin", other);
    FAIL() << "expected IncompatibleError";
  } catch (const IncompatibleError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("\"n_layers\":2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("\"n_layers\":3"), std::string::npos) << msg;
  }
  EXPECT_NO_THROW(load_checkpoint(dir / "a.bin", tiny()));
}

TEST(Checkpoint, EnumerationDigestDependsOnShapes) {
  const auto a = init_model<float>(tiny(), 0, 0.1);
  auto cfg = tiny();
  cfg.ffn_dim = 32;
  const auto b = init_model<float>(cfg, 0, 0.1);
  EXPECT_EQ(enumeration_digest(a.all_parameters()), enumeration_digest(init_model<float>(tiny(), 9, 0.1).all_parameters()));
  EXPECT_NE(enumeration_digest(a.all_parameters()), enumeration_digest(b.all_parameters()));
}
