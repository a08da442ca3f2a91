#include <gtest/gtest.h>

#include <set>

#include "brainmass/errors.hpp"
#include "brainmass/hashing.hpp"

using namespace brainmass;

TEST(Hashing, FnvKnownVectors) {
  EXPECT_EQ(fnv1a(std::string_view("")), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a(std::string_view("a")), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a(std::string_view("foobar")), 0x85944171f73967e8ULL);
}

TEST(Hashing, FnvIsResumable) {
  EXPECT_EQ(fnv1a(std::string_view("bar"), fnv1a(std::string_view("foo"))), fnv1a(std::string_view("foobar")));
}

TEST(Hashing, HexIsFixedWidth) {
  EXPECT_EQ(to_hex(0), "0000000000000000");
  EXPECT_EQ(to_hex(0xabcULL), "0000000000000abc");
}

TEST(Hashing, DerivedSeedsSeparateSubjectsAndViews) {
  std::set<std::uint64_t> seen;
  for (int s = 0; s < 50; ++s)
    for (std::uint64_t v = 0; v < 4; ++v) seen.insert(derive_seed(7, "sub-" + std::to_string(s), v));
  EXPECT_EQ(seen.size(), 200u);
  EXPECT_EQ(derive_seed(7, "x", 1), derive_seed(7, "x", 1));
  EXPECT_NE(derive_seed(7, "x", 1), derive_seed(8, "x", 1));
}

TEST(Errors, ExitCodes) {
  EXPECT_EQ(ValidationError("x").exit_code(), 1);
  EXPECT_EQ(ParameterError("x").exit_code(), 1);
  EXPECT_EQ(FormatError("x").exit_code(), 2);
  EXPECT_EQ(IoError("x").exit_code(), 2);
  EXPECT_EQ(CorruptionError("x").exit_code(), 2);
  EXPECT_EQ(NumericError("x").exit_code(), 3);
}

TEST(Errors, WarningHandlerCapturesMessages) {
  std::vector<std::string> got;
  auto previous = set_warning_handler([&](const std::string& m) { got.push_back(m); });
  warn("hello");
  set_warning_handler(previous);
  ASSERT_EQ(got.size(), 1u);
  EXPECT_EQ(got[0], "hello");
}
