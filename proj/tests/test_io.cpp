#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "emo/io.hpp"

using namespace emo;
namespace fs = std::filesystem;

namespace {

Tensor randn(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 r(seed);
  std::normal_distribution<double> nd;
  std::vector<double> d(numel_of(s));
  for (auto& v : d) v = nd(r);
  return Tensor(s, d);
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("emo_io_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

template <class T>
void put_le(std::string& s, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  s.append(reinterpret_cast<const char*>(b), sizeof(T));
}

}  // namespace

TEST(Emot, ByteLayout) {
  std::string expect = "EMOT";
  put_le<std::uint32_t>(expect, 1);
  put_le<std::uint32_t>(expect, 2);
  put_le<std::uint64_t>(expect, 1);
  put_le<std::uint64_t>(expect, 2);
  expect.push_back('\x01');
  put_le<double>(expect, 0.5);
  put_le<double>(expect, -2.0);
  EXPECT_EQ(encode_tensor(Tensor({1, 2}, {0.5, -2.0})), expect);
}

TEST(Emot, RoundTripF64IsExact) {
  auto t = randn({2, 3, 4}, 1);
  auto u = decode_tensor(encode_tensor(t));
  ASSERT_EQ(u.shape(), t.shape());
  for (std::int64_t i = 0; i < t.numel(); ++i) EXPECT_EQ(u[i], t[i]);
}

TEST(Emot, RoundTripF32Rounds) {
  auto t = randn({17}, 2);
  auto u = decode_tensor(encode_tensor(t, DType::f32));
  for (std::int64_t i = 0; i < t.numel(); ++i) EXPECT_EQ(u[i], static_cast<double>(static_cast<float>(t[i])));
}

TEST(Emot, FileRoundTrip) {
  auto p = scratch("t.emot");
  auto t = randn({3, 3}, 3);
  save_tensor(p.string(), t);
  auto u = load_tensor(p.string());
  for (std::int64_t i = 0; i < t.numel(); ++i) EXPECT_EQ(u[i], t[i]);
  EXPECT_THROW(load_tensor((p.parent_path() / "missing.emot").string()), IoError);
}

TEST(Emot, RejectsCorruption) {
  const auto good = encode_tensor(randn({2, 2}, 4));
  EXPECT_THROW(decode_tensor(good.substr(0, good.size() - 1)), FormatError);
  EXPECT_THROW(decode_tensor(good + "x"), FormatError);
  auto magic = good;
  magic[0] = 'X';
  EXPECT_THROW(decode_tensor(magic), FormatError);
  auto version = good;
  version[4] = 9;
  EXPECT_THROW(decode_tensor(version), FormatError);
  auto dtype = good;
  dtype[4 + 4 + 4 + 16] = 7;
  EXPECT_THROW(decode_tensor(dtype), FormatError);
  EXPECT_THROW(decode_tensor(""), FormatError);
}

TEST(Emow, ModelRoundTripReproducesForward) {
  Model a(preset("emov2-1m"), 1), b(preset("emov2-1m"), 2);
  auto p = scratch("m.emow");
  save_weights(p.string(), a);
  load_weights(p.string(), b);
  NoGradGuard ng;
  auto x = randn({1, 3, 64, 64}, 5);
  auto ya = a.classify(x, Mode::eval), yb = b.classify(x, Mode::eval);
  for (std::int64_t i = 0; i < ya.numel(); ++i) EXPECT_EQ(ya[i], yb[i]);
}

TEST(Emow, CarriesRunningStatistics) {
  Model a(preset("emov2-1m"), 1);
  auto ps = a.parameters();
  for (auto& p : ps)
    if (!p.learnable) {
      auto t = p.tensor;
      t.mutable_data()[0] = 42.0;
    }
  auto ck = decode_weights(encode_weights(ps));
  EXPECT_EQ(ck.entries.at("stem.bn1.running_mean").tensor[0], 42.0);
}

TEST(Emow, LoadIsOrderIndependent) {
  Model a(preset("emov2-1m"), 1), b(preset("emov2-1m"), 2);
  auto ps = a.parameters();
  std::reverse(ps.begin(), ps.end());
  assign_weights(decode_weights(encode_weights(ps)), b.parameters());
  auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::int64_t j = 0; j < pa[i].tensor.numel(); ++j) ASSERT_EQ(pa[i].tensor[j], pb[i].tensor[j]);
}

TEST(Emow, MissingOrMisshapenTensorNamesKey) {
  Model a(preset("emov2-1m"), 1);
  auto ps = a.parameters();
  ps[3].name = "stem.renamed";
  try {
    assign_weights(decode_weights(encode_weights(ps)), a.parameters());
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(a.parameters()[3].name), std::string::npos) << e.what();
  }
  auto ps2 = a.parameters();
  ps2[0].tensor = Tensor::zeros({1});
  try {
    assign_weights(decode_weights(encode_weights(ps2)), a.parameters());
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos);
  }
}

TEST(Emow, FailedLoadLeavesModelUntouched) {
  Model a(preset("emov2-1m"), 1), b(preset("emov2-1m"), 2);
  auto ps = a.parameters();
  ps.pop_back();
  const double before = b.parameters()[0].tensor[0];
  EXPECT_THROW(assign_weights(decode_weights(encode_weights(ps)), b.parameters()), FormatError);
  EXPECT_EQ(b.parameters()[0].tensor[0], before);
}

TEST(Emow, DuplicateAndTruncated) {
  Model a(preset("emov2-1m"), 1);
  auto ps = a.parameters();
  ps.push_back(ps[0]);
  EXPECT_THROW(decode_weights(encode_weights(ps)), FormatError);
  auto bytes = encode_weights(a.parameters(), DType::f32);
  EXPECT_THROW(decode_weights(bytes.substr(0, bytes.size() / 2)), FormatError);
}
