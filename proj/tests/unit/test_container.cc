#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "fss/container.h"
#include "temp_dir.h"

namespace fss::io {
namespace {

Tensor random_tensor(std::uint64_t seed, Shape dims) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0, 3);
  Tensor t(std::move(dims));
  for (float& v : t.values()) v = n(rng);
  return t;
}

std::uint64_t read_u64(const std::vector<std::uint8_t>& b, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[at + i];
  return v;
}

TEST(Container, HeaderLayoutOf2x3) {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto bytes = encode_tensor(t);
  ASSERT_EQ(bytes.size(), 8u + 16u + 24u);
  EXPECT_EQ(std::memcmp(bytes.data(), "FMTC", 4), 0);
  EXPECT_EQ(bytes[4], 1);  // version
  EXPECT_EQ(bytes[5], 1);  // f32
  EXPECT_EQ(bytes[6], 2);  // ndim
  EXPECT_EQ(bytes[7], 0);  // reserved
  EXPECT_EQ(read_u64(bytes, 8), 2u);
  EXPECT_EQ(read_u64(bytes, 16), 3u);
  // 1.0f little-endian.
  EXPECT_EQ(bytes[24], 0x00);
  EXPECT_EQ(bytes[27], 0x3f);
  EXPECT_EQ(bytes[26], 0x80);
}

TEST(Container, F32RoundTripIsBitExact) {
  testing::TempDir dir;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tensor t = random_tensor(seed, {3, 1 + seed, 4});
    write_tensor(dir.path() / "t.fmtc", t);
    Tensor back = read_tensor(dir.path() / "t.fmtc");
    ASSERT_EQ(back.dims(), t.dims());
    EXPECT_EQ(std::memcmp(back.data(), t.data(), t.size() * sizeof(float)), 0);
  }
}

TEST(Container, F16ExactForRepresentableValues) {
  Tensor t({5}, {1.0f, 0.5f, -2.0f, 0.0f, 65504.0f});
  const auto bytes = encode_tensor(t, DType::kF16);
  EXPECT_EQ(bytes[5], 2);
  EXPECT_EQ(bytes.size(), 8u + 8u + 10u);
  EXPECT_EQ(decode_tensor(bytes), t);
}

TEST(Container, HalfConversion) {
  EXPECT_EQ(float_to_half(1.0f), 0x3c00);
  EXPECT_EQ(float_to_half(-2.0f), 0xc000);
  EXPECT_EQ(half_to_float(0x3555), 0.333251953125f);
  // Smallest subnormal survives the round trip.
  EXPECT_EQ(half_to_float(float_to_half(5.9604644775390625e-8f)), 5.9604644775390625e-8f);
  // Ties round to even: 1 + 2^-11 sits halfway between 1 and 1 + 2^-10.
  EXPECT_EQ(float_to_half(1.0f + 0.00048828125f), 0x3c00);
}

TEST(Container, F16OutOfRangeIsDataError) {
  EXPECT_THROW(encode_tensor(Tensor({1}, 1e6f), DType::kF16), DataError);
}

TEST(Container, RejectsNonFiniteOnWrite) {
  Tensor t({1});
  t[0] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(encode_tensor(t), DataError);
}

std::size_t failure_offset(std::vector<std::uint8_t> bytes) {
  try {
    decode_tensor(bytes);
  } catch (const FormatError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "no FormatError";
  return ~std::size_t{0};
}

TEST(Container, MalformedInputsReportByteOffsets) {
  const auto good = encode_tensor(Tensor({2, 2}, 1.0f));
  auto bad = good;
  bad[1] = 'X';
  EXPECT_EQ(failure_offset(bad), 0u);
  bad = good;
  bad[4] = 9;
  EXPECT_EQ(failure_offset(bad), 4u);
  bad = good;
  bad[5] = 7;
  EXPECT_EQ(failure_offset(bad), 5u);
  bad = good;
  bad[7] = 1;
  EXPECT_EQ(failure_offset(bad), 7u);
  bad = good;
  bad.resize(good.size() - 3);
  EXPECT_EQ(failure_offset(bad), good.size() - 3);
  bad = good;
  bad.resize(12);
  EXPECT_EQ(failure_offset(bad), 12u);
  bad = good;
  bad.push_back(0);
  EXPECT_EQ(failure_offset(bad), good.size());
}

TEST(Container, ReadMissingFileIsDataError) {
  EXPECT_THROW(read_tensor("/nonexistent/x.fmtc"), DataError);
}

TEST(Container, HeaderOnlyRead) {
  testing::TempDir dir;
  write_tensor(dir.path() / "h.fmtc", Tensor({4, 5, 6}), DType::kF16);
  const TensorHeader h = read_tensor_header(dir.path() / "h.fmtc");
  EXPECT_EQ(h.dims, (Shape{4, 5, 6}));
  EXPECT_EQ(h.dtype, DType::kF16);
  EXPECT_EQ(h.payload_offset, 8u + 24u);
}

TEST(Pgm, MinMaxNormalisedP5) {
  testing::TempDir dir;
  write_pgm(dir.path() / "a.pgm", Tensor({2, 2}, {0, 1, 2, 4}));
  std::ifstream in(dir.path() / "a.pgm", std::ios::binary);
  std::string all((std::istreambuf_iterator<char>(in)), {});
  const std::string header = "P5\n2 2\n255\n";
  ASSERT_EQ(all.substr(0, header.size()), header);
  const std::string px = all.substr(header.size());
  ASSERT_EQ(px.size(), 4u);
  EXPECT_EQ(static_cast<unsigned char>(px[0]), 0);
  EXPECT_EQ(static_cast<unsigned char>(px[3]), 255);
}

}  // namespace
}  // namespace fss::io
