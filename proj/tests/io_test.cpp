#include <cstring>
#include <string>

#include <gtest/gtest.h>

#include "temp_dir.hpp"
#include "wenc/io.hpp"
#include "wenc/rng.hpp"

namespace wenc {
namespace {

using testing_util::TempDir;

Eigen::MatrixXf random_rows(int n, int d, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXf m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal());
  return m;
}

TEST(DescriptorFile, HeaderLayoutIsLittleEndian) {
  Eigen::MatrixXf m(1, 2);
  m << 1.0f, -2.0f;
  const std::string bytes = encode_descriptors(m);
  ASSERT_EQ(bytes.size(), 16U + 8U);
  EXPECT_EQ(bytes.substr(0, 4), "WDSC");
  const unsigned char expected_header[12] = {1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0};
  EXPECT_EQ(std::memcmp(bytes.data() + 4, expected_header, 12), 0);
  // 1.0f = 0x3f800000, -2.0f = 0xc0000000, little-endian.
  const unsigned char payload[8] = {0, 0, 0x80, 0x3f, 0, 0, 0, 0xc0};
  EXPECT_EQ(std::memcmp(bytes.data() + 16, payload, 8), 0);
}

TEST(DescriptorFile, RoundTripIsBitwise) {
  TempDir dir;
  const Eigen::MatrixXf m = random_rows(7, 5, 3);
  write_descriptors(dir / "x.wdsc", m);
  const Eigen::MatrixXf back = decode_descriptors(read_file(dir / "x.wdsc"));
  ASSERT_EQ(back.rows(), 7);
  EXPECT_EQ(std::memcmp(back.data(), m.data(), sizeof(float) * 35), 0);
  const DescriptorSet s = load_descriptors(dir / "x.wdsc");
  EXPECT_EQ(s.data, m.cast<double>());
}

TEST(DescriptorFile, EmptySetAccepted) {
  const Eigen::MatrixXf empty(0, 16);
  const Eigen::MatrixXf back = decode_descriptors(encode_descriptors(empty));
  EXPECT_EQ(back.rows(), 0);
  EXPECT_EQ(back.cols(), 16);
}

TEST(DescriptorFile, TruncatedPayloadReportsOffset) {
  std::string bytes = encode_descriptors(random_rows(5, 64, 1));
  bytes.resize(16 + 4 * 64 * 4);
  try {
    decode_descriptors(bytes);
    FAIL() << "expected a format error";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), bytes.size());
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
}

TEST(DescriptorFile, BadHeaders) {
  const std::string good = encode_descriptors(random_rows(2, 3, 1));
  std::string magic = good;
  magic[0] = 'X';
  EXPECT_THROW(decode_descriptors(magic), FormatError);
  std::string version = good;
  version[4] = 2;
  try {
    decode_descriptors(version);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4U);
  }
  EXPECT_THROW(decode_descriptors(good.substr(0, 10)), FormatError);
  EXPECT_THROW(decode_descriptors(good + "x"), FormatError);
  EXPECT_EQ(FormatError("x", 0).exit_code(), ExitCode::kData);
}

TEST(DescriptorFile, MissingFileIsIoError) {
  TempDir dir;
  EXPECT_THROW(load_descriptors(dir / "absent.wdsc"), IoError);
}

TEST(Manifest, ParsesAndResolvesPaths) {
  const std::string text =
      "# comment\n"
      "d1\tw1\ttrain\tdesc/d1.wdsc\n"
      "\n"
      "d2\tw2\ttest\t/abs/d2.wdsc\r\n";
  const Manifest m = parse_manifest(text, "/data");
  ASSERT_EQ(m.entries.size(), 2U);
  EXPECT_EQ(m.entries[0].doc_id, "d1");
  EXPECT_EQ(m.entries[0].split, Split::kTrain);
  EXPECT_EQ(m.entries[0].path, std::filesystem::path("/data/desc/d1.wdsc"));
  EXPECT_EQ(m.entries[1].path, std::filesystem::path("/abs/d2.wdsc"));
  EXPECT_EQ(format_manifest(m, "/data"), "d1\tw1\ttrain\tdesc/d1.wdsc\nd2\tw2\ttest\t../abs/d2.wdsc\n");
}

TEST(Manifest, Errors) {
  EXPECT_THROW(parse_manifest("d1\tw1\ttrain\n"), FormatError);
  EXPECT_THROW(parse_manifest("d1\tw1\tvalid\tp\n"), FormatError);
  EXPECT_THROW(parse_manifest("d1\tw1\ttrain\tp\nd1\tw2\ttest\tq\n"), FormatError);
  EXPECT_THROW(parse_manifest("d1\tw1\ttrain\tp\nd2\tw1\ttest\tq\n"), FormatError);
  EXPECT_THROW(parse_manifest("\tw1\ttrain\tp\n"), FormatError);
}

TEST(Archive, RoundTripPreservesOrderAndBits) {
  Archive a;
  a.put_text("kind", "model");
  Matrix m(2, 3);
  m << 1.0, -0.0, 3.25, 1e-300, 2.0 / 3.0, -7.0;
  a.put_matrix("m", m);
  a.put_scalar("s", 0.1);
  a.put_vector("v", Vector::LinSpaced(4, 0.0, 1.0));
  const Archive b = Archive::deserialize(a.serialize());
  ASSERT_EQ(b.entries().size(), 4U);
  EXPECT_EQ(b.entries()[1].first, "m");
  EXPECT_EQ(b.matrix("m"), m);
  EXPECT_TRUE(std::signbit(b.matrix("m")(0, 1)));
  EXPECT_EQ(b.scalar("s"), 0.1);
  EXPECT_EQ(b.vector("v"), Vector::LinSpaced(4, 0.0, 1.0));
  EXPECT_EQ(b.text("kind"), "model");
  EXPECT_EQ(b.serialize(), a.serialize());
}

TEST(Archive, Errors) {
  Archive a;
  a.put_text("t", "x");
  a.put_matrix("m", Matrix::Ones(2, 2));
  EXPECT_THROW(a.matrix("t"), FormatError);
  EXPECT_THROW(a.text("m"), FormatError);
  EXPECT_THROW(a.scalar("m"), FormatError);
  EXPECT_THROW(a.matrix("missing"), FormatError);
  const std::string bytes = a.serialize();
  EXPECT_THROW(Archive::deserialize(bytes.substr(0, bytes.size() - 1)), FormatError);
  EXPECT_THROW(Archive::deserialize("WDSC" + bytes.substr(4)), FormatError);
  EXPECT_THROW(Archive::deserialize(bytes + "z"), FormatError);
}

TEST(Archive, WhiteningRoundTrip) {
  Rng rng(2);
  Matrix X(30, 4);
  for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = rng.normal();
  const WhiteningTransform t = fit_whitening(X, {WhiteningMode::kPcaWhiten, {}, 1, 0});
  Archive a;
  store_whitening(a, "w", t);
  const WhiteningTransform back = load_whitening(Archive::deserialize(a.serialize()), "w");
  EXPECT_EQ(back.rotation, t.rotation);
  EXPECT_EQ(back.scale, t.scale);
  EXPECT_EQ(back.mean, t.mean);
  EXPECT_EQ(back.eps, t.eps);
  EXPECT_EQ(back.dropped_leading, 1);
  EXPECT_EQ(back.mode, WhiteningMode::kPcaWhiten);
  EXPECT_EQ(apply_whitening(back, X), apply_whitening(t, X));
}

TEST(KeyValues, ParsesCommentsAndOrder) {
  const auto kv = parse_key_values("# top\nb = 2\n  a=1  # trailing\n\nc = x, y\n");
  ASSERT_EQ(kv.size(), 3U);
  EXPECT_EQ(kv[0], (std::pair<std::string, std::string>{"b", "2"}));
  EXPECT_EQ(kv[1], (std::pair<std::string, std::string>{"a", "1"}));
  EXPECT_EQ(kv[2].second, "x, y");
  EXPECT_THROW(parse_key_values("novalue\n"), ConfigError);
  EXPECT_THROW(parse_key_values(" = 3\n"), ConfigError);
}

}  // namespace
}  // namespace wenc
