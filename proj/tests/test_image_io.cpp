#include <gtest/gtest.h>
#include <png.h>

#include <fstream>

#include "iidnet/checkpoint.hpp"
#include "iidnet/image_io.hpp"
#include "test_util.hpp"

using namespace iidnet;

namespace {

std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

LinearImage float_exact_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  auto img = random_image(h, w, seed, 0.0, 4.0);
  for (double& v : img.data()) v = static_cast<float>(v);
  return img;
}

}  // namespace

TEST(Pfm, RgbRoundTripIsExactForFloatValues) {
  TempDir dir("pfm");
  const auto img = float_exact_image(5, 7, 1);
  write_pfm(dir / "a.pfm", img);
  EXPECT_EQ(read_linear_image(dir / "a.pfm"), img);
}

TEST(Pfm, GrayRoundTripAndReplication) {
  TempDir dir("pfm");
  auto g = random_gray(3, 4, 2);
  for (double& v : g.data()) v = static_cast<float>(v);
  write_pfm(dir / "g.pfm", g);
  EXPECT_EQ(read_gray_map(dir / "g.pfm"), g);
  const auto rgb = read_linear_image(dir / "g.pfm");
  EXPECT_EQ(rgb.pixel(1, 2), (Rgb{g(1, 2), g(1, 2), g(1, 2)}));
}

TEST(Pfm, HeaderUsesLittleEndianScaleAndBottomUpRows) {
  TempDir dir("pfm");
  LinearImage img(2, 1);
  img.set_pixel(0, 0, {1, 2, 3});  // top row
  img.set_pixel(1, 0, {4, 5, 6});
  write_pfm(dir / "a.pfm", img);
  const auto bytes = read_bytes(dir / "a.pfm");
  const std::string header = "PF\n1 2\n-1.0\n";
  ASSERT_GE(bytes.size(), header.size() + 24);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<long>(header.size())), header);
  float first;
  std::memcpy(&first, &bytes[header.size()], 4);
  EXPECT_EQ(first, 4.0f);  // bottom row first
}

TEST(Pfm, ReadsBigEndianFiles) {
  TempDir dir("pfm");
  std::string header = "Pf\n2 1\n1.0\n";
  std::vector<unsigned char> b(header.begin(), header.end());
  for (float f : {0.5f, 2.0f}) {
    const auto u = std::bit_cast<std::uint32_t>(f);
    for (int i = 3; i >= 0; --i) b.push_back(static_cast<unsigned char>(u >> (8 * i)));
  }
  write_bytes(dir / "be.pfm", b);
  const auto g = read_gray_map(dir / "be.pfm");
  EXPECT_EQ(g(0, 0), 0.5);
  EXPECT_EQ(g(0, 1), 2.0);
}

TEST(Pfm, TruncatedPayloadIsCorrupt) {
  TempDir dir("pfm");
  write_pfm(dir / "a.pfm", float_exact_image(4, 4, 3));
  auto bytes = read_bytes(dir / "a.pfm");
  bytes.resize(bytes.size() - 5);
  write_bytes(dir / "t.pfm", bytes);
  EXPECT_THROW(read_linear_image(dir / "t.pfm"), CorruptFileError);
}

TEST(Pfm, BadMagicAndMissingFile) {
  TempDir dir("pfm");
  write_bytes(dir / "x.pfm", {'P', '6', '\n'});
  EXPECT_THROW(read_pfm(dir / "x.pfm"), CorruptFileError);
  EXPECT_THROW(read_pfm(dir / "missing.pfm"), IoError);
}

TEST(Pfm, NegativeSamplesAreRejected) {
  TempDir dir("pfm");
  write_pfm(dir / "n.pfm", 1, 1, 3, std::vector<float>{0.1f, -0.5f, 0.2f});
  EXPECT_THROW(read_linear_image(dir / "n.pfm"), CorruptFileError);
}

TEST(Png16, QuantizationRule) {
  EXPECT_EQ(to_png16(0.0), 0);
  EXPECT_EQ(to_png16(1.0), 65535);
  EXPECT_EQ(to_png16(2.5), 65535);
  EXPECT_EQ(to_png16(-1.0), 0);
  EXPECT_EQ(to_png16(0.5), 32768);  // round(32767.5)
}

TEST(Png16, WrittenFileDecodesToQuantizedValues) {
  TempDir dir("png");
  LinearImage img(2, 3);
  img.set_pixel(0, 0, {0.0, 0.25, 1.0});
  img.set_pixel(1, 2, {2.0, 0.5, 0.125});
  write_png16(dir / "a.png", img);

  png_image decoded{};
  decoded.version = PNG_IMAGE_VERSION;
  ASSERT_TRUE(png_image_begin_read_from_file(&decoded, (dir / "a.png").c_str()));
  decoded.format = PNG_FORMAT_LINEAR_RGB;  // 16-bit samples, no gamma change for 16-bit input
  std::vector<std::uint16_t> buf(PNG_IMAGE_SIZE(decoded) / 2);
  ASSERT_TRUE(png_image_finish_read(&decoded, nullptr, buf.data(), 0, nullptr));
  EXPECT_EQ(decoded.width, 3u);
  EXPECT_EQ(decoded.height, 2u);
  EXPECT_EQ(buf[0], 0);
  EXPECT_EQ(buf[1], to_png16(0.25));
  EXPECT_EQ(buf[2], 65535);
  EXPECT_EQ(buf[(1 * 3 + 2) * 3 + 0], 65535);
  EXPECT_EQ(buf[(1 * 3 + 2) * 3 + 2], to_png16(0.125));
}

// ---------------------------------------------------------------------------

namespace {

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  ck.meta = {{"name", "t"}, {"n", 3}};
  ck.arrays.push_back({"a.weight", {2, 3}, {1.f, -2.f, 3.5f, 0.f, -0.f, 1e-30f}});
  ck.arrays.push_back({"scalar", {}, {42.f}});
  ck.arrays.push_back({"empty", {0}, {}});
  return ck;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir("ck");
  const auto ck = sample_checkpoint();
  write_checkpoint(dir / "c.bin", ck);
  const auto back = read_checkpoint(dir / "c.bin");
  EXPECT_EQ(back.meta, ck.meta);
  ASSERT_EQ(back.arrays.size(), ck.arrays.size());
  for (std::size_t i = 0; i < ck.arrays.size(); ++i) {
    EXPECT_EQ(back.arrays[i].name, ck.arrays[i].name);
    EXPECT_EQ(back.arrays[i].shape, ck.arrays[i].shape);
    ASSERT_EQ(back.arrays[i].values.size(), ck.arrays[i].values.size());
    for (std::size_t j = 0; j < ck.arrays[i].values.size(); ++j)
      EXPECT_EQ(std::bit_cast<std::uint32_t>(back.arrays[i].values[j]),
                std::bit_cast<std::uint32_t>(ck.arrays[i].values[j]));
  }
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(ck));
}

TEST(Checkpoint, LayoutStartsWithMagicAndVersion) {
  const auto bytes = serialize_checkpoint(sample_checkpoint());
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "IIDNETCK");
  EXPECT_EQ(bytes[8], kCheckpointVersion);
  EXPECT_EQ(bytes[9], 0);
}

TEST(Checkpoint, MissingFileIsIoError) {
  TempDir dir("ck");
  EXPECT_THROW(read_checkpoint(dir / "nope.bin"), IoError);
}

TEST(Checkpoint, EveryTruncationIsCorrupt) {
  const auto bytes = serialize_checkpoint(sample_checkpoint());
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    std::vector<unsigned char> cut(bytes.begin(), bytes.begin() + static_cast<long>(n));
    EXPECT_THROW(parse_checkpoint(cut), CorruptFileError) << "length " << n;
  }
}

TEST(Checkpoint, FlippedByteFailsChecksum) {
  auto bytes = serialize_checkpoint(sample_checkpoint());
  bytes[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(parse_checkpoint(bytes), CorruptFileError);
}

TEST(Checkpoint, OtherVersionIsVersionMismatch) {
  auto bytes = serialize_checkpoint(sample_checkpoint());
  bytes[8] = static_cast<unsigned char>(kCheckpointVersion + 1);
  EXPECT_THROW(parse_checkpoint(bytes), VersionMismatchError);
}

TEST(Checkpoint, WriteIntoMissingDirectoryIsIoError) {
  TempDir dir("ck");
  EXPECT_THROW(write_checkpoint(dir / "no/such/dir/c.bin", sample_checkpoint()), IoError);
}
