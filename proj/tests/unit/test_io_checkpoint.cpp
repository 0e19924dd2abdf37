#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "mdd/checkpoint.hpp"
#include "mdd/io.hpp"
#include "test_support.hpp"

namespace mdd {
namespace {

using mdd::testing::TempDir;

TEST(Doubles, ShortestRoundTrip) {
  EXPECT_EQ(format_double(0.001), "0.001");
  EXPECT_EQ(format_double(1.0), "1");
  EXPECT_EQ(format_double(-2.5), "-2.5");
  for (double v : {0.1, 1.0 / 3.0, 4.0358297653756833e-5, 1e300, -7e-310}) {
    EXPECT_EQ(parse_double(format_double(v)), v);
  }
  EXPECT_THROW(parse_double("1.0x"), FormatError);
  EXPECT_THROW(parse_double(""), FormatError);
}

TEST(KeyValues, TextRoundTrip) {
  const KeyValues kv{{"b", "2"}, {"a", "x y"}, {"c.d", ""}};
  const std::string text = key_values_to_text(kv);
  EXPECT_EQ(text, "a=x y\nb=2\nc.d=\n");
  EXPECT_EQ(key_values_from_text(text), kv);
  EXPECT_THROW(key_values_from_text("novalue\n"), FormatError);
  EXPECT_THROW(key_values_to_text({{"bad=key", "1"}}), FormatError);
  EXPECT_THROW(key_values_to_text({{"k", "multi\nline"}}), FormatError);
}

TEST(Bytes, WriterReaderRoundTrip) {
  ByteWriter w;
  w.raw("HEAD");
  w.u32(0x01020304u);
  w.f32(-1.5f);
  const std::vector<float> values{0.25f, std::numeric_limits<float>::infinity(), 3.0f};
  w.f32s(values);
  w.string("hello");
  EXPECT_EQ(static_cast<unsigned char>(w.bytes()[4]), 0x04);  // little endian

  ByteReader r(w.bytes());
  EXPECT_EQ(r.raw(4), "HEAD");
  EXPECT_EQ(r.u32(), 0x01020304u);
  EXPECT_EQ(r.f32(), -1.5f);
  std::vector<float> back(3);
  r.f32s(back);
  EXPECT_EQ(back, values);
  EXPECT_EQ(r.string(), "hello");
  EXPECT_TRUE(r.at_end());
  EXPECT_THROW(r.u32(), FormatError);
}

TEST(Sha256, KnownDigest) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Files, WriteReadAndMissing) {
  TempDir dir;
  const std::string bytes("a\0b\xff", 4);
  write_file(dir.path() / "f.bin", bytes);
  EXPECT_EQ(read_file(dir.path() / "f.bin"), bytes);
  EXPECT_THROW(read_file(dir.path() / "absent"), std::runtime_error);
}

TEST(Ppm, HeaderAndPixels) {
  Tensor<float> img({3, 1, 2});
  const std::vector<float> v{-1.0f, 1.0f, 0.0f, 0.0f, 1.0f, -1.0f};
  std::copy(v.begin(), v.end(), img.values().begin());
  const std::string ppm = encode_ppm(img);
  ASSERT_EQ(ppm.size(), std::string("P6\n2 1\n255\n").size() + 6);
  EXPECT_EQ(ppm.substr(0, 11), "P6\n2 1\n255\n");
  const auto px = [&](int i) { return static_cast<unsigned char>(ppm[11 + static_cast<std::size_t>(i)]); };
  // First pixel (r, g, b) = (-1, 0, 1) and second = (1, 0, -1).
  EXPECT_EQ(px(0), 0);
  EXPECT_EQ(px(1), 128);
  EXPECT_EQ(px(2), 255);
  EXPECT_EQ(px(3), 255);
  EXPECT_EQ(px(5), 0);
  EXPECT_THROW(encode_ppm(Tensor<float>({1, 2, 2})), std::invalid_argument);
}

TEST(TileImages, GridLayout) {
  std::vector<Tensor<float>> tiles;
  for (int k = 0; k < 3; ++k) {
    Tensor<float> t({3, 2, 2});
    for (auto& x : t.values()) x = 0.1f * static_cast<float>(k);
    tiles.push_back(std::move(t));
  }
  const Tensor<float> grid = tile_images(tiles, 2, 1.0f);
  ASSERT_EQ(grid.rank(), 3);
  EXPECT_EQ(grid.dim(0), 3);
  EXPECT_GE(grid.dim(1), 4);
  EXPECT_GE(grid.dim(2), 4);
  EXPECT_FLOAT_EQ(grid[0], 0.0f);
  EXPECT_FLOAT_EQ(grid[static_cast<std::size_t>(grid.dim(2) - 1)], 0.1f);
  EXPECT_FLOAT_EQ(grid[static_cast<std::size_t>((grid.dim(1) - 1) * grid.dim(2))], 0.2f);
  // The unused cell keeps the pad value.
  EXPECT_FLOAT_EQ(grid[static_cast<std::size_t>(grid.dim(1) * grid.dim(2) - 1)], 1.0f);
  EXPECT_THROW(tile_images({}, 2), std::invalid_argument);
  tiles.push_back(Tensor<float>({3, 1, 2}));
  EXPECT_THROW(tile_images(tiles, 2), std::invalid_argument);
}

Checkpoint sample_checkpoint() {
  const NoiseSchedule schedule(50, 1e-3, 0.05);
  return Checkpoint{DenoiserModel<float>(mdd::testing::tiny_vector_config(3), 5, schedule.steps()), schedule,
                    KeyValues{{"run.scheme", "MDD"}, {"run.seed", "5"}}};
}

TEST(Checkpoint, BitExactRoundTrip) {
  const Checkpoint ck = sample_checkpoint();
  const std::string bytes = encode_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 4), "MDDC");
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_EQ(back.metadata, ck.metadata);
  EXPECT_EQ(back.schedule.steps(), 50);
  EXPECT_EQ(back.schedule.alpha_bar(50), ck.schedule.alpha_bar(50));
  EXPECT_EQ(back.model.config().to_keys(), ck.model.config().to_keys());
  ASSERT_EQ(back.model.parameters().size(), ck.model.parameters().size());
  for (std::size_t i = 0; i < ck.model.parameters().size(); ++i) {
    const auto& a = ck.model.parameters()[i];
    const auto& b = back.model.parameters()[i];
    EXPECT_EQ(a.name, b.name);
    ASSERT_EQ(a.value.shape(), b.value.shape());
    EXPECT_TRUE(std::equal(a.value.values().begin(), a.value.values().end(), b.value.values().begin())) << a.name;
  }

  TempDir dir;
  save_checkpoint(dir.path() / "ck.mddc", ck);
  EXPECT_EQ(read_file(dir.path() / "ck.mddc"), bytes);
  EXPECT_EQ(encode_checkpoint(load_checkpoint(dir.path() / "ck.mddc")), bytes);
}

TEST(Checkpoint, RejectsCorruptBytes) {
  const std::string bytes = encode_checkpoint(sample_checkpoint());
  std::string bad = bytes;
  bad[1] = 'Z';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() / 2)), FormatError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), FormatError);
}

}  // namespace
}  // namespace mdd
