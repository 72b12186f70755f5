#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <filesystem>
#include <set>

#include "sfl/data.hpp"
#include "sfl/image_io.hpp"

using namespace sfl;

namespace {

std::array<int, 5> histogram(const Sample& s) {
  std::array<int, 5> h{};
  for (auto c : s.mask) ++h[c];
  return h;
}

bool same(const Sample& a, const Sample& b) { return a.image == b.image && a.mask == b.mask; }

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sfl_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(Synthetic, SameSeedSameBytes) {
  auto a = generate_synthetic_dataset(6, 32, 11);
  auto b = generate_synthetic_dataset(6, 32, 11);
  auto c = generate_synthetic_dataset(6, 32, 12);
  for (int i = 0; i < 6; ++i) EXPECT_TRUE(same(a[i], b[i]));
  EXPECT_FALSE(same(a[0], c[0]));
}

TEST(Synthetic, SampleDependsOnlyOnIndex) {
  auto few = generate_synthetic_dataset(3, 32, 5);
  auto many = generate_synthetic_dataset(9, 32, 5);
  for (int i = 0; i < 3; ++i) EXPECT_TRUE(same(few[i], many[i]));
}

TEST(Synthetic, BlobLiesInsideInterior) {
  for (const auto& s : generate_synthetic_dataset(20, 48, 3)) {
    ASSERT_EQ(s.mask.size(), 48u * 48);
    ASSERT_EQ(s.image.size(), 3u * 48 * 48);
    for (auto c : s.mask) EXPECT_LE(c, 4);
    // Every blob pixel's 4-neighbours are interior or blob.
    for (int y = 0; y < 48; ++y)
      for (int x = 0; x < 48; ++x) {
        if (s.mask[y * 48 + x] != 4) continue;
        for (auto [dy, dx] : {std::pair{0, 1}, {1, 0}, {0, -1}, {-1, 0}}) {
          const int yy = y + dy, xx = x + dx;
          ASSERT_TRUE(yy >= 0 && yy < 48 && xx >= 0 && xx < 48);
          EXPECT_GE(s.mask[yy * 48 + xx], 3);
        }
      }
    EXPECT_GT(histogram(s)[3], 0);
  }
}

TEST(Synthetic, OnlyFiveClasses) {
  SyntheticOptions opt;
  opt.num_classes = 2;
  EXPECT_THROW(generate_synthetic_dataset(1, 16, 0, opt), ConfigError);
}

TEST(Partition, BlastocystSizing) {
  const auto& p = dataset_preset("blastocyst-4client");
  auto all = generate_synthetic_dataset(801, 16, 1);
  auto parts = partition_dataset(all, {p.client_counts, p.test_count, 1});
  ASSERT_EQ(parts.clients.size(), 4u);
  EXPECT_EQ(parts.clients[0].size(), 110u);
  EXPECT_EQ(parts.clients[3].size(), 300u);
  EXPECT_EQ(parts.test.size(), 101u);
  std::size_t train = 0;
  for (const auto& c : parts.clients) train += c.size();
  EXPECT_EQ(train, 700u);
}

TEST(Partition, DisjointAndComplete) {
  auto all = generate_synthetic_dataset(40, 16, 2);
  auto parts = partition_dataset(all, {{5, 10, 15}, 10, 9});
  std::multiset<std::string> seen;
  for (const auto& c : parts.clients)
    for (const auto& s : c) seen.insert(s.id);
  for (const auto& s : parts.test) seen.insert(s.id);
  std::multiset<std::string> expect;
  for (const auto& s : all) expect.insert(s.id);
  EXPECT_EQ(seen, expect);
}

TEST(Partition, TooFewSamplesThrows) {
  auto all = generate_synthetic_dataset(10, 16, 2);
  EXPECT_THROW(partition_dataset(all, {{5, 5}, 1, 0}), ConfigError);
}

TEST(TrainVal, EightyFiveFifteen) {
  EXPECT_EQ(validation_count(200), 30);
  EXPECT_EQ(validation_count(110), 16);
  EXPECT_EQ(validation_count(2), 1);
  EXPECT_EQ(validation_count(1), 0);
  auto shard = generate_synthetic_dataset(200, 16, 4);
  auto tv = train_val_split(shard, 3);
  EXPECT_EQ(tv.train.size(), 170u);
  EXPECT_EQ(tv.val.size(), 30u);
  auto again = train_val_split(shard, 3);
  EXPECT_EQ(again.val.front().id, tv.val.front().id);
}

TEST(Permutation, IsPermutationAndSeeded) {
  auto p = seeded_permutation(50, 8);
  auto sorted = p;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_EQ(p, seeded_permutation(50, 8));
  EXPECT_NE(p, seeded_permutation(50, 9));
}

TEST(Augment, FlipsAreInvolutions) {
  auto s = generate_synthetic_dataset(1, 24, 6)[0];
  EXPECT_TRUE(same(hflip(hflip(s)), s));
  EXPECT_TRUE(same(vflip(vflip(s)), s));
  EXPECT_FALSE(same(hflip(s), s));
}

TEST(Augment, FourQuarterTurnsAreIdentity) {
  auto s = generate_synthetic_dataset(1, 24, 7)[0];
  auto r = s;
  for (int i = 0; i < 4; ++i) r = rot90(r, 1);
  EXPECT_TRUE(same(r, s));
  EXPECT_TRUE(same(rot90(s, 2), hflip(vflip(s))));
}

TEST(Augment, GeometricOpsKeepClassHistogram) {
  auto s = generate_synthetic_dataset(1, 24, 8)[0];
  EXPECT_EQ(histogram(hflip(s)), histogram(s));
  EXPECT_EQ(histogram(vflip(s)), histogram(s));
  EXPECT_EQ(histogram(rot90(s, 1)), histogram(s));
  EXPECT_EQ(histogram(rot90(s, 3)), histogram(s));
}

TEST(Augment, SeededAndMaskSafe) {
  auto s = generate_synthetic_dataset(1, 24, 9)[0];
  AugmentConfig cfg;
  cfg.rot90 = true;
  cfg.rgb_shift = 0.1;
  cfg.brightness = 0.1;
  cfg.contrast = 0.1;
  cfg.max_rotation_deg = 10;
  std::mt19937_64 a(4), b(4);
  for (int i = 0; i < 5; ++i) {
    auto x = augment_sample(s, cfg, a), y = augment_sample(s, cfg, b);
    EXPECT_TRUE(same(x, y));
    for (auto c : x.mask) EXPECT_LE(c, 4);
    for (float v : x.image) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Augment, NormalizeUsesChannelStats) {
  Sample s;
  s.channels = 3;
  s.height = s.width = 1;
  s.image = {0.5f, 0.75f, 0.0f};
  s.mask = {0};
  auto n = normalize(s, {0.5f, 0.5f, 0.5f}, {0.25f, 0.25f, 0.25f});
  EXPECT_EQ(n.image, (std::vector<float>{0.0f, 1.0f, -2.0f}));
}

TEST(Batch, StacksSamples) {
  auto samples = generate_synthetic_dataset(3, 16, 1);
  const std::size_t idx[] = {2, 0};
  auto b = make_batch(samples, idx);
  EXPECT_EQ(b.images.shape(), (Shape{2, 3, 16, 16}));
  EXPECT_EQ(b.masks.size(), 512u);
  EXPECT_EQ(b.images.at(0), samples[2].image[0]);
  EXPECT_EQ(b.masks[256], samples[0].mask[0]);
}

TEST(ImageDir, LoadsMatchedPairsAndBinaryMasks) {
  auto dir = temp_dir("pairs");
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  for (int i = 0; i < 3; ++i) {
    Image8 img{20, 20, 3, std::vector<std::uint8_t>(20 * 20 * 3, static_cast<std::uint8_t>(40 * i))};
    Image8 mask{20, 20, 1, std::vector<std::uint8_t>(20 * 20, 0)};
    for (int k = 0; k < 200; ++k) mask.pixels[k] = 255;
    write_png(dir / "images" / ("s" + std::to_string(i) + ".png"), img);
    write_png(dir / "masks" / ("s" + std::to_string(i) + ".png"), mask);
  }
  auto samples = load_image_mask_dir(dir / "images", dir / "masks", 2, 16);
  ASSERT_EQ(samples.size(), 3u);
  EXPECT_EQ(samples[0].height, 16);
  std::set<int> ids(samples[1].mask.begin(), samples[1].mask.end());
  EXPECT_EQ(ids, (std::set<int>{0, 1}));
  std::filesystem::remove(dir / "masks" / "s2.png");
  EXPECT_THROW(load_image_mask_dir(dir / "images", dir / "masks", 2, 16), DataError);
}

TEST(ImageDir, PngRoundTrip) {
  auto dir = temp_dir("png");
  Image8 img{3, 2, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18}};
  write_png(dir / "a.png", img);
  auto back = read_png(dir / "a.png");
  EXPECT_EQ(back.width, 3);
  EXPECT_EQ(back.height, 2);
  EXPECT_EQ(back.pixels, img.pixels);
  EXPECT_THROW(read_png(dir / "missing.png"), DataError);
}

TEST(Presets, KnownNames) {
  EXPECT_EQ(dataset_preset("ham10k-10client").client_counts.size(), 10u);
  EXPECT_EQ(dataset_preset("kvasir-4client").num_classes, 2);
  EXPECT_THROW(dataset_preset("nope"), ConfigError);
}
