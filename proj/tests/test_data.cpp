#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "avnet/data.hpp"

using namespace avnet;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("avnet_test_data_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

RgbImage palette_strip() {
  RgbImage img(5, 2);
  const Rgb colors[5] = {{0, 0, 0}, {255, 0, 0}, {0, 0, 255}, {0, 255, 0}, {255, 255, 255}};
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 5; ++x) img.set(x, y, colors[(x + y) % 5]);
  return img;
}

}  // namespace

TEST(Labels, PaletteColoursMapToClasses) {
  RgbImage img(5, 1);
  img.set(0, 0, {255, 0, 0});
  img.set(1, 0, {0, 0, 255});
  img.set(2, 0, {0, 255, 0});
  img.set(3, 0, {0, 0, 0});
  img.set(4, 0, {255, 255, 255});
  const auto enc = encode_labels(img);
  EXPECT_EQ(enc.class_map.labels, (std::vector<std::uint8_t>{1, 2, 3, 0, kIgnore}));
  EXPECT_EQ(enc.ignore, (std::vector<std::uint8_t>{0, 0, 0, 0, 1}));
}

TEST(Labels, RoundTripOnFullPalette) {
  const RgbImage img = palette_strip();
  EXPECT_EQ(class_map_to_rgb(encode_labels(img).class_map), img);
}

TEST(Labels, StrictModeNamesOffendingColourAndPixel) {
  RgbImage img(4, 3);
  img.set(2, 1, {254, 0, 0});
  img.set(3, 2, {10, 20, 30});
  try {
    encode_labels(img);
    FAIL() << "expected LabelError";
  } catch (const LabelError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2 unrecognized"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(254,0,0) first at x=2 y=1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(10,20,30) first at x=3 y=2"), std::string::npos) << msg;
  }
}

TEST(Labels, NearestModeSnapsAntialiasedColours) {
  RgbImage img(3, 1);
  img.set(0, 0, {240, 12, 8});
  img.set(1, 0, {230, 240, 250});
  img.set(2, 0, {20, 30, 200});
  const auto enc = encode_labels(img, LabelDecodeMode::Nearest);
  EXPECT_EQ(enc.class_map.labels, (std::vector<std::uint8_t>{1, kIgnore, 2}));
}

TEST(Weights, LookupFollowsClassTable) {
  ClassMap m(1, 1, 5);
  m.labels = {0, 1, 2, 3, kIgnore};
  const auto w = class_weight_map(m, ClassWeights{});
  EXPECT_EQ(w[0], 1.0f);
  EXPECT_EQ(w[1], 5.0f);
  EXPECT_EQ(w[2], 5.0f);
  EXPECT_EQ(w[3], 1e-12f);
  EXPECT_EQ(w[4], 0.0f);
}

TEST(Weights, NegativeWeightRejected) {
  ClassMap m(1, 1, 1);
  ClassWeights bad;
  bad.values[2] = -1.0;
  EXPECT_THROW(class_weight_map(m, bad), std::invalid_argument);
}

TEST(Weights, ZeroExactlyWhereIgnoredOrZeroClassWeight) {
  const FundusSample s = generate_synthetic(64, 3);
  for (std::size_t i = 0; i < s.weight_map.size(); ++i) {
    EXPECT_EQ(s.weight_map[i] == 0.0f, s.class_map.labels[i] == kIgnore) << i;
  }
  ClassWeights w;
  w.values[0] = 0.0;
  const auto wm = class_weight_map(s.class_map, w);
  for (std::size_t i = 0; i < wm.size(); ++i) {
    const auto l = s.class_map.labels[i];
    EXPECT_EQ(wm[i] == 0.0f, l == kIgnore || l == 0) << i;
  }
}

TEST(Synthetic, AllFiveColoursPresentAt64) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const FundusSample s = generate_synthetic(64, seed);
    std::set<std::uint8_t> seen(s.class_map.labels.begin(), s.class_map.labels.end());
    EXPECT_EQ(seen, (std::set<std::uint8_t>{0, 1, 2, 3, kIgnore})) << "seed " << seed;
    EXPECT_EQ(s.image.shape(), (Shape{3, 64, 64}));
  }
}

TEST(Synthetic, DeterministicPerSeed) {
  const auto a = generate_synthetic(48, 11), b = generate_synthetic(48, 11),
             c = generate_synthetic(48, 12);
  EXPECT_EQ(a.image.values(), b.image.values());
  EXPECT_EQ(a.class_map.labels, b.class_map.labels);
  EXPECT_NE(a.class_map.labels, c.class_map.labels);
}

TEST(Synthetic, VesselFractionOverHundredSeeds) {
  for (std::size_t size : {64u, 128u}) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const FundusSample s = generate_synthetic(size, seed);
      std::size_t vessel = 0;
      for (auto l : s.class_map.labels) vessel += (l >= 1 && l <= 3);
      const double frac = static_cast<double>(vessel) / static_cast<double>(s.class_map.size());
      EXPECT_GT(frac, 0.02) << size << " " << seed;
      EXPECT_LT(frac, 0.2) << size << " " << seed;
    }
  }
}

TEST(Synthetic, TooSmallRejected) {
  EXPECT_THROW(generate_synthetic(31, 0), std::invalid_argument);
}

TEST(SampleIO, SaveLoadRoundTripIsBitExact) {
  const auto dir = scratch_dir("roundtrip");
  const FundusSample s = generate_synthetic(64, 5);
  save_sample(s, dir / "s5.png", dir / "s5_av.png");
  const FundusSample back = load_sample(dir / "s5.png", dir / "s5_av.png");
  EXPECT_EQ(back.id, "s5");
  EXPECT_EQ(back.image.values(), s.image.values());
  EXPECT_EQ(back.class_map.labels, s.class_map.labels);
  EXPECT_EQ(back.weight_map, s.weight_map);
}

TEST(SampleIO, ImageUsedAsLabelsListsColours) {
  const auto dir = scratch_dir("badlabels");
  const FundusSample s = generate_synthetic(32, 1);
  save_sample(s, dir / "a.png", dir / "a_av.png");
  try {
    load_sample(dir / "a.png", dir / "a.png");
    FAIL() << "expected LabelError";
  } catch (const LabelError& e) {
    EXPECT_NE(std::string(e.what()).find("unrecognized label colour"), std::string::npos);
  }
}

TEST(SampleIO, MissingFileAndSizeMismatch) {
  const auto dir = scratch_dir("errors");
  EXPECT_THROW(load_sample(dir / "nope.png", dir / "nope_av.png"), ImageIOError);
  write_png(dir / "img.png", RgbImage(8, 8));
  write_png(dir / "lab.png", RgbImage(8, 7));
  EXPECT_THROW(load_sample(dir / "img.png", dir / "lab.png"), LabelError);
}

TEST(Decode, OneHotArterioleIsRed) {
  std::vector<float> p(4 * 6, 0.0f);
  for (std::size_t i = 0; i < 6; ++i) p[1 * 6 + i] = 1.0f;
  const RgbImage img = decode_predictions(Tensor<float>({1, 4, 2, 3}, p));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(img.get(i), kArterioleColor);
}

TEST(Decode, UniformTiesGoToBackground) {
  const RgbImage img = decode_predictions(Tensor<double>::full({1, 4, 3, 3}, 0.25));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(img.get(i), kBackgroundColor);
}

TEST(Decode, IgnoreMaskDrawsWhite) {
  std::vector<std::uint8_t> mask{0, 1, 0, 0};
  const RgbImage img = decode_predictions(Tensor<float>::full({1, 4, 2, 2}, 0.25f), mask);
  EXPECT_EQ(img.get(1), kIgnoreColor);
  EXPECT_EQ(img.get(0), kBackgroundColor);
}

TEST(Decode, EncodeThenDecodeReproducesLabelColours) {
  const FundusSample s = generate_synthetic(64, 9);
  const std::size_t plane = s.class_map.size();
  std::vector<double> onehot(4 * plane, 0.0);
  for (std::size_t i = 0; i < plane; ++i) {
    const auto l = s.class_map.labels[i];
    onehot[(l == kIgnore ? 0 : l) * plane + i] = 1.0;
  }
  const RgbImage decoded =
      decode_predictions(Tensor<double>({1, 4, 64, 64}, onehot), s.ignore_mask());
  EXPECT_EQ(decoded, class_map_to_rgb(s.class_map));
}

TEST(Decode, WrongChannelCountRejected) {
  EXPECT_THROW(decode_predictions(Tensor<float>::zeros({1, 3, 2, 2})), ShapeError);
}

namespace {

// Builds a sample whose image encodes source coordinates, so resampled
// values can be checked against an independent inverse map.
FundusSample coordinate_sample(std::size_t w, std::size_t h) {
  FundusSample s;
  s.id = "coords";
  std::vector<float> img(3 * w * h);
  s.class_map = ClassMap(1, h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      img[0 * w * h + y * w + x] = static_cast<float>(x);
      img[1 * w * h + y * w + x] = static_cast<float>(y);
      img[2 * w * h + y * w + x] = 1.0f;
      s.class_map.at(0, y, x) = static_cast<std::uint8_t>((x / 3 + y / 5) % 4);
    }
  s.image = Tensor<float>({3, h, w}, std::move(img));
  s.weight_map = class_weight_map(s.class_map, ClassWeights{});
  return s;
}

}  // namespace

TEST(Augment, IdentityParametersGiveCentreCrop) {
  const FundusSample s = generate_synthetic(64, 2);
  const FundusSample out = apply_augment(s, AugmentParams{}, 40);
  const std::size_t off = (64 - 40) / 2;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 40; ++y)
      for (std::size_t x = 0; x < 40; ++x)
        ASSERT_EQ(out.image.at(c, y, x), s.image.at(c, y + off, x + off));
  for (std::size_t y = 0; y < 40; ++y)
    for (std::size_t x = 0; x < 40; ++x) {
      ASSERT_EQ(out.class_map.at(0, y, x), s.class_map.at(0, y + off, x + off));
      ASSERT_EQ(out.weight_map[y * 40 + x], s.weight_map[(y + off) * 64 + x + off]);
    }
}

TEST(Augment, DoubleFlipRestoresCrop) {
  const FundusSample s = generate_synthetic(64, 4);
  AugmentParams p;
  p.scale = 1.1;
  p.pan_x = 2.5;
  p.pan_y = -1.25;
  const FundusSample base = apply_augment(s, p, 48);
  p.flip_h = true;
  const FundusSample once = apply_augment(s, p, 48);
  // Mirroring the flipped crop again restores the unflipped one.
  for (std::size_t y = 0; y < 48; ++y)
    for (std::size_t x = 0; x < 48; ++x) {
      ASSERT_EQ(once.class_map.at(0, y, 47 - x), base.class_map.at(0, y, x));
      ASSERT_EQ(once.image.at(1, y, 47 - x), base.image.at(1, y, x));
    }
}

TEST(Augment, ResampledCoordinatesMatchInverseMap) {
  const std::size_t w = 70, h = 60, crop = 48;
  const FundusSample s = coordinate_sample(w, h);
  AugmentationConfig cfg;
  cfg.crop_size = crop;
  cfg.seed = 17;
  std::mt19937_64 rng(99);
  for (std::size_t draw = 0; draw < 20; ++draw) {
    const AugmentParams p = draw_augment_params(cfg, s.id, w, h, draw);
    const FundusSample out = apply_augment(s, p, crop);
    for (int k = 0; k < 50; ++k) {
      const std::size_t x = rng() % crop, y = rng() % crop;
      // Inverse of: flip, then scale about the crop centre, then pan.
      const double cx = (static_cast<double>(w) - 1.0) / 2.0 + ((w - crop) % 2 ? -0.5 : 0.0);
      const double cy = (static_cast<double>(h) - 1.0) / 2.0 + ((h - crop) % 2 ? -0.5 : 0.0);
      const double fx = p.flip_h ? static_cast<double>(crop - 1 - x) : static_cast<double>(x);
      const double fy = p.flip_v ? static_cast<double>(crop - 1 - y) : static_cast<double>(y);
      const double sx = cx + (fx - (crop - 1) / 2.0) / p.scale + p.pan_x;
      const double sy = cy + (fy - (crop - 1) / 2.0) / p.scale + p.pan_y;
      const bool inside = sx >= 0 && sy >= 0 && sx <= w - 1.0 && sy <= h - 1.0;
      if (!inside) continue;
      // Bilinear interpolation of a linear ramp returns the coordinate itself.
      EXPECT_NEAR(out.image.at(0, y, x), sx, 1e-3);
      EXPECT_NEAR(out.image.at(1, y, x), sy, 1e-3);
      const auto nx = static_cast<std::size_t>(std::floor(sx + 0.5));
      const auto ny = static_cast<std::size_t>(std::floor(sy + 0.5));
      EXPECT_EQ(out.class_map.at(0, y, x), s.class_map.at(0, ny, nx));
    }
  }
}

TEST(Augment, VesselPixelsTraceBackToVessels) {
  const FundusSample s = generate_synthetic(128, 21);
  AugmentationConfig cfg;
  cfg.crop_size = 96;
  cfg.seed = 3;
  std::mt19937_64 rng(1);
  std::size_t checked = 0;
  for (std::size_t draw = 0; checked < 1000 && draw < 200; ++draw) {
    const AugmentParams p = draw_augment_params(cfg, s.id, 128, 128, draw);
    const FundusSample out = apply_augment(s, p, 96);
    for (int k = 0; k < 200 && checked < 1000; ++k) {
      const std::size_t x = rng() % 96, y = rng() % 96;
      const auto l = out.class_map.at(0, y, x);
      if (l == 0 || l == kIgnore) continue;
      const auto [sx, sy] = source_coordinate(p, 128, 128, 96, x, y);
      const auto nx = static_cast<std::size_t>(std::lround(sx));
      const auto ny = static_cast<std::size_t>(std::lround(sy));
      ASSERT_LT(nx, 128u);
      ASSERT_LT(ny, 128u);
      EXPECT_EQ(s.class_map.at(0, ny, nx), l);
      ++checked;
    }
  }
  EXPECT_EQ(checked, 1000u);
}

TEST(Augment, NeverInventsClasses) {
  FundusSample s = generate_synthetic(64, 8);
  for (auto& l : s.class_map.labels)
    if (l == 2 || l == 3) l = 1;
  s.weight_map = class_weight_map(s.class_map, ClassWeights{});
  AugmentationConfig cfg;
  cfg.crop_size = 64;
  for (std::size_t d = 0; d < 30; ++d) {
    const FundusSample out = augment(s, cfg, d);
    for (auto l : out.class_map.labels) ASSERT_TRUE(l == 0 || l == 1 || l == kIgnore);
  }
}

TEST(Augment, ParametersWithinConfiguredRanges) {
  AugmentationConfig cfg;
  bool any_h = false, any_v = false;
  for (std::size_t d = 0; d < 500; ++d) {
    const auto p = draw_augment_params(cfg, "img01", 565, 584, d);
    EXPECT_GE(p.scale, 0.8);
    EXPECT_LE(p.scale, 1.25);
    EXPECT_LE(std::abs(p.pan_x), 0.1 * 565);
    EXPECT_LE(std::abs(p.pan_y), 0.1 * 584);
    any_h |= p.flip_h;
    any_v |= p.flip_v;
  }
  EXPECT_TRUE(any_h);
  EXPECT_TRUE(any_v);
  cfg.horizontal_flip = cfg.vertical_flip = false;
  for (std::size_t d = 0; d < 50; ++d) {
    const auto p = draw_augment_params(cfg, "img01", 565, 584, d);
    EXPECT_FALSE(p.flip_h || p.flip_v);
  }
}

TEST(Augment, SmallSourcePadsWithBackground) {
  const FundusSample s = generate_synthetic(32, 1);
  const FundusSample out = apply_augment(s, AugmentParams{}, 48);
  EXPECT_EQ(out.class_map.at(0, 0, 0), 0);
  EXPECT_EQ(out.weight_map[0], 1.0f);
  EXPECT_EQ(out.image.at(0, 0, 0), 0.0f);
  EXPECT_EQ(out.class_map.at(0, 8 + 5, 8 + 7), s.class_map.at(0, 5, 7));
}

TEST(Augment, DrawsDependOnlyOnSeedSourceAndIndex) {
  AugmentationConfig cfg;
  cfg.seed = 5;
  const auto a = draw_augment_params(cfg, "x", 100, 100, 7);
  // Drawing other indices first must not change draw 7.
  for (std::size_t d = 0; d < 7; ++d) draw_augment_params(cfg, "x", 100, 100, d);
  const auto b = draw_augment_params(cfg, "x", 100, 100, 7);
  EXPECT_EQ(a.scale, b.scale);
  EXPECT_EQ(a.pan_x, b.pan_x);
  const auto other = draw_augment_params(cfg, "y", 100, 100, 7);
  EXPECT_NE(a.scale, other.scale);
}

TEST(Dataset, DefaultMultiplierOverThirtySources) {
  std::vector<FundusSample> sources;
  for (std::uint64_t i = 0; i < 30; ++i) sources.push_back(generate_synthetic(32, i));
  AugmentationConfig cfg;
  cfg.crop_size = 24;
  AugmentedDataset ds(sources, cfg);
  EXPECT_EQ(ds.size(), 2490u);
  EXPECT_EQ(ds.source_index(2489), 29u);
  const FundusSample a = ds[1000], b = ds[1000];
  EXPECT_EQ(a.image.values(), b.image.values());
  AugmentedDataset again(sources, cfg);
  EXPECT_EQ(again[1000].class_map.labels, a.class_map.labels);
}

TEST(Dataset, DisabledAugmentationPassesSourcesThrough) {
  AugmentationConfig cfg;
  cfg.enabled = false;
  AugmentedDataset ds({generate_synthetic(32, 1), generate_synthetic(32, 2)}, cfg);
  EXPECT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds[1].image.values(), generate_synthetic(32, 2).image.values());
}

namespace {

std::vector<std::string> make_ids(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("case" + std::to_string(i));
  return ids;
}

}  // namespace

TEST(Folds, ThirtyIdsFiveFoldsOfSix) {
  const auto folds = split_folds(make_ids(30), 5, 42);
  ASSERT_EQ(folds.size(), 5u);
  for (const auto& f : folds) {
    EXPECT_EQ(f.validation.size(), 6u);
    EXPECT_EQ(f.train.size(), 24u);
  }
}

TEST(Folds, DisjointAndCoveringForManySeeds) {
  for (std::size_t n : {5u, 7u, 23u, 30u}) {
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
      const auto ids = make_ids(n);
      const auto folds = split_folds(ids, 5, seed);
      std::multiset<std::string> all;
      for (const auto& f : folds) {
        all.insert(f.validation.begin(), f.validation.end());
        std::set<std::string> v(f.validation.begin(), f.validation.end());
        for (const auto& t : f.train) EXPECT_EQ(v.count(t), 0u);
        EXPECT_EQ(f.train.size() + f.validation.size(), n);
        EXPECT_LE(f.validation.size(), n / 5 + 1);
        EXPECT_GE(f.validation.size(), n / 5);
      }
      EXPECT_EQ(all, std::multiset<std::string>(ids.begin(), ids.end()));
    }
  }
}

TEST(Folds, KEqualsNIsLeaveOneOut) {
  const auto folds = split_folds(make_ids(6), 6, 1);
  for (const auto& f : folds) EXPECT_EQ(f.validation.size(), 1u);
}

TEST(Folds, InvalidK) {
  EXPECT_THROW(split_folds(make_ids(10), 1, 0), std::invalid_argument);
  EXPECT_THROW(split_folds(make_ids(3), 4, 0), std::invalid_argument);
}

TEST(Folds, HoldoutThirtyTen) {
  const auto [train, test] = split_holdout(make_ids(40), 10, 3);
  EXPECT_EQ(train.size(), 30u);
  EXPECT_EQ(test.size(), 10u);
  std::set<std::string> all(train.begin(), train.end());
  all.insert(test.begin(), test.end());
  EXPECT_EQ(all.size(), 40u);
}
