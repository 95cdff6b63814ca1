#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cmseg/forge.hpp"
#include "cmseg/image.hpp"
#include "cmseg/rng.hpp"
#include "cmseg/toy.hpp"

using namespace cmseg;
namespace fs = std::filesystem;

namespace {

Image checkerboard(int w, int h, int cell) {
  Image img(w, h, 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const bool on = ((x / cell) + (y / cell)) % 2 == 0;
      img.at(x, y, 0) = on ? 200 : 30;
      img.at(x, y, 1) = static_cast<uint8_t>(x * 3);
      img.at(x, y, 2) = static_cast<uint8_t>(y * 5);
    }
  }
  return img;
}

Image noise_image(int w, int h, uint64_t seed) {
  Rng rng(seed);
  Image img(w, h, 3);
  for (auto& p : img.pixels) p = static_cast<uint8_t>(rng.uniform_int(0, 255));
  return img;
}

int64_t count_on(const Image& mask) {
  return std::count_if(mask.pixels.begin(), mask.pixels.end(), [](uint8_t v) { return v != 0; });
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / name) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

}  // namespace

TEST(AttackTest, LevelsAndParsing) {
  EXPECT_EQ(level_count(AttackKind::kJC), 9);
  EXPECT_EQ(level_count(AttackKind::kMIR), 1);
  EXPECT_NO_THROW(AttackSpec({AttackKind::kNone, 0}).validate());
  EXPECT_THROW(AttackSpec({AttackKind::kNone, 1}).validate(), ValueError);
  EXPECT_THROW(AttackSpec({AttackKind::kBC, 4}).validate(), ValueError);
  EXPECT_THROW(AttackSpec({AttackKind::kRo, 0}).validate(), ValueError);
  const auto menu = parse_attack_menu("none,JC:9,Ro");
  ASSERT_EQ(menu.size(), 3U);
  EXPECT_EQ(menu[1].kind, AttackKind::kJC);
  EXPECT_EQ(menu[1].level, 9);
  EXPECT_EQ(menu[2].level, 0);
  EXPECT_THROW(parse_attack_menu("XX"), ValueError);
  EXPECT_THROW(parse_attack_menu("JC:10"), ValueError);
  EXPECT_THROW(parse_attack_menu(""), ValueError);
  for (int k = 0; k <= static_cast<int>(AttackKind::kMIR); ++k) {
    const auto kind = static_cast<AttackKind>(k);
    EXPECT_EQ(parse_attack_kind(to_string(kind)), kind);
    EXPECT_NE(is_photometric(kind) && is_geometric(kind), true);
  }
}

TEST(AttackTest, NoneAndGeometricAreIdentityOnImage) {
  const Image img = noise_image(17, 13, 1);
  EXPECT_EQ(apply_attack(img, {AttackKind::kNone, 0}, 5), img);
  EXPECT_EQ(apply_attack(img, {AttackKind::kRo, 3}, 5), img);
}

TEST(AttackTest, ColorReductionIsIdempotent) {
  const Image img = noise_image(20, 20, 2);
  for (int level = 1; level <= 3; ++level) {
    const Image once = apply_attack(img, {AttackKind::kCR, level}, 0);
    EXPECT_EQ(apply_attack(once, {AttackKind::kCR, level}, 0), once);
    EXPECT_NE(once, img);
  }
}

TEST(AttackTest, BlurOfConstantIsConstant) {
  const Image img(9, 7, 3, 77);
  EXPECT_EQ(apply_attack(img, {AttackKind::kIB, 3}, 0), img);
  EXPECT_EQ(apply_attack(img, {AttackKind::kCA, 2}, 0), img);
}

TEST(AttackTest, SeededNoiseIsReproducible) {
  const Image img = noise_image(16, 16, 3);
  for (auto kind : {AttackKind::kNA, AttackKind::kBC}) {
    EXPECT_EQ(apply_attack(img, {kind, 2}, 11), apply_attack(img, {kind, 2}, 11));
  }
  EXPECT_NE(apply_attack(img, {AttackKind::kNA, 3}, 11), apply_attack(img, {AttackKind::kNA, 3}, 12));
}

TEST(AttackTest, JpegKeepsGeometryAndRoughContent) {
  const Image img = checkerboard(32, 24, 8);
  const Image out = apply_attack(img, {AttackKind::kJC, 1}, 0);
  ASSERT_EQ(out.width, 32);
  ASSERT_EQ(out.height, 24);
  ASSERT_EQ(out.channels, 3);
  double err = 0.0;
  for (size_t i = 0; i < img.pixels.size(); ++i) err += std::abs(img.pixels[i] - out.pixels[i]);
  EXPECT_LT(err / static_cast<double>(img.pixels.size()), 12.0);
}

TEST(TransformTest, IdentityAndMirrorInvolution) {
  const Image img = noise_image(11, 7, 4);
  const ObjectPatch obj = extract_object(img, {0, 0, 11, 7}, std::nullopt);
  const ObjectPatch same = transform_patch(obj, Transform{});
  EXPECT_EQ(same.patch, obj.patch);
  const ObjectPatch mirrored = transform_patch(obj, Transform{0, 1000, true});
  EXPECT_EQ(mirrored.patch.at(0, 3, 1), obj.patch.at(10, 3, 1));
  EXPECT_EQ(transform_patch(mirrored, Transform{0, 1000, true}).patch, obj.patch);
}

TEST(TransformTest, QuarterTurnMatchesIndexOracle) {
  const int n = 9;
  const Image img = noise_image(n, n, 5);
  const ObjectPatch obj = extract_object(img, {0, 0, n, n}, std::nullopt);
  const ObjectPatch rot = transform_patch(obj, Transform{90, 1000, false});
  ASSERT_EQ(rot.patch.width, n);
  ASSERT_EQ(rot.patch.height, n);
  for (int v = 0; v < n; ++v) {
    for (int u = 0; u < n; ++u) {
      for (int c = 0; c < 3; ++c) ASSERT_EQ(rot.patch.at(u, v, c), obj.patch.at(v, n - 1 - u, c));
    }
  }
}

TEST(TransformTest, ScaleChangesExtent) {
  const Image img(20, 10, 3, 50);
  const ObjectPatch obj = extract_object(img, {0, 0, 20, 10}, std::nullopt);
  const ObjectPatch big = transform_patch(obj, Transform{0, 1250, false});
  EXPECT_EQ(big.patch.width, 25);
  EXPECT_EQ(big.patch.height, 13);
  EXPECT_EQ(big.patch.at(12, 6, 0), 50);
  EXPECT_THROW(transform_patch(obj, Transform{0, 0, false}), ValueError);
}

TEST(CompositeTest, CopiesPixelsAndMarksUnion) {
  const Image img = checkerboard(64, 48, 5);
  const BBox src{4, 6, 12, 10};
  const ObjectPatch obj = extract_object(img, src, std::nullopt);
  const Composite c = composite(img, obj, 40, 30, Transform{});
  EXPECT_EQ(c.target, (BBox{40, 30, 12, 10}));
  EXPECT_EQ(count_on(c.mask), 2 * 12 * 10);
  for (int y = 0; y < 10; ++y) {
    for (int x = 0; x < 12; ++x) {
      for (int ch = 0; ch < 3; ++ch) ASSERT_EQ(c.image.at(40 + x, 30 + y, ch), img.at(src.x + x, src.y + y, ch));
      ASSERT_EQ(c.mask.at(40 + x, 30 + y), 255);
      ASSERT_EQ(c.mask.at(src.x + x, src.y + y), 255);
    }
  }
  for (int y = 0; y < 48; ++y) {
    for (int x = 0; x < 64; ++x) {
      if (c.mask.at(x, y) == 0) {
        for (int ch = 0; ch < 3; ++ch) ASSERT_EQ(c.image.at(x, y, ch), img.at(x, y, ch));
      }
    }
  }
  EXPECT_EQ(count_on(composite(img, obj, 40, 30, Transform{}, MaskMode::kTargetOnly).mask), 12 * 10);
}

TEST(CompositeTest, AlphaSelectsFootprintAndMirrorFlipsIt) {
  const Image img = checkerboard(40, 40, 4);
  Image alpha(6, 4, 1, 0);
  for (int y = 0; y < 4; ++y) alpha.at(0, y) = 255;
  const ObjectPatch obj = extract_object(img, {2, 2, 6, 4}, alpha);
  const Composite c = composite(img, obj, 20, 20, Transform{0, 1000, true}, MaskMode::kTargetOnly);
  EXPECT_EQ(count_on(c.mask), 4);
  for (int y = 0; y < 4; ++y) EXPECT_EQ(c.mask.at(25, 20 + y), 255);
}

TEST(CompositeTest, RejectsBadPlacementAndEmptyFootprint) {
  const Image img = checkerboard(30, 30, 3);
  const ObjectPatch obj = extract_object(img, {0, 0, 10, 10}, std::nullopt);
  EXPECT_THROW(composite(img, obj, 25, 0, Transform{}), ValueError);
  const ObjectPatch empty = extract_object(img, {0, 0, 10, 10}, Image(10, 10, 1, 0));
  EXPECT_THROW(composite(img, empty, 15, 15, Transform{}), ValueError);
  EXPECT_THROW(extract_object(img, {25, 25, 10, 10}, std::nullopt), ValueError);
}

TEST(ManifestTest, RecordRoundTrip) {
  SampleRecord r;
  r.id = "sample_00007";
  r.image_path = "images/sample_00007.jpg";
  r.mask_path = "masks/sample_00007.png";
  r.source_bbox = {1, 2, 3, 4};
  r.target_bbox = {5, 6, 7, 8};
  r.transform = Transform{30, 910, true};
  r.attack = AttackSpec{AttackKind::kJC, 9};
  r.seed = 0xFFFFFFFFFFFFFFFFULL;
  const SampleRecord back = parse_sample_record(to_json_line(r));
  EXPECT_EQ(back.id, r.id);
  EXPECT_EQ(back.image_path, r.image_path);
  EXPECT_EQ(back.source_bbox, r.source_bbox);
  EXPECT_EQ(back.target_bbox, r.target_bbox);
  EXPECT_EQ(back.transform, r.transform);
  EXPECT_EQ(back.attack, r.attack);
  EXPECT_EQ(back.seed, r.seed);
}

TEST(GenerateTest, DeterministicAndMasksNonEmpty) {
  TempDir dir("cmseg_forge_generate");
  const auto sources = write_toy_sources(dir.path() / "src", 4, 3);
  const auto menu = parse_attack_menu("none,BC,CA,CR,IB,JC,NA,Ro,Sc,SR,MIR");
  const auto a = generate_dataset(sources, 12, 99, menu, dir.path() / "a");
  const auto b = generate_dataset(sources, 12, 99, menu, dir.path() / "b");
  ASSERT_EQ(a.records.size(), b.records.size());
  EXPECT_FALSE(a.records.empty());
  EXPECT_EQ(slurp(dir.path() / "a" / "manifest.jsonl"), slurp(dir.path() / "b" / "manifest.jsonl"));
  for (const auto& r : a.records) {
    EXPECT_EQ(slurp(dir.path() / "a" / r.image_path), slurp(dir.path() / "b" / r.image_path));
    EXPECT_EQ(slurp(dir.path() / "a" / r.mask_path), slurp(dir.path() / "b" / r.mask_path));
    EXPECT_GT(count_on(read_png(dir.path() / "a" / r.mask_path)), 0) << r.id;
  }
  EXPECT_EQ(read_manifest(dir.path() / "a" / "manifest.jsonl").size(), a.records.size());
}

TEST(GenerateTest, PhotometricAttacksLeaveMasksUnchanged) {
  TempDir dir("cmseg_forge_photometric");
  const auto sources = write_toy_sources(dir.path() / "src", 3, 5);
  const auto base = generate_dataset(sources, 6, 21, parse_attack_menu("none"), dir.path() / "none");
  for (const std::string attack : {"BC:3", "CA:3", "CR:3", "IB:3", "JC:9", "NA:3"}) {
    const auto out = generate_dataset(sources, 6, 21, parse_attack_menu(attack), dir.path() / "x");
    ASSERT_EQ(out.records.size(), base.records.size()) << attack;
    for (size_t i = 0; i < out.records.size(); ++i) {
      EXPECT_EQ(read_png(dir.path() / "x" / out.records[i].mask_path),
                read_png(dir.path() / "none" / base.records[i].mask_path))
          << attack;
    }
    fs::remove_all(dir.path() / "x");
  }
}

TEST(GenerateTest, OutputDoesNotDependOnCount) {
  TempDir dir("cmseg_forge_prefix");
  const auto sources = write_toy_sources(dir.path() / "src", 2, 8);
  const auto menu = parse_attack_menu("none,Ro,NA");
  const auto small = generate_dataset(sources, 3, 4, menu, dir.path() / "s");
  const auto large = generate_dataset(sources, 6, 4, menu, dir.path() / "l");
  for (const auto& r : small.records) {
    EXPECT_EQ(slurp(dir.path() / "s" / r.image_path), slurp(dir.path() / "l" / r.image_path));
  }
}

TEST(ToySceneTest, DeterministicAndObjectInside) {
  ToySceneOptions opts;
  const ToyScene a = make_toy_scene(7, opts);
  const ToyScene b = make_toy_scene(7, opts);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.object, b.object);
  EXPECT_NE(make_toy_scene(8, opts).image, a.image);
  EXPECT_EQ(a.image.width, opts.size);
  EXPECT_GE(a.object.x, 0);
  EXPECT_LE(a.object.x + a.object.w, opts.size);
  EXPECT_GE(a.object.w, opts.min_object);
  EXPECT_LE(a.object.w, opts.max_object);
  EXPECT_GT(count_on(a.alpha), 0);
}

TEST(ToySceneTest, ObjectInCornerSquare) {
  ToySceneOptions opts;
  const int corner = opts.size / 2 - 4;
  for (uint64_t seed = 0; seed < 64; ++seed) {
    const BBox o = make_toy_scene(seed, opts).object;
    const bool left = o.x + o.w <= corner;
    const bool right = o.x >= opts.size - corner;
    const bool top = o.y + o.h <= corner;
    const bool bottom = o.y >= opts.size - corner;
    EXPECT_TRUE((left || right) && (top || bottom)) << "seed " << seed;
  }
  opts.max_object = corner + 1;
  EXPECT_THROW(make_toy_scene(0, opts), ValueError);
}

TEST(ToySceneTest, EveryGeometricAttackFindsPlacement) {
  TempDir dir("cmseg_toy_placement");
  const auto sources = write_toy_sources(dir.path() / "src", 40, 9);
  int run = 0;
  for (const char* menu : {"Ro:4", "Ro:5", "Sc:5", "MIR"}) {
    const auto out =
        generate_dataset(sources, 40, 3, parse_attack_menu(menu), dir.path() / ("run" + std::to_string(run++)));
    EXPECT_TRUE(out.warnings.empty()) << menu << ": " << out.warnings.size() << " skipped";
  }
}
