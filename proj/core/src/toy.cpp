#include "cmseg/toy.hpp"

#include <algorithm>
#include <array>
#include <cstdio>

#include "cmseg/rng.hpp"

namespace cmseg {

namespace {

enum class ShapeKind { kDisc, kSquare, kTriangle, kDiamond, kRing, kCross };
constexpr int kShapeKinds = 6;

using Rgb = std::array<int, 3>;

// Membership test in a size x size box, coordinates relative to its corner.
bool inside(ShapeKind kind, int x, int y, int size) {
  const int c2 = size - 1;  // doubled centre
  const int dx = 2 * x - c2;
  const int dy = 2 * y - c2;
  const int r = size;  // doubled radius
  switch (kind) {
    case ShapeKind::kDisc: return dx * dx + dy * dy <= r * r;
    case ShapeKind::kSquare: return true;
    case ShapeKind::kTriangle: return 2 * std::abs(dx) <= (dy + r);
    case ShapeKind::kDiamond: return std::abs(dx) + std::abs(dy) <= r;
    case ShapeKind::kRing: {
      const int d = dx * dx + dy * dy;
      return d <= r * r && 4 * d >= r * r;
    }
    case ShapeKind::kCross: return 3 * std::abs(dx) <= r || 3 * std::abs(dy) <= r;
  }
  return false;
}

// Blocky random texture: each cell x cell block gets base + U(-spread, spread)
// per channel.
struct Mosaic {
  int cell = 3;
  int cols = 0;
  std::vector<Rgb> colors;

  Mosaic(Rng& rng, int width, int height, int cell_size, const Rgb& base, int spread) : cell(cell_size) {
    cols = (width + cell - 1) / cell;
    const int rows = (height + cell - 1) / cell;
    colors.resize(static_cast<size_t>(cols) * static_cast<size_t>(rows));
    for (auto& c : colors) {
      for (int ch = 0; ch < 3; ++ch) {
        c[ch] = std::clamp(base[ch] + static_cast<int>(rng.uniform_int(-spread, spread)), 0, 255);
      }
    }
  }

  const Rgb& at(int x, int y) const { return colors[static_cast<size_t>((y / cell) * cols + x / cell)]; }
};

void paint(Image& image, Image* alpha, ShapeKind kind, int x0, int y0, int size, const Mosaic& tex) {
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      if (!inside(kind, x, y, size)) continue;
      const Rgb& c = tex.at(x, y);
      for (int ch = 0; ch < 3; ++ch) image.at(x0 + x, y0 + y, ch) = static_cast<uint8_t>(c[ch]);
      if (alpha) alpha->at(x, y) = 255;
    }
  }
}

}  // namespace

ToyScene make_toy_scene(uint64_t seed, const ToySceneOptions& o) {
  if (o.max_object > o.size / 2 - 4 || o.min_object < 4 || o.max_object < o.min_object ||
      o.background_cell < 1 || o.shape_cell < 1 || o.shape_jitter < 0 || o.shape_jitter > 127) {
    throw ValueError("toy scene options out of range");
  }
  Rng rng(seed);
  ToyScene scene;
  scene.image = Image(o.size, o.size, 3);
  const Mosaic background(rng, o.size, o.size, o.background_cell, Rgb{128, 128, 128}, 88);
  for (int y = 0; y < o.size; ++y) {
    for (int x = 0; x < o.size; ++x) {
      const Rgb& c = background.at(x, y);
      for (int ch = 0; ch < 3; ++ch) scene.image.at(x, y, ch) = static_cast<uint8_t>(c[ch]);
    }
  }

  const auto shape = [&](Image* alpha, BBox* box) {
    const auto kind = static_cast<ShapeKind>(rng.uniform_int(0, kShapeKinds - 1));
    const int size = static_cast<int>(rng.uniform_int(o.min_object, o.max_object));
    int x = static_cast<int>(rng.uniform_int(0, o.size - size));
    int y = static_cast<int>(rng.uniform_int(0, o.size - size));
    if (box) {
      // Copied object: inside a random corner square of side size / 2 - 4.
      const int corner = o.size / 2 - 4;
      x = static_cast<int>(rng.uniform_int(0, corner - size));
      y = static_cast<int>(rng.uniform_int(0, corner - size));
      if (rng.next() & 1U) x = o.size - size - x;
      if (rng.next() & 1U) y = o.size - size - y;
    }
    const int lo = o.shape_jitter;
    const int hi = 255 - o.shape_jitter;
    const Rgb base{static_cast<int>(rng.uniform_int(lo, hi)), static_cast<int>(rng.uniform_int(lo, hi)),
                   static_cast<int>(rng.uniform_int(lo, hi))};
    const Mosaic tex(rng, size, size, o.shape_cell, base, o.shape_jitter);
    if (box) {
      *box = {x, y, size, size};
      *alpha = Image(size, size, 1, 0);
    }
    paint(scene.image, alpha, kind, x, y, size, tex);
  };
  for (int i = 0; i < o.distractors; ++i) shape(nullptr, nullptr);
  shape(&scene.alpha, &scene.object);
  return scene;
}

std::vector<SourceSpec> write_toy_sources(const std::filesystem::path& dir, int count, uint64_t seed,
                                          const ToySceneOptions& options) {
  if (count < 1) throw ValueError("count must be >= 1");
  std::filesystem::create_directories(dir);
  std::vector<SourceSpec> sources;
  for (int i = 0; i < count; ++i) {
    const ToyScene scene = make_toy_scene(mix_seed(seed, static_cast<uint64_t>(i)), options);
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%04d", i);
    SourceSpec s;
    s.image = dir / (std::string(name) + ".png");
    s.alpha = dir / (std::string(name) + "_alpha.png");
    s.bbox = scene.object;
    write_png(scene.image, s.image);
    write_png(scene.alpha, *s.alpha);
    sources.push_back(std::move(s));
  }
  write_sources(sources, dir / "sources.jsonl");
  return sources;
}

}  // namespace cmseg
