#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cmseg/forge.hpp"

namespace cmseg {

/// One synthetic scene: a random mosaic background with several
/// mosaic-textured geometric distractors and one designated object (the copy-move source).
struct ToyScene {
  Image image;  // RGB
  BBox object;
  Image alpha;  // object footprint, bbox-sized, {0, 255}
};

/// The copied object lies in a random corner square of side size / 2 - 4,
/// so max_object may not exceed that side.
struct ToySceneOptions {
  int size = 128;
  int distractors = 3;
  int min_object = 32;
  int max_object = 44;
  int background_cell = 4;  // mosaic cell size in pixels
  int shape_cell = 3;
  /// Per-channel texture amplitude around each shape's base colour.
  int shape_jitter = 16;
};

ToyScene make_toy_scene(uint64_t seed, const ToySceneOptions& options = {});

/// Writes scene_NNNN.png, scene_NNNN_alpha.png and sources.jsonl under dir.
/// Scene i is drawn from mix_seed(seed, i).
std::vector<SourceSpec> write_toy_sources(const std::filesystem::path& dir, int count, uint64_t seed,
                                          const ToySceneOptions& options = {});

}  // namespace cmseg
