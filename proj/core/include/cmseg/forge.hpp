#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cmseg/image.hpp"

namespace cmseg {

struct BBox {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  bool intersects(const BBox& o) const {
    return x < o.x + o.w && o.x < x + w && y < o.y + o.h && o.y < y + h;
  }
  bool operator==(const BBox&) const = default;
};

struct SourceSpec {
  std::filesystem::path image;
  BBox bbox;
  std::optional<std::filesystem::path> alpha;  // 8-bit, bbox-sized
};

enum class AttackKind { kNone, kBC, kCA, kCR, kIB, kJC, kNA, kRo, kSc, kSR, kMIR };

const char* to_string(AttackKind kind);
AttackKind parse_attack_kind(const std::string& text);

/// Number of valid levels (levels are 1-based; kNone accepts level 0 only).
int level_count(AttackKind kind);
bool is_photometric(AttackKind kind);
bool is_geometric(AttackKind kind);

struct AttackSpec {
  AttackKind kind = AttackKind::kNone;
  int level = 0;

  void validate() const;  // throws ValueError on an invalid level
  bool operator==(const AttackSpec&) const = default;
};

/// Attack menu entry; level 0 means "any level of this kind".
struct AttackChoice {
  AttackKind kind = AttackKind::kNone;
  int level = 0;
};

/// Parses "none", "JC:9", "Ro" (any level), comma separated.
std::vector<AttackChoice> parse_attack_menu(const std::string& text);

/// Patch transform: horizontal mirror, then scale, then counter-clockwise
/// rotation about the patch centre. Integer parameters keep the pipeline
/// free of platform-dependent floating point.
struct Transform {
  int angle_deg = 0;
  int scale_permille = 1000;
  bool mirror = false;

  bool is_identity() const { return angle_deg == 0 && scale_permille == 1000 && !mirror; }
  bool operator==(const Transform&) const = default;
};

/// Geometric parameters implied by an attack (identity for photometric ones).
Transform transform_for(const AttackSpec& attack);

struct ObjectPatch {
  Image patch;  // RGB, bbox-sized
  Image alpha;  // gray, bbox-sized, 0..255
  BBox source;
};

/// Crops the bbox; alpha comes from the supplied mask or is fully opaque.
ObjectPatch extract_object(const SourceSpec& src);
ObjectPatch extract_object(const Image& image, const BBox& bbox, const std::optional<Image>& alpha);

/// Resamples patch and alpha (bilinear, 16.16 fixed point).
ObjectPatch transform_patch(const ObjectPatch& object, const Transform& transform);

enum class MaskMode { kUnion, kTargetOnly };

struct Composite {
  Image image;
  Image mask;  // {0, 255}
  BBox target;
};

/// Pastes the transformed object with its top-left corner at `position`.
/// Pixels whose transformed alpha exceeds 127 are replaced. The mask marks
/// the target footprint and, in union mode, the source footprint.
Composite composite(const Image& image, const ObjectPatch& object, int x, int y,
                    const Transform& transform, MaskMode mode = MaskMode::kUnion);

/// Photometric attacks act on the whole image; geometric kinds are identity
/// here (they act on the patch through composite).
Image apply_attack(const Image& image, const AttackSpec& spec, uint64_t seed);

/// JPEG quality used by a JC level.
int jpeg_quality(int level);

struct SampleRecord {
  std::string id;
  std::string image_path;  // relative to the manifest directory
  std::string mask_path;
  BBox source_bbox;
  BBox target_bbox;
  Transform transform;
  AttackSpec attack;
  uint64_t seed = 0;
};

std::string to_json_line(const SampleRecord& record);
SampleRecord parse_sample_record(const std::string& line);
std::vector<SampleRecord> read_manifest(const std::filesystem::path& path);

/// Source list as JSON Lines: {"image": path, "bbox": [x, y, w, h], "alpha": path?}.
/// Relative paths resolve against the file's directory.
std::vector<SourceSpec> read_sources(const std::filesystem::path& path);
void write_sources(const std::vector<SourceSpec>& sources, const std::filesystem::path& path);

struct GenerateOptions {
  MaskMode mask_mode = MaskMode::kUnion;
  int max_placement_tries = 100;
  std::string id_prefix = "sample_";
};

struct GenerateResult {
  std::vector<SampleRecord> records;
  std::vector<std::string> warnings;  // one per skipped sample
};

/// Writes images/, masks/ and manifest.jsonl under out_dir. Sample i draws
/// all randomness from mix_seed(seed, i), so output does not depend on the
/// order samples are produced in. Skipped samples are listed in
/// warnings.jsonl and left out of the manifest.
GenerateResult generate_dataset(const std::vector<SourceSpec>& sources, int count, uint64_t seed,
                                const std::vector<AttackChoice>& attack_menu,
                                const std::filesystem::path& out_dir,
                                const GenerateOptions& options = {});

}  // namespace cmseg
