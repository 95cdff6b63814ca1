#include "cmseg/forge.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "cmseg/rng.hpp"

namespace cmseg {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

constexpr std::array<int, 3> kBrightness{10, 20, 30};
constexpr std::array<int, 3> kContrastPermille{800, 600, 400};
constexpr std::array<int, 3> kColorLevels{128, 64, 32};
constexpr std::array<int, 3> kBlurRadius{1, 2, 3};
constexpr std::array<int, 9> kJpegQuality{90, 80, 70, 60, 50, 40, 30, 20, 10};
constexpr std::array<int, 3> kNoiseSigma{2, 5, 10};
constexpr std::array<int, 5> kRotationDeg{2, 6, 10, 30, 60};
constexpr std::array<int, 5> kScalePermille{500, 800, 910, 1090, 1250};

constexpr int64_t kOne30 = int64_t{1} << 30;

int64_t mul30(int64_t a, int64_t b) {
  return static_cast<int64_t>((static_cast<__int128>(a) * b) >> 30);
}

// sin and cos of an integer angle in degrees, Q30, by Taylor series on the
// angle reduced to [0, 90].
std::pair<int64_t, int64_t> sin_cos_q30(int degrees) {
  int d = ((degrees % 360) + 360) % 360;
  const int quadrant = d / 90;
  d %= 90;
  // pi in Q30
  const int64_t theta = static_cast<int64_t>((static_cast<__int128>(3373259426LL) * d) / 180);
  const int64_t t2 = mul30(theta, theta);
  int64_t s = theta;
  int64_t c = kOne30;
  int64_t term_s = theta;
  int64_t term_c = kOne30;
  for (int n = 1; n < 12; ++n) {
    term_s = -mul30(term_s, t2) / ((2 * n) * (2 * n + 1));
    term_c = -mul30(term_c, t2) / ((2 * n - 1) * (2 * n));
    s += term_s;
    c += term_c;
  }
  switch (quadrant) {
    case 1: return {c, -s};
    case 2: return {-s, -c};
    case 3: return {-c, s};
    default: return {s, c};
  }
}

int64_t div_round(int64_t num, int64_t den) {
  // Round half away from zero; den > 0.
  return num >= 0 ? (num + den / 2) / den : -((-num + den / 2) / den);
}

uint8_t clamp_u8(int64_t v) { return static_cast<uint8_t>(std::clamp<int64_t>(v, 0, 255)); }

int64_t floor_shift16(int64_t v) { return v >> 16; }  // arithmetic shift (C++20)

Image crop(const Image& image, const BBox& b) {
  Image out(b.w, b.h, image.channels);
  for (int y = 0; y < b.h; ++y) {
    for (int x = 0; x < b.w; ++x) {
      for (int c = 0; c < image.channels; ++c) out.at(x, y, c) = image.at(b.x + x, b.y + y, c);
    }
  }
  return out;
}

ordered_json bbox_json(const BBox& b) { return ordered_json::array({b.x, b.y, b.w, b.h}); }

BBox parse_bbox(const json& j) {
  if (!j.is_array() || j.size() != 4) throw ValueError("bbox must be [x, y, w, h]");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

std::string scale_text(int permille) {
  // Exact decimal form, e.g. 910 -> "0.91".
  std::ostringstream os;
  os << permille / 1000;
  int frac = permille % 1000;
  if (frac) {
    std::string digits = std::to_string(1000 + frac).substr(1);
    while (!digits.empty() && digits.back() == '0') digits.pop_back();
    os << '.' << digits;
  }
  return os.str();
}

}  // namespace

const char* to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::kNone: return "none";
    case AttackKind::kBC: return "BC";
    case AttackKind::kCA: return "CA";
    case AttackKind::kCR: return "CR";
    case AttackKind::kIB: return "IB";
    case AttackKind::kJC: return "JC";
    case AttackKind::kNA: return "NA";
    case AttackKind::kRo: return "Ro";
    case AttackKind::kSc: return "Sc";
    case AttackKind::kSR: return "SR";
    case AttackKind::kMIR: return "MIR";
  }
  return "?";
}

AttackKind parse_attack_kind(const std::string& text) {
  static const std::map<std::string, AttackKind> kinds{
      {"none", AttackKind::kNone}, {"BC", AttackKind::kBC}, {"CA", AttackKind::kCA},
      {"CR", AttackKind::kCR},     {"IB", AttackKind::kIB}, {"JC", AttackKind::kJC},
      {"NA", AttackKind::kNA},     {"Ro", AttackKind::kRo}, {"Sc", AttackKind::kSc},
      {"SR", AttackKind::kSR},     {"MIR", AttackKind::kMIR}};
  auto it = kinds.find(text);
  if (it == kinds.end()) throw ValueError("unknown attack kind '" + text + "'");
  return it->second;
}

int level_count(AttackKind kind) {
  switch (kind) {
    case AttackKind::kNone: return 0;
    case AttackKind::kBC:
    case AttackKind::kCA:
    case AttackKind::kCR:
    case AttackKind::kIB:
    case AttackKind::kNA: return 3;
    case AttackKind::kJC: return static_cast<int>(kJpegQuality.size());
    case AttackKind::kRo:
    case AttackKind::kSc:
    case AttackKind::kSR: return 5;
    case AttackKind::kMIR: return 1;
  }
  return 0;
}

bool is_photometric(AttackKind kind) {
  switch (kind) {
    case AttackKind::kBC:
    case AttackKind::kCA:
    case AttackKind::kCR:
    case AttackKind::kIB:
    case AttackKind::kJC:
    case AttackKind::kNA: return true;
    default: return false;
  }
}

bool is_geometric(AttackKind kind) {
  return kind == AttackKind::kRo || kind == AttackKind::kSc || kind == AttackKind::kSR ||
         kind == AttackKind::kMIR;
}

void AttackSpec::validate() const {
  const int n = level_count(kind);
  const bool ok = kind == AttackKind::kNone ? level == 0 : (level >= 1 && level <= n);
  if (!ok) {
    throw ValueError(std::string("invalid level ") + std::to_string(level) + " for attack " +
                     cmseg::to_string(kind));
  }
}

std::vector<AttackChoice> parse_attack_menu(const std::string& text) {
  std::vector<AttackChoice> menu;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    AttackChoice choice;
    const auto colon = item.find(':');
    choice.kind = parse_attack_kind(item.substr(0, colon));
    if (colon != std::string::npos) {
      try {
        choice.level = std::stoi(item.substr(colon + 1));
      } catch (const std::exception&) {
        throw ValueError("bad attack level in '" + item + "'");
      }
      AttackSpec{choice.kind, choice.level}.validate();
    }
    menu.push_back(choice);
  }
  if (menu.empty()) throw ValueError("attack menu is empty");
  return menu;
}

Transform transform_for(const AttackSpec& attack) {
  attack.validate();
  Transform t;
  const auto i = static_cast<size_t>(std::max(attack.level, 1) - 1);
  switch (attack.kind) {
    case AttackKind::kRo: t.angle_deg = kRotationDeg[i]; break;
    case AttackKind::kSc: t.scale_permille = kScalePermille[i]; break;
    case AttackKind::kSR:
      t.angle_deg = kRotationDeg[i];
      t.scale_permille = kScalePermille[i];
      break;
    case AttackKind::kMIR: t.mirror = true; break;
    default: break;
  }
  return t;
}

int jpeg_quality(int level) {
  AttackSpec{AttackKind::kJC, level}.validate();
  return kJpegQuality[static_cast<size_t>(level - 1)];
}

ObjectPatch extract_object(const Image& image, const BBox& b, const std::optional<Image>& alpha) {
  if (b.w <= 0 || b.h <= 0 || b.x < 0 || b.y < 0 || b.x + b.w > image.width || b.y + b.h > image.height) {
    throw ValueError("bbox out of image bounds");
  }
  ObjectPatch obj;
  obj.source = b;
  obj.patch = crop(to_rgb(image), b);
  if (alpha) {
    if (alpha->width != b.w || alpha->height != b.h) throw ValueError("alpha mask size differs from bbox");
    obj.alpha = to_gray(*alpha);
  } else {
    obj.alpha = Image(b.w, b.h, 1, 255);
  }
  return obj;
}

ObjectPatch extract_object(const SourceSpec& src) {
  const Image image = read_image(src.image);
  std::optional<Image> alpha;
  if (src.alpha) alpha = read_image(*src.alpha);
  return extract_object(image, src.bbox, alpha);
}

ObjectPatch transform_patch(const ObjectPatch& object, const Transform& t) {
  if (t.scale_permille <= 0) throw ValueError("scale must be positive");
  ObjectPatch in = object;
  if (t.mirror) {
    for (Image* img : {&in.patch, &in.alpha}) {
      Image flipped = *img;
      for (int y = 0; y < img->height; ++y) {
        for (int x = 0; x < img->width; ++x) {
          for (int c = 0; c < img->channels; ++c) flipped.at(x, y, c) = img->at(img->width - 1 - x, y, c);
        }
      }
      *img = std::move(flipped);
    }
  }
  if (t.angle_deg == 0 && t.scale_permille == 1000) return in;

  const auto [s, c] = sin_cos_q30(t.angle_deg);
  const int64_t w = in.patch.width;
  const int64_t h = in.patch.height;
  const int64_t abs_s = s < 0 ? -s : s;
  const int64_t abs_c = c < 0 ? -c : c;
  // Output extent: ceil(scale * (w|cos| + h|sin|)) and likewise for height.
  const auto extent = [&](int64_t a, int64_t b) {
    const __int128 num = (static_cast<__int128>(a) * abs_c + static_cast<__int128>(b) * abs_s) * t.scale_permille;
    const __int128 den = static_cast<__int128>(kOne30) * 1000;
    return static_cast<int>(std::max<__int128>(1, (num + den - 1) / den));
  };
  const int ow = extent(w, h);
  const int oh = extent(h, w);

  ObjectPatch out;
  out.source = object.source;
  out.patch = Image(ow, oh, 3);
  out.alpha = Image(ow, oh, 1);
  for (int v = 0; v < oh; ++v) {
    for (int u = 0; u < ow; ++u) {
      // Offsets from the output centre, Q16.
      const int64_t dx = ((2 * static_cast<int64_t>(u) + 1 - ow) << 15);
      const int64_t dy = ((2 * static_cast<int64_t>(v) + 1 - oh) << 15);
      // Inverse rotation, then inverse scale.
      const int64_t rx = mul30(c, dx) + mul30(s, dy);
      const int64_t ry = mul30(-s, dx) + mul30(c, dy);
      const int64_t sx = rx * 1000 / t.scale_permille + ((w - 1) << 15);
      const int64_t sy = ry * 1000 / t.scale_permille + ((h - 1) << 15);
      const int64_t x0 = floor_shift16(sx);
      const int64_t y0 = floor_shift16(sy);
      const int64_t fx = sx - (x0 << 16);
      const int64_t fy = sy - (y0 << 16);
      const int64_t wts[4] = {(65536 - fx) * (65536 - fy), fx * (65536 - fy), (65536 - fx) * fy, fx * fy};
      const int64_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const int64_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
      int64_t acc[4] = {0, 0, 0, 0};
      for (int k = 0; k < 4; ++k) {
        if (wts[k] == 0 || xs[k] < 0 || ys[k] < 0 || xs[k] >= w || ys[k] >= h) continue;
        const int px = static_cast<int>(xs[k]);
        const int py = static_cast<int>(ys[k]);
        for (int ch = 0; ch < 3; ++ch) acc[ch] += wts[k] * in.patch.at(px, py, ch);
        acc[3] += wts[k] * in.alpha.at(px, py);
      }
      const int64_t half = int64_t{1} << 31;
      for (int ch = 0; ch < 3; ++ch) out.patch.at(u, v, ch) = clamp_u8((acc[ch] + half) >> 32);
      out.alpha.at(u, v) = clamp_u8((acc[3] + half) >> 32);
    }
  }
  return out;
}

Composite composite(const Image& image_in, const ObjectPatch& object, int x, int y,
                    const Transform& transform, MaskMode mode) {
  const Image image = to_rgb(image_in);
  const ObjectPatch moved = transform_patch(object, transform);
  const int tw = moved.patch.width;
  const int th = moved.patch.height;
  if (x < 0 || y < 0 || x + tw > image.width || y + th > image.height) {
    throw ValueError("transformed patch does not fit at (" + std::to_string(x) + "," + std::to_string(y) + ")");
  }
  const BBox& src = object.source;
  if (src.x < 0 || src.y < 0 || src.x + src.w > image.width || src.y + src.h > image.height) {
    throw ValueError("source bbox outside image");
  }
  Composite out;
  out.image = image;
  out.mask = Image(image.width, image.height, 1, 0);
  out.target = {x, y, tw, th};
  int64_t target_pixels = 0;
  for (int v = 0; v < th; ++v) {
    for (int u = 0; u < tw; ++u) {
      if (moved.alpha.at(u, v) <= 127) continue;
      ++target_pixels;
      for (int ch = 0; ch < 3; ++ch) out.image.at(x + u, y + v, ch) = moved.patch.at(u, v, ch);
      out.mask.at(x + u, y + v) = 255;
    }
  }
  if (target_pixels == 0) throw ValueError("degenerate object: empty footprint");
  if (mode == MaskMode::kUnion) {
    for (int v = 0; v < src.h; ++v) {
      for (int u = 0; u < src.w; ++u) {
        if (object.alpha.at(u, v) > 127) out.mask.at(src.x + u, src.y + v) = 255;
      }
    }
  }
  return out;
}

Image apply_attack(const Image& image, const AttackSpec& spec, uint64_t seed) {
  spec.validate();
  if (!is_photometric(spec.kind)) return image;
  const auto i = static_cast<size_t>(spec.level - 1);
  Image out = image;
  switch (spec.kind) {
    case AttackKind::kBC: {
      Rng rng(seed);
      const int delta = (rng.next() & 1U) ? kBrightness[i] : -kBrightness[i];
      for (auto& p : out.pixels) p = clamp_u8(p + delta);
      break;
    }
    case AttackKind::kCA: {
      const int64_t f = kContrastPermille[i];
      const size_t plane = static_cast<size_t>(image.width) * image.height;
      for (int ch = 0; ch < image.channels; ++ch) {
        int64_t total = 0;
        for (size_t p = 0; p < plane; ++p) total += image.pixels[p * image.channels + ch];
        const int64_t mean = div_round(total, static_cast<int64_t>(plane));
        for (size_t p = 0; p < plane; ++p) {
          auto& v = out.pixels[p * image.channels + ch];
          v = clamp_u8(mean + div_round((v - mean) * f, 1000));
        }
      }
      break;
    }
    case AttackKind::kCR: {
      const int step = 256 / kColorLevels[i];
      for (auto& p : out.pixels) p = static_cast<uint8_t>(p / step * step);
      break;
    }
    case AttackKind::kIB: {
      const int r = kBlurRadius[i];
      for (int yy = 0; yy < image.height; ++yy) {
        for (int xx = 0; xx < image.width; ++xx) {
          for (int ch = 0; ch < image.channels; ++ch) {
            int64_t acc = 0;
            int64_t count = 0;
            for (int dy = -r; dy <= r; ++dy) {
              const int sy = yy + dy;
              if (sy < 0 || sy >= image.height) continue;
              for (int dx = -r; dx <= r; ++dx) {
                const int sx = xx + dx;
                if (sx < 0 || sx >= image.width) continue;
                acc += image.at(sx, sy, ch);
                ++count;
              }
            }
            out.at(xx, yy, ch) = static_cast<uint8_t>((acc + count / 2) / count);
          }
        }
      }
      break;
    }
    case AttackKind::kJC:
      out = decode_jpeg(encode_jpeg(image, kJpegQuality[i]));
      break;
    case AttackKind::kNA: {
      Rng rng(seed);
      const double sigma = kNoiseSigma[i];
      for (auto& p : out.pixels) p = clamp_u8(p + std::lround(sigma * rng.normal()));
      break;
    }
    default: break;
  }
  return out;
}

std::string to_json_line(const SampleRecord& r) {
  ordered_json j;
  j["id"] = r.id;
  j["image_path"] = r.image_path;
  j["mask_path"] = r.mask_path;
  j["source_bbox"] = bbox_json(r.source_bbox);
  j["target_bbox"] = bbox_json(r.target_bbox);
  ordered_json t;
  t["angle"] = r.transform.angle_deg;
  t["scale"] = ordered_json::parse(scale_text(r.transform.scale_permille));
  t["mirror"] = r.transform.mirror;
  j["transform"] = std::move(t);
  j["attack"] = ordered_json{{"kind", to_string(r.attack.kind)}, {"level", r.attack.level}};
  j["seed"] = r.seed;
  return j.dump();
}

SampleRecord parse_sample_record(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw ValueError(std::string("manifest line is not JSON: ") + e.what());
  }
  try {
    SampleRecord r;
    r.id = j.at("id").get<std::string>();
    r.image_path = j.at("image_path").get<std::string>();
    r.mask_path = j.at("mask_path").get<std::string>();
    r.source_bbox = parse_bbox(j.at("source_bbox"));
    r.target_bbox = parse_bbox(j.at("target_bbox"));
    const auto& t = j.at("transform");
    r.transform.angle_deg = t.at("angle").get<int>();
    r.transform.scale_permille = static_cast<int>(std::lround(t.at("scale").get<double>() * 1000.0));
    r.transform.mirror = t.at("mirror").get<bool>();
    r.attack.kind = parse_attack_kind(j.at("attack").at("kind").get<std::string>());
    r.attack.level = j.at("attack").at("level").get<int>();
    r.seed = j.at("seed").get<uint64_t>();
    return r;
  } catch (const json::exception& e) {
    throw ValueError(std::string("manifest record malformed: ") + e.what());
  }
}

std::vector<SampleRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValueError("cannot open manifest " + path.string());
  std::vector<SampleRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(parse_sample_record(line));
  }
  return out;
}

std::vector<SourceSpec> read_sources(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValueError("cannot open sources file " + path.string());
  const auto base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : base / fp;
  };
  std::vector<SourceSpec> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      SourceSpec s;
      s.image = resolve(j.at("image").get<std::string>());
      s.bbox = parse_bbox(j.at("bbox"));
      if (j.contains("alpha") && !j["alpha"].is_null()) s.alpha = resolve(j["alpha"].get<std::string>());
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw ValueError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (out.empty()) throw ValueError("sources file " + path.string() + " lists no sources");
  return out;
}

void write_sources(const std::vector<SourceSpec>& sources, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ValueError("cannot write " + path.string());
  const auto base = path.parent_path();
  for (const auto& s : sources) {
    ordered_json j;
    j["image"] = std::filesystem::relative(s.image, base).generic_string();
    j["bbox"] = bbox_json(s.bbox);
    if (s.alpha) j["alpha"] = std::filesystem::relative(*s.alpha, base).generic_string();
    out << j.dump() << '\n';
  }
}

GenerateResult generate_dataset(const std::vector<SourceSpec>& sources, int count, uint64_t seed,
                                const std::vector<AttackChoice>& attack_menu,
                                const std::filesystem::path& out_dir, const GenerateOptions& options) {
  if (count < 1) throw ValueError("count must be >= 1");
  if (sources.empty()) throw ValueError("no sources given");
  if (attack_menu.empty()) throw ValueError("attack menu is empty");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "masks");

  struct Loaded {
    Image image;
    ObjectPatch object;
  };
  std::map<size_t, Loaded> cache;
  auto load = [&](size_t i) -> const Loaded& {
    auto it = cache.find(i);
    if (it == cache.end()) {
      Loaded l;
      l.image = to_rgb(read_image(sources[i].image));
      std::optional<Image> alpha;
      if (sources[i].alpha) alpha = read_image(*sources[i].alpha);
      l.object = extract_object(l.image, sources[i].bbox, alpha);
      it = cache.emplace(i, std::move(l)).first;
    }
    return it->second;
  };

  GenerateResult result;
  std::ofstream manifest(out_dir / "manifest.jsonl", std::ios::trunc);
  std::ofstream warnings(out_dir / "warnings.jsonl", std::ios::trunc);
  if (!manifest || !warnings) throw ValueError("cannot write manifest under " + out_dir.string());

  for (int i = 0; i < count; ++i) {
    const uint64_t sample_seed = mix_seed(seed, static_cast<uint64_t>(i));
    Rng rng(sample_seed);
    char id_buf[32];
    std::snprintf(id_buf, sizeof(id_buf), "%05d", i);
    const std::string id = options.id_prefix + id_buf;

    const auto src_index = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(sources.size()) - 1));
    const auto& choice = attack_menu[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(attack_menu.size()) - 1))];
    AttackSpec attack{choice.kind, choice.level};
    if (attack.kind != AttackKind::kNone && attack.level == 0) {
      attack.level = static_cast<int>(rng.uniform_int(1, level_count(attack.kind)));
    }
    const Transform transform = transform_for(attack);
    const Loaded& src = load(src_index);
    const ObjectPatch moved = transform_patch(src.object, transform);

    auto skip = [&](const std::string& why) {
      ordered_json w{{"id", id}, {"seed", sample_seed}, {"warning", why}};
      warnings << w.dump() << '\n';
      result.warnings.push_back(id + ": " + why);
    };
    const bool has_source = std::any_of(src.object.alpha.pixels.begin(), src.object.alpha.pixels.end(),
                                        [](uint8_t a) { return a > 127; });
    const bool has_target = std::any_of(moved.alpha.pixels.begin(), moved.alpha.pixels.end(),
                                        [](uint8_t a) { return a > 127; });
    if (!has_source || !has_target) {
      skip("degenerate object: empty footprint");
      continue;
    }
    const int max_x = src.image.width - moved.patch.width;
    const int max_y = src.image.height - moved.patch.height;
    std::optional<std::pair<int, int>> position;
    for (int t = 0; t < options.max_placement_tries && max_x >= 0 && max_y >= 0; ++t) {
      const int x = static_cast<int>(rng.uniform_int(0, max_x));
      const int y = static_cast<int>(rng.uniform_int(0, max_y));
      if (BBox{x, y, moved.patch.width, moved.patch.height}.intersects(src.object.source)) continue;
      position = {x, y};
      break;
    }
    if (!position) {
      skip("no valid placement after " + std::to_string(options.max_placement_tries) + " tries");
      continue;
    }

    Composite comp = composite(src.image, src.object, position->first, position->second, transform,
                               options.mask_mode);
    SampleRecord record;
    record.id = id;
    record.source_bbox = src.object.source;
    record.target_bbox = comp.target;
    record.transform = transform;
    record.attack = attack;
    record.seed = sample_seed;
    record.mask_path = "masks/" + id + ".png";
    const uint64_t attack_seed = mix_seed(sample_seed, 1);
    if (attack.kind == AttackKind::kJC) {
      record.image_path = "images/" + id + ".jpg";
      write_jpeg(comp.image, out_dir / record.image_path, jpeg_quality(attack.level));
    } else {
      record.image_path = "images/" + id + ".png";
      write_png(apply_attack(comp.image, attack, attack_seed), out_dir / record.image_path);
    }
    write_png(comp.mask, out_dir / record.mask_path);
    manifest << to_json_line(record) << '\n';
    result.records.push_back(std::move(record));
  }
  return result;
}

}  // namespace cmseg
