#include "cmseg/weight_io.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <optional>
#include <limits>

#include <json.hpp>

namespace cmseg {

namespace {

constexpr char kMagic[4] = {'C', 'M', 'S', 'W'};
constexpr size_t kPreamble = 4 + 4 + 8;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint64_t get_le(const uint8_t* p, int bytes) {
  uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

bool valid_name(const std::string& name) {
  if (name.empty()) return false;
  return std::all_of(name.begin(), name.end(), [](char c) {
    auto u = static_cast<unsigned char>(c);
    return u >= 0x20 && u < 0x7F;
  });
}

// 4 * product(shape), or nullopt on overflow.
std::optional<uint64_t> byte_size(const Shape& shape) {
  uint64_t n = 4;
  for (int64_t d : shape) {
    if (d < 0) return std::nullopt;
    if (d != 0 && n > std::numeric_limits<uint64_t>::max() / static_cast<uint64_t>(d)) {
      return std::nullopt;
    }
    n *= static_cast<uint64_t>(d);
  }
  return n;
}

void check_entries(const std::map<std::string, ArchiveEntry>& entries, uint64_t payload_len) {
  std::vector<std::pair<uint64_t, uint64_t>> spans;
  for (const auto& [name, e] : entries) {
    if (!valid_name(name)) throw ArchiveError(ArchiveErrc::kInvalidEntry, "bad tensor name '" + name + "'");
    auto expected = byte_size(e.shape);
    if (!expected || *expected != e.nbytes) {
      throw ArchiveError(ArchiveErrc::kInvalidEntry,
                         name + ": nbytes " + std::to_string(e.nbytes) + " disagrees with shape " +
                             to_string(e.shape));
    }
    if (e.offset > payload_len || e.nbytes > payload_len - e.offset) {
      throw ArchiveError(ArchiveErrc::kOutOfRange,
                         name + ": [" + std::to_string(e.offset) + ", +" + std::to_string(e.nbytes) +
                             ") exceeds payload of " + std::to_string(payload_len) + " bytes");
    }
    if (e.nbytes > 0) spans.emplace_back(e.offset, e.offset + e.nbytes);
  }
  std::sort(spans.begin(), spans.end());
  for (size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].first < spans[i - 1].second) {
      throw ArchiveError(ArchiveErrc::kOverlap,
                         "entries overlap at payload offset " + std::to_string(spans[i].first));
    }
  }
}

}  // namespace

const char* to_string(ArchiveErrc code) {
  switch (code) {
    case ArchiveErrc::kIo: return "io error";
    case ArchiveErrc::kBadMagic: return "bad magic";
    case ArchiveErrc::kUnsupportedVersion: return "unsupported version";
    case ArchiveErrc::kTruncated: return "truncated file";
    case ArchiveErrc::kMalformedHeader: return "malformed header";
    case ArchiveErrc::kInvalidEntry: return "invalid entry";
    case ArchiveErrc::kOutOfRange: return "entry out of range";
    case ArchiveErrc::kOverlap: return "overlapping entries";
    case ArchiveErrc::kMissingEntry: return "missing entry";
    case ArchiveErrc::kShapeMismatch: return "shape mismatch";
  }
  return "unknown";
}

void WeightArchive::add(const std::string& name, const Tensor& tensor) {
  if (!valid_name(name)) throw ArchiveError(ArchiveErrc::kInvalidEntry, "bad tensor name '" + name + "'");
  if (contains(name)) throw ArchiveError(ArchiveErrc::kInvalidEntry, "duplicate tensor name " + name);
  ArchiveEntry e{tensor.shape(), payload_.size(), 4 * static_cast<uint64_t>(tensor.numel())};
  payload_.reserve(payload_.size() + e.nbytes);
  for (float v : tensor.data()) put_u32(payload_, std::bit_cast<uint32_t>(v));
  entries_.emplace(name, std::move(e));
}

void WeightArchive::assign(std::map<std::string, ArchiveEntry> entries, std::vector<uint8_t> payload) {
  check_entries(entries, payload.size());
  entries_ = std::move(entries);
  payload_ = std::move(payload);
}

const ArchiveEntry& WeightArchive::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ArchiveError(ArchiveErrc::kMissingEntry, name);
  return it->second;
}

Tensor WeightArchive::tensor(const std::string& name) const {
  const auto& e = entry(name);
  std::vector<float> values(e.nbytes / 4);
  const uint8_t* p = payload_.data() + e.offset;
  for (size_t i = 0; i < values.size(); ++i) {
    values[i] = std::bit_cast<float>(static_cast<uint32_t>(get_le(p + 4 * i, 4)));
  }
  return Tensor(e.shape, std::move(values));
}

void WeightArchive::validate() const { check_entries(entries_, payload_.size()); }

std::vector<uint8_t> serialize(const WeightArchive& archive) {
  archive.validate();
  nlohmann::json header = nlohmann::json::object();
  for (const auto& [name, e] : archive.entries()) {
    header[name] = {{"shape", e.shape}, {"offset", e.offset}, {"nbytes", e.nbytes}};
  }
  const std::string text = header.dump();
  std::vector<uint8_t> out;
  out.reserve(kPreamble + text.size() + archive.payload().size());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u32(out, WeightArchive::kVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), archive.payload().begin(), archive.payload().end());
  return out;
}

WeightArchive deserialize(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 4) throw ArchiveError(ArchiveErrc::kTruncated, "file shorter than magic");
  if (!std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw ArchiveError(ArchiveErrc::kBadMagic, "expected 'CMSW'");
  }
  if (bytes.size() < kPreamble) throw ArchiveError(ArchiveErrc::kTruncated, "file shorter than preamble");
  const auto version = static_cast<uint32_t>(get_le(bytes.data() + 4, 4));
  if (version != WeightArchive::kVersion) {
    throw ArchiveError(ArchiveErrc::kUnsupportedVersion, "version " + std::to_string(version));
  }
  const uint64_t header_len = get_le(bytes.data() + 8, 8);
  // Validated against the real length before anything is sized from it.
  if (header_len > bytes.size() - kPreamble) {
    throw ArchiveError(ArchiveErrc::kTruncated, "header length " + std::to_string(header_len) +
                                                    " exceeds file size");
  }
  const auto* hb = reinterpret_cast<const char*>(bytes.data() + kPreamble);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hb, hb + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(ArchiveErrc::kMalformedHeader, e.what());
  }
  if (!header.is_object()) throw ArchiveError(ArchiveErrc::kMalformedHeader, "header is not an object");

  std::map<std::string, ArchiveEntry> entries;
  for (const auto& [name, value] : header.items()) {
    if (!value.is_object() || value.size() != 3 || !value.contains("shape") ||
        !value.contains("offset") || !value.contains("nbytes") || !value["shape"].is_array() ||
        !value["offset"].is_number_unsigned() || !value["nbytes"].is_number_unsigned()) {
      throw ArchiveError(ArchiveErrc::kMalformedHeader, "entry '" + name + "' has wrong fields");
    }
    ArchiveEntry e;
    for (const auto& d : value["shape"]) {
      if (!d.is_number_unsigned()) throw ArchiveError(ArchiveErrc::kMalformedHeader, name + ": bad dimension");
      e.shape.push_back(d.get<int64_t>());
    }
    e.offset = value["offset"].get<uint64_t>();
    e.nbytes = value["nbytes"].get<uint64_t>();
    entries.emplace(name, std::move(e));
  }
  const uint64_t payload_len = bytes.size() - kPreamble - header_len;
  check_entries(entries, payload_len);

  WeightArchive archive;
  archive.assign(std::move(entries),
                 std::vector<uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(kPreamble + header_len),
                                      bytes.end()));
  return archive;
}

void save(const WeightArchive& archive, const std::filesystem::path& path) {
  const auto bytes = serialize(archive);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArchiveError(ArchiveErrc::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ArchiveError(ArchiveErrc::kIo, "write failed for " + path.string());
}

WeightArchive load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError(ArchiveErrc::kIo, "cannot open " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace cmseg
