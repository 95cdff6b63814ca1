#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cmseg/tensor.hpp"

namespace cmseg {

// .cmsw layout (all integers little-endian):
//   "CMSW" | u32 version = 1 | u64 header_len | JSON header | payload
// The header maps each tensor name to {"shape", "offset", "nbytes"}; offsets
// are relative to the payload start. Keys are written in sorted order.

enum class ArchiveErrc {
  kIo,
  kBadMagic,
  kUnsupportedVersion,
  kTruncated,
  kMalformedHeader,
  kInvalidEntry,
  kOutOfRange,
  kOverlap,
  kMissingEntry,
  kShapeMismatch,
};

const char* to_string(ArchiveErrc code);

class ArchiveError : public Error {
 public:
  ArchiveError(ArchiveErrc code, const std::string& what)
      : Error(std::string(to_string(code)) + ": " + what), code_(code) {}
  ArchiveErrc code() const { return code_; }

 private:
  ArchiveErrc code_;
};

struct ArchiveEntry {
  Shape shape;
  uint64_t offset = 0;
  uint64_t nbytes = 0;

  bool operator==(const ArchiveEntry&) const = default;
};

class WeightArchive {
 public:
  static constexpr uint32_t kVersion = 1;

  /// Appends a tensor at the end of the payload.
  void add(const std::string& name, const Tensor& tensor);
  /// Replaces entries and payload wholesale; validates invariants.
  void assign(std::map<std::string, ArchiveEntry> entries, std::vector<uint8_t> payload);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const ArchiveEntry& entry(const std::string& name) const;
  /// Decodes a tensor into a fresh leaf.
  Tensor tensor(const std::string& name) const;

  const std::map<std::string, ArchiveEntry>& entries() const { return entries_; }
  const std::vector<uint8_t>& payload() const { return payload_; }
  size_t size() const { return entries_.size(); }

  /// Throws ArchiveError when an invariant is violated.
  void validate() const;

  bool operator==(const WeightArchive&) const = default;

 private:
  std::map<std::string, ArchiveEntry> entries_;
  std::vector<uint8_t> payload_;
};

std::vector<uint8_t> serialize(const WeightArchive& archive);
WeightArchive deserialize(const std::vector<uint8_t>& bytes);

void save(const WeightArchive& archive, const std::filesystem::path& path);
WeightArchive load(const std::filesystem::path& path);

}  // namespace cmseg
