#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "cmseg/tensor.hpp"
#include "cmseg/weight_io.hpp"

namespace cmseg::tools {

/// Replaceable pieces of the runtime, so a harness can inject a fault and
/// confirm that the matching check reports it.
struct VerifyHooks {
  std::function<Tensor(int64_t, int64_t, float)> suppression;  // defaults to suppression_matrix
};

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

CheckResult check_suppression(const VerifyHooks& hooks = {});
/// cor_forward against an O((hw)^2 C) brute-force evaluation on random
/// tensors with C <= 8 and h, w <= 6.
CheckResult check_affinity_oracle(const VerifyHooks& hooks = {}, int seeds = 50);
/// Rescaling each site's feature vector by a positive factor.
CheckResult check_scale_invariance(const VerifyHooks& hooks = {}, int seeds = 20);
/// Coordinate central differences for every differentiable op.
CheckResult check_op_gradients(int seeds = 3);
/// Block-directional central differences through the micro model and loss.
CheckResult check_model_gradients(int seeds = 2);
CheckResult check_archive_roundtrip(int count = 100);
CheckResult check_archive_malformed();

struct MalformedArchive {
  std::string name;
  std::vector<uint8_t> bytes;
  ArchiveErrc expected;
};
/// Corrupted variants of a small valid archive, one per failure class.
std::vector<MalformedArchive> malformed_archives();

/// Runs every self-check: finite-difference gradients, the brute-force
/// affinity oracle, suppression properties, scale invariance and archive
/// round-trips.
std::vector<CheckResult> run_verify(const VerifyHooks& hooks = {});

/// Prints a fixed-width pass/fail table.
void print_checks(const std::vector<CheckResult>& checks, std::ostream& out);

}  // namespace cmseg::tools
