// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "countadapt/classifier.hpp"
#include "countadapt/features.hpp"
#include "countadapt/regressor.hpp"

namespace countadapt {

/// Module file layout (little-endian):
///   "MDC1" | u32 version | u32 kind | u32 feature_dim | u64 fingerprint | payload
/// Payloads hold float64 parameters so a round trip is bit-exact.
inline constexpr std::uint32_t kFormatVersion = 1;

enum class ModuleKind : std::uint32_t { shared = 1, domain = 2, classifier = 3 };

/// FNV-1a of a canonical description of the head and adapter widths for feature_dim.
std::uint64_t architecture_fingerprint(int feature_dim);

std::vector<char> serialize_shared(const CountingModel& model);
std::vector<char> serialize_domain(const CountingModel& model, std::string_view domain);
std::vector<char> serialize_classifier(const CountingModel& model, const DomainClassifierHead& head);

/// FNV-1a of the serialized shared core. Adapting, refining or classifying never changes it.
std::uint64_t shared_hash(const CountingModel& model);

void save_shared(const CountingModel& model, const std::filesystem::path& path);
/// Returns a core with no domains. With an expected fingerprint, a file built for a different
/// architecture is rejected with fingerprint_mismatch.
CountingModel load_shared(const std::filesystem::path& path,
                          std::optional<std::uint64_t> expected_fingerprint = std::nullopt);

/// Adapter set, AdaGrad accumulators, step counter, refiner and refiner optimizer state.
void save_domain(const CountingModel& model, std::string_view domain, const std::filesystem::path& path);
/// Registers (or replaces) the stored domain; returns its name. `rename` overrides the stored name.
std::string load_domain(CountingModel& model, const std::filesystem::path& path,
                        std::optional<std::string> rename = std::nullopt);

void save_classifier(const CountingModel& model, const DomainClassifierHead& head,
                     const std::filesystem::path& path);
DomainClassifierHead load_classifier(const CountingModel& model, const std::filesystem::path& path);

/// Everything a run directory needs to predict: the counting model, the frozen extractor that
/// produced its features, the patch size, and an optional domain classifier.
struct ModelArchive {
  CountingModel model;
  FrozenExtractorSpec extractor;
  int patch_size = 50;
  std::optional<DomainClassifierHead> classifier;
};

/// Writes manifest.txt, shared.mdc, domains/<name>.mdc and classifier.mdc. Stale domain files
/// are removed so the directory mirrors the model exactly.
void save_archive(const ModelArchive& archive, const std::filesystem::path& dir);

/// Validates the manifest (version, fingerprint, component hashes) before loading components.
ModelArchive load_archive(const std::filesystem::path& dir);

}  // namespace countadapt
