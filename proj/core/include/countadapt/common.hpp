// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Core>

namespace countadapt {

/// Row-major so that one row is one sample of a mini-batch.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Rng = std::mt19937_64;

enum class ErrorCode {
  invalid_argument,
  infeasible_density,
  domain_not_found,
  domain_exists,
  batch_too_small,
  dimension_mismatch,
  io_error,
  format_error,
  version_mismatch,
  fingerprint_mismatch,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what);
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// FNV-1a, 64 bit. Used for seed derivation, fingerprints and file hashes.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

/// Mixes a base seed with a tag so that independent streams never collide.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag);

/// Domain identifiers double as file names, so they are restricted to [A-Za-z0-9_.-].
bool is_valid_domain_id(std::string_view id);
void require_valid_domain_id(std::string_view id);

/// Worker count for read-only inference fan-out. Honors COUNT_ADAPT_THREADS.
unsigned inference_threads();

/// Runs fn(i) for i in [0, n). Each index is visited exactly once; callers write
/// results into per-index slots so output order never depends on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace countadapt
