#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "traitforge/delta.hpp"
#include "traitforge/tensor_store.hpp"

namespace traitforge {

// Drop-and-rescale: each element is zeroed with probability `drop_rate`,
// survivors are divided by (1 - drop_rate).
struct DareParams {
  double drop_rate = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const DareParams&) const = default;
};

struct TiesParams {
  // Fraction of largest-magnitude elements kept per tensor, in (0, 1].
  double keep_fraction = 1.0;

  void validate() const;
  bool operator==(const TiesParams&) const = default;
};

enum class MergeKind { TaskArithmetic, Ties };

struct MergeMethod {
  MergeKind kind = MergeKind::TaskArithmetic;
  std::optional<DareParams> dare;
  std::optional<TiesParams> ties;

  static MergeMethod task_arithmetic(std::optional<DareParams> dare = std::nullopt);
  static MergeMethod ties_merging(TiesParams ties, std::optional<DareParams> dare = std::nullopt);

  void validate() const;
  bool operator==(const MergeMethod&) const = default;
};

std::string_view to_string(MergeKind kind);

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    state_ += kGamma;
    return mix(state_);
  }
  // Uniform in [0, 1) with 53 random bits.
  double next_unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Value number `index` (0-based) of the stream seeded with `seed`, without stepping through the prefix.
  static std::uint64_t at(std::uint64_t seed, std::uint64_t index) { return mix(seed + (index + 1) * kGamma); }

  static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ull;

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

std::uint64_t fnv1a64(std::span<const std::byte> bytes);

// master_seed XOR FNV-1a-64(vector_index as 8 little-endian bytes || tensor name).
std::uint64_t dare_stream_seed(std::uint64_t master_seed, std::uint64_t vector_index, std::string_view tensor_name);

// In place; element j consumes stream value j. drop_rate 0 leaves values untouched.
void dare_sparsify_values(std::span<float> values, double drop_rate, std::uint64_t stream_seed);

DeltaVector dare_sparsify(const DeltaVector& delta, const DareParams& params, std::uint64_t vector_index = 0);

// ceil(keep_fraction * n), robust to decimal fractions such as 0.7 that are inexact in binary.
std::size_t ties_keep_count(double keep_fraction, std::size_t n);

// Trim, elect, disjoint mean over already-scaled per-vector values of one tensor.
// Returns the merged delta, still in double; adding it to the base rounds once, so a
// single delta at k=1 matches apply() exactly.
std::vector<double> ties_combine(std::span<const std::vector<double>> scaled, double keep_fraction);

enum class Provenance { Merged, BasePassthrough, ExternalPassthrough };
std::string_view to_string(Provenance provenance);

struct TensorProvenance {
  std::string name;
  Provenance provenance = Provenance::Merged;
  std::uint64_t elements = 0;
  std::string source;  // checkpoint id the bytes came from for passthrough tensors
};

struct MergeReport {
  std::string output;
  std::vector<TensorProvenance> tensors;
  double wall_seconds = 0.0;

  std::size_t count(Provenance provenance) const;
};

struct MergeOptions {
  MergeMethod method;
  // Delta entries and base tensors failing the filter are left alone.
  ComponentFilter filter;
  // Copied verbatim when absent from base (or excluded from it by the filter).
  std::vector<Checkpoint> passthrough;
  OutputDtypePolicy output_dtype = OutputDtypePolicy::preserve();
  unsigned jobs = 1;
  Metadata metadata;
};

// Header-only consistency checks; empty when merge_into would not reject the inputs.
std::vector<std::string> check_merge_inputs(const Checkpoint& base, std::span<const WeightedDelta> weighted,
                                            const MergeOptions& options);

// Streams the merged checkpoint into `writer` (not yet written) and returns
// the per-tensor provenance.
MergeReport plan_merge(const Checkpoint& base, std::span<const WeightedDelta> weighted, const MergeOptions& options,
                       CheckpointWriter& writer);

MergeReport merge_to_file(const Checkpoint& base, std::span<const WeightedDelta> weighted, const MergeOptions& options,
                          const std::filesystem::path& output);

// In-memory variants.
Checkpoint merge(const Checkpoint& base, std::span<const WeightedDelta> weighted, const MergeMethod& method,
                 unsigned jobs = 1);
Checkpoint ties_merge(const Checkpoint& base, std::span<const WeightedDelta> weighted, const TiesParams& params);

}  // namespace traitforge
