#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "traitforge/tensor_store.hpp"

namespace traitforge {

enum class Trait { OPN, CON, EXT, AGR, NEU };
enum class Polarity { High, Low };

struct TraitLabel {
  Trait trait = Trait::OPN;
  Polarity polarity = Polarity::High;

  // e.g. "EXT_high"
  std::string str() const;
  auto operator<=>(const TraitLabel&) const = default;
};

std::string_view to_string(Trait trait);
std::string_view to_string(Polarity polarity);
// Case-insensitive; throws usage errors.
Trait parse_trait(std::string_view text);
Polarity parse_polarity(std::string_view text);
std::array<TraitLabel, 10> all_trait_labels();

// A name passes iff it starts with some include prefix (no prefixes: everything)
// and with no exclude prefix. A trailing '*' on a prefix is accepted and ignored.
struct ComponentFilter {
  std::vector<std::string> include;
  std::vector<std::string> exclude;

  bool matches(std::string_view name) const;
  bool operator==(const ComponentFilter&) const = default;
};

// Weight-space difference between a tuned checkpoint and its base.
// Entries always hold the F32 arithmetic view; carry-through tensors never appear.
struct DeltaVector {
  std::map<std::string, TensorData> entries;
  std::string base_id;
  std::string tuned_id;
  std::optional<TraitLabel> trait;

  // base_id, tuned_id, trait, polarity
  Metadata provenance() const;
};

// Per-tensor view of a delta, so merges can hold one tensor at a time.
class DeltaSource {
 public:
  virtual ~DeltaSource() = default;

  virtual std::vector<std::string> names() const = 0;
  virtual bool contains(const std::string& name) const = 0;
  virtual Shape shape(const std::string& name) const = 0;
  // F32 arithmetic view.
  virtual TensorData load(const std::string& name) const = 0;
  virtual std::string base_id() const = 0;
  virtual std::string tuned_id() const = 0;
  virtual std::optional<TraitLabel> trait() const { return std::nullopt; }
};

struct ExtractOptions {
  ComponentFilter filter;
  // Drop tensors present in tuned but absent from base instead of failing.
  bool skip_missing = false;
};

// tuned - base, computed lazily per tensor. Shapes and name coverage are
// validated on construction from headers alone.
class PairDelta final : public DeltaSource {
 public:
  PairDelta(Checkpoint tuned, Checkpoint base, ExtractOptions options = {});

  std::vector<std::string> names() const override { return names_; }
  bool contains(const std::string& name) const override;
  Shape shape(const std::string& name) const override;
  TensorData load(const std::string& name) const override;
  std::string base_id() const override { return base_.id(); }
  std::string tuned_id() const override { return tuned_.id(); }

 private:
  Checkpoint tuned_;
  Checkpoint base_;
  std::vector<std::string> names_;
};

// A delta container on disk (written by write_delta or any tool emitting the format).
class StoredDelta final : public DeltaSource {
 public:
  explicit StoredDelta(Checkpoint ckpt);

  std::vector<std::string> names() const override { return names_; }
  bool contains(const std::string& name) const override;
  Shape shape(const std::string& name) const override;
  TensorData load(const std::string& name) const override;
  std::string base_id() const override;
  std::string tuned_id() const override;
  std::optional<TraitLabel> trait() const override;

 private:
  Checkpoint ckpt_;
  std::vector<std::string> names_;
};

class MemoryDelta final : public DeltaSource {
 public:
  explicit MemoryDelta(DeltaVector delta);

  std::vector<std::string> names() const override;
  bool contains(const std::string& name) const override;
  Shape shape(const std::string& name) const override;
  TensorData load(const std::string& name) const override;
  std::string base_id() const override { return delta_.base_id; }
  std::string tuned_id() const override { return delta_.tuned_id; }
  std::optional<TraitLabel> trait() const override { return delta_.trait; }

 private:
  DeltaVector delta_;
};

struct WeightedDelta {
  std::shared_ptr<const DeltaSource> delta;
  double alpha = 1.0;
};

WeightedDelta weighted(DeltaVector delta, double alpha);

DeltaVector extract(const Checkpoint& tuned, const Checkpoint& base, const ExtractOptions& options = {});
DeltaVector materialize(const DeltaSource& source);

DeltaVector scale(const DeltaVector& delta, double alpha);
DeltaVector negate(const DeltaVector& delta);
DeltaVector add(const DeltaVector& a, const DeltaVector& b);

// acc += alpha * delta with a single rounding to F32 per element. Repeated calls
// accumulate left to right in F32.
void accumulate_scaled(std::span<float> acc, std::span<const float> delta, double alpha);

// Task-arithmetic application; result keeps base dtypes and is held in memory.
// Tensors no delta touches are byte-identical to base.
Checkpoint apply(const Checkpoint& base, std::span<const WeightedDelta> weighted);

// Streams `source` into a delta container with provenance metadata.
void write_delta(const std::filesystem::path& path, const DeltaSource& source,
                 std::optional<TraitLabel> trait = std::nullopt,
                 const OutputDtypePolicy& policy = OutputDtypePolicy::force(DType::F32), unsigned jobs = 1);
void write_delta(const std::filesystem::path& path, const DeltaVector& delta,
                 const OutputDtypePolicy& policy = OutputDtypePolicy::force(DType::F32));
DeltaVector load_delta(const std::filesystem::path& path);

}  // namespace traitforge
