#include "traitforge/delta.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "traitforge/error.hpp"

namespace traitforge {

namespace {

// Delta entries never hold -0, so negate(negate(d)), scale(d, -1) and
// extract(apply(base, d, -1), base) agree with negate(d) bit for bit.
float positive_zero(float v) { return v + 0.0f; }

std::string upper(std::string_view s) {
  std::string out;
  for (char ch : s) out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
  return out;
}

std::string_view strip_star(std::string_view prefix) {
  if (!prefix.empty() && prefix.back() == '*') prefix.remove_suffix(1);
  return prefix;
}

TensorMeta f32_meta(std::string name, Shape shape) {
  TensorMeta m{std::move(name), DType::F32, std::move(shape), 0, 0};
  m.end = m.elements() * 4;
  return m;
}

void check_finite(double alpha) {
  if (!std::isfinite(alpha)) throw data_error("scaling coefficient must be finite");
}

}  // namespace

// ---------------------------------------------------------------------------
// labels and filters

std::string_view to_string(Trait trait) {
  switch (trait) {
    case Trait::OPN: return "OPN";
    case Trait::CON: return "CON";
    case Trait::EXT: return "EXT";
    case Trait::AGR: return "AGR";
    case Trait::NEU: return "NEU";
  }
  return "?";
}

std::string_view to_string(Polarity polarity) { return polarity == Polarity::High ? "high" : "low"; }

std::string TraitLabel::str() const { return std::string(to_string(trait)) + "_" + std::string(to_string(polarity)); }

Trait parse_trait(std::string_view text) {
  const std::string u = upper(text);
  for (Trait t : {Trait::OPN, Trait::CON, Trait::EXT, Trait::AGR, Trait::NEU})
    if (u == to_string(t)) return t;
  throw usage_error("unknown trait '" + std::string(text) + "' (expected OPN, CON, EXT, AGR or NEU)");
}

Polarity parse_polarity(std::string_view text) {
  const std::string u = upper(text);
  if (u == "HIGH") return Polarity::High;
  if (u == "LOW") return Polarity::Low;
  throw usage_error("unknown polarity '" + std::string(text) + "' (expected high or low)");
}

std::array<TraitLabel, 10> all_trait_labels() {
  std::array<TraitLabel, 10> out;
  std::size_t i = 0;
  for (Trait t : {Trait::OPN, Trait::CON, Trait::EXT, Trait::AGR, Trait::NEU})
    for (Polarity p : {Polarity::High, Polarity::Low}) out[i++] = TraitLabel{t, p};
  return out;
}

bool ComponentFilter::matches(std::string_view name) const {
  auto hit = [name](const std::string& prefix) { return name.starts_with(strip_star(prefix)); };
  if (!include.empty() && std::none_of(include.begin(), include.end(), hit)) return false;
  return std::none_of(exclude.begin(), exclude.end(), hit);
}

Metadata DeltaVector::provenance() const {
  Metadata m{{"base_id", base_id}, {"tuned_id", tuned_id}};
  if (trait) {
    m["trait"] = std::string(to_string(trait->trait));
    m["polarity"] = std::string(to_string(trait->polarity));
  }
  return m;
}

// ---------------------------------------------------------------------------
// sources

PairDelta::PairDelta(Checkpoint tuned, Checkpoint base, ExtractOptions options)
    : tuned_(std::move(tuned)), base_(std::move(base)) {
  const auto& filter = options.filter;
  for (const auto& [name, tm] : tuned_.tensors()) {
    if (!filter.matches(name) || !is_float(tm.dtype)) continue;
    if (!base_.contains(name)) {
      if (options.skip_missing) continue;
      throw data_error("tensor '" + name + "' is present in tuned checkpoint but missing from base");
    }
    const TensorMeta& bm = base_.meta(name);
    if (!is_float(bm.dtype))
      throw data_error("tensor '" + name + "' is " + std::string(to_string(tm.dtype)) + " in tuned but " +
                       std::string(to_string(bm.dtype)) + " in base");
    if (bm.shape != tm.shape)
      throw data_error("shape mismatch for '" + name + "': tuned " + shape_string(tm.shape) + " vs base " +
                       shape_string(bm.shape));
    names_.push_back(name);
  }
  for (const auto& [name, bm] : base_.tensors()) {
    if (!filter.matches(name) || !is_float(bm.dtype) || tuned_.contains(name) || options.skip_missing) continue;
    throw data_error("tensor '" + name + "' is present in base checkpoint but missing from tuned");
  }
}

bool PairDelta::contains(const std::string& name) const {
  return std::binary_search(names_.begin(), names_.end(), name);
}

Shape PairDelta::shape(const std::string& name) const {
  if (!contains(name)) throw data_error("delta has no tensor '" + name + "'");
  return base_.meta(name).shape;
}

TensorData PairDelta::load(const std::string& name) const {
  if (!contains(name)) throw data_error("delta has no tensor '" + name + "'");
  TensorData tuned = tuned_.load(name);
  TensorData base = base_.load(name);
  const auto t = tuned.values();
  const auto b = base.values();
  std::vector<float> out(t.size());
  for (std::size_t j = 0; j < t.size(); ++j) out[j] = positive_zero(t[j] - b[j]);
  return TensorData(f32_meta(name, base.meta().shape), std::move(out));
}

StoredDelta::StoredDelta(Checkpoint ckpt) : ckpt_(std::move(ckpt)) {
  for (const auto& [name, m] : ckpt_.tensors())
    if (is_float(m.dtype)) names_.push_back(name);
}

bool StoredDelta::contains(const std::string& name) const {
  return std::binary_search(names_.begin(), names_.end(), name);
}

Shape StoredDelta::shape(const std::string& name) const {
  if (!contains(name)) throw data_error("delta has no tensor '" + name + "'");
  return ckpt_.meta(name).shape;
}

TensorData StoredDelta::load(const std::string& name) const {
  if (!contains(name)) throw data_error("delta has no tensor '" + name + "'");
  TensorData t = ckpt_.load(name);
  std::vector<float> values(t.values().begin(), t.values().end());
  return TensorData(f32_meta(name, t.meta().shape), std::move(values));
}

std::string StoredDelta::base_id() const {
  auto it = ckpt_.metadata().find("base_id");
  return it == ckpt_.metadata().end() ? std::string() : it->second;
}

std::string StoredDelta::tuned_id() const {
  auto it = ckpt_.metadata().find("tuned_id");
  return it == ckpt_.metadata().end() ? ckpt_.id() : it->second;
}

std::optional<TraitLabel> StoredDelta::trait() const {
  const auto& md = ckpt_.metadata();
  auto t = md.find("trait");
  auto p = md.find("polarity");
  if (t == md.end() || p == md.end()) return std::nullopt;
  return TraitLabel{parse_trait(t->second), parse_polarity(p->second)};
}

MemoryDelta::MemoryDelta(DeltaVector delta) : delta_(std::move(delta)) {}

std::vector<std::string> MemoryDelta::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : delta_.entries) out.push_back(name);
  return out;
}

bool MemoryDelta::contains(const std::string& name) const { return delta_.entries.count(name) != 0; }

Shape MemoryDelta::shape(const std::string& name) const {
  auto it = delta_.entries.find(name);
  if (it == delta_.entries.end()) throw data_error("delta has no tensor '" + name + "'");
  return it->second.meta().shape;
}

TensorData MemoryDelta::load(const std::string& name) const {
  auto it = delta_.entries.find(name);
  if (it == delta_.entries.end()) throw data_error("delta has no tensor '" + name + "'");
  return it->second;
}

WeightedDelta weighted(DeltaVector delta, double alpha) {
  return WeightedDelta{std::make_shared<MemoryDelta>(std::move(delta)), alpha};
}

// ---------------------------------------------------------------------------
// algebra

DeltaVector materialize(const DeltaSource& source) {
  DeltaVector out;
  out.base_id = source.base_id();
  out.tuned_id = source.tuned_id();
  out.trait = source.trait();
  for (const auto& name : source.names()) out.entries.emplace(name, source.load(name));
  return out;
}

DeltaVector extract(const Checkpoint& tuned, const Checkpoint& base, const ExtractOptions& options) {
  return materialize(PairDelta(tuned, base, options));
}

DeltaVector scale(const DeltaVector& delta, double alpha) {
  check_finite(alpha);
  const auto a = static_cast<float>(alpha);
  DeltaVector out = delta;
  for (auto& [_, t] : out.entries)
    for (float& v : t.values()) v = positive_zero(a * v);
  return out;
}

DeltaVector negate(const DeltaVector& delta) {
  DeltaVector out = delta;
  for (auto& [_, t] : out.entries)
    for (float& v : t.values()) v = positive_zero(-v);
  return out;
}

DeltaVector add(const DeltaVector& a, const DeltaVector& b) {
  DeltaVector out = a;
  for (const auto& [name, tb] : b.entries) {
    auto it = out.entries.find(name);
    if (it == out.entries.end()) {
      out.entries.emplace(name, tb);
      continue;
    }
    if (it->second.meta().shape != tb.meta().shape)
      throw data_error("shape mismatch for '" + name + "': " + shape_string(it->second.meta().shape) + " vs " +
                       shape_string(tb.meta().shape));
    auto dst = it->second.values();
    const auto src = tb.values();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = positive_zero(dst[j] + src[j]);
  }
  if (a.base_id != b.base_id) out.base_id.clear();
  out.tuned_id.clear();
  out.trait.reset();
  return out;
}

void accumulate_scaled(std::span<float> acc, std::span<const float> delta, double alpha) {
  // alpha * delta is formed in double so each step rounds to F32 once; with
  // contraction disabled this is identical on every IEEE platform.
  for (std::size_t j = 0; j < acc.size(); ++j)
    acc[j] = static_cast<float>(static_cast<double>(acc[j]) + alpha * static_cast<double>(delta[j]));
}

Checkpoint apply(const Checkpoint& base, std::span<const WeightedDelta> weighted) {
  for (const auto& w : weighted) {
    check_finite(w.alpha);
    for (const auto& name : w.delta->names()) {
      if (!base.contains(name)) throw data_error("delta tensor '" + name + "' is missing from base " + base.id());
      if (w.delta->shape(name) != base.meta(name).shape)
        throw data_error("shape mismatch for '" + name + "': delta " + shape_string(w.delta->shape(name)) +
                         " vs base " + shape_string(base.meta(name).shape));
    }
  }
  std::vector<WeightedDelta> inputs(weighted.begin(), weighted.end());
  CheckpointWriter writer;
  writer.set_metadata(base.metadata());
  for (const auto& [name, meta] : base.tensors()) {
    const bool touched = std::any_of(inputs.begin(), inputs.end(), [&](const auto& w) { return w.delta->contains(name); });
    if (!touched || !is_float(meta.dtype)) {
      writer.add(name, meta.dtype, meta.shape, [base, meta] { return TensorData(meta, base.load_raw(meta.name)); });
      continue;
    }
    writer.add(name, meta.dtype, meta.shape, [base, meta, inputs] {
      TensorData out = base.load(meta.name);
      for (const auto& w : inputs) {
        if (!w.delta->contains(meta.name)) continue;
        const TensorData d = w.delta->load(meta.name);
        accumulate_scaled(out.values(), d.values(), w.alpha);
      }
      return out;
    });
  }
  return Checkpoint::from_bytes(writer.to_bytes(), "apply(" + base.id() + ")");
}

// ---------------------------------------------------------------------------
// persistence

void write_delta(const std::filesystem::path& path, const DeltaSource& source, std::optional<TraitLabel> trait,
                 const OutputDtypePolicy& policy, unsigned jobs) {
  DeltaVector header;
  header.base_id = source.base_id();
  header.tuned_id = source.tuned_id();
  header.trait = trait ? trait : source.trait();
  CheckpointWriter writer;
  writer.set_metadata(header.provenance());
  for (const auto& name : source.names())
    writer.add(name, policy.resolve(DType::F32), source.shape(name), [&source, name] { return source.load(name); });
  writer.write(path, jobs);
}

void write_delta(const std::filesystem::path& path, const DeltaVector& delta, const OutputDtypePolicy& policy) {
  write_delta(path, MemoryDelta(delta), delta.trait, policy);
}

DeltaVector load_delta(const std::filesystem::path& path) { return materialize(StoredDelta(Checkpoint::open(path))); }

}  // namespace traitforge
