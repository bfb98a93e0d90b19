#include "traitforge/merge.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>

#include "traitforge/error.hpp"

namespace traitforge {

void DareParams::validate() const {
  if (!(drop_rate >= 0.0 && drop_rate < 1.0))
    throw data_error("DaRE drop rate must lie in [0, 1), got " + std::to_string(drop_rate));
}

void TiesParams::validate() const {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
    throw data_error("TIES keep fraction must lie in (0, 1], got " + std::to_string(keep_fraction));
}

MergeMethod MergeMethod::task_arithmetic(std::optional<DareParams> dare) {
  return MergeMethod{MergeKind::TaskArithmetic, dare, std::nullopt};
}

MergeMethod MergeMethod::ties_merging(TiesParams ties, std::optional<DareParams> dare) {
  return MergeMethod{MergeKind::Ties, dare, ties};
}

void MergeMethod::validate() const {
  if (kind == MergeKind::Ties && !ties) throw data_error("TIES merging requires ties parameters");
  if (kind != MergeKind::Ties && ties) throw data_error("ties parameters given for a non-TIES merge");
  if (ties) ties->validate();
  if (dare) dare->validate();
}

std::string_view to_string(MergeKind kind) { return kind == MergeKind::Ties ? "ties" : "task_arithmetic"; }

std::string_view to_string(Provenance provenance) {
  switch (provenance) {
    case Provenance::Merged: return "merged";
    case Provenance::BasePassthrough: return "base-passthrough";
    case Provenance::ExternalPassthrough: return "external-passthrough";
  }
  return "?";
}

std::size_t MergeReport::count(Provenance provenance) const {
  return static_cast<std::size_t>(
      std::count_if(tensors.begin(), tensors.end(), [&](const auto& t) { return t.provenance == provenance; }));
}

// ---------------------------------------------------------------------------
// DaRE

std::uint64_t fnv1a64(std::span<const std::byte> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t dare_stream_seed(std::uint64_t master_seed, std::uint64_t vector_index, std::string_view tensor_name) {
  std::vector<std::byte> buf(8 + tensor_name.size());
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<std::byte>((vector_index >> (8 * i)) & 0xff);
  std::memcpy(buf.data() + 8, tensor_name.data(), tensor_name.size());
  return master_seed ^ fnv1a64(buf);
}

void dare_sparsify_values(std::span<float> values, double drop_rate, std::uint64_t stream_seed) {
  DareParams{drop_rate, 0}.validate();
  if (drop_rate == 0.0) return;
  const double keep = 1.0 - drop_rate;
  SplitMix64 rng(stream_seed);
  for (float& v : values) {
    const double u = rng.next_unit();
    v = u < drop_rate ? 0.0f : static_cast<float>(static_cast<double>(v) / keep);
  }
}

DeltaVector dare_sparsify(const DeltaVector& delta, const DareParams& params, std::uint64_t vector_index) {
  params.validate();
  DeltaVector out = delta;
  for (auto& [name, t] : out.entries)
    dare_sparsify_values(t.values(), params.drop_rate, dare_stream_seed(params.seed, vector_index, name));
  return out;
}

// ---------------------------------------------------------------------------
// TIES

std::size_t ties_keep_count(double keep_fraction, std::size_t n) {
  TiesParams{keep_fraction}.validate();
  if (n == 0) return 0;
  const double x = keep_fraction * static_cast<double>(n);
  const double nearest = std::round(x);
  const double k = std::abs(x - nearest) <= 1e-9 * std::max(1.0, x) ? nearest : std::ceil(x);
  return std::clamp<std::size_t>(static_cast<std::size_t>(k), 1, n);
}

std::vector<double> ties_combine(std::span<const std::vector<double>> scaled, double keep_fraction) {
  if (scaled.empty()) throw data_error("TIES merge needs at least one delta");
  const std::size_t n = scaled.front().size();
  for (const auto& v : scaled)
    if (v.size() != n) throw data_error("TIES merge over tensors of different sizes");
  const std::size_t keep = ties_keep_count(keep_fraction, n);

  std::vector<std::vector<double>> trimmed(scaled.begin(), scaled.end());
  if (keep < n) {
    std::vector<std::size_t> order(n);
    for (auto& v : trimmed) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      // larger magnitude first, lower index wins ties
      auto before = [&v](std::size_t a, std::size_t b) {
        const double ma = std::abs(v[a]);
        const double mb = std::abs(v[b]);
        return ma > mb || (ma == mb && a < b);
      };
      std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), before);
      for (std::size_t i = keep; i < n; ++i) v[order[i]] = 0.0;
    }
  }

  std::vector<double> merged(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double total = 0.0;
    for (const auto& v : trimmed) total += v[j];
    if (total == 0.0) continue;
    const bool positive = total > 0.0;
    double sum = 0.0;
    std::size_t agreeing = 0;
    for (const auto& v : trimmed) {
      if ((positive && v[j] > 0.0) || (!positive && v[j] < 0.0)) {
        sum += v[j];
        ++agreeing;
      }
    }
    if (agreeing) merged[j] = sum / static_cast<double>(agreeing);
  }
  return merged;
}

// ---------------------------------------------------------------------------
// merge engine

namespace {

struct PassthroughIndex {
  std::map<std::string, std::size_t> owner;
  std::vector<std::string> collisions;
};

PassthroughIndex index_passthrough(const std::vector<Checkpoint>& sources) {
  PassthroughIndex idx;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    for (const auto& name : sources[s].names()) {
      auto [it, inserted] = idx.owner.emplace(name, s);
      if (!inserted)
        idx.collisions.push_back("passthrough name collision: '" + name + "' appears in both " +
                                 sources[it->second].id() + " and " + sources[s].id());
    }
  }
  return idx;
}

TensorData merge_tensor(const Checkpoint& base, const TensorMeta& meta, const std::vector<WeightedDelta>& inputs,
                        const MergeMethod& method) {
  TensorData out = base.load(meta.name);
  std::vector<std::vector<double>> scaled;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& w = inputs[i];
    if (!w.delta->contains(meta.name)) continue;
    const TensorData d = w.delta->load(meta.name);
    std::vector<float> values(d.values().begin(), d.values().end());
    if (method.dare)
      dare_sparsify_values(values, method.dare->drop_rate, dare_stream_seed(method.dare->seed, i, meta.name));
    if (method.kind == MergeKind::TaskArithmetic) {
      accumulate_scaled(out.values(), values, w.alpha);
    } else {
      std::vector<double> s(values.size());
      for (std::size_t j = 0; j < s.size(); ++j) s[j] = w.alpha * static_cast<double>(values[j]);
      scaled.push_back(std::move(s));
    }
  }
  if (method.kind == MergeKind::Ties) {
    const auto merged = ties_combine(scaled, method.ties->keep_fraction);
    auto acc = out.values();
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] = static_cast<float>(static_cast<double>(acc[j]) + merged[j]);
  }
  return out;
}

}  // namespace

std::vector<std::string> check_merge_inputs(const Checkpoint& base, std::span<const WeightedDelta> weighted,
                                            const MergeOptions& options) {
  std::vector<std::string> errors;
  try {
    options.method.validate();
  } catch (const Error& e) {
    errors.emplace_back(e.what());
  }
  if (options.method.kind == MergeKind::Ties && weighted.empty()) errors.emplace_back("TIES merge needs at least one delta");
  for (std::size_t i = 0; i < weighted.size(); ++i) {
    const auto& w = weighted[i];
    if (!std::isfinite(w.alpha)) errors.push_back("input " + std::to_string(i) + ": scaling coefficient must be finite");
    for (const auto& name : w.delta->names()) {
      if (!options.filter.matches(name)) continue;
      if (!base.contains(name)) {
        errors.push_back("delta tensor '" + name + "' (input " + std::to_string(i) + ") is missing from base " +
                         base.id());
        continue;
      }
      const TensorMeta& bm = base.meta(name);
      if (!is_float(bm.dtype)) {
        errors.push_back("delta tensor '" + name + "' targets non-float base tensor");
        continue;
      }
      const Shape ds = w.delta->shape(name);
      if (ds != bm.shape)
        errors.push_back("shape mismatch for '" + name + "': delta " + shape_string(ds) + " vs base " +
                         shape_string(bm.shape));
    }
  }
  const auto pidx = index_passthrough(options.passthrough);
  errors.insert(errors.end(), pidx.collisions.begin(), pidx.collisions.end());
  for (const auto& [name, s] : pidx.owner) {
    if (base.contains(name) && options.filter.matches(name))
      errors.push_back("tensor '" + name + "' is in both base and passthrough " + options.passthrough[s].id() +
                       "; exclude it from base with the filter");
  }
  return errors;
}

MergeReport plan_merge(const Checkpoint& base, std::span<const WeightedDelta> weighted, const MergeOptions& options,
                       CheckpointWriter& writer) {
  const auto errors = check_merge_inputs(base, weighted, options);
  if (!errors.empty()) throw data_error(errors.front());

  const std::vector<WeightedDelta> inputs(weighted.begin(), weighted.end());
  const auto pidx = index_passthrough(options.passthrough);
  const MergeMethod method = options.method;
  MergeReport report;
  writer.set_metadata(options.metadata);

  auto copy_raw = [&writer, &report](const Checkpoint& src, const TensorMeta& meta, Provenance prov) {
    writer.add(meta.name, meta.dtype, meta.shape, [src, meta] { return TensorData(meta, src.load_raw(meta.name)); });
    report.tensors.push_back({meta.name, prov, meta.elements(), src.id()});
  };

  for (const auto& [name, meta] : base.tensors()) {
    if (pidx.owner.count(name)) continue;  // filter excludes it; the passthrough copy wins
    const bool touched = options.filter.matches(name) && is_float(meta.dtype) &&
                         std::any_of(inputs.begin(), inputs.end(), [&](const auto& w) { return w.delta->contains(name); });
    if (!touched) {
      copy_raw(base, meta, Provenance::BasePassthrough);
      continue;
    }
    writer.add(name, options.output_dtype.resolve(meta.dtype), meta.shape,
               [base, meta, inputs, method] { return merge_tensor(base, meta, inputs, method); });
    report.tensors.push_back({name, Provenance::Merged, meta.elements(), ""});
  }
  for (const auto& [name, s] : pidx.owner)
    copy_raw(options.passthrough[s], options.passthrough[s].meta(name), Provenance::ExternalPassthrough);

  std::sort(report.tensors.begin(), report.tensors.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  return report;
}

MergeReport merge_to_file(const Checkpoint& base, std::span<const WeightedDelta> weighted, const MergeOptions& options,
                          const std::filesystem::path& output) {
  const auto start = std::chrono::steady_clock::now();
  CheckpointWriter writer;
  MergeReport report = plan_merge(base, weighted, options, writer);
  writer.write(output, options.jobs);
  report.output = output.string();
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

Checkpoint merge(const Checkpoint& base, std::span<const WeightedDelta> weighted, const MergeMethod& method,
                 unsigned jobs) {
  MergeOptions options;
  options.method = method;
  options.metadata = base.metadata();
  CheckpointWriter writer;
  plan_merge(base, weighted, options, writer);
  return Checkpoint::from_bytes(writer.to_bytes(jobs), "merge(" + base.id() + ")");
}

Checkpoint ties_merge(const Checkpoint& base, std::span<const WeightedDelta> weighted, const TiesParams& params) {
  return merge(base, weighted, MergeMethod::ties_merging(params));
}

}  // namespace traitforge
