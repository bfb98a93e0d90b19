#include <doctest.h>

#include <cmath>
#include <array>
#include <cstring>
#include <random>

#include "oracles.hpp"
#include "testing.hpp"
#include "traitforge/error.hpp"
#include "traitforge/merge.hpp"

using namespace traitforge;
using namespace traitforge::testing;

namespace {

std::vector<float> entry(const DeltaVector& d, const std::string& name) {
  const auto v = d.entries.at(name).values();
  return {v.begin(), v.end()};
}

std::vector<std::byte> as_bytes(std::string_view s) {
  std::vector<std::byte> out(s.size());
  std::memcpy(out.data(), s.data(), s.size());
  return out;
}

}  // namespace

TEST_CASE("parameter validation") {
  CHECK_NOTHROW((DareParams{0.0, 1}.validate()));
  CHECK_NOTHROW((DareParams{0.999, 1}.validate()));
  CHECK_THROWS_AS((DareParams{1.0, 1}.validate()), Error);
  CHECK_THROWS_AS((DareParams{-0.1, 1}.validate()), Error);
  CHECK_THROWS_AS((DareParams{std::nan(""), 1}.validate()), Error);
  CHECK_NOTHROW((TiesParams{1.0}.validate()));
  CHECK_THROWS_AS((TiesParams{0.0}.validate()), Error);
  CHECK_THROWS_AS((TiesParams{1.5}.validate()), Error);
  MergeMethod bad;
  bad.kind = MergeKind::Ties;
  CHECK_THROWS_AS(bad.validate(), Error);
  MergeMethod bad2 = MergeMethod::task_arithmetic();
  bad2.ties = TiesParams{0.5};
  CHECK_THROWS_AS(bad2.validate(), Error);
}

TEST_CASE("hash and stream agree with reference implementations") {
  CHECK(fnv1a64({}) == 14695981039346656037ull);
  CHECK(fnv1a64(as_bytes("a")) == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a64(as_bytes("foobar")) == 0x85944171f73967e8ull);
  CHECK(fnv1a64(as_bytes("layers.3.mlp")) == ref_fnv1a64({'l', 'a', 'y', 'e', 'r', 's', '.', '3', '.', 'm', 'l', 'p'}));

  // published first outputs of SplitMix64 seeded with 1234567
  SplitMix64 sm(1234567);
  CHECK(sm.next() == 6457827717110365317ull);
  CHECK(sm.next() == 3203168211198807973ull);

  const auto ref = ref_splitmix_stream(42, 100);
  SplitMix64 s(42);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    REQUIRE(s.next() == ref[i]);
    REQUIRE(SplitMix64::at(42, i) == ref[i]);
  }
}

TEST_CASE("DaRE examples") {
  std::mt19937_64 rng(5);
  const auto d = delta_from(random_tensors(rng, {"a", "b"}, 1000));
  const auto same = dare_sparsify(d, {0.0, 99});
  for (const auto& [name, e] : d.entries) CHECK(bit_equal(same.entries.at(name).values(), e.values()));

  const auto half = dare_sparsify(delta_from({{"w", std::vector<float>(64, 0.3f)}}), {0.5, 7});
  int kept = 0;
  for (float v : entry(half, "w")) {
    CHECK((v == 0.0f || v == 0.6f));
    kept += v != 0.0f;
  }
  CHECK(kept > 0);
  CHECK(kept < 64);
  CHECK_THROWS_AS(dare_sparsify(d, {1.0, 1}), Error);
}

TEST_CASE("DaRE matches the reference stream per tensor and vector index") {
  std::mt19937_64 rng(6);
  const auto t = random_tensors(rng, {"layers.0.w", "layers.1.w", "embed"}, 777);
  const auto d = delta_from(t);
  for (double p : {0.1, 0.5, 0.9}) {
    for (std::uint64_t index : {0ull, 1ull, 4ull}) {
      const std::uint64_t seed = 0xdeadbeefull + index;
      const auto out = dare_sparsify(d, {p, seed}, index);
      for (const auto& [name, values] : t)
        REQUIRE(bit_equal(entry(out, name), ref_dare(values, p, seed, index, name)));
    }
  }
  const auto a = dare_sparsify(d, {0.5, 1}, 0), b = dare_sparsify(d, {0.5, 1}, 1);
  CHECK_FALSE(bit_equal(entry(a, "embed"), entry(b, "embed")));
}

TEST_CASE("DaRE value and drop-count laws") {
  const std::size_t n = 1'000'000;
  std::mt19937_64 rng(8);
  std::vector<float> v(n);
  for (auto& x : v) x = random_grid_value(rng);
  for (double p : {0.5, 0.75}) {
    const auto out = dare_sparsify(delta_from({{"w", v}}), {p, 2024});
    const auto o = entry(out, "w");
    std::size_t dropped = 0;
    bool lawful = true;
    for (std::size_t j = 0; j < n; ++j) {
      if (o[j] == 0.0f && v[j] != 0.0f) {
        ++dropped;
      } else if (o[j] != static_cast<float>(v[j] / (1.0 - p))) {
        lawful = false;
      }
    }
    CHECK(lawful);
    const double frac = static_cast<double>(dropped) / n;
    CHECK(std::fabs(frac - p) <= 4.0 * std::sqrt(p * (1 - p) / n));
  }
}

TEST_CASE("DaRE is unbiased") {
  const std::vector<float> ones(100'000, 1.0f);
  double grand = 0.0;
  const int seeds = 200;
  for (int s = 0; s < seeds; ++s) {
    std::vector<float> v = ones;
    dare_sparsify_values(v, 0.5, dare_stream_seed(static_cast<std::uint64_t>(s), 0, "w"));
    double m = 0.0;
    for (float x : v) m += x;
    grand += m / v.size();
  }
  grand /= seeds;
  // sigma of the grand mean: sqrt(p/((1-p) n)) / sqrt(seeds)
  CHECK(std::fabs(grand - 1.0) <= 4.0 * std::sqrt(1.0 / 100'000) / std::sqrt(seeds));
}

TEST_CASE("TIES keep count") {
  CHECK(ties_keep_count(1.0, 64) == 64);
  CHECK(ties_keep_count(0.7, 10) == 7);
  CHECK(ties_keep_count(0.7, 100) == 70);
  CHECK(ties_keep_count(0.3, 10) == 3);
  CHECK(ties_keep_count(2.0 / 3.0, 3) == 2);
  CHECK(ties_keep_count(0.01, 3) == 1);
  for (std::size_t n = 1; n <= 64; ++n)
    for (long num : {3L, 7L, 10L}) CHECK(ties_keep_count(num / 10.0, n) == static_cast<std::size_t>((num * n + 9) / 10));
}

TEST_CASE("TIES worked example") {
  const std::vector<std::vector<double>> scaled{{0.3, -0.2, 0.1}, {-0.4, 0.5, 0.05}};
  CHECK(ties_combine(scaled, 2.0 / 3.0) == std::vector<double>{-0.4, 0.5, 0.0});

  const auto base = make_checkpoint({{"w", {0, 0, 0}}});
  const std::vector<WeightedDelta> ws{weighted(delta_from({{"w", {0.3f, -0.2f, 0.1f}}}), 1.0),
                                      weighted(delta_from({{"w", {-0.4f, 0.5f, 0.05f}}}), 1.0)};
  CHECK(values_of(ties_merge(base, ws, {2.0 / 3.0}), "w") == std::vector<float>{-0.4f, 0.5f, 0.0f});
}

TEST_CASE("TIES degenerate cases") {
  std::mt19937_64 rng(12);
  const auto b = random_tensors(rng, {"a", "b"}, 50);
  const auto dt = random_tensors(rng, {"a", "b"}, 50, 0.1f);
  const auto base = make_checkpoint(b);

  const std::vector<WeightedDelta> single{weighted(delta_from(dt), 0.7)};
  const auto t = ties_merge(base, single, {1.0});
  const auto a = traitforge::apply(base, single);
  for (const auto& name : base.names()) CHECK(bit_equal(values_of(t, name), values_of(a, name)));

  const std::vector<WeightedDelta> copies(4, weighted(delta_from(dt), 1.0));
  const auto c = ties_merge(base, copies, {1.0});
  const std::vector<WeightedDelta> once{weighted(delta_from(dt), 1.0)};
  const auto o = traitforge::apply(base, once);
  for (const auto& name : base.names()) CHECK(bit_equal(values_of(c, name), values_of(o, name)));

  CHECK_THROWS_AS(ties_merge(base, {}, {1.0}), Error);
}

TEST_CASE("TIES sign and trim laws") {
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<int> count(2, 5), size(1, 64);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = size(rng);
    const double k = std::array{0.3, 0.5, 0.7, 1.0}[rng() % 4];
    const std::size_t keep = ties_keep_count(k, n);
    std::vector<std::vector<double>> scaled(count(rng), std::vector<double>(n));
    for (auto& v : scaled)
      for (auto& x : v) x = random_grid_value(rng);

    // trimming each vector on its own isolates the trim step
    std::vector<std::vector<double>> trimmed;
    for (const auto& v : scaled) {
      const std::vector<std::vector<double>> one{v};
      trimmed.push_back(ties_combine(one, k));
      std::size_t survivors = 0;
      double min_kept = INFINITY, max_dropped = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (trimmed.back()[j] != 0.0) {
          ++survivors;
          REQUIRE(trimmed.back()[j] == v[j]);
          min_kept = std::min(min_kept, std::fabs(v[j]));
        } else {
          max_dropped = std::max(max_dropped, std::fabs(v[j]));
        }
      }
      REQUIRE(survivors == keep);
      REQUIRE(min_kept >= max_dropped);
    }

    const auto merged = ties_combine(scaled, k);
    for (std::size_t j = 0; j < n; ++j) {
      double total = 0.0;
      for (const auto& t : trimmed) total += t[j];
      if (total == 0.0) REQUIRE(merged[j] == 0.0);
      if (merged[j] != 0.0) REQUIRE((merged[j] > 0) == (total > 0));
    }
  }
}

TEST_CASE("TIES matches the reference on 1000 random instances") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> count(1, 5), size(1, 64);
  const std::array<double, 3> alphas{-1.0, 0.4, 1.0};
  const std::array<long, 4> keeps{3, 5, 7, 10};
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = size(rng);
    std::vector<float> base(n);
    for (auto& x : base) x = random_grid_value(rng);
    std::vector<RefInput> inputs(count(rng));
    std::vector<WeightedDelta> ws;
    for (auto& in : inputs) {
      in.values.resize(n);
      for (auto& x : in.values) x = (rng() % 8 == 0) ? 0.0f : random_grid_value(rng);
      // magnitude ties exercise the lower-index rule
      if (n > 3 && rng() % 4 == 0) in.values[1] = in.values[3] = std::fabs(in.values[2]);
      in.alpha = alphas[rng() % 3];
      ws.push_back(weighted(delta_from({{"w", in.values}}), in.alpha));
    }
    const long keep = keeps[rng() % keeps.size()];
    const auto out = ties_merge(make_checkpoint({{"w", base}}), ws, {keep / 10.0});
    REQUIRE(bit_equal(values_of(out, "w"), ref_ties_merge(base, inputs, keep, 10)));
  }
}

TEST_CASE("five deltas at 0.4 match the elementwise oracle") {
  std::mt19937_64 rng(19);
  const std::vector<std::string> names{"l.0", "l.1", "l.2"};
  const auto b = random_tensors(rng, names, 300);
  std::vector<FloatTensors> ds;
  std::vector<WeightedDelta> ws;
  for (int i = 0; i < 5; ++i) {
    ds.push_back(random_tensors(rng, names, 300, 0.02f));
    ws.push_back(weighted(delta_from(ds.back()), 0.4));
  }
  const auto out = merge(make_checkpoint(b), ws, MergeMethod::task_arithmetic());
  for (const auto& name : names) {
    std::vector<RefInput> inputs;
    for (const auto& d : ds) inputs.push_back({d.at(name), 0.4});
    CHECK(bit_equal(values_of(out, name), ref_task_arithmetic(b.at(name), inputs)));
  }
}

TEST_CASE("DaRE compositions match sequential references") {
  std::mt19937_64 rng(23);
  const std::vector<std::string> names{"blk.0", "blk.1"};
  for (int trial = 0; trial < 20; ++trial) {
    const auto b = random_tensors(rng, names, 64);
    std::vector<FloatTensors> ds;
    std::vector<WeightedDelta> ws;
    std::vector<double> alphas;
    for (int i = 0; i < 3; ++i) {
      ds.push_back(random_tensors(rng, names, 64, 0.05f));
      alphas.push_back(i == 1 ? -1.0 : 0.4);
      ws.push_back(weighted(delta_from(ds.back()), alphas.back()));
    }
    const std::uint64_t seed = rng();
    const auto ties = merge(make_checkpoint(b), ws, MergeMethod::ties_merging({0.7}, DareParams{0.5, seed}));
    const auto ta = merge(make_checkpoint(b), ws, MergeMethod::task_arithmetic(DareParams{0.5, seed}));
    for (const auto& name : names) {
      std::vector<RefInput> inputs;
      for (std::size_t i = 0; i < ds.size(); ++i) inputs.push_back({ref_dare(ds[i].at(name), 0.5, seed, i, name), alphas[i]});
      REQUIRE(bit_equal(values_of(ties, name), ref_ties_merge(b.at(name), inputs, 7, 10)));
      REQUIRE(bit_equal(values_of(ta, name), ref_task_arithmetic(b.at(name), inputs)));
    }
  }
}

TEST_CASE("merged bytes do not depend on parallelism") {
  std::mt19937_64 rng(29);
  std::vector<std::string> names;
  for (int i = 0; i < 24; ++i) names.push_back("layers." + std::to_string(i) + ".w");
  const auto base = make_checkpoint(random_tensors(rng, names, 2000));
  std::vector<WeightedDelta> ws;
  for (int i = 0; i < 3; ++i) ws.push_back(weighted(delta_from(random_tensors(rng, names, 2000, 0.01f)), 0.5));
  TempDir dir;
  for (const auto& method : {MergeMethod::task_arithmetic(DareParams{0.5, 77}),
                             MergeMethod::ties_merging({0.7}, DareParams{0.5, 77})}) {
    std::vector<std::vector<std::byte>> outputs;
    for (unsigned jobs : {1u, 3u, 8u}) {
      MergeOptions opts;
      opts.method = method;
      opts.jobs = jobs;
      const auto path = dir / ("m" + std::to_string(jobs) + ".safetensors");
      merge_to_file(base, ws, opts, path);
      outputs.push_back(read_bytes(path));
    }
    CHECK(outputs[0] == outputs[1]);
    CHECK(outputs[0] == outputs[2]);
  }
}

TEST_CASE("merge engine provenance, filter and passthrough") {
  TempDir dir;
  const auto base = make_checkpoint({{"language.a", {1, 2}}, {"vision_encoder.v", {5}}}, "base");
  const auto extra = make_checkpoint({{"mm_projector.p", {9, 9}}}, "vlm");
  const std::vector<WeightedDelta> ws{
      weighted(delta_from({{"language.a", {1, 1}}, {"vision_encoder.v", {1}}}), 1.0)};
  MergeOptions opts;
  opts.filter = {{"language."}, {}};
  opts.passthrough = {extra};
  opts.metadata = {{"note", "x"}};
  const auto report = merge_to_file(base, ws, opts, dir / "out.safetensors");
  const auto out = Checkpoint::open(dir / "out.safetensors");
  CHECK(out.names() == std::vector<std::string>{"language.a", "mm_projector.p", "vision_encoder.v"});
  CHECK(values_of(out, "language.a") == std::vector<float>{2, 3});
  CHECK(out.load_raw("vision_encoder.v") == base.load_raw("vision_encoder.v"));
  CHECK(out.load_raw("mm_projector.p") == extra.load_raw("mm_projector.p"));
  CHECK(out.metadata().at("note") == "x");
  CHECK(report.count(Provenance::Merged) == 1);
  CHECK(report.count(Provenance::BasePassthrough) == 1);
  CHECK(report.count(Provenance::ExternalPassthrough) == 1);
  for (const auto& t : report.tensors)
    if (t.name == "mm_projector.p") CHECK(t.source == "vlm");

  SUBCASE("a passthrough may not shadow a merged base tensor") {
    MergeOptions clash = opts;
    clash.passthrough = {make_checkpoint({{"language.a", {0, 0}}}, "other")};
    CHECK_THROWS_AS(merge_to_file(base, ws, clash, dir / "clash.safetensors"), Error);
  }

  SUBCASE("inconsistent inputs are reported before any work") {
    const std::vector<WeightedDelta> bad{weighted(delta_from({{"language.a", {1, 1, 1}}}), 1.0)};
    const auto errors = check_merge_inputs(base, bad, opts);
    REQUIRE(errors.size() == 1);
    CHECK(errors[0].find("language.a") != std::string::npos);
    CHECK_THROWS_AS(merge_to_file(base, bad, opts, dir / "bad.safetensors"), Error);
    CHECK_FALSE(std::filesystem::exists(dir / "bad.safetensors"));
  }
}

TEST_CASE("output dtype policy applies to merged tensors") {
  TempDir dir;
  const auto base = make_checkpoint({{"w", {1, 1}}});
  const std::vector<WeightedDelta> ws{weighted(delta_from({{"w", {0.5f, -1.5f}}}), 1.0)};
  MergeOptions opts;
  opts.output_dtype = OutputDtypePolicy::force(DType::BF16);
  merge_to_file(base, ws, opts, dir / "o.safetensors");
  const auto out = Checkpoint::open(dir / "o.safetensors");
  CHECK(out.meta("w").dtype == DType::BF16);
  CHECK(values_of(out, "w") == std::vector<float>{1.5f, -0.5f});
}
