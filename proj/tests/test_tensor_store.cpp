#include <doctest.h>

#include <bit>
#include <cstring>
#include <functional>
#include <fstream>
#include <random>
#include <thread>

#include "testing.hpp"
#include "traitforge/error.hpp"
#include "traitforge/tensor_store.hpp"

using namespace traitforge;
using namespace traitforge::testing;

namespace {

std::vector<std::byte> bytes_of(std::initializer_list<int> v) {
  std::vector<std::byte> out;
  for (int b : v) out.push_back(static_cast<std::byte>(b));
  return out;
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

RawTensor random_raw(std::mt19937_64& rng, const std::string& name) {
  static const char* dtypes[] = {"F32", "F16", "BF16", "F64", "I64", "I32", "U8", "BOOL"};
  const std::string dtype = dtypes[rng() % 8];
  Shape shape;
  const int rank = static_cast<int>(rng() % 3);
  for (int i = 0; i < rank; ++i) shape.push_back(rng() % 5);  // zero-sized dims included
  const std::size_t width = byte_width(*parse_dtype(dtype));
  std::vector<std::byte> bytes(element_count(shape) * width);
  for (auto& b : bytes) b = static_cast<std::byte>(rng() & 0xff);
  if (dtype == "BOOL")
    for (auto& b : bytes) b = static_cast<std::byte>(static_cast<unsigned>(b) & 1);
  return RawTensor{name, dtype, shape, bytes};
}

}  // namespace

TEST_CASE("open a minimal container") {
  const auto ckpt = Checkpoint::from_bytes(build_container({raw_f32("w", {2}, {1.0f, 2.0f})}), "m");
  CHECK(ckpt.names() == std::vector<std::string>{"w"});
  CHECK(ckpt.meta("w").dtype == DType::F32);
  CHECK(ckpt.meta("w").shape == Shape{2});
  CHECK(values_of(ckpt, "w") == std::vector<float>{1.0f, 2.0f});
}

TEST_CASE("names iterate in lexicographic order regardless of header order") {
  const auto ckpt = Checkpoint::from_bytes(
      build_container({raw_f32("z", {1}, {1}), raw_f32("a.b", {1}, {2}), raw_f32("a", {1}, {3})}), "m");
  CHECK(ckpt.names() == std::vector<std::string>{"a", "a.b", "z"});
  CHECK(values_of(ckpt, "a") == std::vector<float>{3});
}

TEST_CASE("shard index lists the sorted union of its shards") {
  TempDir dir;
  write_bytes(dir / "s1.safetensors", build_container({raw_f32("m.b", {1}, {2}), raw_f32("m.d", {2}, {4, 5})}));
  write_bytes(dir / "s2.safetensors", build_container({raw_f32("m.a", {1}, {1}), raw_f32("m.c", {1}, {3})}));
  {
    std::ofstream idx(dir / "model.safetensors.index.json");
    idx << R"({"metadata": {"total_size": 20}, "weight_map": {"m.b": "s1.safetensors", "m.d": "s1.safetensors",
              "m.a": "s2.safetensors", "m.c": "s2.safetensors"}})";
  }
  const auto ckpt = Checkpoint::open(dir / "model.safetensors.index.json");
  CHECK(ckpt.is_sharded());
  CHECK(ckpt.names() == std::vector<std::string>{"m.a", "m.b", "m.c", "m.d"});
  CHECK(values_of(ckpt, "m.d") == std::vector<float>{4, 5});
  CHECK(values_of(ckpt, "m.a") == std::vector<float>{1});
  CHECK(ckpt.metadata().at("total_size") == "20");

  SUBCASE("weight map disagreeing with a shard is rejected") {
    std::ofstream idx(dir / "bad.json");
    idx << R"({"weight_map": {"m.b": "s2.safetensors", "m.a": "s2.safetensors", "m.c": "s2.safetensors"}})";
    idx.close();
    CHECK_THROWS_AS(Checkpoint::open(dir / "bad.json"), Error);
  }
  SUBCASE("weight map naming an absent tensor is rejected") {
    std::ofstream idx(dir / "bad.json");
    idx << R"({"weight_map": {"m.a": "s2.safetensors", "m.c": "s2.safetensors", "m.zz": "s2.safetensors"}})";
    idx.close();
    CHECK_THROWS_AS(Checkpoint::open(dir / "bad.json"), Error);
  }
}

TEST_CASE("header validation") {
  SUBCASE("declared range disagrees with shape") {
    auto t = raw_f32("w", {3}, {1, 2});
    const auto msg = error_of([&] { Checkpoint::from_bytes(build_container({t}), "m"); });
    CHECK(msg.find("meta/payload length mismatch") != std::string::npos);
  }
  SUBCASE("duplicate name") {
    std::string header = R"({"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})";
    std::vector<std::byte> bytes(8);
    bytes[0] = static_cast<std::byte>(header.size());
    for (char c : header) bytes.push_back(static_cast<std::byte>(c));
    bytes.resize(bytes.size() + 8);
    const auto msg = error_of([&] { Checkpoint::from_bytes(bytes, "m"); });
    CHECK(msg.find("duplicate tensor name") != std::string::npos);
  }
  SUBCASE("overlapping ranges") {
    std::string header = R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})";
    std::vector<std::byte> bytes(8);
    bytes[0] = static_cast<std::byte>(header.size());
    for (char c : header) bytes.push_back(static_cast<std::byte>(c));
    bytes.resize(bytes.size() + 8);
    const auto msg = error_of([&] { Checkpoint::from_bytes(bytes, "m"); });
    CHECK(msg.find("overlapping byte ranges") != std::string::npos);
  }
  SUBCASE("truncated payload") {
    auto bytes = build_container({raw_f32("w", {4}, {1, 2, 3, 4})});
    bytes.resize(bytes.size() - 3);
    const auto msg = error_of([&] { Checkpoint::from_bytes(bytes, "m"); });
    CHECK(msg.find("truncated") != std::string::npos);
  }
  SUBCASE("header length beyond file") {
    auto bytes = build_container({raw_f32("w", {1}, {1})});
    bytes[5] = std::byte{1};
    CHECK(error_of([&] { Checkpoint::from_bytes(bytes, "m"); }).find("truncated") != std::string::npos);
    CHECK_THROWS_AS(Checkpoint::from_bytes(bytes_of({1, 2, 3}), "m"), Error);
  }
  SUBCASE("malformed json and unknown dtype") {
    std::string header = "{not json}     ";
    header.push_back(' ');
    std::vector<std::byte> bytes(8);
    bytes[0] = static_cast<std::byte>(header.size());
    for (char c : header) bytes.push_back(static_cast<std::byte>(c));
    CHECK(error_of([&] { Checkpoint::from_bytes(bytes, "m"); }).find("malformed header") != std::string::npos);

    RawTensor q{"q", "Q4_0", {2}, std::vector<std::byte>(2)};
    CHECK(error_of([&] { Checkpoint::from_bytes(build_container({q}), "m"); }).find("unsupported dtype") !=
          std::string::npos);
  }
  SUBCASE("gap between payloads") {
    std::string header = R"({"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})";
    std::vector<std::byte> bytes(8);
    bytes[0] = static_cast<std::byte>(header.size());
    for (char c : header) bytes.push_back(static_cast<std::byte>(c));
    bytes.resize(bytes.size() + 8);
    CHECK_THROWS_AS(Checkpoint::from_bytes(bytes, "m"), Error);
  }
}

TEST_CASE("load_tensor widens floats and carries other dtypes through") {
  RawTensor bf{"bf", "BF16", {2}, bytes_of({0x80, 0x3F, 0x49, 0x40})};
  RawTensor ids{"ids", "I64", {1}, bytes_of({7, 0, 0, 0, 0, 0, 0, 0x80})};
  const auto ckpt = Checkpoint::from_bytes(build_container({bf, ids}), "m");
  const TensorData b = load_tensor(ckpt, "bf");
  REQUIRE(b.is_arithmetic());
  CHECK(b.values()[0] == 1.0f);
  CHECK(b.values()[1] == 3.140625f);
  const TensorData i = load_tensor(ckpt, "ids");
  CHECK_FALSE(i.is_arithmetic());
  CHECK(std::vector<std::byte>(i.raw().begin(), i.raw().end()) == ids.bytes);
  CHECK_THROWS_AS(i.values(), Error);
  CHECK_THROWS_AS(load_tensor(ckpt, "missing"), Error);
  const TensorData again = load_tensor(ckpt, "bf");
  CHECK(bit_equal(again.values(), b.values()));
}

TEST_CASE("opening reads only the header") {
  TempDir dir;
  std::vector<float> big(1 << 20, 0.5f);
  const auto bytes = build_container({raw_f32("big", {big.size()}, big), raw_f32("small", {1}, {1})});
  write_bytes(dir / "c.safetensors", bytes);
  const auto ckpt = Checkpoint::open(dir / "c.safetensors");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), 8);
  CHECK(ckpt.bytes_read() == 8 + header_len);
  values_of(ckpt, "small");
  CHECK(ckpt.bytes_read() == 8 + header_len + 4);
}

TEST_CASE("concurrent loads agree") {
  std::mt19937_64 rng(3);
  const auto tensors = random_tensors(rng, {"a", "b", "c", "d"}, 4096);
  const auto ckpt = make_checkpoint(tensors);
  std::vector<std::thread> threads;
  std::atomic<int> mismatches{0};
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&] {
      for (int rep = 0; rep < 20; ++rep)
        for (const auto& [name, expected] : tensors)
          if (!bit_equal(values_of(ckpt, name), expected)) ++mismatches;
    });
  }
  for (auto& th : threads) th.join();
  CHECK(mismatches == 0);
}

TEST_CASE("writer emits canonical order and applies the dtype policy") {
  TempDir dir;
  write_checkpoint(dir / "o.safetensors",
                   {TensorData::from_floats("zeta", DType::F32, {1}, {3.140625f}),
                    TensorData::from_floats("alpha", DType::F32, {1}, {1.0f})},
                   OutputDtypePolicy::force(DType::BF16));
  const auto bytes = read_bytes(dir / "o.safetensors");
  const auto expected = build_container({RawTensor{"alpha", "BF16", {1}, bytes_of({0x80, 0x3F})},
                                         RawTensor{"zeta", "BF16", {1}, bytes_of({0x49, 0x40})}});
  CHECK(bytes == expected);
  CHECK(std::vector<std::byte>(bytes.end() - 2, bytes.end()) == bytes_of({0x49, 0x40}));

  CHECK_THROWS_AS(write_checkpoint(dir / "d.safetensors", {TensorData::from_floats("x", DType::F32, {1}, {1}),
                                                             TensorData::from_floats("x", DType::F32, {1}, {2})}),
                  Error);
  CHECK_FALSE(std::filesystem::exists(dir / "d.safetensors"));
}

TEST_CASE("forced dtype never touches carry-through tensors") {
  RawTensor ids{"ids", "I32", {2}, bytes_of({1, 0, 0, 0, 2, 0, 0, 0})};
  const auto src = Checkpoint::from_bytes(build_container({ids, raw_f32("w", {1}, {1.5f})}), "m");
  TempDir dir;
  copy_checkpoint(src, dir / "f16.safetensors", OutputDtypePolicy::force(DType::F16));
  const auto out = Checkpoint::open(dir / "f16.safetensors");
  CHECK(out.meta("ids").dtype == DType::I32);
  CHECK(out.load_raw("ids") == ids.bytes);
  CHECK(out.meta("w").dtype == DType::F16);
  CHECK(values_of(out, "w") == std::vector<float>{1.5f});
}

TEST_CASE("roundtrip is byte-identical for canonical containers of every dtype") {
  std::mt19937_64 rng(11);
  TempDir dir;
  for (int trial = 0; trial < 60; ++trial) {
    std::vector<RawTensor> tensors;
    const int count = 1 + static_cast<int>(rng() % 6);
    for (int i = 0; i < count; ++i) tensors.push_back(random_raw(rng, "t" + std::to_string(rng() % 1000) + "_" + std::to_string(i)));
    std::sort(tensors.begin(), tensors.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    const Metadata md = trial % 2 ? Metadata{{"format", "pt"}} : Metadata{};
    const auto original = build_container(tensors, md);
    write_bytes(dir / "in.safetensors", original);
    copy_checkpoint(Checkpoint::open(dir / "in.safetensors"), dir / "out.safetensors");
    REQUIRE(read_bytes(dir / "out.safetensors") == original);

    // load_tensor route for everything except F64, whose arithmetic view narrows
    CheckpointWriter w;
    w.set_metadata(md);
    const auto ck = Checkpoint::open(dir / "in.safetensors");
    for (const auto& name : ck.names()) {
      if (ck.meta(name).dtype == DType::F64)
        w.add(TensorData(ck.meta(name), ck.load_raw(name)));
      else
        w.add(ck.load(name));
    }
    REQUIRE(w.to_bytes() == original);
  }
}

TEST_CASE("non-canonical input re-serializes canonically and then stays fixed") {
  TempDir dir;
  write_bytes(dir / "in.safetensors", build_container({raw_f32("b", {1}, {2}), raw_f32("a", {2}, {1, 0})},
                                                      {{"k", "v"}}));
  copy_checkpoint(Checkpoint::open(dir / "in.safetensors"), dir / "c1.safetensors");
  copy_checkpoint(Checkpoint::open(dir / "c1.safetensors"), dir / "c2.safetensors");
  const auto c1 = read_bytes(dir / "c1.safetensors");
  CHECK(c1 == read_bytes(dir / "c2.safetensors"));
  CHECK(c1 == build_container({raw_f32("a", {2}, {1, 0}), raw_f32("b", {1}, {2})}, {{"k", "v"}}));
  CHECK(Checkpoint::open(dir / "c1.safetensors").metadata().at("k") == "v");
}

TEST_CASE("sharded roundtrip reproduces index and shards") {
  TempDir dir;
  std::filesystem::create_directories(dir / "src");
  write_bytes(dir / "src" / "a.safetensors", build_container({raw_f32("x.0", {2}, {1, 2})}));
  write_bytes(dir / "src" / "b.safetensors", build_container({raw_f32("x.1", {0}, {}), raw_f32("x.2", {1}, {3})}));
  ShardIndex index;
  index.metadata = {{"total_size", 12}};
  index.weight_map = {{"x.0", "a.safetensors"}, {"x.1", "b.safetensors"}, {"x.2", "b.safetensors"}};
  write_shard_index(dir / "src" / "index.json", index);

  copy_checkpoint(Checkpoint::open(dir / "src" / "index.json"), dir / "dst" / "index.json");
  for (const char* f : {"index.json", "a.safetensors", "b.safetensors"})
    CHECK(read_bytes(dir / "src" / f) == read_bytes(dir / "dst" / f));
}

TEST_CASE("output dtype policy parsing") {
  CHECK(OutputDtypePolicy::parse("preserve").preserves());
  CHECK(OutputDtypePolicy::parse("BF16").resolve(DType::F32) == DType::BF16);
  CHECK(OutputDtypePolicy::parse("f16").resolve(DType::I64) == DType::I64);
  CHECK(OutputDtypePolicy::parse("f32").str() == "f32");
  CHECK_THROWS_AS(OutputDtypePolicy::parse("int8"), Error);
  CHECK_THROWS_AS(OutputDtypePolicy::force(DType::U8), Error);
}
