#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "traitforge/dtype.hpp"

namespace traitforge {

using Shape = std::vector<std::uint64_t>;
using Metadata = std::map<std::string, std::string>;

// Throws on overflow.
std::uint64_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

struct TensorMeta {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  // [begin, end) into the payload region of the owning container.
  std::uint64_t begin = 0;
  std::uint64_t end = 0;

  std::uint64_t elements() const { return element_count(shape); }
  std::uint64_t byte_size() const { return end - begin; }
};

// Random-access byte provider behind a container. Reads are counted so callers
// can assert how much of a file an operation touched.
class ByteSource {
 public:
  virtual ~ByteSource() = default;

  virtual std::uint64_t size() const = 0;
  // Fills `out` from `offset`; throws on short reads.
  virtual void read(std::uint64_t offset, std::span<std::byte> out) const = 0;

  std::uint64_t bytes_read() const { return bytes_read_.load(std::memory_order_relaxed); }

 protected:
  void count(std::uint64_t n) const { bytes_read_.fetch_add(n, std::memory_order_relaxed); }

 private:
  mutable std::atomic<std::uint64_t> bytes_read_{0};
};

std::shared_ptr<ByteSource> open_file_source(const std::filesystem::path& path);
std::shared_ptr<ByteSource> make_memory_source(std::vector<std::byte> bytes);

// One tensor's payload: a widened F32 view for float dtypes, raw bytes otherwise.
class TensorData {
 public:
  TensorData(TensorMeta meta, std::vector<float> values);
  TensorData(TensorMeta meta, std::vector<std::byte> raw);

  static TensorData from_floats(std::string name, DType dtype, Shape shape, std::vector<float> values);

  const TensorMeta& meta() const { return meta_; }
  const std::string& name() const { return meta_.name; }
  bool is_arithmetic() const { return std::holds_alternative<std::vector<float>>(payload_); }

  std::span<const float> values() const;
  std::span<float> values();
  std::span<const std::byte> raw() const;

  // Payload encoded as `dtype`; raw tensors only encode to their own dtype.
  std::vector<std::byte> encode(DType dtype) const;

 private:
  TensorMeta meta_;
  std::variant<std::vector<float>, std::vector<std::byte>> payload_;
};

// weight_map layout used by sharded checkpoints on public model hubs.
struct ShardIndex {
  std::map<std::string, std::string> weight_map;
  nlohmann::json metadata;  // null when absent
};

// Immutable, lazily loaded view over one container file or a shard index.
// Copies share state; concurrent loads from multiple threads are safe.
class Checkpoint {
 public:
  static Checkpoint open(const std::filesystem::path& path);
  static Checkpoint from_source(std::shared_ptr<const ByteSource> source, std::string id);
  static Checkpoint from_bytes(std::vector<std::byte> bytes, std::string id);

  const std::string& id() const;
  // Lexicographic order.
  std::vector<std::string> names() const;
  const std::map<std::string, TensorMeta>& tensors() const;
  bool contains(const std::string& name) const;
  const TensorMeta& meta(const std::string& name) const;
  const Metadata& metadata() const;

  TensorData load(const std::string& name) const;
  std::vector<std::byte> load_raw(const std::string& name) const;

  bool is_sharded() const;
  const ShardIndex* shard_index() const;
  // Container files making up this checkpoint, in shard-file order.
  std::vector<Checkpoint> shards() const;
  std::uint64_t bytes_read() const;

  // Opaque; defined in tensor_store.cpp.
  struct Container;
  struct State;

 private:
  explicit Checkpoint(std::shared_ptr<const State> state);

  std::shared_ptr<const State> state_;
};

inline Checkpoint open_checkpoint(const std::filesystem::path& path) { return Checkpoint::open(path); }
inline TensorData load_tensor(const Checkpoint& ckpt, const std::string& name) { return ckpt.load(name); }

class OutputDtypePolicy {
 public:
  static OutputDtypePolicy preserve() { return OutputDtypePolicy(std::nullopt); }
  static OutputDtypePolicy force(DType dtype);

  // "preserve", "f32", "f16", "bf16" (case-insensitive).
  static OutputDtypePolicy parse(const std::string& text);
  std::string str() const;

  // Carry-through dtypes are never converted.
  DType resolve(DType source) const;
  bool preserves() const { return !forced_.has_value(); }

  bool operator==(const OutputDtypePolicy&) const = default;

 private:
  explicit OutputDtypePolicy(std::optional<DType> forced) : forced_(forced) {}
  std::optional<DType> forced_;
};

// Streams tensors into a container. Producers are invoked at write time in
// canonical (lexicographic) order, at most `jobs` at once, so peak memory is
// bounded by the largest `jobs` tensors rather than the checkpoint size.
class CheckpointWriter {
 public:
  using Producer = std::function<TensorData()>;

  void set_metadata(Metadata metadata) { metadata_ = std::move(metadata); }
  void add(std::string name, DType dtype, Shape shape, Producer produce);
  void add(TensorData tensor, const OutputDtypePolicy& policy = OutputDtypePolicy::preserve());
  bool contains(const std::string& name) const { return pending_.count(name) != 0; }
  std::size_t size() const { return pending_.size(); }

  void write(std::ostream& out, unsigned jobs = 1) const;
  // Atomic: the file appears under `path` only once fully written.
  void write(const std::filesystem::path& path, unsigned jobs = 1) const;
  std::vector<std::byte> to_bytes(unsigned jobs = 1) const;

 private:
  struct Pending {
    DType dtype;
    Shape shape;
    Producer produce;
  };
  std::map<std::string, Pending> pending_;
  Metadata metadata_;
};

void write_checkpoint(const std::filesystem::path& path, std::vector<TensorData> tensors,
                      const OutputDtypePolicy& policy = OutputDtypePolicy::preserve(),
                      const Metadata& metadata = {});

void write_shard_index(const std::filesystem::path& path, const ShardIndex& index);

// Canonical re-serialization. A sharded source written to a `.json` path
// reproduces every shard next to the index under its original file name.
void copy_checkpoint(const Checkpoint& source, const std::filesystem::path& path,
                     const OutputDtypePolicy& policy = OutputDtypePolicy::preserve(), unsigned jobs = 1);

}  // namespace traitforge
