#include "traitforge/tensor_store.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <future>
#include <set>
#include <sstream>
#include <unordered_map>

#include "traitforge/error.hpp"

namespace traitforge {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t element_count(const Shape& shape) {
  std::uint64_t n = 1;
  for (std::uint64_t d : shape) {
    if (d != 0 && n > UINT64_MAX / d) throw data_error("shape element count overflows");
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

// ---------------------------------------------------------------------------
// byte sources

namespace {

class FileSource final : public ByteSource {
 public:
  explicit FileSource(const fs::path& path) : path_(path.string()) {
    fd_ = ::open(path_.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd_ < 0) throw io_error("cannot open " + path_ + ": " + std::strerror(errno));
    struct stat st {};
    if (::fstat(fd_, &st) != 0) {
      ::close(fd_);
      throw io_error("cannot stat " + path_ + ": " + std::strerror(errno));
    }
    size_ = static_cast<std::uint64_t>(st.st_size);
  }
  ~FileSource() override { ::close(fd_); }
  FileSource(const FileSource&) = delete;
  FileSource& operator=(const FileSource&) = delete;

  std::uint64_t size() const override { return size_; }

  void read(std::uint64_t offset, std::span<std::byte> out) const override {
    if (offset > size_ || out.size() > size_ - offset) throw data_error("truncated file: " + path_);
    std::size_t done = 0;
    while (done < out.size()) {
      const ssize_t n = ::pread(fd_, out.data() + done, out.size() - done, static_cast<off_t>(offset + done));
      if (n < 0) {
        if (errno == EINTR) continue;
        throw io_error("read failed on " + path_ + ": " + std::strerror(errno));
      }
      if (n == 0) throw data_error("truncated file: " + path_);
      done += static_cast<std::size_t>(n);
    }
    count(out.size());
  }

 private:
  std::string path_;
  int fd_ = -1;
  std::uint64_t size_ = 0;
};

class MemorySource final : public ByteSource {
 public:
  explicit MemorySource(std::vector<std::byte> bytes) : bytes_(std::move(bytes)) {}

  std::uint64_t size() const override { return bytes_.size(); }

  void read(std::uint64_t offset, std::span<std::byte> out) const override {
    if (offset > bytes_.size() || out.size() > bytes_.size() - offset) throw data_error("truncated buffer");
    std::copy_n(bytes_.begin() + static_cast<std::ptrdiff_t>(offset), out.size(), out.begin());
    count(out.size());
  }

 private:
  std::vector<std::byte> bytes_;
};

}  // namespace

std::shared_ptr<ByteSource> open_file_source(const fs::path& path) { return std::make_shared<FileSource>(path); }

std::shared_ptr<ByteSource> make_memory_source(std::vector<std::byte> bytes) {
  return std::make_shared<MemorySource>(std::move(bytes));
}

// ---------------------------------------------------------------------------
// TensorData

TensorData::TensorData(TensorMeta meta, std::vector<float> values) : meta_(std::move(meta)), payload_(std::move(values)) {
  if (!is_float(meta_.dtype)) throw data_error("tensor " + meta_.name + ": arithmetic view requires a float dtype");
  if (std::get<0>(payload_).size() != meta_.elements())
    throw data_error("tensor " + meta_.name + ": " + std::to_string(std::get<0>(payload_).size()) +
                     " values for shape " + shape_string(meta_.shape));
}

TensorData::TensorData(TensorMeta meta, std::vector<std::byte> raw) : meta_(std::move(meta)), payload_(std::move(raw)) {
  if (std::get<1>(payload_).size() != meta_.elements() * byte_width(meta_.dtype))
    throw data_error("tensor " + meta_.name + ": meta/payload length mismatch");
}

TensorData TensorData::from_floats(std::string name, DType dtype, Shape shape, std::vector<float> values) {
  TensorMeta meta{std::move(name), dtype, std::move(shape), 0, 0};
  meta.end = meta.elements() * byte_width(dtype);
  return TensorData(std::move(meta), std::move(values));
}

std::span<const float> TensorData::values() const {
  if (!is_arithmetic()) throw data_error("tensor " + meta_.name + " has no arithmetic view");
  return std::get<0>(payload_);
}

std::span<float> TensorData::values() {
  if (!is_arithmetic()) throw data_error("tensor " + meta_.name + " has no arithmetic view");
  return std::get<0>(payload_);
}

std::span<const std::byte> TensorData::raw() const {
  if (is_arithmetic()) throw data_error("tensor " + meta_.name + " has no raw view");
  return std::get<1>(payload_);
}

std::vector<std::byte> TensorData::encode(DType dtype) const {
  if (is_arithmetic()) return encode_floats(dtype, std::get<0>(payload_));
  const auto& raw = std::get<1>(payload_);
  if (dtype == meta_.dtype) return raw;
  if (!is_float(meta_.dtype) || !is_float(dtype))
    throw data_error("tensor " + meta_.name + ": cannot convert " + std::string(to_string(meta_.dtype)) + " to " +
                     std::string(to_string(dtype)));
  std::vector<float> tmp(meta_.elements());
  decode_floats(meta_.dtype, raw, tmp);
  return encode_floats(dtype, tmp);
}

// ---------------------------------------------------------------------------
// Checkpoint

struct Checkpoint::Container {
  std::string id;
  std::string file;  // shard file name as listed in an index, else empty
  std::shared_ptr<const ByteSource> source;
  std::uint64_t data_start = 0;
  std::map<std::string, TensorMeta> tensors;
  Metadata metadata;
};

struct Checkpoint::State {
  std::string id;
  std::vector<std::shared_ptr<const Container>> containers;
  std::map<std::string, TensorMeta> tensors;
  std::unordered_map<std::string, std::size_t> owner;
  Metadata metadata;
  std::optional<ShardIndex> index;
};

namespace {

constexpr std::uint64_t kMaxHeaderBytes = 100ull << 20;

std::uint64_t read_u64(const ByteSource& src, std::uint64_t offset) {
  std::byte buf[8];
  src.read(offset, buf);
  std::uint64_t v;
  std::memcpy(&v, buf, 8);
  return v;
}

std::uint64_t json_uint(const json& v, const std::string& what) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
  throw data_error("malformed header: " + what + " must be a non-negative integer");
}

json parse_unique_object(const std::string& text, const std::string& id) {
  std::set<std::string> seen;
  std::string duplicate;
  auto cb = [&](int depth, json::parse_event_t event, json& parsed) {
    if (event == json::parse_event_t::key && depth == 1) {
      auto key = parsed.get<std::string>();
      if (!seen.insert(key).second && duplicate.empty()) duplicate = key;
    }
    return true;
  };
  json doc;
  try {
    doc = json::parse(text, cb);
  } catch (const json::exception& e) {
    throw data_error("malformed header in " + id + ": " + e.what());
  }
  if (!duplicate.empty()) throw data_error("duplicate tensor name '" + duplicate + "' in " + id);
  if (!doc.is_object()) throw data_error("malformed header in " + id + ": not a JSON object");
  return doc;
}

std::shared_ptr<Checkpoint::Container> parse_container(std::shared_ptr<const ByteSource> source, std::string id) {
  auto c = std::make_shared<Checkpoint::Container>();
  c->id = std::move(id);
  const std::uint64_t file_size = source->size();
  if (file_size < 8) throw data_error("truncated file: " + c->id + " is shorter than the header length field");
  const std::uint64_t header_len = read_u64(*source, 0);
  if (header_len > file_size - 8) throw data_error("truncated file: header of " + c->id + " exceeds file size");
  if (header_len > kMaxHeaderBytes) throw data_error("malformed header: " + c->id + " header is implausibly large");
  std::string text(header_len, '\0');
  source->read(8, std::as_writable_bytes(std::span(text)));

  const json doc = parse_unique_object(text, c->id);
  const std::uint64_t payload_size = file_size - 8 - header_len;

  for (const auto& [key, value] : doc.items()) {
    if (key == "__metadata__") {
      if (!value.is_object()) throw data_error("malformed header: __metadata__ must be an object");
      for (const auto& [mk, mv] : value.items()) {
        if (!mv.is_string()) throw data_error("malformed header: __metadata__ values must be strings");
        c->metadata[mk] = mv.get<std::string>();
      }
      continue;
    }
    if (!value.is_object()) throw data_error("malformed header: entry '" + key + "' is not an object");
    TensorMeta meta;
    meta.name = key;
    const auto dt = value.find("dtype");
    const auto sh = value.find("shape");
    const auto off = value.find("data_offsets");
    if (dt == value.end() || sh == value.end() || off == value.end())
      throw data_error("malformed header: entry '" + key + "' lacks dtype/shape/data_offsets");
    if (!dt->is_string()) throw data_error("malformed header: dtype of '" + key + "' is not a string");
    const auto dtype = parse_dtype(dt->get<std::string>());
    if (!dtype) throw data_error("malformed header: unsupported dtype '" + dt->get<std::string>() + "' for '" + key + "'");
    meta.dtype = *dtype;
    if (!sh->is_array()) throw data_error("malformed header: shape of '" + key + "' is not an array");
    for (const auto& d : *sh) meta.shape.push_back(json_uint(d, "shape of '" + key + "'"));
    if (!off->is_array() || off->size() != 2)
      throw data_error("malformed header: data_offsets of '" + key + "' must be [begin, end]");
    meta.begin = json_uint((*off)[0], "data_offsets");
    meta.end = json_uint((*off)[1], "data_offsets");
    if (meta.begin > meta.end) throw data_error("malformed header: data_offsets of '" + key + "' are reversed");
    const std::uint64_t n = element_count(meta.shape);
    if (n > UINT64_MAX / byte_width(meta.dtype) || meta.end - meta.begin != n * byte_width(meta.dtype))
      throw data_error("meta/payload length mismatch for '" + key + "'");
    if (meta.end > payload_size) throw data_error("truncated file: payload of '" + key + "' extends past end of " + c->id);
    c->tensors.emplace(key, std::move(meta));
  }

  std::vector<const TensorMeta*> ranges;
  for (const auto& [_, m] : c->tensors)
    if (m.end > m.begin) ranges.push_back(&m);
  std::sort(ranges.begin(), ranges.end(), [](auto* a, auto* b) { return a->begin < b->begin; });
  std::uint64_t cursor = 0;
  for (const TensorMeta* m : ranges) {
    if (m->begin < cursor) throw data_error("overlapping byte ranges: '" + m->name + "' in " + c->id);
    if (m->begin > cursor) throw data_error("malformed header: gap before '" + m->name + "' in " + c->id);
    cursor = m->end;
  }
  if (cursor != payload_size) throw data_error("malformed header: " + c->id + " has bytes after the last tensor");

  c->source = std::move(source);
  c->data_start = 8 + header_len;
  return c;
}

std::string metadata_value(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

}  // namespace

Checkpoint::Checkpoint(std::shared_ptr<const State> state) : state_(std::move(state)) {}

Checkpoint Checkpoint::from_source(std::shared_ptr<const ByteSource> source, std::string id) {
  auto container = parse_container(std::move(source), id);
  auto state = std::make_shared<State>();
  state->id = std::move(id);
  state->tensors = container->tensors;
  for (const auto& [name, _] : container->tensors) state->owner.emplace(name, 0);
  state->metadata = container->metadata;
  state->containers.push_back(std::move(container));
  return Checkpoint(std::move(state));
}

Checkpoint Checkpoint::from_bytes(std::vector<std::byte> bytes, std::string id) {
  return from_source(make_memory_source(std::move(bytes)), std::move(id));
}

Checkpoint Checkpoint::open(const fs::path& path) {
  if (path.extension() != ".json") return from_source(open_file_source(path), path.string());

  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open shard index " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  json doc;
  try {
    doc = json::parse(buf.str());
  } catch (const json::exception& e) {
    throw data_error("malformed shard index " + path.string() + ": " + e.what());
  }
  if (!doc.is_object() || !doc.contains("weight_map") || !doc["weight_map"].is_object())
    throw data_error("malformed shard index " + path.string() + ": missing weight_map object");

  auto state = std::make_shared<State>();
  state->id = path.string();
  ShardIndex index;
  if (doc.contains("metadata")) {
    index.metadata = doc["metadata"];
    if (index.metadata.is_object())
      for (const auto& [k, v] : index.metadata.items()) state->metadata[k] = metadata_value(v);
  }
  for (const auto& [name, file] : doc["weight_map"].items()) {
    if (!file.is_string()) throw data_error("malformed shard index: shard of '" + name + "' is not a string");
    index.weight_map[name] = file.get<std::string>();
  }

  std::set<std::string> files;
  for (const auto& [_, file] : index.weight_map) files.insert(file);
  const fs::path dir = path.parent_path();
  for (const auto& file : files) {
    auto source = open_file_source(dir / file);
    auto container = parse_container(std::move(source), (dir / file).string());
    container->file = file;
    const std::size_t slot = state->containers.size();
    for (const auto& [name, meta] : container->tensors) {
      auto it = index.weight_map.find(name);
      if (it == index.weight_map.end() || it->second != file)
        throw data_error("shard " + file + " holds '" + name + "' which the weight_map does not assign to it");
      if (!state->owner.emplace(name, slot).second) throw data_error("duplicate tensor name '" + name + "' across shards");
      state->tensors.emplace(name, meta);
    }
    state->containers.push_back(std::move(container));
  }
  for (const auto& [name, file] : index.weight_map)
    if (!state->tensors.count(name)) throw data_error("weight_map lists '" + name + "' but shard " + file + " lacks it");
  state->index = std::move(index);
  return Checkpoint(std::move(state));
}

const std::string& Checkpoint::id() const { return state_->id; }

std::vector<std::string> Checkpoint::names() const {
  std::vector<std::string> out;
  out.reserve(state_->tensors.size());
  for (const auto& [name, _] : state_->tensors) out.push_back(name);
  return out;
}

const std::map<std::string, TensorMeta>& Checkpoint::tensors() const { return state_->tensors; }

bool Checkpoint::contains(const std::string& name) const { return state_->tensors.count(name) != 0; }

const TensorMeta& Checkpoint::meta(const std::string& name) const {
  auto it = state_->tensors.find(name);
  if (it == state_->tensors.end()) throw data_error("unknown tensor '" + name + "' in " + state_->id);
  return it->second;
}

const Metadata& Checkpoint::metadata() const { return state_->metadata; }

std::vector<std::byte> Checkpoint::load_raw(const std::string& name) const {
  const TensorMeta& m = meta(name);
  const Container& c = *state_->containers[state_->owner.at(name)];
  std::vector<std::byte> bytes(m.byte_size());
  c.source->read(c.data_start + m.begin, bytes);
  return bytes;
}

TensorData Checkpoint::load(const std::string& name) const {
  const TensorMeta& m = meta(name);
  auto bytes = load_raw(name);
  if (!is_float(m.dtype)) return TensorData(m, std::move(bytes));
  std::vector<float> values(m.elements());
  decode_floats(m.dtype, bytes, values);
  return TensorData(m, std::move(values));
}

bool Checkpoint::is_sharded() const { return state_->index.has_value(); }

const ShardIndex* Checkpoint::shard_index() const { return state_->index ? &*state_->index : nullptr; }

std::vector<Checkpoint> Checkpoint::shards() const {
  std::vector<Checkpoint> out;
  for (const auto& c : state_->containers) {
    auto s = std::make_shared<State>();
    s->id = c->id;
    s->tensors = c->tensors;
    for (const auto& [name, _] : c->tensors) s->owner.emplace(name, 0);
    s->metadata = c->metadata;
    s->containers.push_back(c);
    out.push_back(Checkpoint(std::move(s)));
  }
  return out;
}

std::uint64_t Checkpoint::bytes_read() const {
  std::uint64_t n = 0;
  for (const auto& c : state_->containers) n += c->source->bytes_read();
  return n;
}

// ---------------------------------------------------------------------------
// output policy

OutputDtypePolicy OutputDtypePolicy::force(DType dtype) {
  if (!is_float(dtype)) throw usage_error("output dtype must be a float dtype, got " + std::string(to_string(dtype)));
  return OutputDtypePolicy(dtype);
}

OutputDtypePolicy OutputDtypePolicy::parse(const std::string& text) {
  std::string lower;
  for (char ch : text) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  if (lower == "preserve") return preserve();
  if (lower == "f32") return force(DType::F32);
  if (lower == "f16") return force(DType::F16);
  if (lower == "bf16") return force(DType::BF16);
  throw usage_error("unknown output dtype '" + text + "' (expected preserve, f32, f16 or bf16)");
}

std::string OutputDtypePolicy::str() const {
  if (!forced_) return "preserve";
  std::string s(to_string(*forced_));
  for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

DType OutputDtypePolicy::resolve(DType source) const {
  if (!forced_ || !is_float(source)) return source;
  return *forced_;
}

// ---------------------------------------------------------------------------
// writing

void CheckpointWriter::add(std::string name, DType dtype, Shape shape, Producer produce) {
  if (name == "__metadata__") throw data_error("'__metadata__' is reserved and cannot name a tensor");
  element_count(shape);
  auto [it, inserted] = pending_.try_emplace(std::move(name), Pending{dtype, std::move(shape), std::move(produce)});
  if (!inserted) throw data_error("duplicate tensor name '" + it->first + "' in output stream");
}

void CheckpointWriter::add(TensorData tensor, const OutputDtypePolicy& policy) {
  const DType out = policy.resolve(tensor.meta().dtype);
  std::string name = tensor.name();
  Shape shape = tensor.meta().shape;
  auto shared = std::make_shared<TensorData>(std::move(tensor));
  add(std::move(name), out, std::move(shape), [shared] { return *shared; });
}

void CheckpointWriter::write(std::ostream& out, unsigned jobs) const {
  // Metadata first, then tensors in canonical order; entry keys in the order
  // common safetensors writers use.
  nlohmann::ordered_json header = nlohmann::ordered_json::object();
  if (!metadata_.empty()) header["__metadata__"] = metadata_;
  std::uint64_t offset = 0;
  for (const auto& [name, p] : pending_) {
    const std::uint64_t size = element_count(p.shape) * byte_width(p.dtype);
    header[name] = {{"dtype", to_string(p.dtype)}, {"shape", p.shape}, {"data_offsets", {offset, offset + size}}};
    offset += size;
  }
  std::string text = header.dump();
  text.append((8 - text.size() % 8) % 8, ' ');
  const std::uint64_t n = text.size();
  out.write(reinterpret_cast<const char*>(&n), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));

  auto encode_one = [](const std::string& name, const Pending& p) {
    TensorData t = p.produce();
    if (t.meta().shape != p.shape)
      throw data_error("tensor '" + name + "' produced shape " + shape_string(t.meta().shape) + ", declared " +
                       shape_string(p.shape));
    return t.encode(p.dtype);
  };
  auto emit = [&](const std::vector<std::byte>& bytes) {
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw io_error("write failed");
  };

  jobs = std::max(1u, jobs);
  if (jobs == 1) {
    for (const auto& [name, p] : pending_) emit(encode_one(name, p));
  } else {
    std::vector<std::pair<const std::string*, const Pending*>> items;
    for (const auto& [name, p] : pending_) items.emplace_back(&name, &p);
    for (std::size_t lo = 0; lo < items.size(); lo += jobs) {
      const std::size_t hi = std::min(items.size(), lo + jobs);
      std::vector<std::future<std::vector<std::byte>>> window;
      for (std::size_t i = lo; i < hi; ++i)
        window.push_back(std::async(std::launch::async, encode_one, std::cref(*items[i].first), std::cref(*items[i].second)));
      for (auto& f : window) emit(f.get());
    }
  }
  out.flush();
  if (!out) throw io_error("write failed");
}

void CheckpointWriter::write(const fs::path& path, unsigned jobs) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp-" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot create " + tmp.string());
    try {
      write(out, jobs);
    } catch (...) {
      out.close();
      std::error_code ec;
      fs::remove(tmp, ec);
      throw;
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw io_error("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::vector<std::byte> CheckpointWriter::to_bytes(unsigned jobs) const {
  std::ostringstream out(std::ios::binary);
  write(out, jobs);
  const std::string s = std::move(out).str();
  std::vector<std::byte> bytes(s.size());
  std::memcpy(bytes.data(), s.data(), s.size());
  return bytes;
}

void write_checkpoint(const fs::path& path, std::vector<TensorData> tensors, const OutputDtypePolicy& policy,
                      const Metadata& metadata) {
  CheckpointWriter writer;
  writer.set_metadata(metadata);
  for (auto& t : tensors) writer.add(std::move(t), policy);
  writer.write(path);
}

void write_shard_index(const fs::path& path, const ShardIndex& index) {
  json doc = json::object();
  if (!index.metadata.is_null()) doc["metadata"] = index.metadata;
  doc["weight_map"] = index.weight_map;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot create " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw io_error("write failed on " + path.string());
}

namespace {

void copy_container(const Checkpoint& source, const fs::path& path, const OutputDtypePolicy& policy, unsigned jobs) {
  CheckpointWriter writer;
  writer.set_metadata(source.metadata());
  for (const auto& [name, meta] : source.tensors()) {
    writer.add(name, policy.resolve(meta.dtype), meta.shape,
               [source, meta] { return TensorData(meta, source.load_raw(meta.name)); });
  }
  writer.write(path, jobs);
}

}  // namespace

void copy_checkpoint(const Checkpoint& source, const fs::path& path, const OutputDtypePolicy& policy, unsigned jobs) {
  if (source.is_sharded() && path.extension() == ".json") {
    const fs::path dir = path.parent_path();
    const ShardIndex& index = *source.shard_index();
    for (const Checkpoint& shard : source.shards()) {
      const auto names = shard.names();
      // shard file name is recoverable from the weight map of any tensor it holds
      if (names.empty()) continue;
      const std::string& file = index.weight_map.at(names.front());
      copy_container(shard, dir / file, policy, jobs);
    }
    write_shard_index(path, index);
    return;
  }
  copy_container(source, path, policy, jobs);
}

}  // namespace traitforge
