#include "traitforge/dtype.hpp"

#include <bit>
#include <cstring>

#include "traitforge/error.hpp"

static_assert(std::endian::native == std::endian::little, "container payloads are little-endian");

namespace traitforge {

std::string_view to_string(DType dtype) {
  switch (dtype) {
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    case DType::F64: return "F64";
    case DType::I64: return "I64";
    case DType::I32: return "I32";
    case DType::U8: return "U8";
    case DType::BOOL: return "BOOL";
  }
  return "?";
}

std::optional<DType> parse_dtype(std::string_view text) {
  for (DType d : {DType::F32, DType::F16, DType::BF16, DType::F64, DType::I64, DType::I32, DType::U8,
                  DType::BOOL}) {
    if (text == to_string(d)) return d;
  }
  return std::nullopt;
}

float bf16_to_f32(std::uint16_t bits) {
  return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

std::uint16_t f32_to_bf16(float value) {
  const auto x = std::bit_cast<std::uint32_t>(value);
  if ((x & 0x7fffffffu) > 0x7f800000u) {
    // NaN: keep sign and top payload bits, force quiet if the payload would vanish.
    auto h = static_cast<std::uint16_t>(x >> 16);
    if ((h & 0x7f) == 0) h |= 0x40;
    return h;
  }
  const std::uint32_t bias = 0x7fffu + ((x >> 16) & 1u);
  return static_cast<std::uint16_t>((x + bias) >> 16);
}

float f16_to_f32(std::uint16_t bits) {
  const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
  const std::uint32_t exp = (bits >> 10) & 0x1fu;
  std::uint32_t man = bits & 0x3ffu;
  if (exp == 0) {
    if (man == 0) return std::bit_cast<float>(sign);
    // subnormal: renormalize
    int e = -1;
    do {
      man <<= 1;
      ++e;
    } while ((man & 0x400u) == 0);
    man &= 0x3ffu;
    const std::uint32_t f_exp = static_cast<std::uint32_t>(127 - 15 - e);
    return std::bit_cast<float>(sign | (f_exp << 23) | (man << 13));
  }
  if (exp == 0x1f) return std::bit_cast<float>(sign | 0x7f800000u | (man << 13));
  return std::bit_cast<float>(sign | ((exp + 112u) << 23) | (man << 13));
}

std::uint16_t f32_to_f16(float value) {
  std::uint32_t x = std::bit_cast<std::uint32_t>(value);
  const auto sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
  x &= 0x7fffffffu;
  if (x >= 0x7f800000u) {
    if (x == 0x7f800000u) return sign | 0x7c00u;
    auto man = static_cast<std::uint16_t>((x >> 13) & 0x3ffu);
    if (man == 0) man = 0x200;
    return sign | 0x7c00u | man;
  }
  if (x >= 0x477ff000u) return sign | 0x7c00u;  // >= 65520 rounds to infinity
  if (x < 0x38800000u) {
    // result is subnormal or zero
    const std::uint32_t e = x >> 23;
    if (e < 102) return sign;
    const std::uint32_t m = (x & 0x7fffffu) | 0x800000u;
    const std::uint32_t shift = 126 - e;
    std::uint32_t q = m >> shift;
    const std::uint32_t rem = m & ((1u << shift) - 1u);
    const std::uint32_t half = 1u << (shift - 1);
    if (rem > half || (rem == half && (q & 1u))) ++q;
    return static_cast<std::uint16_t>(sign | q);
  }
  const std::uint32_t e = (x >> 23) - 112u;
  const std::uint32_t m = x & 0x7fffffu;
  auto h = static_cast<std::uint32_t>((e << 10) | (m >> 13));
  const std::uint32_t rem = m & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;
  return static_cast<std::uint16_t>(sign | h);
}

namespace {

template <typename T>
T load_le(const std::byte* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
void store_le(std::byte* p, T v) {
  std::memcpy(p, &v, sizeof(T));
}

}  // namespace

void decode_floats(DType dtype, std::span<const std::byte> bytes, std::span<float> out) {
  if (!is_float(dtype)) throw data_error("cannot decode non-float dtype " + std::string(to_string(dtype)));
  if (bytes.size() != out.size() * byte_width(dtype)) throw data_error("meta/payload length mismatch");
  const std::byte* p = bytes.data();
  switch (dtype) {
    case DType::F32:
      if (!out.empty()) std::memcpy(out.data(), p, bytes.size());
      break;
    case DType::F16:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f16_to_f32(load_le<std::uint16_t>(p + 2 * i));
      break;
    case DType::BF16:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = bf16_to_f32(load_le<std::uint16_t>(p + 2 * i));
      break;
    case DType::F64:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(load_le<double>(p + 8 * i));
      break;
    default:
      break;
  }
}

std::vector<std::byte> encode_floats(DType dtype, std::span<const float> values) {
  if (!is_float(dtype)) throw data_error("cannot encode floats as " + std::string(to_string(dtype)));
  std::vector<std::byte> out(values.size() * byte_width(dtype));
  std::byte* p = out.data();
  switch (dtype) {
    case DType::F32:
      if (!values.empty()) std::memcpy(p, values.data(), out.size());
      break;
    case DType::F16:
      for (std::size_t i = 0; i < values.size(); ++i) store_le(p + 2 * i, f32_to_f16(values[i]));
      break;
    case DType::BF16:
      for (std::size_t i = 0; i < values.size(); ++i) store_le(p + 2 * i, f32_to_bf16(values[i]));
      break;
    case DType::F64:
      for (std::size_t i = 0; i < values.size(); ++i) store_le(p + 8 * i, static_cast<double>(values[i]));
      break;
    default:
      break;
  }
  return out;
}

}  // namespace traitforge
