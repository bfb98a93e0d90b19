#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace traitforge {

enum class DType : std::uint8_t { F32, F16, BF16, F64, I64, I32, U8, BOOL };

constexpr std::size_t byte_width(DType dtype) {
  switch (dtype) {
    case DType::F32: return 4;
    case DType::F16: return 2;
    case DType::BF16: return 2;
    case DType::F64: return 8;
    case DType::I64: return 8;
    case DType::I32: return 4;
    case DType::U8: return 1;
    case DType::BOOL: return 1;
  }
  return 0;
}

// Only float dtypes take part in arithmetic; the rest are carried through verbatim.
constexpr bool is_float(DType dtype) {
  return dtype == DType::F32 || dtype == DType::F16 || dtype == DType::BF16 || dtype == DType::F64;
}

std::string_view to_string(DType dtype);
std::optional<DType> parse_dtype(std::string_view text);

// Scalar conversions. Widening is exact; narrowing rounds to nearest, ties to even.
float bf16_to_f32(std::uint16_t bits);
std::uint16_t f32_to_bf16(float value);
float f16_to_f32(std::uint16_t bits);
std::uint16_t f32_to_f16(float value);

// Little-endian payload <-> 32-bit arithmetic view. `dtype` must be a float dtype.
void decode_floats(DType dtype, std::span<const std::byte> bytes, std::span<float> out);
std::vector<std::byte> encode_floats(DType dtype, std::span<const float> values);

}  // namespace traitforge
