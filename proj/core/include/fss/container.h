#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fss/tensor.h"

// FMTC: a single tensor per file.
//
//   offset 0   "FMTC"
//          4   version  u8 (1)
//          5   dtype    u8 (1 = f32, 2 = f16)
//          6   ndim     u8
//          7   reserved u8 (0)
//          8   ndim x u64 little-endian extents
//          .   row-major little-endian payload
namespace fss::io {

enum class DType : std::uint8_t { kF32 = 1, kF16 = 2 };

inline constexpr std::uint8_t kContainerVersion = 1;

struct TensorHeader {
  DType dtype = DType::kF32;
  Shape dims;
  std::size_t payload_offset = 0;
};

std::vector<std::uint8_t> encode_tensor(const Tensor& t, DType dtype = DType::kF32);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);

void write_tensor(const std::filesystem::path& path, const Tensor& t,
                  DType dtype = DType::kF32);
Tensor read_tensor(const std::filesystem::path& path);

// Parses and validates only the header, checking the file size against it.
TensorHeader read_tensor_header(const std::filesystem::path& path);

// IEEE half conversions, round to nearest even. Values beyond the half range
// become infinities, which write_tensor rejects up front.
std::uint16_t float_to_half(float f);
float half_to_float(std::uint16_t h);

// 8-bit binary PGM of a 2D map after min-max normalisation to [0, 255]. A
// constant map is written as all zeros.
void write_pgm(const std::filesystem::path& path, const Tensor& map);

// Binary map (0/1) written as 0/255 without normalisation.
void write_mask_pgm(const std::filesystem::path& path, const Tensor& mask);

}  // namespace fss::io
