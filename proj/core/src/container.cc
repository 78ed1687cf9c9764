#include "fss/container.h"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace fss::io {
namespace {

static_assert(std::endian::native == std::endian::little,
              "the container codec assumes a little-endian host");

constexpr char kMagic[4] = {'F', 'M', 'T', 'C'};
constexpr std::size_t kFixedHeader = 8;

std::size_t dtype_size(DType d) { return d == DType::kF16 ? 2 : 4; }

template <typename U>
void put(std::vector<std::uint8_t>& out, U v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(U));
}

// `available` bytes of `data` are readable; `size` is the full encoded length.
TensorHeader parse_header(const std::uint8_t* data, std::size_t available, std::size_t size) {
  if (available < kFixedHeader) throw FormatError("truncated header", size);
  if (std::memcmp(data, kMagic, 4) != 0) throw FormatError("bad magic, expected FMTC", 0);
  if (data[4] != kContainerVersion) {
    throw FormatError("unsupported version " + std::to_string(data[4]), 4);
  }
  TensorHeader h;
  if (data[5] == 1) {
    h.dtype = DType::kF32;
  } else if (data[5] == 2) {
    h.dtype = DType::kF16;
  } else {
    throw FormatError("unknown dtype code " + std::to_string(data[5]), 5);
  }
  const std::size_t ndim = data[6];
  if (ndim == 0) throw FormatError("zero-rank tensor", 6);
  if (data[7] != 0) throw FormatError("reserved byte must be zero", 7);
  const std::size_t dims_end = kFixedHeader + 8 * ndim;
  if (available < dims_end) throw FormatError("truncated dims", available);
  std::size_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    std::uint64_t d;
    std::memcpy(&d, data + kFixedHeader + 8 * i, 8);
    if (d == 0) throw FormatError("zero extent", kFixedHeader + 8 * i);
    if (count > (std::uint64_t{1} << 40) / d) {
      throw FormatError("tensor too large", kFixedHeader + 8 * i);
    }
    count *= d;
    h.dims.push_back(static_cast<std::size_t>(d));
  }
  h.payload_offset = dims_end;
  const std::size_t expected = dims_end + count * dtype_size(h.dtype);
  if (size < expected) throw FormatError("truncated payload", size);
  if (size > expected) throw FormatError("trailing bytes after payload", expected);
  return h;
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

void spit(const std::filesystem::path& path, const void* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace

std::uint16_t float_to_half(float f) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const std::uint32_t sign = (x >> 16) & 0x8000u;
  const std::uint32_t absx = x & 0x7fffffffu;
  if (absx >= 0x7f800000u) {  // Inf or NaN
    return static_cast<std::uint16_t>(sign | 0x7c00u | (absx > 0x7f800000u ? 0x200u : 0));
  }
  if (absx >= 0x477ff000u) return static_cast<std::uint16_t>(sign | 0x7c00u);  // overflow
  if (absx < 0x38800000u) {
    // Subnormal half (or zero): shift the full mantissa with rounding.
    if (absx < 0x33000000u) return static_cast<std::uint16_t>(sign);
    const std::uint32_t exp = absx >> 23;
    const std::uint32_t mant = (absx & 0x7fffffu) | 0x800000u;
    const std::uint32_t shift = 126 - exp;  // 14 + (112 - exp) + 1 - 1
    std::uint32_t h = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1);
    const std::uint32_t half = 1u << (shift - 1);
    if (rem > half || (rem == half && (h & 1u))) ++h;
    return static_cast<std::uint16_t>(sign | h);
  }
  std::uint32_t h = ((absx - 0x38000000u) >> 13);
  const std::uint32_t rem = absx & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;
  return static_cast<std::uint16_t>(sign | h);
}

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1fu;
  std::uint32_t mant = h & 0x3ffu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      int e = -1;
      do {
        ++e;
        mant <<= 1;
      } while ((mant & 0x400u) == 0);
      bits = sign | ((112 - e) << 23) | ((mant & 0x3ffu) << 13);
    }
  } else if (exp == 31) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 112) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t, DType dtype) {
  if (t.rank() == 0 || t.rank() > 255) {
    throw ShapeError("container rank must be in 1..255, got " + std::to_string(t.rank()));
  }
  if (!t.all_finite()) throw DataError("refusing to write non-finite values");
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(kContainerVersion);
  out.push_back(static_cast<std::uint8_t>(dtype));
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  out.push_back(0);
  for (std::size_t d : t.dims()) put(out, static_cast<std::uint64_t>(d));
  out.reserve(out.size() + t.size() * dtype_size(dtype));
  if (dtype == DType::kF32) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
    out.insert(out.end(), p, p + t.size() * 4);
  } else {
    for (float v : t.values()) {
      const std::uint16_t h = float_to_half(v);
      if ((h & 0x7c00u) == 0x7c00u) throw DataError("value out of f16 range");
      put(out, h);
    }
  }
  return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
  const TensorHeader h = parse_header(bytes.data(), bytes.size(), bytes.size());
  const std::size_t n = shape_size(h.dims);
  std::vector<float> values(n);
  const std::uint8_t* p = bytes.data() + h.payload_offset;
  if (h.dtype == DType::kF32) {
    std::memcpy(values.data(), p, n * 4);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint16_t v;
      std::memcpy(&v, p + 2 * i, 2);
      values[i] = half_to_float(v);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(values[i])) {
      throw FormatError("non-finite value in payload",
                        h.payload_offset + i * dtype_size(h.dtype));
    }
  }
  return Tensor(h.dims, std::move(values));
}

void write_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype) {
  const std::vector<std::uint8_t> bytes = encode_tensor(t, dtype);
  spit(path, bytes.data(), bytes.size());
}

Tensor read_tensor(const std::filesystem::path& path) {
  try {
    return decode_tensor(slurp(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

TensorHeader read_tensor_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("cannot open " + path.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> head(std::min<std::size_t>(size, kFixedHeader + 8 * 255));
  in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
  try {
    return parse_header(head.data(), head.size(), size);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

void write_pgm(const std::filesystem::path& path, const Tensor& map) {
  expect_rank(map, 2, "pgm map");
  const std::size_t h = map.dim(0), w = map.dim(1);
  float lo = map[0], hi = map[0];
  for (float v : map.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (float v : map.values()) {
    const double scaled = hi > lo ? (static_cast<double>(v) - lo) / (static_cast<double>(hi) - lo) : 0.0;
    out.push_back(static_cast<std::uint8_t>(std::lround(scaled * 255.0)));
  }
  spit(path, out.data(), out.size());
}

void write_mask_pgm(const std::filesystem::path& path, const Tensor& mask) {
  expect_rank(mask, 2, "pgm mask");
  std::string header =
      "P5\n" + std::to_string(mask.dim(1)) + " " + std::to_string(mask.dim(0)) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (float v : mask.values()) out.push_back(v > 0.5f ? 255 : 0);
  spit(path, out.data(), out.size());
}

}  // namespace fss::io
