#include "fss/kernels.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <string>

namespace fss::kernels {
namespace {

template <typename T>
inline void axpy(T a, const T* __restrict x, T* __restrict y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// 64-byte SIMD vector of T (GCC/Clang vector extension). On hosts without
// 512-bit registers the compiler splits it into narrower ones.
template <typename T>
struct VecTraits;
template <>
struct VecTraits<float> {
  typedef float type __attribute__((vector_size(64)));
};
template <>
struct VecTraits<double> {
  typedef double type __attribute__((vector_size(64)));
};
template <typename T>
using Vec64 = typename VecTraits<T>::type;

template <typename T>
inline Vec64<T> load_vec(const T* p) {
  Vec64<T> v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

template <typename T>
inline void store_vec(T* p, const Vec64<T>& v) {
  std::memcpy(p, &v, sizeof(v));
}

template <typename T>
inline T horizontal_sum(const Vec64<T>& v) {
  constexpr std::size_t kLanes = sizeof(Vec64<T>) / sizeof(T);
  T s{0};
  for (std::size_t l = 0; l < kLanes; ++l) s += v[l];
  return s;
}

template <typename T>
inline T dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
  constexpr std::size_t kLanes = sizeof(Vec64<T>) / sizeof(T);
  Vec64<T> acc0 = {}, acc1 = {};
  std::size_t i = 0;
  for (; i + 2 * kLanes <= n; i += 2 * kLanes) {
    acc0 += load_vec(a + i) * load_vec(b + i);
    acc1 += load_vec(a + i + kLanes) * load_vec(b + i + kLanes);
  }
  for (; i + kLanes <= n; i += kLanes) acc0 += load_vec(a + i) * load_vec(b + i);
  T tail{0};
  for (; i < n; ++i) tail += a[i] * b[i];
  return horizontal_sum<T>(acc0 + acc1) + tail;
}

template <typename T>
inline T sum(const T* a, std::size_t n) {
  constexpr std::size_t kLanes = sizeof(Vec64<T>) / sizeof(T);
  Vec64<T> acc = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) acc += load_vec(a + i);
  T tail{0};
  for (; i < n; ++i) tail += a[i];
  return horizontal_sum<T>(acc) + tail;
}

// out[j] += sum_k coeff[k] * rows[k][j] for j < len. Null rows are skipped.
// A block of four vectors of output columns stays in registers across the k
// loop, so each multiply-add costs one load.
template <typename T>
void accumulate_rows(const T* __restrict coeff, std::size_t count, const T* const* rows,
                     std::size_t len, T* __restrict out) {
  constexpr std::size_t kLanes = sizeof(Vec64<T>) / sizeof(T);
  constexpr std::size_t kBlock = 4 * kLanes;
  std::size_t j0 = 0;
  for (; j0 + kBlock <= len; j0 += kBlock) {
    Vec64<T> a0 = load_vec(out + j0);
    Vec64<T> a1 = load_vec(out + j0 + kLanes);
    Vec64<T> a2 = load_vec(out + j0 + 2 * kLanes);
    Vec64<T> a3 = load_vec(out + j0 + 3 * kLanes);
    for (std::size_t k = 0; k < count; ++k) {
      const T* r = rows[k];
      if (!r) continue;
      const T c = coeff[k];
      r += j0;
      a0 += c * load_vec(r);
      a1 += c * load_vec(r + kLanes);
      a2 += c * load_vec(r + 2 * kLanes);
      a3 += c * load_vec(r + 3 * kLanes);
    }
    store_vec(out + j0, a0);
    store_vec(out + j0 + kLanes, a1);
    store_vec(out + j0 + 2 * kLanes, a2);
    store_vec(out + j0 + 3 * kLanes, a3);
  }
  for (; j0 + kLanes <= len; j0 += kLanes) {
    Vec64<T> a = load_vec(out + j0);
    for (std::size_t k = 0; k < count; ++k) {
      if (rows[k]) a += coeff[k] * load_vec(rows[k] + j0);
    }
    store_vec(out + j0, a);
  }
  for (; j0 < len; ++j0) {
    T a = out[j0];
    for (std::size_t k = 0; k < count; ++k) {
      if (rows[k]) a += coeff[k] * rows[k][j0];
    }
    out[j0] = a;
  }
}

// out[o * out_stride] += dot(a_rows[o], b) for o < count. Four rows share
// each load of b.
template <typename T>
void accumulate_dots(const T* const* a_rows, std::size_t count, const T* __restrict b,
                     std::size_t n, T* out, std::size_t out_stride) {
  constexpr std::size_t kLanes = sizeof(Vec64<T>) / sizeof(T);
  std::size_t o = 0;
  for (; o + 4 <= count; o += 4) {
    const T* a0 = a_rows[o];
    const T* a1 = a_rows[o + 1];
    const T* a2 = a_rows[o + 2];
    const T* a3 = a_rows[o + 3];
    Vec64<T> s0 = {}, s1 = {}, s2 = {}, s3 = {};
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) {
      const Vec64<T> bv = load_vec(b + i);
      s0 += load_vec(a0 + i) * bv;
      s1 += load_vec(a1 + i) * bv;
      s2 += load_vec(a2 + i) * bv;
      s3 += load_vec(a3 + i) * bv;
    }
    T t0 = horizontal_sum<T>(s0), t1 = horizontal_sum<T>(s1);
    T t2 = horizontal_sum<T>(s2), t3 = horizontal_sum<T>(s3);
    for (; i < n; ++i) {
      t0 += a0[i] * b[i];
      t1 += a1[i] * b[i];
      t2 += a2[i] * b[i];
      t3 += a3[i] * b[i];
    }
    out[o * out_stride] += t0;
    out[(o + 1) * out_stride] += t1;
    out[(o + 2) * out_stride] += t2;
    out[(o + 3) * out_stride] += t3;
  }
  for (; o < count; ++o) out[o * out_stride] += dot(a_rows[o], b, n);
}

template <typename T>
void strided_rows(const T* base, std::size_t stride, std::size_t count,
                  std::vector<const T*>* rows) {
  rows->resize(count);
  for (std::size_t k = 0; k < count; ++k) (*rows)[k] = base + k * stride;
}

template <typename T>
void ensure_grad(BasicTensor<T>* g, const Shape& dims, const char* what) {
  if (!g) return;
  if (g->empty()) {
    *g = BasicTensor<T>(dims);
  } else if (g->dims() != dims) {
    throw ShapeError(std::string(what) + ": gradient buffer has dims " +
                     shape_string(g->dims()) + ", expected " + shape_string(dims));
  }
}

// ---------------------------------------------------------------------------
// Center-pivot 4D geometry. Column layout per query position (y, x):
// [ci][18][padded_p], taps 0..8 are the query kernel (support pinned to the
// strided center), taps 9..17 the support kernel (query pinned).

constexpr std::size_t kTaps = 9;
constexpr std::size_t kPivotTaps = 2 * kTaps;

struct Cp4dGeometry {
  std::size_t ci, h, w, hs, ws, ho, wo, stride;
  std::size_t in_plane;   // hs * ws
  std::size_t out_plane;  // ho * wo
};

template <typename T>
Cp4dGeometry cp4d_geometry(const BasicTensor<T>& input, int stride) {
  if (stride != 1 && stride != 2) {
    throw ConfigError("support stride must be 1 or 2, got " + std::to_string(stride));
  }
  expect_rank(input, 5, "cp4d input");
  Cp4dGeometry g{};
  g.ci = input.dim(0);
  g.h = input.dim(1);
  g.w = input.dim(2);
  g.hs = input.dim(3);
  g.ws = input.dim(4);
  g.stride = static_cast<std::size_t>(stride);
  g.ho = (g.hs + g.stride - 1) / g.stride;
  g.wo = (g.ws + g.stride - 1) / g.stride;
  g.in_plane = g.hs * g.ws;
  g.out_plane = g.ho * g.wo;
  return g;
}

inline bool shifted(std::size_t base, int delta, std::size_t extent, std::size_t* out) {
  const long v = static_cast<long>(base) + delta;
  if (v < 0 || v >= static_cast<long>(extent)) return false;
  *out = static_cast<std::size_t>(v);
  return true;
}

// Valid output columns [lo, hi) of a strided tap: 0 <= b * stride + delta < extent.
struct TapRange {
  std::size_t lo, hi;
};

inline TapRange tap_range(int delta, std::size_t stride, std::size_t extent,
                          std::size_t out_extent) {
  const long s = static_cast<long>(stride);
  const long lo = delta < 0 ? (-delta + s - 1) / s : 0;
  const long last = static_cast<long>(extent) - 1 - delta;
  const long hi = last < 0 ? 0 : std::min(static_cast<long>(out_extent), last / s + 1);
  return {static_cast<std::size_t>(std::min(lo, hi)), static_cast<std::size_t>(hi)};
}

// One support-kernel tap for a fixed query position: dst[a, b] =
// plane[a * s + dy, b * s + dx], zero outside the plane.
template <typename T>
void fill_support_tap(const T* plane, const Cp4dGeometry& g, int dy, int dx, T* dst) {
  const std::size_t s = g.stride;
  const TapRange rb = tap_range(dx, s, g.ws, g.wo);
  for (std::size_t a = 0; a < g.ho; ++a) {
    T* row = dst + a * g.wo;
    std::size_t sa;
    if (!shifted(a * s, dy, g.hs, &sa)) {
      std::fill(row, row + g.wo, T{0});
      continue;
    }
    const T* src = plane + sa * g.ws;
    std::fill(row, row + rb.lo, T{0});
    if (s == 1) {
      for (std::size_t b = rb.lo; b < rb.hi; ++b) row[b] = src[static_cast<long>(b) + dx];
    } else {
      for (std::size_t b = rb.lo; b < rb.hi; ++b) {
        row[b] = src[static_cast<long>(b * s) + dx];
      }
    }
    std::fill(row + rb.hi, row + g.wo, T{0});
  }
}

// Adjoint of fill_support_tap.
template <typename T>
void scatter_support_tap(const T* src, const Cp4dGeometry& g, int dy, int dx, T* plane) {
  const std::size_t s = g.stride;
  const TapRange rb = tap_range(dx, s, g.ws, g.wo);
  for (std::size_t a = 0; a < g.ho; ++a) {
    std::size_t sa;
    if (!shifted(a * s, dy, g.hs, &sa)) continue;
    const T* row = src + a * g.wo;
    T* dst = plane + sa * g.ws;
    for (std::size_t b = rb.lo; b < rb.hi; ++b) dst[static_cast<long>(b * s) + dx] += row[b];
  }
}

// Input with the support dims subsampled to the output grid:
// [ci][h][w][ho * wo]. Stride 1 returns the input buffer itself.
template <typename T>
const T* support_strided_input(const BasicTensor<T>& input, const Cp4dGeometry& g,
                               std::vector<T>* storage) {
  if (g.stride == 1) return input.data();
  const std::size_t planes = g.ci * g.h * g.w;
  storage->resize(planes * g.out_plane);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = input.data() + p * g.in_plane;
    T* dst = storage->data() + p * g.out_plane;
    for (std::size_t a = 0; a < g.ho; ++a) {
      for (std::size_t b = 0; b < g.wo; ++b) dst[a * g.wo + b] = src[a * g.stride * g.ws + b * g.stride];
    }
  }
  return storage->data();
}

// Row pointers for query position (y, x) in the packed [ci][18] order. Query
// taps point into the strided input (null when off-grid); support taps point
// into `support_rows`, which is filled when `fill` is set.
template <typename T>
void bind_cp4d_rows(const T* input, const T* strided, const Cp4dGeometry& g, std::size_t y,
                    std::size_t x, bool fill, T* support_rows, const T** rows) {
  const std::size_t P = g.out_plane;
  for (std::size_t i = 0; i < g.ci; ++i) {
    for (std::size_t t = 0; t < kTaps; ++t) {
      std::size_t yy, xx;
      const bool inside = shifted(y, static_cast<int>(t / 3) - 1, g.h, &yy) &&
                          shifted(x, static_cast<int>(t % 3) - 1, g.w, &xx);
      rows[i * kPivotTaps + t] = inside ? strided + ((i * g.h + yy) * g.w + xx) * P : nullptr;
    }
    const T* plane = input + ((i * g.h + y) * g.w + x) * g.in_plane;
    for (std::size_t t = 0; t < kTaps; ++t) {
      T* dst = support_rows + (i * kTaps + t) * P;
      if (fill) {
        fill_support_tap(plane, g, static_cast<int>(t / 3) - 1, static_cast<int>(t % 3) - 1, dst);
      }
      rows[i * kPivotTaps + kTaps + t] = dst;
    }
  }
}

template <typename T>
void check_cp4d_weights(const Cp4dGeometry& g, const BasicTensor<T>& wq,
                        const BasicTensor<T>& ws) {
  expect_rank(wq, 4, "cp4d query kernel");
  const std::size_t co = wq.dim(0);
  expect_dims(wq, {co, g.ci, 3, 3}, "cp4d query kernel");
  expect_dims(ws, {co, g.ci, 3, 3}, "cp4d support kernel");
}

// Packs wq/ws into one [co][ci * 18] row per output channel, matching the
// column layout.
template <typename T>
std::vector<T> pack_cp4d_weights(const BasicTensor<T>& wq, const BasicTensor<T>& ws,
                                 std::size_t co, std::size_t ci) {
  const std::size_t K = ci * kPivotTaps;
  std::vector<T> packed(co * K);
  for (std::size_t o = 0; o < co; ++o) {
    for (std::size_t i = 0; i < ci; ++i) {
      for (std::size_t t = 0; t < kTaps; ++t) {
        packed[o * K + i * kPivotTaps + t] = wq[(o * ci + i) * kTaps + t];
        packed[o * K + i * kPivotTaps + kTaps + t] = ws[(o * ci + i) * kTaps + t];
      }
    }
  }
  return packed;
}

template <typename T>
std::vector<T> transpose(const std::vector<T>& m, std::size_t rows, std::size_t cols) {
  std::vector<T> out(m.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = m[r * cols + c];
  }
  return out;
}

// ---------------------------------------------------------------------------
// 2D convolution columns: per output row y, [ci][k*k][W].

struct Conv2dGeometry {
  std::size_t ci, co, H, W, k;
};

template <typename T>
Conv2dGeometry conv2d_geometry(const BasicTensor<T>& input, const BasicTensor<T>& weight) {
  expect_rank(input, 3, "conv2d input");
  expect_rank(weight, 4, "conv2d weight");
  Conv2dGeometry g{};
  g.ci = input.dim(0);
  g.H = input.dim(1);
  g.W = input.dim(2);
  g.co = weight.dim(0);
  g.k = weight.dim(2);
  if (g.k != 1 && g.k != 3) throw ConfigError("conv2d kernel must be 1x1 or 3x3");
  expect_dims(weight, {g.co, g.ci, g.k, g.k}, "conv2d weight");
  return g;
}

template <typename T>
void fill_conv2d_columns(const T* input, const Conv2dGeometry& g, std::size_t y,
                         T* cols, unsigned char* valid) {
  const std::size_t kk = g.k * g.k;
  const int pad = static_cast<int>(g.k / 2);
  for (std::size_t i = 0; i < g.ci; ++i) {
    const T* xi = input + i * g.H * g.W;
    for (std::size_t t = 0; t < kk; ++t) {
      const std::size_t r = i * kk + t;
      const int dy = static_cast<int>(t / g.k) - pad;
      const int dx = static_cast<int>(t % g.k) - pad;
      std::size_t yy;
      if (!shifted(y, dy, g.H, &yy)) {
        valid[r] = 0;
        continue;
      }
      valid[r] = 1;
      const T* src = xi + yy * g.W;
      T* row = cols + r * g.W;
      for (std::size_t x = 0; x < g.W; ++x) {
        std::size_t xx;
        row[x] = shifted(x, dx, g.W, &xx) ? src[xx] : T{0};
      }
    }
  }
}

template <typename T>
void scatter_conv2d_columns(const T* dcols, const unsigned char* valid,
                            const Conv2dGeometry& g, std::size_t y, T* grad_input) {
  const std::size_t kk = g.k * g.k;
  const int pad = static_cast<int>(g.k / 2);
  for (std::size_t i = 0; i < g.ci; ++i) {
    T* gi = grad_input + i * g.H * g.W;
    for (std::size_t t = 0; t < kk; ++t) {
      const std::size_t r = i * kk + t;
      if (!valid[r]) continue;
      const int dy = static_cast<int>(t / g.k) - pad;
      const int dx = static_cast<int>(t % g.k) - pad;
      const std::size_t yy = static_cast<std::size_t>(static_cast<long>(y) + dy);
      T* dst = gi + yy * g.W;
      const T* row = dcols + r * g.W;
      for (std::size_t x = 0; x < g.W; ++x) {
        std::size_t xx;
        if (shifted(x, dx, g.W, &xx)) dst[xx] += row[x];
      }
    }
  }
}

struct ResizeAxis {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

ResizeAxis resize_axis(std::size_t in, std::size_t out) {
  ResizeAxis ax;
  ax.lo.resize(out);
  ax.hi.resize(out);
  ax.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::size_t lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    ax.lo[o] = lo;
    ax.hi[o] = std::min(lo + 1, in - 1);
    ax.frac[o] = src - static_cast<double>(lo);
  }
  return ax;
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
void expect_binary(const BasicTensor<T>& t, const char* what) {
  for (T v : t.values()) {
    if (v != T{0} && v != T{1}) {
      throw DataError(std::string(what) + ": values must be 0 or 1");
    }
  }
}

namespace {

// Row-normalized copy; zero-norm rows stay zero. Also returns the norms.
template <typename T>
std::vector<T> normalize_rows(const BasicTensor<T>& m, std::vector<T>* norms) {
  const std::size_t n = m.dim(0), c = m.dim(1);
  std::vector<T> out(n * c, T{0});
  norms->assign(n, T{0});
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = m.data() + i * c;
    double ss = 0;
    for (std::size_t k = 0; k < c; ++k) ss += static_cast<double>(row[k]) * row[k];
    const double norm = std::sqrt(ss);
    (*norms)[i] = static_cast<T>(norm);
    if (norm == 0) continue;
    for (std::size_t k = 0; k < c; ++k) out[i * c + k] = static_cast<T>(row[k] / norm);
  }
  return out;
}

template <typename T>
void check_cosine_inputs(const BasicTensor<T>& q, const BasicTensor<T>& s) {
  expect_rank(q, 2, "cosine query features");
  expect_rank(s, 2, "cosine support features");
  if (q.dim(1) != s.dim(1)) {
    throw ShapeError("cosine similarity: channel mismatch " + shape_string(q.dims()) +
                     " vs " + shape_string(s.dims()));
  }
}

template <typename T>
BasicTensor<T> cosine_from_normalized(const std::vector<T>& qn, const std::vector<T>& sn,
                                      std::size_t nq, std::size_t ns, std::size_t c) {
  const std::vector<T> snt = transpose(sn, ns, c);
  std::vector<const T*> rows;
  strided_rows(snt.data(), ns, c, &rows);
  BasicTensor<T> out({nq, ns});
  for (std::size_t i = 0; i < nq; ++i) {
    T* row = out.data() + i * ns;
    accumulate_rows(qn.data() + i * c, c, rows.data(), ns, row);
    for (std::size_t j = 0; j < ns; ++j) row[j] = std::max(row[j], T{0});
  }
  return out;
}

}  // namespace

template <typename T>
BasicTensor<T> cosine_similarity_map(const BasicTensor<T>& query,
                                     const BasicTensor<T>& support) {
  check_cosine_inputs(query, support);
  const std::size_t nq = query.dim(0), ns = support.dim(0), c = query.dim(1);
  std::vector<T> qnorm, snorm;
  const auto qn = normalize_rows(query, &qnorm);
  const auto sn = normalize_rows(support, &snorm);
  return cosine_from_normalized(qn, sn, nq, ns, c);
}

template <typename T>
void cosine_similarity_map_backward(const BasicTensor<T>& query,
                                    const BasicTensor<T>& support,
                                    const BasicTensor<T>& grad_out,
                                    BasicTensor<T>* grad_query,
                                    BasicTensor<T>* grad_support) {
  check_cosine_inputs(query, support);
  const std::size_t nq = query.dim(0), ns = support.dim(0), c = query.dim(1);
  expect_dims(grad_out, {nq, ns}, "cosine grad");
  ensure_grad(grad_query, query.dims(), "cosine grad query");
  ensure_grad(grad_support, support.dims(), "cosine grad support");
  std::vector<T> qnorm, snorm;
  const auto qn = normalize_rows(query, &qnorm);
  const auto sn = normalize_rows(support, &snorm);
  const BasicTensor<T> cos = cosine_from_normalized(qn, sn, nq, ns, c);

  // Gated upstream gradient; the gate is cos > 0, which also excludes
  // zero-norm rows since their output is identically 0.
  std::vector<T> gated(nq * ns);
  for (std::size_t p = 0; p < nq * ns; ++p) gated[p] = cos[p] > 0 ? grad_out[p] : T{0};

  if (grad_query) {
    for (std::size_t i = 0; i < nq; ++i) {
      if (qnorm[i] == 0) continue;
      std::vector<T> acc(c, T{0});
      T radial{0};
      for (std::size_t j = 0; j < ns; ++j) {
        const T g = gated[i * ns + j];
        if (g == 0) continue;
        axpy(g, sn.data() + j * c, acc.data(), c);
        radial += g * cos[i * ns + j];
      }
      T* dst = grad_query->data() + i * c;
      for (std::size_t k = 0; k < c; ++k) dst[k] += (acc[k] - radial * qn[i * c + k]) / qnorm[i];
    }
  }
  if (grad_support) {
    for (std::size_t j = 0; j < ns; ++j) {
      if (snorm[j] == 0) continue;
      std::vector<T> acc(c, T{0});
      T radial{0};
      for (std::size_t i = 0; i < nq; ++i) {
        const T g = gated[i * ns + j];
        if (g == 0) continue;
        axpy(g, qn.data() + i * c, acc.data(), c);
        radial += g * cos[i * ns + j];
      }
      T* dst = grad_support->data() + j * c;
      for (std::size_t k = 0; k < c; ++k) dst[k] += (acc[k] - radial * sn[j * c + k]) / snorm[j];
    }
  }
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> cp4d_conv(const BasicTensor<T>& input, const BasicTensor<T>& wq,
                         const BasicTensor<T>& ws, const BasicTensor<T>& bias,
                         int support_stride) {
  const Cp4dGeometry g = cp4d_geometry(input, support_stride);
  check_cp4d_weights(g, wq, ws);
  const std::size_t co = wq.dim(0);
  expect_dims(bias, {co}, "cp4d bias");
  const std::size_t K = g.ci * kPivotTaps;
  const std::size_t P = g.out_plane;
  const std::vector<T> packed = pack_cp4d_weights(wq, ws, co, g.ci);
  std::vector<T> strided_storage;
  const T* strided = support_strided_input(input, g, &strided_storage);

  BasicTensor<T> out({co, g.h, g.w, g.ho, g.wo});
  std::vector<T> support_rows(g.ci * kTaps * P);
  std::vector<const T*> rows(K);
  for (std::size_t y = 0; y < g.h; ++y) {
    for (std::size_t x = 0; x < g.w; ++x) {
      bind_cp4d_rows(input.data(), strided, g, y, x, true, support_rows.data(), rows.data());
      for (std::size_t o = 0; o < co; ++o) {
        T* dst = out.data() + ((o * g.h + y) * g.w + x) * P;
        std::fill(dst, dst + P, bias[o]);
        accumulate_rows(packed.data() + o * K, K, rows.data(), P, dst);
      }
    }
  }
  return out;
}

template <typename T>
void cp4d_conv_backward(const BasicTensor<T>& input, const BasicTensor<T>& wq,
                        const BasicTensor<T>& ws, int support_stride,
                        const BasicTensor<T>& grad_out, BasicTensor<T>* grad_input,
                        BasicTensor<T>* grad_wq, BasicTensor<T>* grad_ws,
                        BasicTensor<T>* grad_bias) {
  const Cp4dGeometry g = cp4d_geometry(input, support_stride);
  check_cp4d_weights(g, wq, ws);
  const std::size_t co = wq.dim(0);
  expect_dims(grad_out, {co, g.h, g.w, g.ho, g.wo}, "cp4d grad");
  ensure_grad(grad_input, input.dims(), "cp4d grad input");
  ensure_grad(grad_wq, wq.dims(), "cp4d grad wq");
  ensure_grad(grad_ws, ws.dims(), "cp4d grad ws");
  ensure_grad(grad_bias, Shape{co}, "cp4d grad bias");

  const std::size_t K = g.ci * kPivotTaps;
  const std::size_t P = g.out_plane;
  const std::size_t plane_stride = g.h * g.w * P;
  const bool want_weights = grad_wq || grad_ws;
  const std::vector<T> packed = pack_cp4d_weights(wq, ws, co, g.ci);
  const std::vector<T> packed_t = transpose(packed, co, K);
  std::vector<T> grad_packed(want_weights ? co * K : 0, T{0});
  std::vector<T> strided_storage;
  const T* strided = support_strided_input(input, g, &strided_storage);

  // Gradient w.r.t. the strided view; with stride 1 that is grad_input itself.
  std::vector<T> grad_strided_storage;
  T* grad_strided = nullptr;
  if (grad_input) {
    if (g.stride == 1) {
      grad_strided = grad_input->data();
    } else {
      grad_strided_storage.assign(g.ci * g.h * g.w * P, T{0});
      grad_strided = grad_strided_storage.data();
    }
  }

  std::vector<T> support_rows(g.ci * kTaps * P);
  std::vector<T> dcol(P);
  std::vector<const T*> rows(K);
  std::vector<const T*> grad_rows(co);
  for (std::size_t y = 0; y < g.h; ++y) {
    for (std::size_t x = 0; x < g.w; ++x) {
      const T* gy = grad_out.data() + (y * g.w + x) * P;
      for (std::size_t o = 0; o < co; ++o) grad_rows[o] = gy + o * plane_stride;
      if (grad_bias) {
        for (std::size_t o = 0; o < co; ++o) (*grad_bias)[o] += sum(grad_rows[o], P);
      }
      if (!want_weights && !grad_input) continue;
      bind_cp4d_rows(input.data(), strided, g, y, x, want_weights, support_rows.data(),
                     rows.data());
      if (want_weights) {
        for (std::size_t k = 0; k < K; ++k) {
          if (rows[k]) accumulate_dots(grad_rows.data(), co, rows[k], P, grad_packed.data() + k, K);
        }
      }
      if (!grad_input) continue;
      for (std::size_t i = 0; i < g.ci; ++i) {
        for (std::size_t t = 0; t < kTaps; ++t) {
          const std::size_t k = i * kPivotTaps + t;
          if (!rows[k]) continue;
          T* dst = grad_strided + (rows[k] - strided);
          accumulate_rows(packed_t.data() + k * co, co, grad_rows.data(), P, dst);
        }
        T* plane = grad_input->data() + ((i * g.h + y) * g.w + x) * g.in_plane;
        for (std::size_t t = 0; t < kTaps; ++t) {
          const std::size_t k = i * kPivotTaps + kTaps + t;
          std::fill(dcol.begin(), dcol.end(), T{0});
          accumulate_rows(packed_t.data() + k * co, co, grad_rows.data(), P, dcol.data());
          scatter_support_tap(dcol.data(), g, static_cast<int>(t / 3) - 1,
                              static_cast<int>(t % 3) - 1, plane);
        }
      }
    }
  }
  if (grad_input && g.stride != 1) {
    const std::size_t planes = g.ci * g.h * g.w;
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = grad_strided + p * P;
      T* dst = grad_input->data() + p * g.in_plane;
      for (std::size_t a = 0; a < g.ho; ++a) {
        for (std::size_t b = 0; b < g.wo; ++b) {
          dst[a * g.stride * g.ws + b * g.stride] += src[a * g.wo + b];
        }
      }
    }
  }
  if (want_weights) {
    for (std::size_t o = 0; o < co; ++o) {
      for (std::size_t i = 0; i < g.ci; ++i) {
        for (std::size_t t = 0; t < kTaps; ++t) {
          const std::size_t idx = (o * g.ci + i) * kTaps + t;
          if (grad_wq) (*grad_wq)[idx] += grad_packed[o * K + i * kPivotTaps + t];
          if (grad_ws) (*grad_ws)[idx] += grad_packed[o * K + i * kPivotTaps + kTaps + t];
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
void check_dw4d(const BasicTensor<T>& input, const BasicTensor<T>& wq,
                const BasicTensor<T>& ws) {
  expect_rank(input, 5, "dw4d input");
  const std::size_t c = input.dim(0);
  expect_dims(wq, {c, 3, 3}, "dw4d query kernel");
  expect_dims(ws, {c, 3, 3}, "dw4d support kernel");
}

}  // namespace

template <typename T>
BasicTensor<T> dw4d_conv(const BasicTensor<T>& input, const BasicTensor<T>& wq,
                         const BasicTensor<T>& ws) {
  check_dw4d(input, wq, ws);
  const std::size_t C = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t hs = input.dim(3), wsd = input.dim(4);
  const std::size_t P = hs * wsd;
  BasicTensor<T> out(input.dims());
  for (std::size_t c = 0; c < C; ++c) {
    const T* xc = input.data() + c * h * w * P;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        T* dst = out.data() + ((c * h + y) * w + x) * P;
        for (std::size_t t = 0; t < kTaps; ++t) {
          std::size_t yy, xx;
          if (!shifted(y, static_cast<int>(t / 3) - 1, h, &yy) ||
              !shifted(x, static_cast<int>(t % 3) - 1, w, &xx)) {
            continue;
          }
          axpy(wq[c * kTaps + t], xc + (yy * w + xx) * P, dst, P);
        }
        const T* src = xc + (y * w + x) * P;
        for (std::size_t t = 0; t < kTaps; ++t) {
          const int dy = static_cast<int>(t / 3) - 1;
          const int dx = static_cast<int>(t % 3) - 1;
          const T k = ws[c * kTaps + t];
          const std::size_t b_lo = dx < 0 ? 1 : 0;
          const std::size_t b_hi = dx > 0 ? wsd - 1 : wsd;
          for (std::size_t a = 0; a < hs; ++a) {
            std::size_t sa;
            if (!shifted(a, dy, hs, &sa)) continue;
            if (b_hi <= b_lo) continue;
            const T* srow = src + sa * wsd + static_cast<std::size_t>(static_cast<long>(b_lo) + dx);
            axpy(k, srow, dst + a * wsd + b_lo, b_hi - b_lo);
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
void dw4d_conv_backward(const BasicTensor<T>& input, const BasicTensor<T>& wq,
                        const BasicTensor<T>& ws, const BasicTensor<T>& grad_out,
                        BasicTensor<T>* grad_input, BasicTensor<T>* grad_wq,
                        BasicTensor<T>* grad_ws) {
  check_dw4d(input, wq, ws);
  expect_dims(grad_out, input.dims(), "dw4d grad");
  ensure_grad(grad_input, input.dims(), "dw4d grad input");
  ensure_grad(grad_wq, wq.dims(), "dw4d grad wq");
  ensure_grad(grad_ws, ws.dims(), "dw4d grad ws");
  const std::size_t C = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t hs = input.dim(3), wsd = input.dim(4);
  const std::size_t P = hs * wsd;
  for (std::size_t c = 0; c < C; ++c) {
    const T* xc = input.data() + c * h * w * P;
    T* gxc = grad_input ? grad_input->data() + c * h * w * P : nullptr;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const T* g = grad_out.data() + ((c * h + y) * w + x) * P;
        for (std::size_t t = 0; t < kTaps; ++t) {
          std::size_t yy, xx;
          if (!shifted(y, static_cast<int>(t / 3) - 1, h, &yy) ||
              !shifted(x, static_cast<int>(t % 3) - 1, w, &xx)) {
            continue;
          }
          const std::size_t off = (yy * w + xx) * P;
          if (gxc) axpy(wq[c * kTaps + t], g, gxc + off, P);
          if (grad_wq) (*grad_wq)[c * kTaps + t] += dot(g, xc + off, P);
        }
        const std::size_t off = (y * w + x) * P;
        for (std::size_t t = 0; t < kTaps; ++t) {
          const int dy = static_cast<int>(t / 3) - 1;
          const int dx = static_cast<int>(t % 3) - 1;
          const T k = ws[c * kTaps + t];
          const std::size_t b_lo = dx < 0 ? 1 : 0;
          const std::size_t b_hi = dx > 0 ? wsd - 1 : wsd;
          if (b_hi <= b_lo) continue;
          T acc{0};
          for (std::size_t a = 0; a < hs; ++a) {
            std::size_t sa;
            if (!shifted(a, dy, hs, &sa)) continue;
            const T* grow = g + a * wsd + b_lo;
            const std::size_t src_off =
                off + sa * wsd + static_cast<std::size_t>(static_cast<long>(b_lo) + dx);
            if (gxc) axpy(k, grow, gxc + src_off, b_hi - b_lo);
            if (grad_ws) acc += dot(grow, xc + src_off, b_hi - b_lo);
          }
          if (grad_ws) (*grad_ws)[c * kTaps + t] += acc;
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
void check_pw(const BasicTensor<T>& input, const BasicTensor<T>& weight) {
  if (input.rank() < 2) throw ShapeError("pw4d input must have a channel axis and spatial dims");
  expect_rank(weight, 2, "pw4d weight");
  if (weight.dim(1) != input.dim(0)) {
    throw ShapeError("pw4d weight " + shape_string(weight.dims()) +
                     " does not match input channels " + shape_string(input.dims()));
  }
}

}  // namespace

// Point-wise kernels walk the positions in chunks so that every channel's
// slice of the chunk stays cache resident while all outputs are formed.
constexpr std::size_t kPointChunk = 512;

template <typename T>
BasicTensor<T> pw4d_conv(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                         const BasicTensor<T>& bias) {
  check_pw(input, weight);
  const std::size_t ci = input.dim(0), co = weight.dim(0);
  expect_dims(bias, {co}, "pw4d bias");
  const std::size_t N = input.size() / ci;
  Shape dims = input.dims();
  dims[0] = co;
  BasicTensor<T> out(dims);
  std::vector<const T*> rows;
  for (std::size_t j0 = 0; j0 < N; j0 += kPointChunk) {
    const std::size_t len = std::min(kPointChunk, N - j0);
    strided_rows(input.data() + j0, N, ci, &rows);
    for (std::size_t o = 0; o < co; ++o) {
      T* dst = out.data() + o * N + j0;
      std::fill(dst, dst + len, bias[o]);
      accumulate_rows(weight.data() + o * ci, ci, rows.data(), len, dst);
    }
  }
  return out;
}

template <typename T>
void pw4d_conv_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                        const BasicTensor<T>& grad_out, BasicTensor<T>* grad_input,
                        BasicTensor<T>* grad_weight, BasicTensor<T>* grad_bias) {
  check_pw(input, weight);
  const std::size_t ci = input.dim(0), co = weight.dim(0);
  const std::size_t N = input.size() / ci;
  Shape dims = input.dims();
  dims[0] = co;
  expect_dims(grad_out, dims, "pw4d grad");
  ensure_grad(grad_input, input.dims(), "pw4d grad input");
  ensure_grad(grad_weight, weight.dims(), "pw4d grad weight");
  ensure_grad(grad_bias, Shape{co}, "pw4d grad bias");
  const std::vector<T> wt =
      transpose(std::vector<T>(weight.values().begin(), weight.values().end()), co, ci);
  std::vector<const T*> in_rows, grad_rows;
  for (std::size_t j0 = 0; j0 < N; j0 += kPointChunk) {
    const std::size_t len = std::min(kPointChunk, N - j0);
    strided_rows(input.data() + j0, N, ci, &in_rows);
    strided_rows(grad_out.data() + j0, N, co, &grad_rows);
    for (std::size_t i = 0; i < ci; ++i) {
      if (grad_input) {
        accumulate_rows(wt.data() + i * co, co, grad_rows.data(), len,
                        grad_input->data() + i * N + j0);
      }
      if (grad_weight) {
        accumulate_dots(grad_rows.data(), co, in_rows[i], len, grad_weight->data() + i, ci);
      }
    }
    if (grad_bias) {
      for (std::size_t o = 0; o < co; ++o) (*grad_bias)[o] += sum(grad_rows[o], len);
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
void check_group_norm(const BasicTensor<T>& input, std::size_t groups,
                      const BasicTensor<T>& gamma) {
  if (input.rank() < 2) throw ShapeError("group norm input needs channel and spatial dims");
  const std::size_t c = input.dim(0);
  if (groups == 0 || c % groups != 0) {
    throw ConfigError("group norm: " + std::to_string(c) +
                      " channels not divisible into " + std::to_string(groups) + " groups");
  }
  expect_dims(gamma, {c}, "group norm gamma");
}

}  // namespace

template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& input, std::size_t groups,
                          const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          double eps, GroupNormStats<T>* stats) {
  check_group_norm(input, groups, gamma);
  const std::size_t c = input.dim(0);
  expect_dims(beta, {c}, "group norm beta");
  const std::size_t S = input.size() / c;
  const std::size_t cg = c / groups;
  const std::size_t n = cg * S;
  BasicTensor<T> out(input.dims());
  if (stats) {
    stats->mean.assign(groups, T{0});
    stats->rstd.assign(groups, T{0});
  }
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const T* src = input.data() + gi * n;
    double acc = 0;
    for (std::size_t p = 0; p < n; ++p) acc += src[p];
    const T mean = static_cast<T>(acc / static_cast<double>(n));
    double var = 0;
    for (std::size_t p = 0; p < n; ++p) {
      const double d = static_cast<double>(src[p]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const T rstd = static_cast<T>(1.0 / std::sqrt(var + eps));
    if (stats) {
      stats->mean[gi] = mean;
      stats->rstd[gi] = rstd;
    }
    for (std::size_t ch = 0; ch < cg; ++ch) {
      const std::size_t channel = gi * cg + ch;
      const T scale = rstd * gamma[channel];
      const T shift = beta[channel];
      const T* s = src + ch * S;
      T* d = out.data() + channel * S;
      for (std::size_t p = 0; p < S; ++p) d[p] = (s[p] - mean) * scale + shift;
    }
  }
  return out;
}

template <typename T>
void group_norm_backward(const BasicTensor<T>& input, std::size_t groups,
                         const BasicTensor<T>& gamma, const GroupNormStats<T>& stats,
                         const BasicTensor<T>& grad_out, BasicTensor<T>* grad_input,
                         BasicTensor<T>* grad_gamma, BasicTensor<T>* grad_beta) {
  check_group_norm(input, groups, gamma);
  expect_dims(grad_out, input.dims(), "group norm grad");
  const std::size_t c = input.dim(0);
  ensure_grad(grad_input, input.dims(), "group norm grad input");
  ensure_grad(grad_gamma, Shape{c}, "group norm grad gamma");
  ensure_grad(grad_beta, Shape{c}, "group norm grad beta");
  const std::size_t S = input.size() / c;
  const std::size_t cg = c / groups;
  const std::size_t n = cg * S;
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const T mean = stats.mean[gi];
    const T rstd = stats.rstd[gi];
    double sum_g = 0, sum_gx = 0;
    for (std::size_t ch = 0; ch < cg; ++ch) {
      const std::size_t channel = gi * cg + ch;
      const T* x = input.data() + channel * S;
      const T* g = grad_out.data() + channel * S;
      double gs = 0, gxs = 0;
      for (std::size_t p = 0; p < S; ++p) {
        const double xhat = static_cast<double>(x[p] - mean) * rstd;
        gs += g[p];
        gxs += g[p] * xhat;
      }
      if (grad_gamma) (*grad_gamma)[channel] += static_cast<T>(gxs);
      if (grad_beta) (*grad_beta)[channel] += static_cast<T>(gs);
      sum_g += gs * gamma[channel];
      sum_gx += gxs * gamma[channel];
    }
    if (!grad_input) continue;
    const T mean_g = static_cast<T>(sum_g / static_cast<double>(n));
    const T mean_gx = static_cast<T>(sum_gx / static_cast<double>(n));
    for (std::size_t ch = 0; ch < cg; ++ch) {
      const std::size_t channel = gi * cg + ch;
      const T* x = input.data() + channel * S;
      const T* g = grad_out.data() + channel * S;
      T* dx = grad_input->data() + channel * S;
      const T gm = gamma[channel];
      for (std::size_t p = 0; p < S; ++p) {
        const T xhat = (x[p] - mean) * rstd;
        dx[p] += rstd * (g[p] * gm - mean_g - xhat * mean_gx);
      }
    }
  }
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  BasicTensor<T> out(input.dims());
  const T* s = input.data();
  T* d = out.data();
  for (std::size_t i = 0; i < input.size(); ++i) d[i] = s[i] > T{0} ? s[i] : T{0};
  return out;
}

template <typename T>
void relu_backward(const BasicTensor<T>& output, const BasicTensor<T>& grad_out,
                   BasicTensor<T>* grad_input) {
  expect_dims(grad_out, output.dims(), "relu grad");
  ensure_grad(grad_input, output.dims(), "relu grad input");
  if (!grad_input) return;
  const T* o = output.data();
  const T* g = grad_out.data();
  T* d = grad_input->data();
  for (std::size_t i = 0; i < output.size(); ++i) d[i] += o[i] > T{0} ? g[i] : T{0};
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias) {
  const Conv2dGeometry g = conv2d_geometry(input, weight);
  expect_dims(bias, {g.co}, "conv2d bias");
  const std::size_t K = g.ci * g.k * g.k;
  BasicTensor<T> out({g.co, g.H, g.W});
  std::vector<T> cols(K * g.W);
  std::vector<unsigned char> valid(K);
  std::vector<const T*> rows(K);
  for (std::size_t y = 0; y < g.H; ++y) {
    fill_conv2d_columns(input.data(), g, y, cols.data(), valid.data());
    for (std::size_t k = 0; k < K; ++k) rows[k] = valid[k] ? cols.data() + k * g.W : nullptr;
    for (std::size_t o = 0; o < g.co; ++o) {
      T* dst = out.data() + (o * g.H + y) * g.W;
      std::fill(dst, dst + g.W, bias[o]);
      accumulate_rows(weight.data() + o * K, K, rows.data(), g.W, dst);
    }
  }
  return out;
}

template <typename T>
void conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                     const BasicTensor<T>& grad_out, BasicTensor<T>* grad_input,
                     BasicTensor<T>* grad_weight, BasicTensor<T>* grad_bias) {
  const Conv2dGeometry g = conv2d_geometry(input, weight);
  expect_dims(grad_out, {g.co, g.H, g.W}, "conv2d grad");
  ensure_grad(grad_input, input.dims(), "conv2d grad input");
  ensure_grad(grad_weight, weight.dims(), "conv2d grad weight");
  ensure_grad(grad_bias, Shape{g.co}, "conv2d grad bias");
  const std::size_t K = g.ci * g.k * g.k;
  const std::size_t plane = g.H * g.W;
  const std::vector<T> wt =
      transpose(std::vector<T>(weight.values().begin(), weight.values().end()), g.co, K);
  std::vector<T> cols(K * g.W), dcols(grad_input ? K * g.W : 0);
  std::vector<unsigned char> valid(K);
  std::vector<const T*> grad_rows;
  for (std::size_t y = 0; y < g.H; ++y) {
    strided_rows(grad_out.data() + y * g.W, plane, g.co, &grad_rows);
    if (grad_bias) {
      for (std::size_t o = 0; o < g.co; ++o) (*grad_bias)[o] += sum(grad_rows[o], g.W);
    }
    if (!grad_weight && !grad_input) continue;
    fill_conv2d_columns(input.data(), g, y, cols.data(), valid.data());
    if (grad_weight) {
      for (std::size_t k = 0; k < K; ++k) {
        if (valid[k]) {
          accumulate_dots(grad_rows.data(), g.co, cols.data() + k * g.W, g.W,
                          grad_weight->data() + k, K);
        }
      }
    }
    if (grad_input) {
      for (std::size_t k = 0; k < K; ++k) {
        if (!valid[k]) continue;
        T* dst = dcols.data() + k * g.W;
        std::fill(dst, dst + g.W, T{0});
        accumulate_rows(wt.data() + k * g.co, g.co, grad_rows.data(), g.W, dst);
      }
      scatter_conv2d_columns(dcols.data(), valid.data(), g, y, grad_input->data());
    }
  }
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& input, std::size_t out_h,
                               std::size_t out_w) {
  expect_rank(input, 3, "bilinear resize input");
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear resize to an empty grid");
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const ResizeAxis ay = resize_axis(H, out_h);
  const ResizeAxis ax = resize_axis(W, out_w);
  BasicTensor<T> out({C, out_h, out_w});
  for (std::size_t c = 0; c < C; ++c) {
    const T* src = input.data() + c * H * W;
    T* dst = out.data() + c * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const T* r0 = src + ay.lo[y] * W;
      const T* r1 = src + ay.hi[y] * W;
      const T ly = static_cast<T>(ay.frac[y]);
      for (std::size_t x = 0; x < out_w; ++x) {
        const T lx = static_cast<T>(ax.frac[x]);
        const T top = r0[ax.lo[x]] + lx * (r0[ax.hi[x]] - r0[ax.lo[x]]);
        const T bot = r1[ax.lo[x]] + lx * (r1[ax.hi[x]] - r1[ax.lo[x]]);
        dst[y * out_w + x] = top + ly * (bot - top);
      }
    }
  }
  return out;
}

template <typename T>
void bilinear_resize_backward(const Shape& input_dims, const BasicTensor<T>& grad_out,
                              BasicTensor<T>* grad_input) {
  if (input_dims.size() != 3) throw ShapeError("bilinear resize input must be rank 3");
  expect_rank(grad_out, 3, "bilinear resize grad");
  const std::size_t C = input_dims[0], H = input_dims[1], W = input_dims[2];
  if (grad_out.dim(0) != C) throw ShapeError("bilinear resize grad channel mismatch");
  ensure_grad(grad_input, input_dims, "bilinear resize grad input");
  if (!grad_input) return;
  const std::size_t out_h = grad_out.dim(1), out_w = grad_out.dim(2);
  const ResizeAxis ay = resize_axis(H, out_h);
  const ResizeAxis ax = resize_axis(W, out_w);
  for (std::size_t c = 0; c < C; ++c) {
    const T* g = grad_out.data() + c * out_h * out_w;
    T* dst = grad_input->data() + c * H * W;
    for (std::size_t y = 0; y < out_h; ++y) {
      const T ly = static_cast<T>(ay.frac[y]);
      T* r0 = dst + ay.lo[y] * W;
      T* r1 = dst + ay.hi[y] * W;
      for (std::size_t x = 0; x < out_w; ++x) {
        const T lx = static_cast<T>(ax.frac[x]);
        const T v = g[y * out_w + x];
        const T top = v * (T{1} - ly);
        const T bot = v * ly;
        r0[ax.lo[x]] += top * (T{1} - lx);
        r0[ax.hi[x]] += top * lx;
        r1[ax.lo[x]] += bot * (T{1} - lx);
        r1[ax.hi[x]] += bot * lx;
      }
    }
  }
}

template <typename T>
BasicTensor<T> nearest_resize(const BasicTensor<T>& input, std::size_t out_h,
                              std::size_t out_w) {
  expect_rank(input, 2, "nearest resize input");
  const std::size_t H = input.dim(0), W = input.dim(1);
  BasicTensor<T> out({out_h, out_w});
  auto src_index = [](std::size_t o, std::size_t in, std::size_t out_n) {
    const std::size_t s = ((2 * o + 1) * in) / (2 * out_n);
    return std::min(s, in - 1);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = src_index(y, H, out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      out[y * out_w + x] = input[sy * W + src_index(x, W, out_w)];
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> avg_over_support_dims(const BasicTensor<T>& input) {
  if (input.rank() < 3) throw ShapeError("support pooling needs at least rank 3");
  Shape dims(input.dims().begin(), input.dims().end() - 2);
  const std::size_t plane = input.dim(input.rank() - 2) * input.dim(input.rank() - 1);
  BasicTensor<T> out(dims);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T* src = input.data() + i * plane;
    double acc = 0;
    for (std::size_t p = 0; p < plane; ++p) acc += src[p];
    out[i] = static_cast<T>(acc / static_cast<double>(plane));
  }
  return out;
}

template <typename T>
void avg_over_support_dims_backward(const Shape& input_dims, const BasicTensor<T>& grad_out,
                                    BasicTensor<T>* grad_input) {
  if (input_dims.size() < 3) throw ShapeError("support pooling needs at least rank 3");
  ensure_grad(grad_input, input_dims, "support pooling grad input");
  if (!grad_input) return;
  const std::size_t plane = input_dims[input_dims.size() - 2] * input_dims.back();
  if (grad_out.size() * plane != grad_input->size()) {
    throw ShapeError("support pooling grad size mismatch");
  }
  const T inv = T{1} / static_cast<T>(plane);
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    const T g = grad_out[i] * inv;
    T* dst = grad_input->data() + i * plane;
    for (std::size_t p = 0; p < plane; ++p) dst[p] += g;
  }
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
void check_ce(const BasicTensor<T>& logits, const BasicTensor<T>& target) {
  expect_rank(logits, 3, "cross-entropy logits");
  if (logits.dim(0) != 2) throw ShapeError("cross-entropy logits must have 2 channels");
  expect_dims(target, {logits.dim(1), logits.dim(2)}, "cross-entropy target");
  expect_binary(target, "cross-entropy target");
}

}  // namespace

template <typename T>
T softmax_cross_entropy(const BasicTensor<T>& logits, const BasicTensor<T>& target) {
  check_ce(logits, target);
  const std::size_t N = target.size();
  const T* l0 = logits.data();
  const T* l1 = logits.data() + N;
  double acc = 0;
  for (std::size_t p = 0; p < N; ++p) {
    const double a = l0[p], b = l1[p];
    const double m = std::max(a, b);
    const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
    acc += lse - (target[p] != T{0} ? b : a);
  }
  return static_cast<T>(acc / static_cast<double>(N));
}

template <typename T>
void softmax_cross_entropy_backward(const BasicTensor<T>& logits,
                                    const BasicTensor<T>& target, T grad_loss,
                                    BasicTensor<T>* grad_logits) {
  check_ce(logits, target);
  ensure_grad(grad_logits, logits.dims(), "cross-entropy grad");
  if (!grad_logits) return;
  const std::size_t N = target.size();
  const T scale = grad_loss / static_cast<T>(N);
  const T* l0 = logits.data();
  const T* l1 = logits.data() + N;
  T* g0 = grad_logits->data();
  T* g1 = grad_logits->data() + N;
  for (std::size_t p = 0; p < N; ++p) {
    // p1 = sigmoid(l1 - l0)
    const T d = l1[p] - l0[p];
    const T p1 = d >= 0 ? T{1} / (T{1} + std::exp(-d)) : std::exp(d) / (T{1} + std::exp(d));
    const T t = target[p];
    g0[p] += scale * ((T{1} - p1) - (T{1} - t));
    g1[p] += scale * (p1 - t);
  }
}

// ---------------------------------------------------------------------------

#define FSS_INSTANTIATE_KERNELS(T)                                                          \
  template BasicTensor<T> cosine_similarity_map(const BasicTensor<T>&,                      \
                                                const BasicTensor<T>&);                     \
  template void cosine_similarity_map_backward(const BasicTensor<T>&,                       \
                                               const BasicTensor<T>&,                       \
                                               const BasicTensor<T>&, BasicTensor<T>*,      \
                                               BasicTensor<T>*);                            \
  template BasicTensor<T> cp4d_conv(const BasicTensor<T>&, const BasicTensor<T>&,           \
                                    const BasicTensor<T>&, const BasicTensor<T>&, int);     \
  template void cp4d_conv_backward(const BasicTensor<T>&, const BasicTensor<T>&,            \
                                   const BasicTensor<T>&, int, const BasicTensor<T>&,       \
                                   BasicTensor<T>*, BasicTensor<T>*, BasicTensor<T>*,       \
                                   BasicTensor<T>*);                                        \
  template BasicTensor<T> dw4d_conv(const BasicTensor<T>&, const BasicTensor<T>&,           \
                                    const BasicTensor<T>&);                                 \
  template void dw4d_conv_backward(const BasicTensor<T>&, const BasicTensor<T>&,            \
                                   const BasicTensor<T>&, const BasicTensor<T>&,            \
                                   BasicTensor<T>*, BasicTensor<T>*, BasicTensor<T>*);      \
  template BasicTensor<T> pw4d_conv(const BasicTensor<T>&, const BasicTensor<T>&,           \
                                    const BasicTensor<T>&);                                 \
  template void pw4d_conv_backward(const BasicTensor<T>&, const BasicTensor<T>&,            \
                                   const BasicTensor<T>&, BasicTensor<T>*, BasicTensor<T>*, \
                                   BasicTensor<T>*);                                        \
  template BasicTensor<T> group_norm(const BasicTensor<T>&, std::size_t,                    \
                                     const BasicTensor<T>&, const BasicTensor<T>&, double,  \
                                     GroupNormStats<T>*);                                   \
  template void group_norm_backward(const BasicTensor<T>&, std::size_t,                     \
                                    const BasicTensor<T>&, const GroupNormStats<T>&,        \
                                    const BasicTensor<T>&, BasicTensor<T>*,                 \
                                    BasicTensor<T>*, BasicTensor<T>*);                      \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                      \
  template void relu_backward(const BasicTensor<T>&, const BasicTensor<T>&,                 \
                              BasicTensor<T>*);                                             \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,              \
                                 const BasicTensor<T>&);                                    \
  template void conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&,               \
                                const BasicTensor<T>&, BasicTensor<T>*, BasicTensor<T>*,    \
                                BasicTensor<T>*);                                           \
  template BasicTensor<T> bilinear_resize(const BasicTensor<T>&, std::size_t, std::size_t); \
  template void bilinear_resize_backward(const Shape&, const BasicTensor<T>&,               \
                                         BasicTensor<T>*);                                  \
  template BasicTensor<T> nearest_resize(const BasicTensor<T>&, std::size_t, std::size_t);  \
  template BasicTensor<T> avg_over_support_dims(const BasicTensor<T>&);                     \
  template void avg_over_support_dims_backward(const Shape&, const BasicTensor<T>&,         \
                                               BasicTensor<T>*);                            \
  template T softmax_cross_entropy(const BasicTensor<T>&, const BasicTensor<T>&);           \
  template void softmax_cross_entropy_backward(const BasicTensor<T>&,                       \
                                               const BasicTensor<T>&, T, BasicTensor<T>*);  \
  template void expect_binary(const BasicTensor<T>&, const char*);

FSS_INSTANTIATE_KERNELS(float)
FSS_INSTANTIATE_KERNELS(double)

#undef FSS_INSTANTIATE_KERNELS

}  // namespace fss::kernels
