// AVX2 variants, compiled per function through a target attribute.
#include "kernels_impl.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <cmath>

#define PDC_AVX2 __attribute__((target("avx2,fma")))

namespace pdc::simd::detail {
namespace {

PDC_AVX2 inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

PDC_AVX2 double dot(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  if (i + 4 <= n) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    i += 4;
  }
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

PDC_AVX2 double squared_distance(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d t = _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
    acc = _mm256_fmadd_pd(t, t, acc);
  }
  double s = hsum(acc);
  for (; i < n; ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

PDC_AVX2 void axpy(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(va, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

PDC_AVX2 void gram(const double* z, std::size_t n, std::size_t d, double* out) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const double v = dot(z + i * d, z + j * d, d);
      out[i * n + j] = v;
      out[j * n + i] = v;
    }
  }
}

// (cx, cy, w, h) -> (w, h, w, h)
PDC_AVX2 inline __m256d scale_of(__m256d box) {
  return _mm256_permute4x64_pd(box, _MM_SHUFFLE(3, 2, 3, 2));
}

PDC_AVX2 void encode_offsets(const double* p, const double* g, double* out, std::size_t n) {
  for (std::size_t k = 0; k < n; ++k) {
    const __m256d vp = _mm256_loadu_pd(p + 4 * k);
    const __m256d vg = _mm256_loadu_pd(g + 4 * k);
    _mm256_storeu_pd(out + 4 * k, _mm256_div_pd(_mm256_sub_pd(vp, vg), scale_of(vg)));
  }
}

PDC_AVX2 void decode_offsets(const double* g, const double* o, double* out, std::size_t n) {
  for (std::size_t k = 0; k < n; ++k) {
    const __m256d vg = _mm256_loadu_pd(g + 4 * k);
    const __m256d vo = _mm256_loadu_pd(o + 4 * k);
    _mm256_storeu_pd(out + 4 * k, _mm256_add_pd(vg, _mm256_mul_pd(vo, scale_of(vg))));
  }
}

// Four rows of ys per step, one per lane; each lane accumulates its distance
// in scalar-kernel order.
PDC_AVX2 double rbf_row_sum(const double* x, const double* ys, std::size_t ny, std::size_t d,
                            double gamma) {
  double s = 0.0;
  alignas(32) double dist[4];
  std::size_t j = 0;
  for (; j + 4 <= ny; j += 4) {
    const double* y0 = ys + j * d;
    __m256d acc = _mm256_setzero_pd();
    for (std::size_t k = 0; k < d; ++k) {
      const __m256d yv = _mm256_set_pd(y0[3 * d + k], y0[2 * d + k], y0[d + k], y0[k]);
      const __m256d t = _mm256_sub_pd(_mm256_set1_pd(x[k]), yv);
      acc = _mm256_add_pd(acc, _mm256_mul_pd(t, t));
    }
    _mm256_store_pd(dist, acc);
    for (double dd : dist) s += std::exp(-gamma * dd);
  }
  for (; j < ny; ++j) {
    const double* y = ys + j * d;
    double dd = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double t = x[k] - y[k];
      dd += t * t;
    }
    s += std::exp(-gamma * dd);
  }
  return s;
}

}  // namespace

const KernelTable avx2_table{
    Isa::avx2, dot, squared_distance, axpy, gram, encode_offsets, decode_offsets, rbf_row_sum,
};

}  // namespace pdc::simd::detail

#endif
