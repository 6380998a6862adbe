#include <cmath>

#include "kernels_impl.hpp"

namespace pdc::simd::detail {
namespace {

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

double squared_distance(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void gram(const double* z, std::size_t n, std::size_t d, double* out) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const double v = dot(z + i * d, z + j * d, d);
      out[i * n + j] = v;
      out[j * n + i] = v;
    }
  }
}

void encode_offsets(const double* p, const double* g, double* out, std::size_t n) {
  for (std::size_t k = 0; k < n; ++k, p += 4, g += 4, out += 4) {
    out[0] = (p[0] - g[0]) / g[2];
    out[1] = (p[1] - g[1]) / g[3];
    out[2] = (p[2] - g[2]) / g[2];
    out[3] = (p[3] - g[3]) / g[3];
  }
}

void decode_offsets(const double* g, const double* o, double* out, std::size_t n) {
  for (std::size_t k = 0; k < n; ++k, g += 4, o += 4, out += 4) {
    out[0] = g[0] + o[0] * g[2];
    out[1] = g[1] + o[1] * g[3];
    out[2] = g[2] + o[2] * g[2];
    out[3] = g[3] + o[3] * g[3];
  }
}

double rbf_row_sum(const double* x, const double* ys, std::size_t ny, std::size_t d, double gamma) {
  double s = 0.0;
  for (std::size_t j = 0; j < ny; ++j) s += std::exp(-gamma * squared_distance(x, ys + j * d, d));
  return s;
}

}  // namespace

const KernelTable scalar_table{
    Isa::scalar, dot, squared_distance, axpy, gram, encode_offsets, decode_offsets, rbf_row_sum,
};

}  // namespace pdc::simd::detail
