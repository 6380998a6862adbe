#include "pdc/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "pdc/losses.hpp"

namespace pdc {

std::vector<double> finite_difference_gradient(
    const std::function<double(std::span<const double>)>& f, std::span<const double> x,
    double step) {
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double up = f(probe);
    probe[i] = x[i] - step;
    const double down = f(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < analytic.size() && i < numeric.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return scale == 0.0 ? 0.0 : diff / scale;
}

Matrix random_unit_rows(std::size_t n, std::size_t d, Rng& rng) {
  Matrix z(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = z.row(i);
    double norm2 = 0.0;
    for (double& v : row) {
      v = rng.normal();
      norm2 += v * v;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& v : row) v *= inv;
  }
  return z;
}

SupConCheck supcon_gradient_check(std::uint64_t seed, std::size_t n, std::size_t classes,
                                  std::size_t dim, double tau, double step) {
  Rng rng = Rng::keyed(seed, 0x5c0c);
  const Matrix z = random_unit_rows(n, dim, rng);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % classes);

  const auto res = supcon_loss_and_grad(z, labels, tau);
  const auto numeric = finite_difference_gradient(
      [&](std::span<const double> flat) {
        Matrix zz(n, dim);
        std::copy(flat.begin(), flat.end(), zz.values().begin());
        return supcon_loss(zz, labels, tau);
      },
      z.values(), step);
  return {res.loss, max_relative_error(res.grad.values(), numeric)};
}

}  // namespace pdc
