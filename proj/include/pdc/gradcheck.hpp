#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "pdc/matrix.hpp"
#include "pdc/rng.hpp"

namespace pdc {

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
std::vector<double> finite_difference_gradient(
    const std::function<double(std::span<const double>)>& f, std::span<const double> x,
    double step = 1e-5);

// max_i |a_i - b_i| / max(max_i |a_i|, max_i |b_i|); 0 when both are zero.
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric);

// n rows of i.i.d. Gaussian directions, normalized to unit length.
Matrix random_unit_rows(std::size_t n, std::size_t d, Rng& rng);

struct SupConCheck {
  double loss = 0.0;
  double max_relative_error = 0.0;
};

// Analytic SupCon gradient against central differences on a seeded random
// batch (n embeddings, round-robin labels over `classes`).
SupConCheck supcon_gradient_check(std::uint64_t seed, std::size_t n = 12, std::size_t classes = 3,
                                  std::size_t dim = 8, double tau = 0.2, double step = 1e-5);

}  // namespace pdc
