// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>

#include "lgen/numcore/tensor.hpp"

namespace lgen::num {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Compares backward() against central differences (f(x+e)-f(x-e))/2e for
/// every element of `x`. Elementwise error is |a-n| / max(|a|,|n|); pairs
/// closer than `abs_floor` count as exact. `x` must be a leaf.
GradCheckResult finite_diff_check(const std::function<Tensord(const Tensord&)>& f, Tensord x, double eps = 1e-5,
                                  double abs_floor = 1e-8);

/// Same check restricted to the listed element indices of `x`.
GradCheckResult finite_diff_check_at(const std::function<Tensord(const Tensord&)>& f, Tensord x,
                                     const std::vector<std::size_t>& indices, double eps = 1e-5,
                                     double abs_floor = 1e-8);

}  // namespace lgen::num
