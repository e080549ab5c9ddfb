// SPDX-License-Identifier: Apache-2.0
#include "lgen/numcore/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace lgen::num {

GradCheckResult finite_diff_check_at(const std::function<Tensord(const Tensord&)>& f, Tensord x,
                                     const std::vector<std::size_t>& indices, double eps, double abs_floor) {
    if (x.node().backward) {
        throw GradError("finite_diff_check: x must be a leaf tensor");
    }
    const bool had_flag = x.requires_grad();
    x.set_requires_grad(true);
    x.zero_grad();
    backward(f(x));
    const std::vector<double> analytic = x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end())
                                                      : std::vector<double>(x.numel(), 0.0);
    x.zero_grad();

    GradCheckResult result;
    NoGradGuard guard;
    auto data = x.data_mut();
    for (std::size_t i : indices) {
        const double saved = data[i];
        data[i] = saved + eps;
        const double fp = f(x).item();
        data[i] = saved - eps;
        const double fm = f(x).item();
        data[i] = saved;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double diff = std::abs(analytic[i] - numeric);
        const double err = diff <= abs_floor ? 0.0 : diff / std::max(std::abs(analytic[i]), std::abs(numeric));
        if (i == indices.front() || err > result.max_rel_error) {
            result = {err, i, analytic[i], numeric};
        }
    }
    x.set_requires_grad(had_flag);
    return result;
}

GradCheckResult finite_diff_check(const std::function<Tensord(const Tensord&)>& f, Tensord x, double eps,
                                  double abs_floor) {
    std::vector<std::size_t> all(x.numel());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return finite_diff_check_at(f, std::move(x), all, eps, abs_floor);
}

}  // namespace lgen::num
