#include "trajgpt/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "trajgpt/errors.hpp"

namespace trajgpt {

std::vector<double> finite_diff_gradient(const std::function<double(std::span<const double>)>& f,
                                         std::span<const double> params, double eps) {
    require(eps > 0.0, "finite_diff: eps must be positive");
    std::vector<double> probe(params.begin(), params.end());
    std::vector<double> grad(params.size());
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double saved = probe[i];
        probe[i] = saved + eps;
        const double up = f(probe);
        probe[i] = saved - eps;
        const double down = f(probe);
        probe[i] = saved;
        require(std::isfinite(up) && std::isfinite(down),
                "finite_diff: objective is non-finite at coordinate " + std::to_string(i));
        grad[i] = (up - down) / (2.0 * eps);
    }
    return grad;
}

double finite_diff_check(const std::function<double(std::span<const double>)>& f,
                         std::span<const double> params, std::span<const double> analytic,
                         double eps) {
    require(params.size() == analytic.size(), "finite_diff: gradient length mismatch");
    const std::vector<double> fd = finite_diff_gradient(f, params, eps);
    double worst = 0.0;
    for (std::size_t i = 0; i < fd.size(); ++i) {
        worst = std::max(worst, std::abs(analytic[i] - fd[i]) / (std::abs(fd[i]) + 1e-8));
    }
    return worst;
}

}  // namespace trajgpt
