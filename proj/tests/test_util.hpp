#pragma once

#include <functional>
#include <vector>

#include "vlmir/core/tensor.hpp"

namespace vlmir::testutil {

// Central finite differences of a scalar-valued function w.r.t. the entries
// of `param`, compared against the analytic gradient already accumulated by
// backward(). Returns the worst relative error over checked entries.
inline double grad_check(vlmir::Tensor<double>& param,
                         const std::function<vlmir::Tensor<double>()>& loss_fn,
                         const std::vector<size_t>& indices, double h = 1e-5) {
    auto loss = loss_fn();
    loss.backward();
    std::vector<double> analytic;
    for (size_t i : indices) analytic.push_back(param.grad()[i]);

    double worst = 0.0;
    for (size_t k = 0; k < indices.size(); ++k) {
        const size_t i = indices[k];
        const double orig = param.data()[i];
        param.data()[i] = orig + h;
        const double lp = loss_fn().item();
        param.data()[i] = orig - h;
        const double lm = loss_fn().item();
        param.data()[i] = orig;
        const double fd = (lp - lm) / (2.0 * h);
        const double denom = std::max({std::abs(fd), std::abs(analytic[k]), 1e-8});
        worst = std::max(worst, std::abs(fd - analytic[k]) / denom);
    }
    return worst;
}

inline std::vector<size_t> all_indices(const vlmir::Tensor<double>& t) {
    std::vector<size_t> idx(size_t(t.size()));
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return idx;
}

}  // namespace vlmir::testutil
