#pragma once

// Central finite-difference gradient oracle, independent of the reverse-mode
// path it checks. `loss_fn` must be a pure function of the tensors' current
// data (rebuild the graph on every call; hold any stochastic realization
// fixed outside).

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "agrikd/tensor.hpp"

namespace gradcheck {

struct Report {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    std::string worst;  // "tensor#k[i]" of the worst component
};

inline double rel_err(double analytic, double numeric) {
    const double scale = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
    return std::fabs(analytic - numeric) / scale;
}

/// Analytic grads via backward() vs central differences with step h.
inline Report check(const std::function<agrikd::Tensor()>& loss_fn,
                    const std::vector<agrikd::Tensor>& leaves, double h = 1e-5) {
    for (auto leaf : leaves) leaf.zero_grad();
    agrikd::Tensor loss = loss_fn();
    agrikd::backward(loss);

    Report report;
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        agrikd::Tensor leaf = leaves[k];
        std::vector<double> analytic(leaf.numel(), 0.0);
        if (leaf.has_grad()) analytic = leaf.grad();
        auto& data = leaf.mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            double fplus, fminus;
            {
                agrikd::NoGradGuard guard;
                data[i] = saved + h;
                fplus = loss_fn().value();
                data[i] = saved - h;
                fminus = loss_fn().value();
            }
            data[i] = saved;
            const double numeric = (fplus - fminus) / (2.0 * h);
            const double err = rel_err(analytic[i], numeric);
            ++report.checked;
            if (err > report.max_rel_err) {
                report.max_rel_err = err;
                report.worst = "tensor#" + std::to_string(k) + "[" + std::to_string(i) + "]";
            }
        }
    }
    return report;
}

}  // namespace gradcheck
