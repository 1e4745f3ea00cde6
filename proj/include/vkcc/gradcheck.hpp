#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "vkcc/tensor.hpp"

namespace vkcc {

struct GradcheckResult {
    double max_rel_err = 0.0;  ///< worst relative disagreement seen
    Eigen::Index checked = 0;  ///< number of coordinates probed
};

/// Compares reverse-mode gradients against central finite differences.
///
/// `fn` maps the given leaves to a scalar tensor and is re-evaluated under
/// coordinate perturbations, so it must be a pure function of the leaf
/// values. Every leaf must require gradients. Per leaf at most
/// `max_per_leaf` coordinates are probed, chosen by a deterministic stride
/// so runs are reproducible. The relative error of a coordinate is
/// |g - fd| / max(1e-6, |g|, |fd|).
template <typename S, typename Fn>
GradcheckResult gradcheck(Fn&& fn, const std::vector<TensorT<S>>& leaves, S h = S(1e-5),
                          Eigen::Index max_per_leaf = 25) {
    if (leaves.empty()) throw InvalidInput("gradcheck: no leaves");
    for (const auto& leaf : leaves)
        if (!leaf.requires_grad()) throw InvalidInput("gradcheck: leaf does not require grad");

    for (auto leaf : leaves) leaf.zero_grad();  // handle copy, same node
    {
        TensorT<S> loss = fn(leaves);
        loss.backward();
    }
    std::vector<typename TensorT<S>::Array> analytic;
    analytic.reserve(leaves.size());
    for (auto leaf : leaves) analytic.push_back(leaf.grad());

    GradcheckResult result;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& node = *leaves[li].ptr();
        const Eigen::Index size = node.value.size();
        const Eigen::Index count = std::min<Eigen::Index>(size, max_per_leaf);
        const Eigen::Index stride = std::max<Eigen::Index>(1, size / count);
        for (Eigen::Index k = 0; k < count; ++k) {
            const Eigen::Index i = std::min(k * stride, size - 1);
            const S saved = node.value(i);
            node.value(i) = saved + h;
            const S fp = fn(leaves).item();
            node.value(i) = saved - h;
            const S fm = fn(leaves).item();
            node.value(i) = saved;
            const double fd = (double(fp) - double(fm)) / (2.0 * double(h));
            const double g = double(analytic[li](i));
            const double rel =
                std::abs(g - fd) / std::max({1e-6, std::abs(g), std::abs(fd)});
            result.max_rel_err = std::max(result.max_rel_err, rel);
            ++result.checked;
        }
    }
    return result;
}

}  // namespace vkcc
