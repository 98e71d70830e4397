#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mscc/tensor.hpp"

namespace mscc {

/// Named trainable leaves in a stable order; the order defines the checkpoint
/// layout and the optimizer walk.
using ParamRegistry = std::vector<std::pair<std::string, Tensor>>;

inline i64 param_count(const ParamRegistry& params) {
    i64 n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

/// Convolution + channel bias. He fan-in init for the kernel, zero bias.
struct Conv2dLayer {
    Tensor weight;  // [C_out, C_in, k, k]
    Tensor bias;    // [C_out]
    i64 stride = 1;
    i64 pad = 0;

    static Conv2dLayer init(i64 c_in, i64 c_out, i64 k, i64 stride, Rng& rng);

    Tensor forward(const Tensor& x) const {
        return add(conv2d(x, weight, stride, pad), reshape(bias, {bias.dim(0), 1, 1}));
    }

    void collect(const std::string& prefix, ParamRegistry& out) const {
        out.emplace_back(prefix + ".w", weight);
        out.emplace_back(prefix + ".b", bias);
    }
};

/// Fully connected head on a flat feature vector.
struct LinearLayer {
    Tensor weight;  // [out, in]
    Tensor bias;    // [out]

    static LinearLayer init(i64 in, i64 out, Rng& rng);

    Tensor forward(const Tensor& x) const {
        return reshape(add(matmul(weight, reshape(x, {x.numel(), 1})), reshape(bias, {bias.dim(0), 1})),
                       {bias.dim(0)});
    }

    void collect(const std::string& prefix, ParamRegistry& out) const {
        out.emplace_back(prefix + ".w", weight);
        out.emplace_back(prefix + ".b", bias);
    }
};

}  // namespace mscc
