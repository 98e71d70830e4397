#include "mscc/layers.hpp"

#include <cmath>
#include <vector>

namespace mscc {

Conv2dLayer Conv2dLayer::init(i64 c_in, i64 c_out, i64 k, i64 stride, Rng& rng) {
    const i64 fan_in = c_in * k * k;
    const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<double> w(static_cast<std::size_t>(c_out * c_in * k * k));
    for (double& v : w) v = rng.normal() * scale;
    Conv2dLayer layer;
    layer.weight = Tensor::from_data({c_out, c_in, k, k}, std::move(w)).set_requires_grad();
    layer.bias = Tensor::zeros({c_out}).set_requires_grad();
    layer.stride = stride;
    layer.pad = (k - 1) / 2;
    return layer;
}

LinearLayer LinearLayer::init(i64 in, i64 out, Rng& rng) {
    const double scale = std::sqrt(2.0 / static_cast<double>(in));
    std::vector<double> w(static_cast<std::size_t>(out * in));
    for (double& v : w) v = rng.normal() * scale;
    LinearLayer layer;
    layer.weight = Tensor::from_data({out, in}, std::move(w)).set_requires_grad();
    layer.bias = Tensor::zeros({out}).set_requires_grad();
    return layer;
}

}  // namespace mscc
