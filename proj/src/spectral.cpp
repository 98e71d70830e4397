#include "mscc/spectral.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace mscc {

namespace {
constexpr double kPi = 3.14159265358979323846;

double dct_sample(i64 freq, i64 pos, i64 extent) {
    const double alpha = freq == 0 ? std::sqrt(1.0 / static_cast<double>(extent))
                                   : std::sqrt(2.0 / static_cast<double>(extent));
    return alpha * std::cos(kPi * static_cast<double>(freq) *
                            (static_cast<double>(pos) + 0.5) / static_cast<double>(extent));
}
}  // namespace

SpectralBasis build_basis(i64 u_extent, i64 v_extent) {
    require(u_extent >= 1 && v_extent >= 1, "build_basis: extents must be positive");
    const i64 n = u_extent * v_extent;
    std::vector<double> tiles(static_cast<std::size_t>(n * u_extent * v_extent));
    for (i64 u = 0; u < u_extent; ++u)
        for (i64 v = 0; v < v_extent; ++v) {
            const i64 band = u * v_extent + v;
            for (i64 i = 0; i < u_extent; ++i)
                for (i64 j = 0; j < v_extent; ++j)
                    tiles[static_cast<std::size_t>((band * u_extent + i) * v_extent + j)] =
                        dct_sample(u, i, u_extent) * dct_sample(v, j, v_extent);
        }
    SpectralBasis basis;
    basis.u_extent = u_extent;
    basis.v_extent = v_extent;
    basis.tiles = Tensor::from_data({n, u_extent, v_extent}, std::move(tiles));
    return basis;
}

void SpectralConfig::validate(i64 channels) const {
    const i64 n = bands();
    require_config(u_extent >= 1 && v_extent >= 1, "spectral: basis extents must be positive");
    require_config(groups >= 1 && groups <= n,
                   "spectral: group count M must satisfy 1 <= M <= N, got M=" +
                       std::to_string(groups) + ", N=" + std::to_string(n));
    require_config(channels % n == 0, "spectral: N=" + std::to_string(n) +
                                          " must divide channel width C=" + std::to_string(channels));
    require_config(channels % groups == 0,
                   "spectral: M=" + std::to_string(groups) +
                       " must divide channel width C=" + std::to_string(channels));
}

Tensor modulation_mask(const SpectralBasis& basis, i64 channels, i64 h, i64 w) {
    const i64 n = basis.bands();
    require_config(channels % n == 0, "spectral_transform: N=" + std::to_string(n) +
                                          " must divide C=" + std::to_string(channels));
    const i64 per_band = channels / n;
    const i64 u = basis.u_extent, v = basis.v_extent;
    const auto tiles = basis.tiles.data();
    std::vector<double> mask(static_cast<std::size_t>(channels * h * w));
    for (i64 c = 0; c < channels; ++c) {
        const i64 band = c / per_band;
        const double* tile = tiles.data() + band * u * v;
        for (i64 i = 0; i < h; ++i)
            for (i64 j = 0; j < w; ++j)
                mask[static_cast<std::size_t>((c * h + i) * w + j)] = tile[(i % u) * v + (j % v)];
    }
    return Tensor::from_data({channels, h, w}, std::move(mask));
}

namespace {

// Per-block DCT coefficient for the channel's own band, broadcast back over
// the block. Kept as a gated experiment next to the default modulation form.
Tensor block_dct_transform(const Tensor& features, const SpectralBasis& basis) {
    const i64 c = features.dim(0), h = features.dim(1), w = features.dim(2);
    const i64 n = basis.bands();
    require_config(c % n == 0, "spectral_transform: N must divide C");
    const i64 per_band = c / n;
    const i64 u = basis.u_extent, v = basis.v_extent;
    const auto tiles = basis.tiles.data();
    const auto px = features.data();
    std::vector<double> out(static_cast<std::size_t>(c * h * w));
    const i64 by = (h + u - 1) / u, bx = (w + v - 1) / v;
    for (i64 ch = 0; ch < c; ++ch) {
        const double* tile = tiles.data() + (ch / per_band) * u * v;
        for (i64 b0 = 0; b0 < by; ++b0)
            for (i64 b1 = 0; b1 < bx; ++b1) {
                const i64 y0 = b0 * u, x0 = b1 * v;
                const i64 y1 = std::min(y0 + u, h), x1 = std::min(x0 + v, w);
                double coef = 0.0;
                for (i64 i = y0; i < y1; ++i)
                    for (i64 j = x0; j < x1; ++j)
                        coef += px[(ch * h + i) * w + j] * tile[(i - y0) * v + (j - x0)];
                for (i64 i = y0; i < y1; ++i)
                    for (i64 j = x0; j < x1; ++j)
                        out[static_cast<std::size_t>((ch * h + i) * w + j)] = coef;
            }
    }
    auto node_out = Tensor::from_data({c, h, w}, std::move(out));
    if (features.requires_grad()) {
        auto node = node_out.impl();
        node->requires_grad = true;
        node->parents = {features.impl()};
        node->op = "block_dct";
        const Tensor tiles_t = basis.tiles;
        node->backward_fn = [c, h, w, u, v, per_band, tiles_t](detail::Node& nd) {
            detail::Node& X = *nd.parents[0];
            X.ensure_grad();
            const auto tl = tiles_t.data();
            const i64 by2 = (h + u - 1) / u, bx2 = (w + v - 1) / v;
            for (i64 ch = 0; ch < c; ++ch) {
                const double* tile = tl.data() + (ch / per_band) * u * v;
                for (i64 b0 = 0; b0 < by2; ++b0)
                    for (i64 b1 = 0; b1 < bx2; ++b1) {
                        const i64 y0 = b0 * u, x0 = b1 * v;
                        const i64 y1 = std::min(y0 + u, h), x1 = std::min(x0 + v, w);
                        double gsum = 0.0;
                        for (i64 i = y0; i < y1; ++i)
                            for (i64 j = x0; j < x1; ++j)
                                gsum += nd.grad[static_cast<std::size_t>((ch * h + i) * w + j)];
                        for (i64 i = y0; i < y1; ++i)
                            for (i64 j = x0; j < x1; ++j)
                                X.grad[static_cast<std::size_t>((ch * h + i) * w + j)] +=
                                    gsum * tile[(i - y0) * v + (j - x0)];
                    }
            }
        };
    }
    return node_out;
}

}  // namespace

Tensor spectral_transform(const Tensor& features, const SpectralBasis& basis, SpectralMode mode) {
    require(features.rank() == 3, "spectral_transform: features must be [C,h,w]");
    if (mode == SpectralMode::block_dct) return block_dct_transform(features, basis);
    Tensor mask = modulation_mask(basis, features.dim(0), features.dim(1), features.dim(2));
    return mul(features, mask);
}

Tensor group_spectra(const Tensor& features, i64 groups) {
    require(features.rank() == 3, "group_spectra: features must be [C,h,w]");
    const i64 c = features.dim(0);
    require_config(groups >= 1 && c % groups == 0,
                   "group_spectra: M=" + std::to_string(groups) +
                       " must divide C=" + std::to_string(c));
    return reshape(features, {groups, c / groups, features.dim(1), features.dim(2)});
}

}  // namespace mscc
