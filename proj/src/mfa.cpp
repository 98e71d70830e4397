#include "mscc/mfa.hpp"

#include <string>

namespace mscc {

Tensor mfa_align(const Tensor& level, const Conv2dLayer& conv, i64 target_h, i64 target_w) {
    require(level.rank() == 3, "mfa_align: level features must be [C,h,w]");
    const i64 h = level.dim(1), w = level.dim(2);
    require(h >= target_h && w >= target_w, "mfa_align: target grid larger than the level");
    require_config(h % target_h == 0 && w % target_w == 0 && h / target_h == w / target_w,
                   "mfa_align: non-integer downsample ratio " + std::to_string(h) + "x" +
                       std::to_string(w) + " -> " + std::to_string(target_h) + "x" +
                       std::to_string(target_w));
    Tensor projected = conv.forward(level);
    const i64 factor = h / target_h;
    return factor == 1 ? projected : avg_pool2d(projected, factor);
}

Tensor mfa_aggregate(const Tensor& f1, const Tensor& f2, const Tensor& f3,
                     const Conv2dLayer& fuse) {
    require(f1.shape() == f2.shape() && f2.shape() == f3.shape(),
            "mfa_aggregate: aligned shapes differ: " + shape_str(f1.shape()) + ", " +
                shape_str(f2.shape()) + ", " + shape_str(f3.shape()));
    return fuse.forward(concat({f1, f2, f3}, 0));
}

MfaModule MfaModule::init(i64 c1, i64 c2, i64 c3, i64 channels, Rng& rng) {
    MfaModule m;
    m.align1 = Conv2dLayer::init(c1, channels, 3, 1, rng);
    m.align2 = Conv2dLayer::init(c2, channels, 3, 1, rng);
    m.align3 = Conv2dLayer::init(c3, channels, 3, 1, rng);
    m.fuse = Conv2dLayer::init(3 * channels, channels, 1, 1, rng);
    return m;
}

Tensor MfaModule::forward(const Tensor& f1, const Tensor& f2, const Tensor& f3) const {
    const i64 th = f3.dim(1), tw = f3.dim(2);
    Tensor a1 = mfa_align(f1, align1, th, tw);
    Tensor a2 = mfa_align(f2, align2, th, tw);
    Tensor a3 = mfa_align(f3, align3, th, tw);
    return mfa_aggregate(a1, a2, a3, fuse);
}

}  // namespace mscc
