#pragma once

#include "mscc/layers.hpp"
#include "mscc/tensor.hpp"

namespace mscc {

/// Align one backbone level to the target grid: 3x3 same conv to the shared
/// channel width, then average-pool down by the integer spatial ratio.
Tensor mfa_align(const Tensor& level, const Conv2dLayer& conv, i64 target_h, i64 target_w);

/// Fuse three aligned levels: channel concat (3C) then 1x1 conv back to C.
Tensor mfa_aggregate(const Tensor& f1, const Tensor& f2, const Tensor& f3,
                     const Conv2dLayer& fuse);

/// Multi-level feature aggregation over the three backbone stages.
struct MfaModule {
    Conv2dLayer align1, align2, align3;
    Conv2dLayer fuse;

    static MfaModule init(i64 c1, i64 c2, i64 c3, i64 channels, Rng& rng);

    /// f1/f2/f3 from shallow to deep; output matches f3's spatial grid.
    Tensor forward(const Tensor& f1, const Tensor& f2, const Tensor& f3) const;

    void collect(const std::string& prefix, ParamRegistry& out) const {
        align1.collect(prefix + ".align1", out);
        align2.collect(prefix + ".align2", out);
        align3.collect(prefix + ".align3", out);
        fuse.collect(prefix + ".fuse", out);
    }
};

}  // namespace mscc
