#pragma once

#include <vector>

#include "mscc/layers.hpp"
#include "mscc/spectral.hpp"
#include "mscc/tensor.hpp"

namespace mscc {

enum class CenterNorm {
    spatial_softmax,  // normalize each class map over pixels before pooling
    raw,              // pool with the raw class probabilities
};

enum class FusionKind { concat, add };

struct MsccConfig {
    i64 channels = 64;  // C
    i64 groups = 4;     // M spectra
    i64 classes = 2;    // k (real, fake)
    SpectralConfig spectral;
    bool use_dct = true;
    bool use_gcn = true;
    CenterNorm center_norm = CenterNorm::spatial_softmax;
    FusionKind fusion = FusionKind::concat;

    void validate() const;
};

/// Symmetric normalization D^{-1/2} (A + I) D^{-1/2} of a square adjacency.
Tensor normalize_adjacency(const Tensor& adjacency);
Tensor complete_adjacency(i64 nodes);  // all pairs connected, self included
Tensor empty_adjacency(i64 nodes);     // self-loops only after normalization

/// Multi-spectral class center module.
struct MsccModule {
    MsccConfig cfg;
    SpectralBasis basis;
    std::vector<Conv2dLayer> coarse_heads;  // per spectrum, 1x1 C/M -> k
    Tensor gcn_weight;                      // [C/M, C/M], only when use_gcn
    Tensor adj_norm;                        // [Mk, Mk] constant, only when use_gcn
    Conv2dLayer fuse;                       // 1x1, 2C -> C (concat) or C -> C (add)

    static MsccModule init(const MsccConfig& cfg, Rng& rng);

    void collect(const std::string& prefix, ParamRegistry& out) const;
};

/// Forward products kept for the auxiliary loss and for contract checks.
struct MsccOut {
    Tensor refined;    // F_M   [C,h,w]
    Tensor coarse;     // P_S   [M,k,h,w], class-softmaxed
    Tensor spectra;    // F~_S  [M,C/M,h,w]
    Tensor attention;  // W     [M,hw,k]
    Tensor centers;    // class centers after interaction [M,k,C/M]
    Tensor weighted;   // F'_A  [C,h,w]
};

/// Per-spectrum 1x1 logits + softmax over the class axis.
Tensor coarse_predict(const Tensor& spectra, const std::vector<Conv2dLayer>& heads);

/// Pool per-class centers from pixel features (Eq. 12 with the configured
/// weight normalization): [M,k,h,w] x [M,C/M,h,w] -> [M,k,C/M].
Tensor class_centers(const Tensor& coarse, const Tensor& spectra, CenterNorm norm);

/// One dense GCN layer X' = ReLU(A_norm X W) over the M*k center nodes.
Tensor graph_interact(const Tensor& centers, const Tensor& adj_norm, const Tensor& weight);

struct RefineOut {
    Tensor refined;    // F_M
    Tensor attention;  // W
    Tensor weighted;   // F'_A
};

/// Attention refinement (Eq. 14-16): per-spectrum pixel-to-center similarity,
/// softmax over classes, convex recombination of centers, fuse with input.
RefineOut refine(const Tensor& features, const Tensor& centers, const Conv2dLayer& fuse,
                 FusionKind fusion);

/// Fuse the M coarse maps into one k-channel logit map (Eq. 17).
Tensor fuse_coarse(const Tensor& coarse, const Conv2dLayer& head);

MsccOut mscc_forward(const Tensor& features, const MsccModule& module);

}  // namespace mscc
