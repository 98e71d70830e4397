#pragma once

#include "mscc/tensor.hpp"

namespace mscc {

/// Orthonormal 2D DCT-II basis sampled on a U x V grid. Tile n corresponds to
/// frequency pair (u, v) = (n / V, n % V); flattened tiles form an
/// orthonormal set and the per-sample squares sum to one across tiles.
struct SpectralBasis {
    i64 u_extent = 0;
    i64 v_extent = 0;
    Tensor tiles;  // [N, U, V], N = U*V

    i64 bands() const { return u_extent * v_extent; }
};

SpectralBasis build_basis(i64 u_extent, i64 v_extent);

enum class SpectralMode {
    modulate,   // elementwise modulation by the spatially tiled basis tile
    block_dct,  // per-tile DCT coefficient broadcast back over its block (experimental)
};

struct SpectralConfig {
    i64 u_extent = 8;
    i64 v_extent = 8;
    i64 groups = 4;  // M spectra
    SpectralMode mode = SpectralMode::modulate;

    i64 bands() const { return u_extent * v_extent; }
    /// N | C, M | C and M <= N must hold for a channel width C.
    void validate(i64 channels) const;
};

/// Constant [C,h,w] map holding the tiled basis sample each channel is
/// modulated by; channel c belongs to band c / (C/N).
Tensor modulation_mask(const SpectralBasis& basis, i64 channels, i64 h, i64 w);

/// Decompose features into N frequency bands (channel blocks stay in band
/// order n = 0..N-1).
Tensor spectral_transform(const Tensor& features, const SpectralBasis& basis,
                          SpectralMode mode = SpectralMode::modulate);

/// Split [C,h,w] into M contiguous channel blocks -> [M, C/M, h, w].
Tensor group_spectra(const Tensor& features, i64 groups);

}  // namespace mscc
