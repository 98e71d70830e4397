#pragma once

#include <cstddef>

#include "mscc/common.hpp"

// Low-level numeric kernels on raw row-major buffers. Every kernel exists in
// two variants: a serial reference (kern::serial) and an OpenMP version
// (kern::parallel). The parallel variants split work across independent output
// elements and keep the per-element accumulation order identical to the serial
// code, so both backends produce bitwise-equal results.
namespace mscc::kern {

enum class Backend { serial, parallel };

void set_backend(Backend b);
Backend backend();

struct Conv2dSpec {
    i64 c_in = 0, in_h = 0, in_w = 0;
    i64 c_out = 0, kh = 0, kw = 0;
    i64 stride = 1, pad = 0;
    i64 out_h = 0, out_w = 0;

    static Conv2dSpec make(i64 c_in, i64 in_h, i64 in_w, i64 c_out, i64 kh, i64 kw, i64 stride,
                           i64 pad);
};

namespace serial {
void conv2d_fwd(const double* x, const double* w, double* y, const Conv2dSpec& s);
void conv2d_bwd_input(const double* dy, const double* w, double* dx, const Conv2dSpec& s);
void conv2d_bwd_kernel(const double* dy, const double* x, double* dw, const Conv2dSpec& s);
// c[b] = op(a[b]) x op(b[b]) for each batch; ta/tb transpose the operand.
void matmul(const double* a, const double* b, double* c, i64 batch, i64 p, i64 q, i64 r, bool ta,
            bool tb);
void upsample_bilinear_fwd(const double* x, double* y, i64 c, i64 h, i64 w, i64 factor);
void upsample_bilinear_bwd(const double* dy, double* dx, i64 c, i64 h, i64 w, i64 factor);
void avgpool_fwd(const double* x, double* y, i64 c, i64 h, i64 w, i64 factor);
void avgpool_bwd(const double* dy, double* dx, i64 c, i64 h, i64 w, i64 factor);
// Separable filter with mirror (symmetric) border handling; taps has 2*radius+1 entries.
void sep_filter2d(const double* x, double* y, i64 h, i64 w, const double* taps, i64 radius);
}  // namespace serial

namespace parallel {
void conv2d_fwd(const double* x, const double* w, double* y, const Conv2dSpec& s);
void conv2d_bwd_input(const double* dy, const double* w, double* dx, const Conv2dSpec& s);
void conv2d_bwd_kernel(const double* dy, const double* x, double* dw, const Conv2dSpec& s);
void matmul(const double* a, const double* b, double* c, i64 batch, i64 p, i64 q, i64 r, bool ta,
            bool tb);
void upsample_bilinear_fwd(const double* x, double* y, i64 c, i64 h, i64 w, i64 factor);
void upsample_bilinear_bwd(const double* dy, double* dx, i64 c, i64 h, i64 w, i64 factor);
void avgpool_fwd(const double* x, double* y, i64 c, i64 h, i64 w, i64 factor);
void avgpool_bwd(const double* dy, double* dx, i64 c, i64 h, i64 w, i64 factor);
void sep_filter2d(const double* x, double* y, i64 h, i64 w, const double* taps, i64 radius);
}  // namespace parallel

// Dispatch to the active backend.
void conv2d_fwd(const double* x, const double* w, double* y, const Conv2dSpec& s);
void conv2d_bwd_input(const double* dy, const double* w, double* dx, const Conv2dSpec& s);
void conv2d_bwd_kernel(const double* dy, const double* x, double* dw, const Conv2dSpec& s);
void matmul(const double* a, const double* b, double* c, i64 batch, i64 p, i64 q, i64 r, bool ta,
            bool tb);
void upsample_bilinear_fwd(const double* x, double* y, i64 c, i64 h, i64 w, i64 factor);
void upsample_bilinear_bwd(const double* dy, double* dx, i64 c, i64 h, i64 w, i64 factor);
void avgpool_fwd(const double* x, double* y, i64 c, i64 h, i64 w, i64 factor);
void avgpool_bwd(const double* dy, double* dx, i64 c, i64 h, i64 w, i64 factor);
void sep_filter2d(const double* x, double* y, i64 h, i64 w, const double* taps, i64 radius);

/// Mirror index into [0, n): -1 -> 0, -2 -> 1, n -> n-1, ...
inline i64 mirror(i64 i, i64 n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

}  // namespace mscc::kern
