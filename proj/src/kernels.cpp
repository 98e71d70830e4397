#include "mscc/kernels.hpp"

#include <atomic>
#include <string>

namespace mscc::kern {

namespace {
std::atomic<Backend> g_backend{Backend::parallel};
}

void set_backend(Backend b) { g_backend.store(b); }
Backend backend() { return g_backend.load(); }

Conv2dSpec Conv2dSpec::make(i64 c_in, i64 in_h, i64 in_w, i64 c_out, i64 kh, i64 kw, i64 stride,
                            i64 pad) {
    require(c_in >= 1 && in_h >= 1 && in_w >= 1 && c_out >= 1, "conv2d: empty operand");
    require(kh >= 1 && kw >= 1 && kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd");
    require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    require(kh <= in_h + 2 * pad && kw <= in_w + 2 * pad,
            "conv2d: kernel larger than padded input (" + std::to_string(kh) + "x" +
                std::to_string(kw) + " vs " + std::to_string(in_h + 2 * pad) + "x" +
                std::to_string(in_w + 2 * pad) + ")");
    Conv2dSpec s;
    s.c_in = c_in;
    s.in_h = in_h;
    s.in_w = in_w;
    s.c_out = c_out;
    s.kh = kh;
    s.kw = kw;
    s.stride = stride;
    s.pad = pad;
    s.out_h = (in_h + 2 * pad - kh) / stride + 1;
    s.out_w = (in_w + 2 * pad - kw) / stride + 1;
    return s;
}

#define MSCC_DISPATCH(call) \
    (backend() == Backend::serial ? serial::call : parallel::call)

void conv2d_fwd(const double* x, const double* w, double* y, const Conv2dSpec& s) {
    MSCC_DISPATCH(conv2d_fwd(x, w, y, s));
}
void conv2d_bwd_input(const double* dy, const double* w, double* dx, const Conv2dSpec& s) {
    MSCC_DISPATCH(conv2d_bwd_input(dy, w, dx, s));
}
void conv2d_bwd_kernel(const double* dy, const double* x, double* dw, const Conv2dSpec& s) {
    MSCC_DISPATCH(conv2d_bwd_kernel(dy, x, dw, s));
}
void matmul(const double* a, const double* b, double* c, i64 batch, i64 p, i64 q, i64 r, bool ta,
            bool tb) {
    MSCC_DISPATCH(matmul(a, b, c, batch, p, q, r, ta, tb));
}
void upsample_bilinear_fwd(const double* x, double* y, i64 c, i64 h, i64 w, i64 factor) {
    MSCC_DISPATCH(upsample_bilinear_fwd(x, y, c, h, w, factor));
}
void upsample_bilinear_bwd(const double* dy, double* dx, i64 c, i64 h, i64 w, i64 factor) {
    MSCC_DISPATCH(upsample_bilinear_bwd(dy, dx, c, h, w, factor));
}
void avgpool_fwd(const double* x, double* y, i64 c, i64 h, i64 w, i64 factor) {
    MSCC_DISPATCH(avgpool_fwd(x, y, c, h, w, factor));
}
void avgpool_bwd(const double* dy, double* dx, i64 c, i64 h, i64 w, i64 factor) {
    MSCC_DISPATCH(avgpool_bwd(dy, dx, c, h, w, factor));
}
void sep_filter2d(const double* x, double* y, i64 h, i64 w, const double* taps, i64 radius) {
    MSCC_DISPATCH(sep_filter2d(x, y, h, w, taps, radius));
}

#undef MSCC_DISPATCH

}  // namespace mscc::kern
