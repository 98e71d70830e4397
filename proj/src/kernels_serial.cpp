#include <cstring>
#include <vector>

#include "mscc/kernels.hpp"

// Reference kernels. Plain loops, no threading. The parallel backend uses the
// same loop nests and per-element accumulation order, so outputs match the
// reference bitwise.
namespace mscc::kern::serial {

void conv2d_fwd(const double* x, const double* w, double* y, const Conv2dSpec& s) {
    const i64 in_plane = s.in_h * s.in_w;
    const i64 out_plane = s.out_h * s.out_w;
    std::memset(y, 0, sizeof(double) * static_cast<std::size_t>(s.c_out * out_plane));
    for (i64 co = 0; co < s.c_out; ++co) {
        for (i64 oy = 0; oy < s.out_h; ++oy) {
            double* yrow = y + co * out_plane + oy * s.out_w;
            for (i64 ci = 0; ci < s.c_in; ++ci) {
                const double* xc = x + ci * in_plane;
                const double* wk = w + (co * s.c_in + ci) * s.kh * s.kw;
                for (i64 ky = 0; ky < s.kh; ++ky) {
                    const i64 iy = oy * s.stride + ky - s.pad;
                    if (iy < 0 || iy >= s.in_h) continue;
                    const double* xrow = xc + iy * s.in_w;
                    for (i64 kx = 0; kx < s.kw; ++kx) {
                        const double coef = wk[ky * s.kw + kx];
                        const i64 base = kx - s.pad;
                        for (i64 ox = 0; ox < s.out_w; ++ox) {
                            const i64 ix = ox * s.stride + base;
                            if (ix < 0 || ix >= s.in_w) continue;
                            yrow[ox] += coef * xrow[ix];
                        }
                    }
                }
            }
        }
    }
}

void conv2d_bwd_input(const double* dy, const double* w, double* dx, const Conv2dSpec& s) {
    const i64 in_plane = s.in_h * s.in_w;
    const i64 out_plane = s.out_h * s.out_w;
    std::memset(dx, 0, sizeof(double) * static_cast<std::size_t>(s.c_in * in_plane));
    for (i64 ci = 0; ci < s.c_in; ++ci) {
        for (i64 iy = 0; iy < s.in_h; ++iy) {
            double* dxrow = dx + ci * in_plane + iy * s.in_w;
            for (i64 co = 0; co < s.c_out; ++co) {
                const double* dyc = dy + co * out_plane;
                const double* wk = w + (co * s.c_in + ci) * s.kh * s.kw;
                for (i64 ky = 0; ky < s.kh; ++ky) {
                    const i64 num_y = iy + s.pad - ky;
                    if (num_y < 0 || num_y % s.stride != 0) continue;
                    const i64 oy = num_y / s.stride;
                    if (oy >= s.out_h) continue;
                    const double* dyrow = dyc + oy * s.out_w;
                    for (i64 kx = 0; kx < s.kw; ++kx) {
                        const double coef = wk[ky * s.kw + kx];
                        for (i64 ix = 0; ix < s.in_w; ++ix) {
                            const i64 num_x = ix + s.pad - kx;
                            if (num_x < 0 || num_x % s.stride != 0) continue;
                            const i64 ox = num_x / s.stride;
                            if (ox >= s.out_w) continue;
                            dxrow[ix] += coef * dyrow[ox];
                        }
                    }
                }
            }
        }
    }
}

void conv2d_bwd_kernel(const double* dy, const double* x, double* dw, const Conv2dSpec& s) {
    const i64 in_plane = s.in_h * s.in_w;
    const i64 out_plane = s.out_h * s.out_w;
    std::memset(dw, 0, sizeof(double) * static_cast<std::size_t>(s.c_out * s.c_in * s.kh * s.kw));
    for (i64 co = 0; co < s.c_out; ++co) {
        const double* dyc = dy + co * out_plane;
        for (i64 ci = 0; ci < s.c_in; ++ci) {
            const double* xc = x + ci * in_plane;
            double* wk = dw + (co * s.c_in + ci) * s.kh * s.kw;
            for (i64 ky = 0; ky < s.kh; ++ky) {
                for (i64 kx = 0; kx < s.kw; ++kx) {
                    double acc = 0.0;
                    for (i64 oy = 0; oy < s.out_h; ++oy) {
                        const i64 iy = oy * s.stride + ky - s.pad;
                        if (iy < 0 || iy >= s.in_h) continue;
                        const double* xrow = xc + iy * s.in_w;
                        const double* dyrow = dyc + oy * s.out_w;
                        for (i64 ox = 0; ox < s.out_w; ++ox) {
                            const i64 ix = ox * s.stride + kx - s.pad;
                            if (ix < 0 || ix >= s.in_w) continue;
                            acc += dyrow[ox] * xrow[ix];
                        }
                    }
                    wk[ky * s.kw + kx] = acc;
                }
            }
        }
    }
}

void matmul(const double* a, const double* b, double* c, i64 batch, i64 p, i64 q, i64 r, bool ta,
            bool tb) {
    for (i64 bt = 0; bt < batch; ++bt) {
        const double* ab = a + bt * p * q;
        const double* bb = b + bt * q * r;
        double* cb = c + bt * p * r;
        for (i64 i = 0; i < p; ++i) {
            double* crow = cb + i * r;
            if (!tb) {
                for (i64 j = 0; j < r; ++j) crow[j] = 0.0;
                for (i64 l = 0; l < q; ++l) {
                    const double coef = ta ? ab[l * p + i] : ab[i * q + l];
                    const double* brow = bb + l * r;
                    for (i64 j = 0; j < r; ++j) crow[j] += coef * brow[j];
                }
            } else {
                for (i64 j = 0; j < r; ++j) {
                    const double* brow = bb + j * q;
                    double acc = 0.0;
                    for (i64 l = 0; l < q; ++l) acc += (ta ? ab[l * p + i] : ab[i * q + l]) * brow[l];
                    crow[j] = acc;
                }
            }
        }
    }
}

void upsample_bilinear_fwd(const double* x, double* y, i64 c, i64 h, i64 w, i64 factor) {
    const i64 oh = h * factor, ow = w * factor;
    const double inv = 1.0 / static_cast<double>(factor);
    for (i64 ch = 0; ch < c; ++ch) {
        const double* xc = x + ch * h * w;
        double* yc = y + ch * oh * ow;
        for (i64 oy = 0; oy < oh; ++oy) {
            const double sy = (static_cast<double>(oy) + 0.5) * inv - 0.5;
            i64 y0 = static_cast<i64>(std::floor(sy));
            const double fy = sy - static_cast<double>(y0);
            i64 y1 = y0 + 1;
            y0 = y0 < 0 ? 0 : (y0 >= h ? h - 1 : y0);
            y1 = y1 < 0 ? 0 : (y1 >= h ? h - 1 : y1);
            for (i64 ox = 0; ox < ow; ++ox) {
                const double sx = (static_cast<double>(ox) + 0.5) * inv - 0.5;
                i64 x0 = static_cast<i64>(std::floor(sx));
                const double fx = sx - static_cast<double>(x0);
                i64 x1 = x0 + 1;
                x0 = x0 < 0 ? 0 : (x0 >= w ? w - 1 : x0);
                x1 = x1 < 0 ? 0 : (x1 >= w ? w - 1 : x1);
                const double v00 = xc[y0 * w + x0], v01 = xc[y0 * w + x1];
                const double v10 = xc[y1 * w + x0], v11 = xc[y1 * w + x1];
                yc[oy * ow + ox] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) +
                                   fy * ((1.0 - fx) * v10 + fx * v11);
            }
        }
    }
}

void upsample_bilinear_bwd(const double* dy, double* dx, i64 c, i64 h, i64 w, i64 factor) {
    const i64 oh = h * factor, ow = w * factor;
    const double inv = 1.0 / static_cast<double>(factor);
    std::memset(dx, 0, sizeof(double) * static_cast<std::size_t>(c * h * w));
    for (i64 ch = 0; ch < c; ++ch) {
        const double* dyc = dy + ch * oh * ow;
        double* dxc = dx + ch * h * w;
        for (i64 oy = 0; oy < oh; ++oy) {
            const double sy = (static_cast<double>(oy) + 0.5) * inv - 0.5;
            i64 y0 = static_cast<i64>(std::floor(sy));
            const double fy = sy - static_cast<double>(y0);
            i64 y1 = y0 + 1;
            y0 = y0 < 0 ? 0 : (y0 >= h ? h - 1 : y0);
            y1 = y1 < 0 ? 0 : (y1 >= h ? h - 1 : y1);
            for (i64 ox = 0; ox < ow; ++ox) {
                const double sx = (static_cast<double>(ox) + 0.5) * inv - 0.5;
                i64 x0 = static_cast<i64>(std::floor(sx));
                const double fx = sx - static_cast<double>(x0);
                i64 x1 = x0 + 1;
                x0 = x0 < 0 ? 0 : (x0 >= w ? w - 1 : x0);
                x1 = x1 < 0 ? 0 : (x1 >= w ? w - 1 : x1);
                const double g = dyc[oy * ow + ox];
                dxc[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * g;
                dxc[y0 * w + x1] += (1.0 - fy) * fx * g;
                dxc[y1 * w + x0] += fy * (1.0 - fx) * g;
                dxc[y1 * w + x1] += fy * fx * g;
            }
        }
    }
}

void avgpool_fwd(const double* x, double* y, i64 c, i64 h, i64 w, i64 factor) {
    const i64 oh = h / factor, ow = w / factor;
    const double inv = 1.0 / static_cast<double>(factor * factor);
    for (i64 ch = 0; ch < c; ++ch) {
        const double* xc = x + ch * h * w;
        double* yc = y + ch * oh * ow;
        for (i64 oy = 0; oy < oh; ++oy) {
            for (i64 ox = 0; ox < ow; ++ox) {
                double acc = 0.0;
                for (i64 dy = 0; dy < factor; ++dy) {
                    const double* xrow = xc + (oy * factor + dy) * w + ox * factor;
                    for (i64 dxi = 0; dxi < factor; ++dxi) acc += xrow[dxi];
                }
                yc[oy * ow + ox] = acc * inv;
            }
        }
    }
}

void avgpool_bwd(const double* dy, double* dx, i64 c, i64 h, i64 w, i64 factor) {
    const i64 oh = h / factor, ow = w / factor;
    const double inv = 1.0 / static_cast<double>(factor * factor);
    for (i64 ch = 0; ch < c; ++ch) {
        const double* dyc = dy + ch * oh * ow;
        double* dxc = dx + ch * h * w;
        for (i64 iy = 0; iy < h; ++iy) {
            const double* dyrow = dyc + (iy / factor) * ow;
            double* dxrow = dxc + iy * w;
            for (i64 ix = 0; ix < w; ++ix) dxrow[ix] = dyrow[ix / factor] * inv;
        }
    }
}

void sep_filter2d(const double* x, double* y, i64 h, i64 w, const double* taps, i64 radius) {
    std::vector<double> tmp(static_cast<std::size_t>(h * w));
    for (i64 i = 0; i < h; ++i) {
        const double* xrow = x + i * w;
        double* trow = tmp.data() + i * w;
        for (i64 j = 0; j < w; ++j) {
            double acc = 0.0;
            for (i64 t = -radius; t <= radius; ++t) acc += taps[t + radius] * xrow[mirror(j + t, w)];
            trow[j] = acc;
        }
    }
    for (i64 j = 0; j < w; ++j) {
        for (i64 i = 0; i < h; ++i) {
            double acc = 0.0;
            for (i64 t = -radius; t <= radius; ++t)
                acc += taps[t + radius] * tmp[static_cast<std::size_t>(mirror(i + t, h) * w + j)];
            y[i * w + j] = acc;
        }
    }
}

}  // namespace mscc::kern::serial
