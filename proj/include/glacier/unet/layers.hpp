#pragma once

// Convolution primitives over C x H x W tensors. Convolutions are lowered to
// GEMM through im2col; the matrices are row-major so a tensor is directly a
// C x (H*W) matrix.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <vector>

#include <Eigen/Core>

#include "glacier/grid.hpp"

namespace glacier::unet {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

/// Cap on im2col buffer elements; larger images are processed in row bands.
inline constexpr std::size_t kIm2colBudget = std::size_t{1} << 22;

inline std::size_t band_rows(std::size_t kdim, std::size_t width, std::size_t height) {
    const std::size_t per_row = std::max<std::size_t>(1, kdim * width);
    return std::clamp<std::size_t>(kIm2colBudget / per_row, 1, height);
}

/// im2col for a k x k kernel (k odd, pad k/2) over output rows [r0, r1).
template <class T>
void im2col(const Tensor3<T>& x, std::size_t k, std::size_t r0, std::size_t r1, T* cols) {
    const std::size_t c = x.channels(), h = x.height(), w = x.width(), n = (r1 - r0) * w;
    const long pad = static_cast<long>(k / 2);
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                T* dst = cols + ((ci * k + ky) * k + kx) * n;
                const long shift = static_cast<long>(kx) - pad;
                for (std::size_t y = r0; y < r1; ++y) {
                    T* d = dst + (y - r0) * w;
                    const long sy = static_cast<long>(y + ky) - pad;
                    if (sy < 0 || sy >= static_cast<long>(h)) {
                        std::fill(d, d + w, T(0));
                        continue;
                    }
                    const T* s = &x(ci, static_cast<std::size_t>(sy), 0);
                    if (shift == 0) {
                        std::copy(s, s + w, d);
                    } else if (shift < 0) {
                        const std::size_t a = static_cast<std::size_t>(-shift);
                        std::fill(d, d + std::min(a, w), T(0));
                        if (a < w) std::copy(s, s + (w - a), d + a);
                    } else {
                        const std::size_t a = static_cast<std::size_t>(shift);
                        if (a < w) std::copy(s + a, s + w, d);
                        std::fill(d + (w > a ? w - a : 0), d + w, T(0));
                    }
                }
            }
}

/// Adjoint of im2col: accumulate column gradients into dx.
template <class T>
void col2im_add(const T* cols, std::size_t k, std::size_t r0, std::size_t r1, Tensor3<T>& dx) {
    const std::size_t c = dx.channels(), h = dx.height(), w = dx.width(), n = (r1 - r0) * w;
    const long pad = static_cast<long>(k / 2);
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                const T* src = cols + ((ci * k + ky) * k + kx) * n;
                const long shift = static_cast<long>(kx) - pad;
                for (std::size_t y = r0; y < r1; ++y) {
                    const long sy = static_cast<long>(y + ky) - pad;
                    if (sy < 0 || sy >= static_cast<long>(h)) continue;
                    const T* s = src + (y - r0) * w;
                    T* d = &dx(ci, static_cast<std::size_t>(sy), 0);
                    for (std::size_t xo = 0; xo < w; ++xo) {
                        const long xi = static_cast<long>(xo) + shift;
                        if (xi >= 0 && xi < static_cast<long>(w)) d[xi] += s[xo];
                    }
                }
            }
}

/// Same-padded k x k convolution. W is cout x (cin*k*k) row-major, b has cout entries.
template <class T>
void conv_forward(const Tensor3<T>& x, const T* weight, const T* bias, std::size_t cout, std::size_t k,
                  Tensor3<T>& y) {
    const std::size_t cin = x.channels(), h = x.height(), w = x.width(), kdim = cin * k * k;
    y = Tensor3<T>(cout, h, w);
    ConstMatMap<T> wm(weight, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(kdim));
    ConstVecMap<T> bv(bias, static_cast<Eigen::Index>(cout));
    MatMap<T> ym(y.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(h * w));
    if (k == 1) {
        ConstMatMap<T> xm(x.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(h * w));
        ym.noalias() = wm * xm;
        ym.colwise() += bv;
        return;
    }
    const std::size_t band = band_rows(kdim, w, h);
    std::vector<T> cols(kdim * band * w);
    for (std::size_t r0 = 0; r0 < h; r0 += band) {
        const std::size_t r1 = std::min(h, r0 + band), n = (r1 - r0) * w;
        im2col(x, k, r0, r1, cols.data());
        ConstMatMap<T> cm(cols.data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(n));
        auto blk = ym.middleCols(static_cast<Eigen::Index>(r0 * w), static_cast<Eigen::Index>(n));
        blk.noalias() = wm * cm;
        blk.colwise() += bv;
    }
}

/// Gradients of conv_forward. dW and db are accumulated; dx (if given) is overwritten.
template <class T>
void conv_backward(const Tensor3<T>& x, const T* weight, std::size_t cout, std::size_t k, const Tensor3<T>& dy,
                   T* dweight, T* dbias, Tensor3<T>* dx) {
    const std::size_t cin = x.channels(), h = x.height(), w = x.width(), kdim = cin * k * k;
    ConstMatMap<T> wm(weight, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(kdim));
    MatMap<T> dwm(dweight, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(kdim));
    ConstMatMap<T> dym(dy.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(h * w));
    // Plain loop: Eigen's vectorized reductions depend on pointer alignment,
    // which would break bitwise reproducibility.
    for (std::size_t co = 0; co < cout; ++co) {
        T s = 0;
        for (T v : dy.plane(co)) s += v;
        dbias[co] += s;
    }
    if (dx) *dx = Tensor3<T>(cin, h, w);
    if (k == 1) {
        ConstMatMap<T> xm(x.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(h * w));
        dwm.noalias() += dym * xm.transpose();
        if (dx) {
            MatMap<T> dxm(dx->data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(h * w));
            dxm.noalias() = wm.transpose() * dym;
        }
        return;
    }
    const std::size_t band = band_rows(kdim, w, h);
    std::vector<T> cols(kdim * band * w), dcols(dx ? kdim * band * w : 0);
    for (std::size_t r0 = 0; r0 < h; r0 += band) {
        const std::size_t r1 = std::min(h, r0 + band), n = (r1 - r0) * w;
        im2col(x, k, r0, r1, cols.data());
        ConstMatMap<T> cm(cols.data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(n));
        auto dyb = dym.middleCols(static_cast<Eigen::Index>(r0 * w), static_cast<Eigen::Index>(n));
        dwm.noalias() += dyb * cm.transpose();
        if (dx) {
            MatMap<T> dcm(dcols.data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(n));
            dcm.noalias() = wm.transpose() * dyb;
            col2im_add(dcols.data(), k, r0, r1, *dx);
        }
    }
}

/// 2x2 stride-2 transpose convolution. W is (cout*4) x cin row-major with
/// row index co*4 + dy*2 + dx.
template <class T>
void upconv_forward(const Tensor3<T>& x, const T* weight, const T* bias, std::size_t cout, Tensor3<T>& y) {
    const std::size_t cin = x.channels(), h = x.height(), w = x.width();
    ConstMatMap<T> wm(weight, static_cast<Eigen::Index>(cout * 4), static_cast<Eigen::Index>(cin));
    ConstMatMap<T> xm(x.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(h * w));
    RowMat<T> z = wm * xm;
    y = Tensor3<T>(cout, 2 * h, 2 * w);
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t q = 0; q < 4; ++q) {
            const std::size_t dy = q / 2, dx = q % 2;
            const T* zr = z.data() + (co * 4 + q) * h * w;
            for (std::size_t r = 0; r < h; ++r) {
                T* out = &y(co, 2 * r + dy, dx);
                for (std::size_t c = 0; c < w; ++c) out[2 * c] = zr[r * w + c] + bias[co];
            }
        }
}

template <class T>
void upconv_backward(const Tensor3<T>& x, const T* weight, std::size_t cout, const Tensor3<T>& dy_t, T* dweight,
                     T* dbias, Tensor3<T>* dx) {
    const std::size_t cin = x.channels(), h = x.height(), w = x.width();
    RowMat<T> dz(static_cast<Eigen::Index>(cout * 4), static_cast<Eigen::Index>(h * w));
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t q = 0; q < 4; ++q) {
            const std::size_t dy = q / 2, dx_ = q % 2;
            T* zr = dz.data() + (co * 4 + q) * h * w;
            for (std::size_t r = 0; r < h; ++r) {
                const T* g = &dy_t(co, 2 * r + dy, dx_);
                for (std::size_t c = 0; c < w; ++c) zr[r * w + c] = g[2 * c];
            }
        }
    for (std::size_t co = 0; co < cout; ++co) {
        T s = 0;
        for (T v : dy_t.plane(co)) s += v;
        dbias[co] += s;
    }
    ConstMatMap<T> xm(x.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(h * w));
    MatMap<T> dwm(dweight, static_cast<Eigen::Index>(cout * 4), static_cast<Eigen::Index>(cin));
    dwm.noalias() += dz * xm.transpose();
    if (dx) {
        *dx = Tensor3<T>(cin, h, w);
        ConstMatMap<T> wm(weight, static_cast<Eigen::Index>(cout * 4), static_cast<Eigen::Index>(cin));
        MatMap<T> dxm(dx->data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(h * w));
        dxm.noalias() = wm.transpose() * dz;
    }
}

/// 2x2 max pooling; `arg` receives the flat input index of each maximum
/// (first maximum in row-major window order wins ties).
template <class T>
void maxpool_forward(const Tensor3<T>& x, Tensor3<T>& y, std::vector<std::uint32_t>& arg) {
    const std::size_t c = x.channels(), h = x.height() / 2, w = x.width() / 2;
    y = Tensor3<T>(c, h, w);
    arg.assign(c * h * w, 0);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t col = 0; col < w; ++col) {
                std::size_t best = (ch * x.height() + 2 * r) * x.width() + 2 * col;
                T bv = x.data()[best];
                for (std::size_t q = 1; q < 4; ++q) {
                    std::size_t i = (ch * x.height() + 2 * r + q / 2) * x.width() + 2 * col + q % 2;
                    if (x.data()[i] > bv) bv = x.data()[i], best = i;
                }
                y(ch, r, col) = bv;
                arg[(ch * h + r) * w + col] = static_cast<std::uint32_t>(best);
            }
}

template <class T>
void maxpool_backward(const Tensor3<T>& dy, const std::vector<std::uint32_t>& arg, Tensor3<T>& dx) {
    for (std::size_t i = 0; i < dy.size(); ++i) dx.data()[arg[i]] += dy.data()[i];
}

template <class T>
void relu_inplace(Tensor3<T>& t) {
    for (auto& v : t.storage()) v = v > T(0) ? v : T(0);
}

/// Zero gradient where the ReLU output was not positive.
template <class T>
void relu_backward_inplace(const Tensor3<T>& out, Tensor3<T>& grad) {
    for (std::size_t i = 0; i < grad.size(); ++i)
        if (!(out.data()[i] > T(0))) grad.data()[i] = T(0);
}

/// Multiply each channel plane by its scale (spatial dropout mask).
template <class T>
void scale_channels(Tensor3<T>& t, const std::vector<T>& scale) {
    for (std::size_t c = 0; c < t.channels(); ++c)
        for (auto& v : t.plane(c)) v *= scale[c];
}

/// Concatenate along channels: [a, b].
template <class T>
Tensor3<T> concat(const Tensor3<T>& a, const Tensor3<T>& b) {
    Tensor3<T> out(a.channels() + b.channels(), a.height(), a.width());
    std::copy(a.storage().begin(), a.storage().end(), out.data());
    std::copy(b.storage().begin(), b.storage().end(), out.data() + a.size());
    return out;
}

}  // namespace glacier::unet
