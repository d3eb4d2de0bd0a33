#include "rnp/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>

#include <Eigen/Core>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace rnp {

void configure_threads_from_env() {
#ifdef _OPENMP
    if (const char* env = std::getenv("RNP_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) omp_set_num_threads(n);
    }
#endif
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstView = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using View = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

std::ptrdiff_t chunk_count(std::size_t n) {
    return static_cast<std::ptrdiff_t>((n + kernels::gemm_chunk - 1) / kernels::gemm_chunk);
}

}  // namespace

namespace kernels {

template <typename T>
void nchw_to_cbhw(const T* src, T* dst, const PlaneShape& s) {
    const std::size_t plane = s.plane();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t c = 0; c < s.channels; ++c) {
        for (int b = 0; b < s.batch; ++b) {
            const T* from = src + (static_cast<std::size_t>(b) * s.channels + c) * plane;
            std::copy(from, from + plane, dst + (static_cast<std::size_t>(c) * s.batch + b) * plane);
        }
    }
}

template <typename T>
void cbhw_to_nchw(const T* src, T* dst, const PlaneShape& s) {
    const std::size_t plane = s.plane();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t b = 0; b < s.batch; ++b) {
        for (int c = 0; c < s.channels; ++c) {
            const T* from = src + (static_cast<std::size_t>(c) * s.batch + b) * plane;
            std::copy(from, from + plane, dst + (static_cast<std::size_t>(b) * s.channels + c) * plane);
        }
    }
}

template <typename T>
void im2col(const T* x, const ConvShape& s, T* cols) {
    const int H = s.height, W = s.width;
    const std::size_t n = s.columns();
    const std::ptrdiff_t rows = s.patch();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < rows; ++r) {
        const int c = static_cast<int>(r / 9);
        const int ky = static_cast<int>(r % 9) / 3 - 1;
        const int kx = static_cast<int>(r % 3) - 1;
        T* out = cols + static_cast<std::size_t>(r) * n;
        for (int b = 0; b < s.batch; ++b) {
            const T* plane = x + (static_cast<std::size_t>(c) * s.batch + b) * H * W;
            for (int y = 0; y < H; ++y) {
                const int sy = y + ky;
                T* row = out + (static_cast<std::size_t>(b) * H + y) * W;
                if (sy < 0 || sy >= H) {
                    std::fill(row, row + W, T(0));
                    continue;
                }
                const T* src = plane + static_cast<std::size_t>(sy) * W;
                const int x0 = std::max(0, -kx);
                const int x1 = std::min(W, W - kx);
                for (int xx = 0; xx < x0; ++xx) row[xx] = T(0);
                for (int xx = x0; xx < x1; ++xx) row[xx] = src[xx + kx];
                for (int xx = x1; xx < W; ++xx) row[xx] = T(0);
            }
        }
    }
}

template <typename T>
void col2im(const T* cols, const ConvShape& s, T* dx) {
    const int H = s.height, W = s.width;
    const std::size_t n = s.columns();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t c = 0; c < s.in_channels; ++c) {
        T* base = dx + static_cast<std::size_t>(c) * s.batch * H * W;
        std::fill(base, base + static_cast<std::size_t>(s.batch) * H * W, T(0));
        for (int k = 0; k < 9; ++k) {
            const int ky = k / 3 - 1;
            const int kx = k % 3 - 1;
            const T* in = cols + (static_cast<std::size_t>(c) * 9 + k) * n;
            for (int b = 0; b < s.batch; ++b) {
                T* plane = base + static_cast<std::size_t>(b) * H * W;
                for (int y = 0; y < H; ++y) {
                    const int sy = y + ky;
                    if (sy < 0 || sy >= H) continue;
                    const T* row = in + (static_cast<std::size_t>(b) * H + y) * W;
                    T* dst = plane + static_cast<std::size_t>(sy) * W;
                    const int x0 = std::max(0, -kx);
                    const int x1 = std::min(W, W - kx);
                    for (int xx = x0; xx < x1; ++xx) dst[xx + kx] += row[xx];
                }
            }
        }
    }
}

template <typename T>
void conv_forward(const T* w, const T* bias, const T* cols, const ConvShape& s, T* z) {
    const std::size_t n = s.columns();
    const int k = s.patch();
    const std::ptrdiff_t chunks = chunk_count(n);
    ConstView<T> wm(w, s.out_channels, k, Eigen::OuterStride<>(k));
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ci = 0; ci < chunks; ++ci) {
        const std::size_t start = static_cast<std::size_t>(ci) * gemm_chunk;
        const std::ptrdiff_t len = static_cast<std::ptrdiff_t>(std::min(gemm_chunk, n - start));
        ConstView<T> cm(cols + start, k, len, Eigen::OuterStride<>(n));
        View<T> zm(z + start, s.out_channels, len, Eigen::OuterStride<>(n));
        zm.noalias() = wm * cm;
        for (int o = 0; o < s.out_channels; ++o) zm.row(o).array() += bias[o];
    }
}

template <typename T>
void conv_backward_params(const T* dz, const T* cols, const ConvShape& s, T* dw, T* db) {
    const std::size_t n = s.columns();
    const int k = s.patch();
    const int co = s.out_channels;
    const std::ptrdiff_t chunks = chunk_count(n);
    std::vector<T> partial(static_cast<std::size_t>(chunks) * co * (k + 1));
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ci = 0; ci < chunks; ++ci) {
        const std::size_t start = static_cast<std::size_t>(ci) * gemm_chunk;
        const std::ptrdiff_t len = static_cast<std::ptrdiff_t>(std::min(gemm_chunk, n - start));
        ConstView<T> dzm(dz + start, co, len, Eigen::OuterStride<>(n));
        ConstView<T> cm(cols + start, k, len, Eigen::OuterStride<>(n));
        T* out = partial.data() + static_cast<std::size_t>(ci) * co * (k + 1);
        View<T> pw(out, co, k, Eigen::OuterStride<>(k));
        pw.noalias() = dzm * cm.transpose();
        T* pb = out + static_cast<std::size_t>(co) * k;
        // Plain loop: Eigen's vectorized sum peels by address, which would
        // make the result depend on where the buffer happens to live.
        for (int o = 0; o < co; ++o) {
            const T* row = dz + static_cast<std::size_t>(o) * n + start;
            T acc(0);
            for (std::ptrdiff_t i = 0; i < len; ++i) acc += row[i];
            pb[o] = acc;
        }
    }
    std::fill(dw, dw + static_cast<std::size_t>(co) * k, T(0));
    std::fill(db, db + co, T(0));
    for (std::ptrdiff_t ci = 0; ci < chunks; ++ci) {
        const T* out = partial.data() + static_cast<std::size_t>(ci) * co * (k + 1);
        for (std::size_t i = 0; i < static_cast<std::size_t>(co) * k; ++i) dw[i] += out[i];
        for (int o = 0; o < co; ++o) db[o] += out[static_cast<std::size_t>(co) * k + o];
    }
}

template <typename T>
void conv_backward_input(const T* w, const T* dz, const ConvShape& s, T* dcols) {
    const std::size_t n = s.columns();
    const int k = s.patch();
    const std::ptrdiff_t chunks = chunk_count(n);
    ConstView<T> wm(w, s.out_channels, k, Eigen::OuterStride<>(k));
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ci = 0; ci < chunks; ++ci) {
        const std::size_t start = static_cast<std::size_t>(ci) * gemm_chunk;
        const std::ptrdiff_t len = static_cast<std::ptrdiff_t>(std::min(gemm_chunk, n - start));
        ConstView<T> dzm(dz + start, s.out_channels, len, Eigen::OuterStride<>(n));
        View<T> dc(dcols + start, k, len, Eigen::OuterStride<>(n));
        dc.noalias() = wm.transpose() * dzm;
    }
}

template <typename T>
void batchnorm_relu_forward(const T* z, std::size_t channels, std::size_t n, const T* gamma,
                            const T* beta, bool training, T* mean, T* var, T eps, T* xhat, T* y) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(channels); ++c) {
        const T* zc = z + c * n;
        if (training) {
            double sum = 0.0;
            for (std::size_t i = 0; i < n; ++i) sum += zc[i];
            const double mu = sum / static_cast<double>(n);
            double sq = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double d = zc[i] - mu;
                sq += d * d;
            }
            mean[c] = static_cast<T>(mu);
            var[c] = static_cast<T>(sq / static_cast<double>(n));
        }
        const T inv = T(1) / std::sqrt(var[c] + eps);
        const T mu = mean[c];
        const T g = gamma[c];
        const T bt = beta[c];
        T* xh = xhat + c * n;
        T* yc = y + c * n;
        for (std::size_t i = 0; i < n; ++i) {
            const T h = (zc[i] - mu) * inv;
            xh[i] = h;
            const T v = g * h + bt;
            yc[i] = v > T(0) ? v : T(0);
        }
    }
}

template <typename T>
void batchnorm_relu_backward(const T* dy, const T* y, const T* xhat, std::size_t channels,
                             std::size_t n, const T* gamma, const T* var, T eps, bool training,
                             T* dz, T* dgamma, T* dbeta) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(channels); ++c) {
        const T* dyc = dy + c * n;
        const T* yc = y + c * n;
        const T* xh = xhat + c * n;
        T* dzc = dz + c * n;
        double sum_d = 0.0, sum_dx = 0.0;
        // dz temporarily holds the pre-relu gradient.
        for (std::size_t i = 0; i < n; ++i) {
            const T d = yc[i] > T(0) ? dyc[i] : T(0);
            dzc[i] = d;
            sum_d += d;
            sum_dx += static_cast<double>(d) * xh[i];
        }
        dgamma[c] = static_cast<T>(sum_dx);
        dbeta[c] = static_cast<T>(sum_d);
        const T scale = gamma[c] / std::sqrt(var[c] + eps);
        if (training) {
            const T md = static_cast<T>(sum_d / static_cast<double>(n));
            const T mdx = static_cast<T>(sum_dx / static_cast<double>(n));
            for (std::size_t i = 0; i < n; ++i) dzc[i] = scale * (dzc[i] - md - xh[i] * mdx);
        } else {
            for (std::size_t i = 0; i < n; ++i) dzc[i] *= scale;
        }
    }
}

template <typename T>
void maxpool2_forward(const T* x, const PlaneShape& s, T* out, std::uint32_t* argmax) {
    const int H = s.height, W = s.width, OH = H / 2, OW = W / 2;
    const std::ptrdiff_t planes = static_cast<std::ptrdiff_t>(s.channels) * s.batch;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t p = 0; p < planes; ++p) {
        const T* in = x + static_cast<std::size_t>(p) * H * W;
        T* o = out + static_cast<std::size_t>(p) * OH * OW;
        std::uint32_t* a = argmax + static_cast<std::size_t>(p) * OH * OW;
        for (int y = 0; y < OH; ++y) {
            for (int xx = 0; xx < OW; ++xx) {
                // Selects rather than branches: the comparisons are data-dependent.
                std::uint32_t best = static_cast<std::uint32_t>(2 * y * W + 2 * xx);
                T bv = in[best];
                const std::uint32_t cand[3] = {best + 1, best + static_cast<std::uint32_t>(W),
                                               best + static_cast<std::uint32_t>(W) + 1};
                for (std::uint32_t idx : cand) {
                    const T v = in[idx];
                    const bool take = v > bv;
                    bv = take ? v : bv;
                    best = take ? idx : best;
                }
                o[y * OW + xx] = bv;
                a[y * OW + xx] = best;
            }
        }
    }
}

template <typename T>
void maxpool2_backward(const T* dout, const std::uint32_t* argmax, const PlaneShape& s, T* dx) {
    const int H = s.height, W = s.width, OH = H / 2, OW = W / 2;
    const std::ptrdiff_t planes = static_cast<std::ptrdiff_t>(s.channels) * s.batch;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t p = 0; p < planes; ++p) {
        T* d = dx + static_cast<std::size_t>(p) * H * W;
        std::fill(d, d + static_cast<std::size_t>(H) * W, T(0));
        const T* g = dout + static_cast<std::size_t>(p) * OH * OW;
        const std::uint32_t* a = argmax + static_cast<std::size_t>(p) * OH * OW;
        for (int i = 0; i < OH * OW; ++i) d[a[i]] += g[i];
    }
}

template <typename T>
void global_avgpool_forward(const T* x, const PlaneShape& s, T* out) {
    const std::size_t plane = s.plane();
    const std::ptrdiff_t planes = static_cast<std::ptrdiff_t>(s.channels) * s.batch;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t p = 0; p < planes; ++p) {
        const T* in = x + static_cast<std::size_t>(p) * plane;
        T sum = 0;
        for (std::size_t i = 0; i < plane; ++i) sum += in[i];
        out[p] = sum / static_cast<T>(plane);
    }
}

template <typename T>
void global_avgpool_backward(const T* dout, const PlaneShape& s, T* dx) {
    const std::size_t plane = s.plane();
    const std::ptrdiff_t planes = static_cast<std::ptrdiff_t>(s.channels) * s.batch;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t p = 0; p < planes; ++p) {
        const T g = dout[p] / static_cast<T>(plane);
        std::fill(dx + static_cast<std::size_t>(p) * plane, dx + static_cast<std::size_t>(p + 1) * plane, g);
    }
}

#define RNP_INSTANTIATE_KERNELS(T)                                                                  \
    template void nchw_to_cbhw<T>(const T*, T*, const PlaneShape&);                                \
    template void cbhw_to_nchw<T>(const T*, T*, const PlaneShape&);                                \
    template void im2col<T>(const T*, const ConvShape&, T*);                                       \
    template void col2im<T>(const T*, const ConvShape&, T*);                                       \
    template void conv_forward<T>(const T*, const T*, const T*, const ConvShape&, T*);             \
    template void conv_backward_params<T>(const T*, const T*, const ConvShape&, T*, T*);           \
    template void conv_backward_input<T>(const T*, const T*, const ConvShape&, T*);                \
    template void batchnorm_relu_forward<T>(const T*, std::size_t, std::size_t, const T*,          \
                                            const T*, bool, T*, T*, T, T*, T*);                    \
    template void batchnorm_relu_backward<T>(const T*, const T*, const T*, std::size_t,            \
                                             std::size_t, const T*, const T*, T, bool, T*, T*,     \
                                             T*);                                                  \
    template void maxpool2_forward<T>(const T*, const PlaneShape&, T*, std::uint32_t*);            \
    template void maxpool2_backward<T>(const T*, const std::uint32_t*, const PlaneShape&, T*);     \
    template void global_avgpool_forward<T>(const T*, const PlaneShape&, T*);                      \
    template void global_avgpool_backward<T>(const T*, const PlaneShape&, T*);

RNP_INSTANTIATE_KERNELS(float)
RNP_INSTANTIATE_KERNELS(double)

}  // namespace kernels

namespace reference {

template <typename T>
void conv_forward(const T* x, const T* w, const T* bias, const ConvShape& s, T* z) {
    const int H = s.height, W = s.width;
    for (int o = 0; o < s.out_channels; ++o) {
        for (int b = 0; b < s.batch; ++b) {
            for (int y = 0; y < H; ++y) {
                for (int xx = 0; xx < W; ++xx) {
                    double acc = bias[o];
                    for (int c = 0; c < s.in_channels; ++c) {
                        for (int ky = 0; ky < 3; ++ky) {
                            for (int kx = 0; kx < 3; ++kx) {
                                const int sy = y + ky - 1, sx = xx + kx - 1;
                                if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                                acc += static_cast<double>(w[((o * s.in_channels + c) * 3 + ky) * 3 + kx]) *
                                       x[((static_cast<std::size_t>(c) * s.batch + b) * H + sy) * W + sx];
                            }
                        }
                    }
                    z[((static_cast<std::size_t>(o) * s.batch + b) * H + y) * W + xx] = static_cast<T>(acc);
                }
            }
        }
    }
}

template <typename T>
void conv_backward(const T* x, const T* w, const T* dz, const ConvShape& s, T* dx, T* dw, T* db) {
    const int H = s.height, W = s.width;
    const std::size_t in_size = static_cast<std::size_t>(s.in_channels) * s.batch * H * W;
    std::vector<double> gx(in_size, 0.0);
    std::vector<double> gw(static_cast<std::size_t>(s.out_channels) * s.patch(), 0.0);
    std::vector<double> gb(s.out_channels, 0.0);
    for (int o = 0; o < s.out_channels; ++o) {
        for (int b = 0; b < s.batch; ++b) {
            for (int y = 0; y < H; ++y) {
                for (int xx = 0; xx < W; ++xx) {
                    const double g = dz[((static_cast<std::size_t>(o) * s.batch + b) * H + y) * W + xx];
                    gb[o] += g;
                    for (int c = 0; c < s.in_channels; ++c) {
                        for (int ky = 0; ky < 3; ++ky) {
                            for (int kx = 0; kx < 3; ++kx) {
                                const int sy = y + ky - 1, sx = xx + kx - 1;
                                if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                                const std::size_t wi = ((o * s.in_channels + c) * 3 + ky) * 3 + kx;
                                const std::size_t xi = ((static_cast<std::size_t>(c) * s.batch + b) * H + sy) * W + sx;
                                gw[wi] += g * x[xi];
                                gx[xi] += g * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    for (std::size_t i = 0; i < gx.size(); ++i) dx[i] = static_cast<T>(gx[i]);
    for (std::size_t i = 0; i < gw.size(); ++i) dw[i] = static_cast<T>(gw[i]);
    for (int o = 0; o < s.out_channels; ++o) db[o] = static_cast<T>(gb[o]);
}

template <typename T>
void batchnorm_relu_forward(const T* z, std::size_t channels, std::size_t n, const T* gamma,
                            const T* beta, bool training, T* mean, T* var, T eps, T* y) {
    for (std::size_t c = 0; c < channels; ++c) {
        const T* zc = z + c * n;
        if (training) {
            double mu = 0.0;
            for (std::size_t i = 0; i < n; ++i) mu += zc[i];
            mu /= static_cast<double>(n);
            double v = 0.0;
            for (std::size_t i = 0; i < n; ++i) v += (zc[i] - mu) * (zc[i] - mu);
            mean[c] = static_cast<T>(mu);
            var[c] = static_cast<T>(v / static_cast<double>(n));
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double h = (zc[i] - static_cast<double>(mean[c])) / std::sqrt(static_cast<double>(var[c]) + eps);
            y[c * n + i] = static_cast<T>(std::max(0.0, gamma[c] * h + beta[c]));
        }
    }
}

template <typename T>
void maxpool2_forward(const T* x, const PlaneShape& s, T* out) {
    const int H = s.height, W = s.width;
    for (int p = 0; p < s.channels * s.batch; ++p) {
        for (int y = 0; y < H / 2; ++y) {
            for (int xx = 0; xx < W / 2; ++xx) {
                T m = -std::numeric_limits<T>::infinity();
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx)
                        m = std::max(m, x[(static_cast<std::size_t>(p) * H + 2 * y + dy) * W + 2 * xx + dx]);
                out[(static_cast<std::size_t>(p) * (H / 2) + y) * (W / 2) + xx] = m;
            }
        }
    }
}

template void conv_forward<float>(const float*, const float*, const float*, const ConvShape&, float*);
template void conv_forward<double>(const double*, const double*, const double*, const ConvShape&, double*);
template void conv_backward<float>(const float*, const float*, const float*, const ConvShape&, float*, float*, float*);
template void conv_backward<double>(const double*, const double*, const double*, const ConvShape&, double*, double*, double*);
template void batchnorm_relu_forward<float>(const float*, std::size_t, std::size_t, const float*, const float*, bool,
                                            float*, float*, float, float*);
template void batchnorm_relu_forward<double>(const double*, std::size_t, std::size_t, const double*, const double*,
                                             bool, double*, double*, double, double*);
template void maxpool2_forward<float>(const float*, const PlaneShape&, float*);
template void maxpool2_forward<double>(const double*, const PlaneShape&, double*);

}  // namespace reference

}  // namespace rnp
