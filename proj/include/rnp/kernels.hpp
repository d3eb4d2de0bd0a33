#pragma once

// Data-parallel building blocks of the conv network. Activations use a
// channel-major layout [C, B, H, W] so that one GEMM covers the whole batch
// and per-channel batchnorm reductions are contiguous.
//
// Every parallel loop partitions work into chunks whose boundaries do not
// depend on the thread count, and every cross-chunk reduction is summed in
// chunk order, so results are bit-identical for any RNP_THREADS setting.
//
// The rnp::reference namespace holds direct, serial implementations of the
// same operations. They are slow and exist for tests and benchmarks.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace rnp {

struct ConvShape {
    int in_channels;
    int out_channels;
    int batch;
    int height;
    int width;

    int patch() const { return in_channels * 9; }
    std::size_t columns() const {
        return static_cast<std::size_t>(batch) * height * width;
    }
};

struct PlaneShape {
    int channels;
    int batch;
    int height;
    int width;

    std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
    std::size_t per_channel() const { return plane() * batch; }
    std::size_t size() const { return per_channel() * channels; }
};

// Caps OpenMP worker count from RNP_THREADS (if set). Called once by tools.
void configure_threads_from_env();
int max_threads();

namespace kernels {

// Column chunk used for all batched GEMMs and reductions.
inline constexpr std::size_t gemm_chunk = 2048;

template <typename T>
void nchw_to_cbhw(const T* src, T* dst, const PlaneShape& s);
template <typename T>
void cbhw_to_nchw(const T* src, T* dst, const PlaneShape& s);

// cols[(c*9 + ky*3 + kx), (b*H + y)*W + x], zero padded by one pixel.
template <typename T>
void im2col(const T* x, const ConvShape& s, T* cols);
// Inverse scatter of im2col; overwrites dx.
template <typename T>
void col2im(const T* cols, const ConvShape& s, T* dx);

// z[Cout, N] = w[Cout, Cin*9] * cols + bias
template <typename T>
void conv_forward(const T* w, const T* bias, const T* cols, const ConvShape& s, T* z);
// dw = dz * cols^T, db = row sums of dz
template <typename T>
void conv_backward_params(const T* dz, const T* cols, const ConvShape& s, T* dw, T* db);
// dcols = w^T * dz
template <typename T>
void conv_backward_input(const T* w, const T* dz, const ConvShape& s, T* dcols);

// Batchnorm over [C, N] followed by relu. Training mode writes the biased
// batch mean/var into mean/var; eval mode reads them. xhat is kept for the
// backward pass and y receives the post-relu activation.
template <typename T>
void batchnorm_relu_forward(const T* z, std::size_t channels, std::size_t n, const T* gamma,
                            const T* beta, bool training, T* mean, T* var, T eps, T* xhat, T* y);
// dy is the gradient w.r.t. the post-relu output; y the post-relu output.
template <typename T>
void batchnorm_relu_backward(const T* dy, const T* y, const T* xhat, std::size_t channels,
                             std::size_t n, const T* gamma, const T* var, T eps, bool training,
                             T* dz, T* dgamma, T* dbeta);

template <typename T>
void maxpool2_forward(const T* x, const PlaneShape& s, T* out, std::uint32_t* argmax);
template <typename T>
void maxpool2_backward(const T* dout, const std::uint32_t* argmax, const PlaneShape& s, T* dx);

// out[C, B] = mean over H*W.
template <typename T>
void global_avgpool_forward(const T* x, const PlaneShape& s, T* out);
template <typename T>
void global_avgpool_backward(const T* dout, const PlaneShape& s, T* dx);

}  // namespace kernels

namespace reference {

// Direct 3x3/pad-1 convolution, no im2col.
template <typename T>
void conv_forward(const T* x, const T* w, const T* bias, const ConvShape& s, T* z);
template <typename T>
void conv_backward(const T* x, const T* w, const T* dz, const ConvShape& s, T* dx, T* dw, T* db);
template <typename T>
void batchnorm_relu_forward(const T* z, std::size_t channels, std::size_t n, const T* gamma,
                            const T* beta, bool training, T* mean, T* var, T eps, T* y);
template <typename T>
void maxpool2_forward(const T* x, const PlaneShape& s, T* out);

}  // namespace reference

}  // namespace rnp
