// Serial reference kernels against the im2col/OpenMP kernels, plus a full
// SmallConvNet forward/backward. Thread count follows RNP_THREADS.

#include <benchmark/benchmark.h>

#include <vector>

#include "rnp/kernels.hpp"
#include "rnp/network.hpp"
#include "rnp/rng.hpp"

using namespace rnp;

namespace {

std::vector<float> random_values(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(2.0 * rng.uniform() - 1.0);
    return v;
}

// The middle SmallConvNet block at batch 32: 16 -> 32 channels on 16x16.
ConvShape block_shape(int batch) { return {16, 32, batch, 16, 16}; }

void BM_conv_forward_reference(benchmark::State& state) {
    const ConvShape s = block_shape(static_cast<int>(state.range(0)));
    const auto x = random_values(std::size_t(s.in_channels) * s.columns(), 1);
    const auto w = random_values(std::size_t(s.out_channels) * s.patch(), 2);
    const auto b = random_values(s.out_channels, 3);
    std::vector<float> z(std::size_t(s.out_channels) * s.columns());
    for (auto _ : state) {
        reference::conv_forward(x.data(), w.data(), b.data(), s, z.data());
        benchmark::DoNotOptimize(z.data());
    }
    state.SetItemsProcessed(state.iterations() * s.batch);
}

void BM_conv_forward_im2col(benchmark::State& state) {
    const ConvShape s = block_shape(static_cast<int>(state.range(0)));
    const auto x = random_values(std::size_t(s.in_channels) * s.columns(), 1);
    const auto w = random_values(std::size_t(s.out_channels) * s.patch(), 2);
    const auto b = random_values(s.out_channels, 3);
    std::vector<float> cols(std::size_t(s.patch()) * s.columns()), z(std::size_t(s.out_channels) * s.columns());
    for (auto _ : state) {
        kernels::im2col(x.data(), s, cols.data());
        kernels::conv_forward(w.data(), b.data(), cols.data(), s, z.data());
        benchmark::DoNotOptimize(z.data());
    }
    state.SetItemsProcessed(state.iterations() * s.batch);
}

void BM_conv_backward_reference(benchmark::State& state) {
    const ConvShape s = block_shape(static_cast<int>(state.range(0)));
    const auto x = random_values(std::size_t(s.in_channels) * s.columns(), 1);
    const auto w = random_values(std::size_t(s.out_channels) * s.patch(), 2);
    const auto dz = random_values(std::size_t(s.out_channels) * s.columns(), 4);
    std::vector<float> dx(x.size()), dw(w.size()), db(s.out_channels);
    for (auto _ : state) {
        reference::conv_backward(x.data(), w.data(), dz.data(), s, dx.data(), dw.data(), db.data());
        benchmark::DoNotOptimize(dx.data());
    }
    state.SetItemsProcessed(state.iterations() * s.batch);
}

void BM_conv_backward_im2col(benchmark::State& state) {
    const ConvShape s = block_shape(static_cast<int>(state.range(0)));
    const auto x = random_values(std::size_t(s.in_channels) * s.columns(), 1);
    const auto w = random_values(std::size_t(s.out_channels) * s.patch(), 2);
    const auto dz = random_values(std::size_t(s.out_channels) * s.columns(), 4);
    std::vector<float> cols(std::size_t(s.patch()) * s.columns()), dcols(cols.size());
    std::vector<float> dx(x.size()), dw(w.size()), db(s.out_channels);
    kernels::im2col(x.data(), s, cols.data());
    for (auto _ : state) {
        kernels::conv_backward_params(dz.data(), cols.data(), s, dw.data(), db.data());
        kernels::conv_backward_input(w.data(), dz.data(), s, dcols.data());
        kernels::col2im(dcols.data(), s, dx.data());
        benchmark::DoNotOptimize(dx.data());
    }
    state.SetItemsProcessed(state.iterations() * s.batch);
}

void BM_batchnorm_reference(benchmark::State& state) {
    const std::size_t c = 32, n = 32 * 16 * 16;
    const auto z = random_values(c * n, 5);
    const auto gamma = random_values(c, 6), beta = random_values(c, 7);
    std::vector<float> mean(c), var(c), y(c * n);
    for (auto _ : state) {
        reference::batchnorm_relu_forward(z.data(), c, n, gamma.data(), beta.data(), true, mean.data(), var.data(),
                                          1e-5f, y.data());
        benchmark::DoNotOptimize(y.data());
    }
}

void BM_batchnorm_parallel(benchmark::State& state) {
    const std::size_t c = 32, n = 32 * 16 * 16;
    const auto z = random_values(c * n, 5);
    const auto gamma = random_values(c, 6), beta = random_values(c, 7);
    std::vector<float> mean(c), var(c), xhat(c * n), y(c * n);
    for (auto _ : state) {
        kernels::batchnorm_relu_forward(z.data(), c, n, gamma.data(), beta.data(), true, mean.data(), var.data(),
                                        1e-5f, xhat.data(), y.data());
        benchmark::DoNotOptimize(y.data());
    }
}

void BM_maxpool_reference(benchmark::State& state) {
    const PlaneShape s{32, 32, 16, 16};
    const auto x = random_values(s.size(), 8);
    std::vector<float> out(s.size() / 4);
    for (auto _ : state) {
        reference::maxpool2_forward(x.data(), s, out.data());
        benchmark::DoNotOptimize(out.data());
    }
}

void BM_maxpool_parallel(benchmark::State& state) {
    const PlaneShape s{32, 32, 16, 16};
    const auto x = random_values(s.size(), 8);
    std::vector<float> out(s.size() / 4);
    std::vector<std::uint32_t> arg(out.size());
    for (auto _ : state) {
        kernels::maxpool2_forward(x.data(), s, out.data(), arg.data());
        benchmark::DoNotOptimize(out.data());
    }
}

void BM_network_step(benchmark::State& state) {
    const auto spec = ModelSpec::small_conv_net();
    const auto params = build_model(spec, 1);
    const int b = static_cast<int>(state.range(0));
    Batch batch;
    batch.images = Tensor({b, 3, 32, 32}, random_values(std::size_t(b) * 3 * 32 * 32, 9));
    for (auto& v : batch.images.values()) v = 0.5f + 0.5f * v;
    for (int i = 0; i < b; ++i) batch.labels.push_back(i % 10);
    for (auto _ : state) {
        auto g = loss_and_grads(spec, params, batch, Mode::Train, GradTarget::Parameters);
        benchmark::DoNotOptimize(g.loss);
    }
    state.SetItemsProcessed(state.iterations() * b);
}

}  // namespace

BENCHMARK(BM_conv_forward_reference)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_forward_im2col)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_backward_reference)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_backward_im2col)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_batchnorm_reference)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_batchnorm_parallel)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_maxpool_reference)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_maxpool_parallel)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_network_step)->Arg(128)->Unit(benchmark::kMillisecond);

int main(int argc, char** argv) {
    configure_threads_from_env();
    benchmark::Initialize(&argc, argv);
    if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
    benchmark::RunSpecifiedBenchmarks();
    benchmark::Shutdown();
    return 0;
}
