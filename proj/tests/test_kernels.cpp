// Parallel kernels against the serial reference implementations, over
// randomly drawn shapes.

#include <omp.h>

#include <cmath>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "rnp/kernels.hpp"
#include "rnp/network.hpp"

using namespace rnp;

namespace {

std::vector<double> random_values(Rng& rng, std::size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * (2.0 * rng.uniform() - 1.0);
    return v;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

ConvShape random_shape(Rng& rng) {
    return {1 + int(rng.below(5)), 1 + int(rng.below(6)), 1 + int(rng.below(4)), 1 + int(rng.below(9)),
            1 + int(rng.below(9))};
}

}  // namespace

TEST_CASE("im2col convolution matches direct convolution") {
    Rng rng(101);
    for (int trial = 0; trial < 25; ++trial) {
        const ConvShape s = random_shape(rng);
        const std::size_t in_n = std::size_t(s.in_channels) * s.columns();
        const auto x = random_values(rng, in_n);
        const auto w = random_values(rng, std::size_t(s.out_channels) * s.patch());
        const auto bias = random_values(rng, s.out_channels);
        std::vector<double> cols(std::size_t(s.patch()) * s.columns());
        std::vector<double> z(std::size_t(s.out_channels) * s.columns()), z_ref(z.size());
        kernels::im2col(x.data(), s, cols.data());
        kernels::conv_forward(w.data(), bias.data(), cols.data(), s, z.data());
        reference::conv_forward(x.data(), w.data(), bias.data(), s, z_ref.data());
        CHECK(max_diff(z, z_ref) <= 1e-12);

        const auto dz = random_values(rng, z.size());
        std::vector<double> dw(w.size()), db(bias.size()), dcols(cols.size()), dx(in_n);
        kernels::conv_backward_params(dz.data(), cols.data(), s, dw.data(), db.data());
        kernels::conv_backward_input(w.data(), dz.data(), s, dcols.data());
        kernels::col2im(dcols.data(), s, dx.data());
        std::vector<double> dw_ref(w.size()), db_ref(bias.size()), dx_ref(in_n);
        reference::conv_backward(x.data(), w.data(), dz.data(), s, dx_ref.data(), dw_ref.data(), db_ref.data());
        CHECK(max_diff(dw, dw_ref) <= 1e-12);
        CHECK(max_diff(db, db_ref) <= 1e-12);
        CHECK(max_diff(dx, dx_ref) <= 1e-12);
    }
}

TEST_CASE("batchnorm+relu matches the reference in both modes") {
    Rng rng(102);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t channels = 1 + rng.below(6), n = 1 + rng.below(5000);
        const auto z = random_values(rng, channels * n, 3.0);
        const auto gamma = random_values(rng, channels);
        const auto beta = random_values(rng, channels);
        for (bool training : {true, false}) {
            std::vector<double> mean(channels), var(channels), mean_ref(channels), var_ref(channels);
            if (!training)
                for (std::size_t c = 0; c < channels; ++c) {
                    mean[c] = mean_ref[c] = rng.uniform() - 0.5;
                    var[c] = var_ref[c] = 0.5 + rng.uniform();
                }
            std::vector<double> xhat(z.size()), y(z.size()), y_ref(z.size());
            kernels::batchnorm_relu_forward(z.data(), channels, n, gamma.data(), beta.data(), training, mean.data(),
                                            var.data(), 1e-5, xhat.data(), y.data());
            reference::batchnorm_relu_forward(z.data(), channels, n, gamma.data(), beta.data(), training,
                                              mean_ref.data(), var_ref.data(), 1e-5, y_ref.data());
            CHECK(max_diff(y, y_ref) <= 1e-10);
            CHECK(max_diff(mean, mean_ref) <= 1e-12);
            CHECK(max_diff(var, var_ref) <= 1e-10);
        }
    }
}

TEST_CASE("max pooling matches the reference") {
    Rng rng(103);
    for (int trial = 0; trial < 20; ++trial) {
        const PlaneShape s{1 + int(rng.below(5)), 1 + int(rng.below(4)), 2 * (1 + int(rng.below(6))),
                           2 * (1 + int(rng.below(6)))};
        const auto x = random_values(rng, s.size());
        const std::size_t out_n = s.size() / 4;
        std::vector<double> out(out_n), out_ref(out_n);
        std::vector<std::uint32_t> argmax(out_n);
        kernels::maxpool2_forward(x.data(), s, out.data(), argmax.data());
        reference::maxpool2_forward(x.data(), s, out_ref.data());
        CHECK(out == out_ref);
        // The gradient lands exactly on the argmax positions.
        const auto dout = random_values(rng, out_n);
        std::vector<double> dx(s.size());
        kernels::maxpool2_backward(dout.data(), argmax.data(), s, dx.data());
        double sum_in = 0.0, sum_out = 0.0;
        for (double v : dx) sum_in += v;
        for (double v : dout) sum_out += v;
        CHECK(sum_in == doctest::Approx(sum_out));
    }
}

TEST_CASE("results do not depend on the thread count") {
    const auto spec = ModelSpec::small_conv_net();
    const auto params = build_model(spec, 21);
    const auto data = testing::random_dataset(spec, 37, 22);
    const Batch batch = data.batch(std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
    const int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    const Tensor a = forward(spec, params, data.images, Mode::Train);
    const auto ga = loss_and_grads(spec, params, batch, Mode::Train, GradTarget::Parameters);
    omp_set_num_threads(4);
    const Tensor b = forward(spec, params, data.images, Mode::Train);
    const auto gb = loss_and_grads(spec, params, batch, Mode::Train, GradTarget::Parameters);
    omp_set_num_threads(saved);
    CHECK(a == b);
    CHECK(ga.loss == gb.loss);
    CHECK(ga.param_grads == gb.param_grads);
}

TEST_CASE("conv kernels do not depend on buffer alignment") {
    // Same values at offsets 0..7 floats from the allocation start; the
    // results must match bit for bit.
    Rng rng(104);
    const ConvShape s{5, 7, 3, 9, 11};
    const std::size_t nz = std::size_t(s.out_channels) * s.columns();
    const std::size_t nc = std::size_t(s.patch()) * s.columns();
    const std::size_t nw = std::size_t(s.out_channels) * s.patch();
    std::vector<float> cols0(nc), dz0(nz), w0(nw), b0(s.out_channels);
    for (auto* v : {&cols0, &dz0, &w0, &b0})
        for (auto& x : *v) x = float(2.0 * rng.uniform() - 1.0);
    std::vector<float> z_first, dw_first, db_first, dc_first;
    for (std::size_t off = 0; off < 8; ++off) {
        std::vector<float> cols(nc + off), dz(nz + off), w(nw + off), b(s.out_channels + off);
        std::copy(cols0.begin(), cols0.end(), cols.begin() + off);
        std::copy(dz0.begin(), dz0.end(), dz.begin() + off);
        std::copy(w0.begin(), w0.end(), w.begin() + off);
        std::copy(b0.begin(), b0.end(), b.begin() + off);
        std::vector<float> z(nz + off), dw(nw + off), db(s.out_channels + off), dc(nc + off);
        kernels::conv_forward(w.data() + off, b.data() + off, cols.data() + off, s, z.data() + off);
        kernels::conv_backward_params(dz.data() + off, cols.data() + off, s, dw.data() + off, db.data() + off);
        kernels::conv_backward_input(w.data() + off, dz.data() + off, s, dc.data() + off);
        std::vector<float> zz(z.begin() + off, z.end()), dww(dw.begin() + off, dw.end()),
            dbb(db.begin() + off, db.end()), dcc(dc.begin() + off, dc.end());
        if (off == 0) {
            z_first = zz, dw_first = dww, db_first = dbb, dc_first = dcc;
            continue;
        }
        CHECK(zz == z_first);
        CHECK(dww == dw_first);
        CHECK(dbb == db_first);
        CHECK(dcc == dc_first);
    }
}
