#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "rnp/checkpoint.hpp"
#include "rnp/io.hpp"
#include "rnp/kernels.hpp"
#include "rnp/network.hpp"

using namespace rnp;

TEST_CASE("build_model is deterministic and matches the registry") {
    const auto spec = ModelSpec::small_conv_net();
    const auto a = build_model(spec, 7);
    const auto b = build_model(spec, 7);
    CHECK(encode_params(a) == encode_params(b));
    CHECK(spec.filter_count() == 112);
    CHECK(spec.filter_registry().size() == 112);
    CHECK(build_model(spec, 8) != a);
    CHECK(a.get("bn0.running_var")[0] == 1.0f);
}

TEST_CASE("build_model golden checksum") {
    // Pinned from the first reference run; any change to initialization,
    // the RNG or the store layout shows up here.
    std::ifstream in(std::string(RNP_FIXTURE_DIR) + "/smallconvnet_seed7.sha256");
    REQUIRE(in);
    std::string expected;
    in >> expected;
    const auto params = build_model(ModelSpec::small_conv_net(), 7);
    CHECK(io::sha256_hex(encode_params(params)) == expected);
}

TEST_CASE("invalid specs are rejected") {
    auto spec = ModelSpec::small_conv_net();
    spec.convs[1].out_channels = 0;
    CHECK_THROWS_AS(build_model(spec, 1), ConfigError);
    auto k1 = ModelSpec::small_conv_net(1);
    CHECK_THROWS_AS(k1.validate(), ConfigError);
}

TEST_CASE("all-ones mask is a bit-exact identity") {
    const auto spec = ModelSpec::small_conv_net();
    const auto params = build_model(spec, 7);
    const auto data = testing::random_dataset(spec, 4, 11);
    const Tensor plain = forward(spec, params, data.images, Mode::Eval);
    for (auto g : {Granularity::Filter, Granularity::Neuron}) {
        const UnitMask ones = UnitMask::ones(spec, g);
        CHECK(forward(spec, params, data.images, Mode::Eval, &ones) == plain);
    }
    CHECK(apply_filter_mask(spec, params, UnitMask::ones(spec, Granularity::Filter)) == params);
}

TEST_CASE("zero filter mask makes eval logits independent of the image") {
    const auto spec = ModelSpec::small_conv_net();
    const auto params = build_model(spec, 7);
    const auto data = testing::random_dataset(spec, 2, 12);
    UnitMask zero = UnitMask::ones(spec, Granularity::Filter);
    for (auto& v : zero.values()) v = 0.0f;
    const Tensor logits = forward(spec, params, data.images, Mode::Eval, &zero);
    for (int k = 0; k < spec.num_classes; ++k) CHECK(logits[k] == logits[spec.num_classes + k]);
}

TEST_CASE("eval forward is pure") {
    const auto spec = ModelSpec::small_conv_net();
    const auto params = build_model(spec, 7);
    const auto data = testing::random_dataset(spec, 3, 13);
    CHECK(forward(spec, params, data.images, Mode::Eval) == forward(spec, params, data.images, Mode::Eval));
}

TEST_CASE("train forward advances running statistics with momentum 0.1") {
    const auto spec = ModelSpec::tiny();
    const auto params = build_model(spec, 2);
    const auto data = testing::random_dataset(spec, 4, 14);
    ParameterStore updated;
    forward(spec, params, data.images, Mode::Train, nullptr, &updated);
    // Oracle: batch mean of the first conv output channel, computed directly.
    const auto& k = params.get("conv0.weight");
    const auto& bias = params.get("conv0.bias");
    const int C = spec.in_channels, H = spec.height, W = spec.width;
    double sum = 0.0;
    for (int b = 0; b < 4; ++b)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = bias[0];
                for (int c = 0; c < C; ++c)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int sy = y + ky - 1, sx = x + kx - 1;
                            if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                            acc += double(k[((0 * C + c) * 3 + ky) * 3 + kx]) *
                                   data.images[((std::size_t(b) * C + c) * H + sy) * W + sx];
                        }
                sum += acc;
            }
    const double mean = sum / (4.0 * H * W);
    CHECK(updated.get("bn0.running_mean")[0] == doctest::Approx(0.1 * mean).epsilon(1e-5));
    CHECK(params.get("bn0.running_mean")[0] == 0.0f);
}

TEST_CASE("uniform logits give loss ln K") {
    const auto spec = ModelSpec::small_conv_net();
    const auto params = testing::constant_model(spec, 0, 0.0f);
    const auto data = testing::random_dataset(spec, 5, 15);
    const auto g = loss_and_grads(spec, params, data.batch(std::vector<std::size_t>{0, 1, 2, 3, 4}), Mode::Eval,
                                  GradTarget::Parameters);
    CHECK(g.loss == doctest::Approx(std::log(10.0)).epsilon(1e-6));
}

TEST_CASE("loss_and_grads covers exactly the requested variables") {
    const auto spec = ModelSpec::tiny();
    const auto params = build_model(spec, 4);
    const auto data = testing::random_dataset(spec, 3, 16);
    const Batch batch = data.batch(std::vector<std::size_t>{0, 1, 2});
    const auto pg = loss_and_grads(spec, params, batch, Mode::Train, GradTarget::Parameters);
    for (const auto& e : pg.param_grads) CHECK(is_trainable(e.role));
    CHECK(pg.mask_grads.empty());
    const UnitMask mask = UnitMask::ones(spec, Granularity::Filter);
    const std::vector<int> only_last{1};
    const auto mg = loss_and_grads(spec, params, batch, Mode::Eval, GradTarget::Mask, &mask, only_last);
    REQUIRE(mg.mask_grads.size() == mask.size());
    for (std::size_t i = 0; i < mask.layer(0).size(); ++i) CHECK(mg.mask_grads[i] == 0.0f);
    CHECK_THROWS(loss_and_grads(spec, params, batch, Mode::Eval, GradTarget::Mask));
    Batch mislabeled = batch;
    mislabeled.labels.pop_back();
    CHECK_THROWS(loss_and_grads(spec, params, mislabeled, Mode::Eval, GradTarget::Parameters));
    CHECK_THROWS_AS(Tensor({0, spec.in_channels, spec.height, spec.width}), ShapeError);
}

TEST_CASE("softmax rows sum to one") {
    const auto spec = ModelSpec::small_conv_net();
    const auto params = build_model(spec, 9);
    const auto data = testing::random_dataset(spec, 6, 17);
    Tensor logits = forward(spec, params, data.images, Mode::Eval);
    for (auto& v : logits.values()) v *= 40.0f;  // sharpen
    const Tensor p = softmax(logits);
    for (int r = 0; r < 6; ++r) {
        double s = 0.0;
        for (int k = 0; k < 10; ++k) s += p[r * 10 + k];
        CHECK(std::abs(s - 1.0) <= 1e-6);
    }
}

TEST_CASE("sgd_step arithmetic") {
    const std::vector<float> one{1.0f}, half{0.5f}, two{2.0f}, zero{0.0f};
    CHECK(sgd_step(one, half, 0.1, 0.0, Direction::Descend)[0] == doctest::Approx(0.95));
    CHECK(sgd_step(one, half, 0.1, 0.0, Direction::Ascend)[0] == doctest::Approx(1.05));
    CHECK(sgd_step(two, zero, 0.1, 0.05, Direction::Ascend)[0] == doctest::Approx(1.99));
    CHECK(sgd_step(two, zero, 0.1, 0.05, Direction::Descend)[0] == doctest::Approx(1.99));
    CHECK_THROWS_AS(sgd_step(one, half, 0.0, 0.0, Direction::Descend), ConfigError);
    const std::vector<float> bad{NAN};
    try {
        sgd_step(one, bad, 0.1, 0.0, Direction::Descend, "conv0.weight");
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("conv0.weight") != std::string::npos);
    }
}

TEST_CASE("apply_filter_mask scales kernels and matches the on-the-fly mask") {
    const auto spec = ModelSpec::small_conv_net();
    const auto params = build_model(spec, 7);
    UnitMask mask = UnitMask::ones(spec, Granularity::Filter);
    const int j = spec.filter_offset(1) + 5;  // layer 1, channel 5
    mask.values()[j] = 0.0f;
    const int h = spec.filter_offset(2) + 3;  // layer 2, channel 3
    mask.values()[h] = 0.5f;
    const auto baked = apply_filter_mask(spec, params, mask);
    const std::size_t slice1 = 16 * 9;
    const auto& k1 = baked.get("conv1.weight");
    for (std::size_t i = 0; i < slice1; ++i) CHECK(k1[5 * slice1 + i] == 0.0f);
    CHECK(baked.get("conv1.bias")[5] == 0.0f);
    const std::size_t slice2 = 32 * 9;
    const auto& k2 = baked.get("conv2.weight");
    const auto& k2o = params.get("conv2.weight");
    for (std::size_t i = 0; i < slice2; ++i) CHECK(k2[3 * slice2 + i] == 0.5f * k2o[3 * slice2 + i]);
    CHECK(baked.get("conv0.weight") == params.get("conv0.weight"));
    CHECK(baked.get("fc.weight") == params.get("fc.weight"));
    CHECK(params == build_model(spec, 7));  // input untouched

    const auto data = testing::random_dataset(spec, 3, 18);
    const Tensor a = forward(spec, baked, data.images, Mode::Eval);
    const Tensor b = forward(spec, params, data.images, Mode::Eval, &mask);
    CHECK(testing::max_abs_diff(a, b) <= 1e-6);

    UnitMask neuron = UnitMask::ones(spec, Granularity::Neuron);
    CHECK_THROWS_AS(apply_filter_mask(spec, params, neuron), ShapeError);
    CHECK_THROWS_AS(apply_filter_mask(ModelSpec::tiny(), build_model(ModelSpec::tiny(), 1), mask), ShapeError);
}

TEST_CASE("gradient check") {
    const auto spec = ModelSpec::tiny();
    const auto r1 = gradient_check(spec, 1, 1e-4);
    CHECK(r1.pass);
    CHECK(r1.max_rel_err <= 1e-4);
    CHECK(r1.checked > 0);
    const auto r2 = gradient_check(spec, 1, 1e-4);
    CHECK(r2.max_rel_err == r1.max_rel_err);
    const auto bad = gradient_check(spec, 1, 1e-4, true);
    CHECK_FALSE(bad.pass);
}

TEST_CASE("feature maps") {
    auto spec = ModelSpec::small_conv_net();
    auto params = build_model(spec, 7);
    for (int l = 0; l < spec.layer_count(); ++l)
        for (auto& v : params[ModelSpec::bn_shift_index(l)].value.values()) v = 0.0f;
    const Tensor black({3, 32, 32}, 0.0f);
    for (int l = 0; l < spec.layer_count(); ++l) {
        const Tensor map = emit_feature_maps(spec, params, black, l);
        CHECK(map.dim(0) == spec.layer_height(l));
        for (std::size_t i = 1; i < map.size(); ++i) CHECK(map[i] == map[0]);
    }
    CHECK_THROWS_AS(emit_feature_maps(spec, params, black, 3), ConfigError);

    const auto data = testing::random_dataset(spec, 1, 19);
    const Tensor image({3, 32, 32}, std::vector<float>(data.images.values().begin(), data.images.values().end()));
    const auto dir = testing::temp_dir("feature_maps");
    write_feature_map_csv(emit_feature_maps(spec, params, image, 1), dir / "a.csv");
    write_feature_map_csv(emit_feature_maps(spec, params, image, 1), dir / "b.csv");
    CHECK(io::read_bytes(dir / "a.csv") == io::read_bytes(dir / "b.csv"));
}

TEST_CASE("non-finite activations raise a numeric error naming the layer") {
    const auto spec = ModelSpec::tiny();
    auto params = build_model(spec, 5);
    params.get("conv1.weight")[0] = INFINITY;
    const auto data = testing::random_dataset(spec, 2, 20);
    try {
        forward(spec, params, data.images, Mode::Eval);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("conv1") != std::string::npos);
    }
}

TEST_CASE("forward rejects mismatched inputs") {
    const auto spec = ModelSpec::tiny();
    const auto params = build_model(spec, 5);
    CHECK_THROWS_AS(forward(spec, params, Tensor({1, 3, 6, 6}), Mode::Eval), ShapeError);
    const UnitMask other = UnitMask::ones(ModelSpec::small_conv_net(), Granularity::Filter);
    CHECK_THROWS_AS(forward(spec, params, Tensor({1, 2, 6, 6}), Mode::Eval, &other), ShapeError);
}
