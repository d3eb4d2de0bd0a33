#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "rnp/aux.hpp"
#include "rnp/io.hpp"

using namespace rnp;

TEST_CASE("MAD anomaly index") {
    const std::vector<double> norms{10, 10, 10, 10, 10, 10, 10, 10, 10, 1};
    const auto r = nc_anomaly(norms);
    CHECK(r.flagged == std::vector<int>{9});
    CHECK(r.median == 10.0);
    CHECK(r.mad == 0.0);

    const std::vector<double> flat(10, 4.0);
    const auto none = nc_anomaly(flat);
    CHECK(none.flagged.empty());
    for (double a : none.anomaly_index) CHECK(a == 0.0);

    // Oracle on a spread-out set: median 5.5, sorted deviations 0.5,0.5,1.5,1.5,2.5,2.5,..., MAD 2.5.
    const std::vector<double> spread{1, 2, 3, 4, 5, 6, 7, 8, 9, 9.5};
    const auto s = nc_anomaly(spread);
    CHECK(s.median == doctest::Approx(5.5));
    const double mad = s.mad;
    CHECK(mad == doctest::Approx(2.5));
    CHECK(s.anomaly_index[0] == doctest::Approx(4.5 / (1.4826 * 2.5)));
    CHECK(s.flagged.empty());

    // A large norm is anomalous but never flagged.
    const std::vector<double> big{10, 11, 9, 10, 10.5, 9.5, 10, 100};
    CHECK(nc_anomaly(big).flagged.empty());
    CHECK_THROWS_AS(nc_anomaly(std::vector<double>{1.0, 2.0}), ConfigError);
}

TEST_CASE("MAD anomaly index is scale invariant") {
    Rng rng(50);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> norms(3 + rng.below(10));
        for (auto& v : norms) v = 1.0 + 100.0 * rng.uniform();
        const double c = 0.01 + 50.0 * rng.uniform();
        std::vector<double> scaled = norms;
        for (auto& v : scaled) v *= c;
        const auto a = nc_anomaly(norms), b = nc_anomaly(scaled);
        CHECK(a.flagged == b.flagged);
        for (std::size_t i = 0; i < norms.size(); ++i)
            CHECK(a.anomaly_index[i] == doctest::Approx(b.anomaly_index[i]).epsilon(1e-9));
    }
}

TEST_CASE("trigger recovery on an input-blind model stays at its start") {
    const auto spec = ModelSpec::tiny();
    const auto params = testing::constant_model(spec, 1, 4.0f);
    const auto data = testing::random_dataset(spec, 10, 51);
    NCConfig cfg;
    cfg.lambda = 0.0;
    cfg.steps = 5;
    cfg.batch_size = 4;
    const auto t = nc_optimize(spec, params, 1, data, cfg);
    for (float v : t.mask.values()) CHECK(v == 0.5f);
    CHECK(t.l1_norm == doctest::Approx(0.5 * 36));

    cfg.lambda = 0.05;
    const auto shrunk = nc_optimize(spec, params, 1, data, cfg);
    CHECK(shrunk.l1_norm < t.l1_norm);
    CHECK_THROWS_AS(nc_optimize(spec, params, 3, data, cfg), ConfigError);
    cfg.lambda = -1.0;
    CHECK_THROWS_AS(nc_optimize(spec, params, 1, data, cfg), ConfigError);
}

TEST_CASE("recovered triggers respect bounds and round-trip") {
    const auto& a = testing::mini_attack();
    NCConfig cfg;
    cfg.steps = 5;
    cfg.batch_size = 32;
    const auto t = nc_optimize(a.spec, a.backdoored, 0, a.defense, cfg);
    double sum = 0.0;
    for (float v : t.mask.values()) {
        CHECK((v >= 0.0f && v <= 1.0f));
        sum += v;
    }
    for (float v : t.pattern.values()) CHECK((v >= 0.0f && v <= 1.0f));
    CHECK(t.l1_norm == doctest::Approx(sum));
    CHECK(nc_optimize(a.spec, a.backdoored, 0, a.defense, cfg) == t);
    const auto dir = testing::temp_dir("trigger");
    save_trigger(t, dir);
    CHECK(load_trigger(dir) == t);
    auto bytes = io::read_bytes(dir / "mask.bin");
    bytes[0] ^= 1;
    io::write_bytes(dir / "mask.bin", bytes);
    CHECK_THROWS_AS(load_trigger(dir), FormatError);

    const Tensor img({3, 8, 8}, 0.25f);
    const Tensor s = stamp(t, img);
    for (std::size_t k = 0; k < s.size(); ++k) {
        const float m = t.mask[k % 64];
        CHECK(s[k] == doctest::Approx((1 - m) * 0.25f + m * t.pattern[k]));
    }
}

TEST_CASE("corner mass") {
    RecoveredTrigger t;
    t.mask = Tensor({4, 4}, 0.0f);
    t.pattern = Tensor({1, 4, 4}, 0.0f);
    t.mask[15] = 1.0f;
    t.mask[0] = 1.0f;
    CHECK(corner_mass(t, 1) == 0.5);
    CHECK(corner_mass(t, 4) == 1.0);
    CHECK_THROWS_AS(corner_mass(t, 5), ConfigError);
}

TEST_CASE("STRIP entropy limits") {
    const auto spec = ModelSpec::tiny();
    const auto pool = testing::random_dataset(spec, 20, 52);
    const auto samples = testing::random_dataset(spec, 4, 53);
    const auto uniform = testing::constant_model(spec, 0, 0.0f);
    for (double h : strip_entropies(spec, uniform, samples, pool, 8, 1))
        CHECK(h == doctest::Approx(std::log(3.0)).epsilon(1e-9));
    const auto confident = testing::constant_model(spec, 2, 60.0f);
    for (double h : strip_entropies(spec, confident, samples, pool, 8, 1)) CHECK(h < 1e-20);
    Dataset empty;
    CHECK_THROWS_AS(strip_entropies(spec, uniform, samples, empty, 8, 1), ConfigError);
}

TEST_CASE("STRIP entropy bounds, determinism and gap") {
    const auto& a = testing::mini_attack();
    const auto clean = a.test.subset(std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7});
    const auto triggered = a.asr_test.subset(std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7});
    const auto h = strip_entropies(a.spec, a.backdoored, clean, a.defense, 16, 7);
    for (double v : h) CHECK((v >= 0.0 && v <= std::log(4.0) + 1e-12));
    CHECK(strip_entropies(a.spec, a.backdoored, clean, a.defense, 16, 7) == h);
    CHECK(strip_gap(a.spec, a.backdoored, clean, clean, a.defense, 16, 7) == 0.0);
    const double gap = strip_gap(a.spec, a.backdoored, clean, triggered, a.defense, 16, 7);
    CHECK(std::abs(gap) <= std::log(4.0));
    CHECK(strip_gap(a.spec, a.backdoored, triggered, clean, a.defense, 16, 7) == -gap);
    const Tensor one({3, 8, 8}, std::vector<float>(clean.images.data(), clean.images.data() + 192));
    CHECK(strip_entropy(a.spec, a.backdoored, one, a.defense, 16, 7) == doctest::Approx(h[0]));
}
