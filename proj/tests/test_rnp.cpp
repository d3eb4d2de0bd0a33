#include <algorithm>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "rnp/checkpoint.hpp"
#include "rnp/rnp.hpp"

using namespace rnp;

namespace {

// One conv layer with three filters, so masks can be written out by hand.
ModelSpec three_filter_spec() {
    ModelSpec spec;
    spec.num_classes = 2;
    spec.in_channels = 1;
    spec.height = 4;
    spec.width = 4;
    spec.convs = {{3, false}};
    return spec;
}

UnitMask filter_mask(const ModelSpec& spec, std::vector<float> values) {
    UnitMask m = UnitMask::ones(spec, Granularity::Filter);
    std::copy(values.begin(), values.end(), m.values().begin());
    return m;
}

UnitMask random_mask(const ModelSpec& spec, Rng& rng) {
    UnitMask m = UnitMask::ones(spec, Granularity::Filter);
    for (auto& v : m.values()) v = rng.below(4) == 0 ? 1.0f : static_cast<float>(rng.uniform());
    return m;
}

bool is_subset(const std::vector<int>& a, const std::vector<int>& b) {
    return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

// Tiny model that predicts class 1 on bright images and class 0 on black
// ones, for exercising the vote tie rule.
ParameterStore brightness_model(const ModelSpec& spec) {
    ParameterStore p = build_model(spec, 1);
    for (int l = 0; l < spec.layer_count(); ++l)
        for (auto& v : p[ModelSpec::kernel_index(l)].value.values()) v = 1.0f;
    auto& w = p[spec.fc_weight_index()].value;
    for (auto& v : w.values()) v = 0.0f;
    for (int c = 0; c < spec.fc_in(); ++c) w[1 * spec.fc_in() + c] = 1.0f;
    p[spec.fc_bias_index()].value[0] = 0.5f;
    return p;
}

}  // namespace

TEST_CASE("unlearn stop rule") {
    const auto& a = testing::mini_attack();
    UnlearnConfig cfg;
    cfg.lr = 0.05;
    cfg.batch_size = 32;
    cfg.ca_min = 1.0;
    const auto one = unlearn(a.spec, a.backdoored, a.defense, cfg);
    CHECK(one.epochs_used == 1);
    CHECK(one.reached_ca_min);
    CHECK(one.ca_trace.size() == 1);

    cfg.ca_min.reset();
    cfg.max_epochs = 0;
    const auto zero = unlearn(a.spec, a.backdoored, a.defense, cfg);
    CHECK(zero.epochs_used == 0);
    CHECK(zero.params == a.backdoored);
    CHECK_FALSE(zero.reached_ca_min);

    cfg.max_epochs = 20;
    cfg.lr = 0.2;
    const auto full = unlearn(a.spec, a.backdoored, a.defense, cfg);
    CHECK(full.reached_ca_min);
    CHECK(full.ca_trace.back() <= 0.25);
    CHECK(full.epochs_used == static_cast<int>(full.ca_trace.size()));
    for (std::size_t i = 0; i + 1 < full.ca_trace.size(); ++i) CHECK(full.ca_trace[i] > 0.25);

    cfg.early_stop = false;
    cfg.max_epochs = full.epochs_used + 2;
    CHECK(unlearn(a.spec, a.backdoored, a.defense, cfg).epochs_used == full.epochs_used + 2);

    CHECK_THROWS_AS(unlearn(a.spec, a.backdoored, a.train, cfg), ConfigError);  // carries poison flags
    UnlearnConfig bad;
    bad.ca_min = 0.0;
    CHECK_THROWS_AS(bad.validate(10), ConfigError);
}

TEST_CASE("backdoor label vote") {
    const auto spec = ModelSpec::tiny();
    const auto data = testing::random_dataset(spec, 9, 40);
    const auto vote = infer_backdoor_label(spec, testing::constant_model(spec, 2, 3.0f), data);
    CHECK(vote.label == 2);
    CHECK(vote.vote_share == 1.0);
    CHECK_FALSE(vote.tie);

    Dataset split = testing::random_dataset(spec, 6, 41);
    const std::size_t per = split.image_size();
    for (std::size_t i = 0; i < 6; ++i)
        std::fill_n(split.images.data() + i * per, per, i < 3 ? 0.0f : 1.0f);
    const auto tied = infer_backdoor_label(spec, brightness_model(spec), split);
    CHECK(tied.votes[0] == 3);
    CHECK(tied.votes[1] == 3);
    CHECK(tied.label == 0);
    CHECK(tied.tie);
    CHECK(tied.vote_share == 0.5);
}

TEST_CASE("recover keeps the mask in [0,1] after every step and leaves parameters alone") {
    const auto& a = testing::mini_attack();
    UnlearnConfig ucfg;
    ucfg.lr = 0.2;
    ucfg.batch_size = 32;
    const auto unlearned = unlearn(a.spec, a.backdoored, a.defense, ucfg);
    const ParameterStore frozen = unlearned.params;

    RecoverConfig cfg;
    cfg.batch_size = 32;
    cfg.epochs = 0;
    CHECK(recover(a.spec, unlearned.params, a.defense, cfg) == UnitMask::ones(a.spec, Granularity::Filter));

    cfg.epochs = 10;
    int steps = 0;
    bool in_range = true;
    const auto mask = recover(a.spec, unlearned.params, a.defense, cfg, [&](const UnitMask& m) {
        ++steps;
        in_range = in_range && m.within_unit_interval();
    });
    CHECK(steps == 10 * 3);  // 80 samples in batches of 32
    CHECK(in_range);
    CHECK(unlearned.params == frozen);
    CHECK(std::any_of(mask.values().begin(), mask.values().end(), [](float v) { return v < 1.0f; }));

    cfg.granularity = Granularity::Neuron;
    cfg.epochs = 2;
    bool neuron_range = true;
    const auto neuron = recover(a.spec, unlearned.params, a.defense, cfg,
                                [&](const UnitMask& m) { neuron_range = neuron_range && m.within_unit_interval(); });
    CHECK(neuron.size() == a.spec.conv_weight_count());
    CHECK(neuron_range);

    cfg.granularity = Granularity::Filter;
    cfg.layer_subset = std::vector<int>{1};
    const auto last_only = recover(a.spec, unlearned.params, a.defense, cfg);
    for (float v : last_only.layer(0)) CHECK(v == 1.0f);
    cfg.layer_subset = std::vector<int>{};
    CHECK_THROWS_AS(recover(a.spec, unlearned.params, a.defense, cfg), ConfigError);
    cfg.layer_subset = std::vector<int>{5};
    CHECK_THROWS_AS(recover(a.spec, unlearned.params, a.defense, cfg), ConfigError);
}

TEST_CASE("prune_threshold on a hand-written mask") {
    const auto spec = three_filter_spec();
    const auto params = build_model(spec, 3);
    const auto r = prune_threshold(spec, params, filter_mask(spec, {1.0f, 0.5f, 0.8f}), 0.6);
    CHECK(r.pruned_count == 1);
    CHECK(r.pruned_filters == std::vector<int>{1});
    const auto& w = r.params.get("conv0.weight");
    for (int i = 0; i < 9; ++i) {
        CHECK(w[9 + i] == 0.0f);
        CHECK(w[i] == params.get("conv0.weight")[i]);
    }
    CHECK(r.params.get("conv0.bias")[1] == 0.0f);
    // A masked value exactly at the threshold is pruned.
    CHECK(prune_threshold(spec, params, filter_mask(spec, {1.0f, 0.5f, 0.8f}), 0.5).pruned_count == 1);
    CHECK_THROWS_AS(prune_threshold(spec, params, UnitMask::ones(spec, Granularity::Neuron), 0.5), ShapeError);
}

TEST_CASE("DT=0 on an all-ones mask is the identity") {
    const auto spec = ModelSpec::small_conv_net();
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto params = build_model(spec, seed);
        const auto r = prune_threshold(spec, params, UnitMask::ones(spec, Granularity::Filter), 0.0);
        CHECK(r.pruned_count == 0);
        CHECK(encode_params(r.params) == encode_params(params));
    }
}

TEST_CASE("pruned sets are nested in the threshold and in the fraction") {
    const auto spec = ModelSpec::small_conv_net();
    const auto params = build_model(spec, 5);
    Rng rng(42);
    for (int trial = 0; trial < 30; ++trial) {
        const auto mask = random_mask(spec, rng);
        std::vector<double> dts;
        for (int k = 0; k < 8; ++k) dts.push_back(rng.uniform());
        dts.push_back(0.0);
        dts.push_back(1.0);
        std::sort(dts.begin(), dts.end());
        std::vector<int> prev;
        int prev_count = -1;
        for (double dt : dts) {
            const auto r = prune_threshold(spec, params, mask, dt);
            CHECK(r.pruned_count >= prev_count);
            CHECK(is_subset(prev, r.pruned_filters));
            prev = r.pruned_filters;
            prev_count = r.pruned_count;
        }
        prev.clear();
        for (int k = 0; k <= 10; ++k) {
            const auto r = prune_fraction(spec, params, mask, 0.1 * k);
            CHECK(r.pruned_count == static_cast<int>(std::floor(0.1 * k * 112 + 1e-9)));
            CHECK(is_subset(prev, r.pruned_filters));
            prev = r.pruned_filters;
        }
    }
}

TEST_CASE("prune_fraction edge cases and ties") {
    const auto spec = ModelSpec::small_conv_net();
    const auto params = build_model(spec, 6);
    const auto ones = UnitMask::ones(spec, Granularity::Filter);
    const auto none = prune_fraction(spec, params, ones, 0.0);
    CHECK(none.pruned_count == 0);
    CHECK(none.params == params);
    const auto all = prune_fraction(spec, params, ones, 1.0);
    CHECK(all.pruned_count == 112);
    for (int l = 0; l < 3; ++l)
        for (float v : all.params[ModelSpec::kernel_index(l)].value.values()) CHECK(v == 0.0f);
    // Equal mask values: lowest registry index goes first.
    const auto tied = prune_fraction(spec, params, ones, 0.05);
    CHECK(tied.pruned_filters == std::vector<int>{0, 1, 2, 3, 4});
    CHECK_THROWS_AS(prune_fraction(spec, params, ones, 1.5), ConfigError);
}

TEST_CASE("threshold candidates and dynamic threshold selection") {
    const auto spec = three_filter_spec();
    const auto cands = threshold_candidates(filter_mask(spec, {0.33f, 0.5f, 1.0f}));
    CHECK(cands.size() == 22);
    CHECK(std::is_sorted(cands.begin(), cands.end()));
    CHECK(std::count(cands.begin(), cands.end(), static_cast<double>(0.33f)) == 1);

    const auto& a = testing::mini_attack();
    const auto ones = UnitMask::ones(a.spec, Granularity::Filter);
    const auto sel = select_dynamic_threshold(a.spec, a.backdoored, ones, a.defense, 0.02);
    CHECK(sel.within_budget);
    CHECK(sel.threshold == doctest::Approx(0.95));
    const auto loose = select_dynamic_threshold(a.spec, a.backdoored, ones, a.defense, 1.0);
    CHECK(loose.threshold == 1.0);
    CHECK_THROWS_AS(select_dynamic_threshold(a.spec, a.backdoored, ones, a.defense, 0.0), ConfigError);
    for (std::size_t i = 0; i + 1 < sel.trace.size(); ++i)
        CHECK(sel.trace[i].pruned_count <= sel.trace[i + 1].pruned_count);
}

TEST_CASE("dynamic threshold without an in-budget cut falls back to zero") {
    const auto& a = testing::mini_attack();
    // Every filter of the first layer at zero: removing them breaks the model.
    UnitMask mask = UnitMask::ones(a.spec, Granularity::Filter);
    for (auto& v : mask.layer(0)) v = 0.0f;
    PruneConfig cfg;
    cfg.ca_budget = 0.01;
    ThresholdSelection sel;
    const auto r = prune_by_config(a.spec, a.backdoored, mask, a.defense, cfg, &sel);
    CHECK_FALSE(sel.within_budget);
    CHECK(sel.threshold == 0.0);
    // DT=0 still removes the filters whose mask is exactly zero.
    CHECK(r.pruned_count == 4);
    CHECK(r.params == prune_threshold(a.spec, a.backdoored, mask, 0.0).params);

    cfg.threshold = 0.0;
    CHECK(prune_by_config(a.spec, a.backdoored, mask, a.defense, cfg).pruned_count == 4);
    cfg.mode = PruneMode::Fraction;
    cfg.fraction = 0.4;
    CHECK(prune_by_config(a.spec, a.backdoored, mask, a.defense, cfg).pruned_count == 4);
}

TEST_CASE("mask histogram") {
    const auto spec = three_filter_spec();
    CHECK(mask_histogram(filter_mask(spec, {0.0f, 0.55f, 1.0f})) == std::vector<int>{1, 0, 0, 0, 0, 1, 0, 0, 0, 1});
}

TEST_CASE("pipeline end to end on the mini attack") {
    const auto& a = testing::mini_attack();
    const auto before = attack_metrics(a.spec, a.backdoored, a.test, a.asr_test);
    REQUIRE(before.ca >= 0.9);
    REQUIRE(before.asr >= 0.9);

    UnlearnConfig ucfg;
    ucfg.lr = 0.2;
    ucfg.batch_size = 32;
    RecoverConfig rcfg;
    rcfg.batch_size = 32;
    PruneConfig pcfg;
    const EvalSets eval{&a.test, &a.asr_test};
    const auto art = run_pipeline(a.spec, a.backdoored, a.defense, eval, ucfg, rcfg, pcfg);
    const auto again = run_pipeline(a.spec, a.backdoored, a.defense, eval, ucfg, rcfg, pcfg);
    CHECK(art.report == again.report);
    CHECK(encode_params(art.pruned.params) == encode_params(again.pruned.params));
    CHECK(art.mask.within_unit_interval());
    CHECK(art.report.before.asr == before.asr);
    CHECK(art.report.unlearn_epochs == art.unlearned.epochs_used);
    int hist = 0;
    for (int h : art.report.mask_histogram) hist += h;
    CHECK(hist == a.spec.filter_count());

    const auto j = to_json(art.report);
    CHECK(pipeline_report_from_json(io::json::parse(j.dump())) == art.report);

    PruneConfig bad;
    bad.ca_budget = -1.0;
    CHECK_THROWS_AS(run_pipeline(a.spec, a.backdoored, a.defense, eval, ucfg, rcfg, bad), ConfigError);
    CHECK_THROWS_AS(run_pipeline(a.spec, a.backdoored, a.defense, EvalSets{}, ucfg, rcfg, pcfg), ConfigError);
}

TEST_CASE("stage failures carry the stage tag") {
    const auto& a = testing::mini_attack();
    UnlearnConfig ucfg;
    ucfg.lr = 1e30;  // ascent explodes
    ucfg.batch_size = 32;
    try {
        run_pipeline(a.spec, a.backdoored, a.defense, EvalSets{&a.test, &a.asr_test}, ucfg, RecoverConfig{},
                     PruneConfig{});
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).rfind("[unlearn]", 0) == 0);
    }
}
