#include <algorithm>

#include "doctest.h"
#include "helpers.hpp"
#include "rnp/ablations.hpp"
#include "rnp/checkpoint.hpp"

using namespace rnp;

namespace {

AblationConfig mini_config() {
    AblationConfig cfg;
    cfg.unlearn.lr = 0.2;
    cfg.unlearn.batch_size = 32;
    cfg.recover.batch_size = 32;
    return cfg;
}

}  // namespace

TEST_CASE("variant names round-trip") {
    CHECK(all_variants().size() == 8);
    for (Variant v : all_variants()) CHECK(variant_from_string(to_string(v)) == v);
    CHECK(to_string(Variant::NuFr) == "NU-FR");
    CHECK_THROWS_AS(variant_from_string("NU-XX"), ConfigError);
}

TEST_CASE("filter unlearning") {
    const auto& a = testing::mini_attack();
    UnlearnConfig cfg;
    cfg.batch_size = 32;
    cfg.max_epochs = 0;
    const auto none = filter_unlearn(a.spec, a.backdoored, a.defense, cfg);
    CHECK(none.params == a.backdoored);
    CHECK(none.epochs_used == 0);

    // Masks saturate in [0,1], so small steps plateau above ca_min on this
    // model; a large step gets there.
    cfg.max_epochs = 20;
    const auto fu = filter_unlearn(a.spec, a.backdoored, a.defense, cfg, 20.0);
    CHECK(fu.mask.within_unit_interval());
    CHECK(fu.reached_ca_min);
    CHECK(fu.ca_trace.back() <= 0.25);
    CHECK(fu.params == apply_filter_mask(a.spec, a.backdoored, fu.mask));
    CHECK_THROWS_AS(filter_unlearn(a.spec, a.backdoored, a.defense, cfg, 0.0), ConfigError);
}

TEST_CASE("prune without recovering") {
    const auto& a = testing::mini_attack();
    const auto same = filter_change_scores(a.spec, a.backdoored, a.backdoored);
    for (double s : same) CHECK(s == 0.0);
    // Degenerate scores fall back to registry order.
    const auto idx = prune_without_recovering(a.spec, a.backdoored, a.backdoored, 0.3);
    CHECK(idx.pruned_filters == std::vector<int>{0, 1, 2});
    CHECK(prune_without_recovering(a.spec, a.backdoored, a.backdoored, 0.0).params == a.backdoored);

    auto moved = a.backdoored;
    for (auto& v : moved.get("conv1.weight").values()) v *= 2.0f;
    const auto scores = filter_change_scores(a.spec, a.backdoored, moved);
    for (int f = 0; f < 4; ++f) CHECK(scores[f] == 0.0);
    // Oracle for one filter: L2 norm of the kernel slice itself (it doubled).
    const auto& k = a.backdoored.get("conv1.weight");
    double s = 0.0;
    for (int i = 0; i < 4 * 9; ++i) s += double(k[i]) * double(k[i]);
    CHECK(scores[4] == doctest::Approx(std::sqrt(s)));

    std::vector<int> prev;
    for (int q = 0; q <= 10; ++q) {
        const auto r = prune_without_recovering(a.spec, a.backdoored, moved, 0.1 * q);
        CHECK(std::includes(r.pruned_filters.begin(), r.pruned_filters.end(), prev.begin(), prev.end()));
        prev = r.pruned_filters;
    }
    CHECK_THROWS_AS(filter_change_scores(a.spec, a.backdoored, build_model(ModelSpec::tiny(), 1)), ShapeError);
}

TEST_CASE("learning incorrectly") {
    const auto& a = testing::mini_attack();
    UnlearnConfig cfg;
    cfg.batch_size = 32;
    cfg.lr = 0.2;
    CHECK(learn_incorrectly(a.spec, a.backdoored, a.defense, a.backdoored, cfg, 0) == a.backdoored);
    // Labels from a model that always says 3: descent pulls toward constant 3.
    const auto always3 = testing::constant_model(a.spec, 3, 5.0f);
    const auto li = learn_incorrectly(a.spec, a.backdoored, a.defense, always3, cfg, 10);
    const auto preds = predict(a.spec, li, a.defense.images);
    CHECK(std::count(preds.begin(), preds.end(), 3) >= static_cast<long>(preds.size() * 9 / 10));
}

TEST_CASE("fine-pruning") {
    const auto& a = testing::mini_attack();
    const auto all = fine_pruning(a.spec, a.backdoored, a.defense, 0.0);
    CHECK(all.pruned_count == 6);
    CHECK(all.pruned_filters == std::vector<int>{4, 5, 6, 7, 8, 9});

    // A filter that never fires is pruned first.
    auto params = a.backdoored;
    params.get("bn1.bias")[2] = -1000.0f;
    const auto act = last_layer_mean_activation(a.spec, params, a.defense);
    CHECK(act[2] == 0.0);
    const double acc = accuracy(a.spec, params, a.defense);
    const auto first = fine_pruning(a.spec, params, a.defense, std::min(acc, 0.999));
    REQUIRE(first.pruned_count >= 1);
    CHECK(std::find(first.pruned_filters.begin(), first.pruned_filters.end(), 6) != first.pruned_filters.end());
    CHECK_THROWS_AS(fine_pruning(a.spec, params, a.defense, 1.0), ConfigError);

    const auto r = fine_pruning(a.spec, a.backdoored, a.defense, 0.8);
    CHECK(accuracy(a.spec, r.params, a.defense) >= 0.8);
}

TEST_CASE("neuron pruning counts a filter once 90% of its weights go") {
    const auto& a = testing::mini_attack();
    UnitMask m = UnitMask::ones(a.spec, Granularity::Neuron);
    auto l1 = m.layer(1);
    // Filter 0 of layer 1 owns 36 weights; zero 33 (91.7%) of them.
    for (int i = 0; i < 33; ++i) l1[i] = 0.0f;
    // Filter 1: 32 of 36 (88.9%), not counted.
    for (int i = 36; i < 36 + 32; ++i) l1[i] = 0.0f;
    const auto r = prune_neurons(a.spec, a.backdoored, m, 0.0);
    CHECK(r.pruned_weights == 65);
    CHECK(r.pruned_filters == std::vector<int>{4});
    CHECK(prune_neurons(a.spec, a.backdoored, UnitMask::ones(a.spec, Granularity::Neuron), 0.5).params ==
          a.backdoored);
    CHECK_THROWS_AS(prune_neurons(a.spec, a.backdoored, UnitMask::ones(a.spec, Granularity::Filter), 0.5), ShapeError);
}

TEST_CASE("variants share inputs and leave the model untouched") {
    const auto& a = testing::mini_attack();
    const ParameterStore copy = a.backdoored;
    const AblationContext ctx{a.spec, a.backdoored, a.defense, {&a.test, &a.asr_test}};
    const auto cfg = mini_config();
    const auto dir = testing::temp_dir("matrix");
    const auto matrix = granularity_matrix(ctx, cfg, dir);
    REQUIRE(matrix.size() == 4);
    for (const auto& r : matrix) {
        CHECK(r.before.asr == matrix[0].before.asr);
        CHECK(r.before.ca == matrix[0].before.ca);
        CHECK(std::filesystem::exists(dir / (std::string(to_string(r.variant)) + "_features.csv")));
    }
    CHECK(a.backdoored == copy);

    // NU-FR is the pipeline itself.
    const auto art = run_pipeline(a.spec, a.backdoored, a.defense, ctx.eval, cfg.unlearn, cfg.recover, cfg.prune);
    CHECK(matrix[0].after.asr == art.report.after.asr);
    CHECK(matrix[0].after.ca == art.report.after.ca);
    CHECK(matrix[0].pruned_filters == art.report.pruned_filters);

    for (Variant v : {Variant::PruneWoRecover, Variant::RecoverWoUnlearn, Variant::LearnIncorrect,
                      Variant::FinePruning}) {
        const auto r = run_variant(ctx, v, cfg);
        CHECK(r.variant == v);
        CHECK((r.after.ca >= 0.0 && r.after.ca <= 1.0));
        CHECK(ablation_report_from_json(io::json::parse(to_json(r).dump())) == r);
    }
    CHECK(a.backdoored == copy);

    write_matrix_csv(matrix, dir / "matrix.csv");
    CHECK(std::filesystem::file_size(dir / "matrix.csv") > 0);
}

TEST_CASE("prune-wo-recover defaults to the NU-FR pruned count") {
    const auto& a = testing::mini_attack();
    const AblationContext ctx{a.spec, a.backdoored, a.defense, {&a.test, &a.asr_test}};
    const auto cfg = mini_config();
    const auto nufr = run_variant(ctx, Variant::NuFr, cfg);
    const auto pwr = run_variant(ctx, Variant::PruneWoRecover, cfg);
    CHECK(pwr.pruned_count == nufr.pruned_count);
}
