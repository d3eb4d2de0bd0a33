#include "rnp/ablations.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "rnp/engine.hpp"

namespace rnp {

namespace {

constexpr std::pair<Variant, std::string_view> kVariantNames[] = {
    {Variant::NuFr, "NU-FR"},
    {Variant::NuNr, "NU-NR"},
    {Variant::FuFr, "FU-FR"},
    {Variant::FuNr, "FU-NR"},
    {Variant::PruneWoRecover, "prune-wo-recover"},
    {Variant::RecoverWoUnlearn, "recover-wo-unlearn"},
    {Variant::LearnIncorrect, "learn-incorrect"},
    {Variant::FinePruning, "fine-pruning"},
};

std::vector<int> smallest_first(std::span<const double> scores, std::size_t count) {
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] < scores[b]; });
    order.resize(count);
    std::sort(order.begin(), order.end());
    return order;
}

std::size_t fraction_count(double fraction, std::size_t n) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("prune fraction must lie in [0,1]");
    return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

}  // namespace

std::string_view to_string(Variant v) {
    for (const auto& [variant, name] : kVariantNames)
        if (variant == v) return name;
    return "?";
}

Variant variant_from_string(std::string_view text) {
    for (const auto& [variant, name] : kVariantNames)
        if (name == text) return variant;
    throw ConfigError("unknown ablation variant '" + std::string(text) + "'");
}

const std::vector<Variant>& all_variants() {
    static const std::vector<Variant> all = [] {
        std::vector<Variant> v;
        for (const auto& entry : kVariantNames) v.push_back(entry.first);
        return v;
    }();
    return all;
}

io::json to_json(const AblationReport& r) {
    return {{"variant", to_string(r.variant)}, {"before", to_json(r.before)},   {"after", to_json(r.after)},
            {"pruned_count", r.pruned_count},  {"pruned_filters", r.pruned_filters}, {"notes", r.notes}};
}

AblationReport ablation_report_from_json(const io::json& j) {
    AblationReport r;
    r.variant = variant_from_string(j.at("variant").get<std::string>());
    r.before = metrics_from_json(j.at("before"));
    r.after = metrics_from_json(j.at("after"));
    r.pruned_count = j.at("pruned_count").get<int>();
    r.pruned_filters = j.at("pruned_filters").get<std::vector<int>>();
    r.notes = j.at("notes").get<std::string>();
    return r;
}

FilterUnlearnResult filter_unlearn(const ModelSpec& spec, const ParameterStore& params, const Dataset& defense,
                                   const UnlearnConfig& cfg, double mask_lr) {
    cfg.validate(spec.num_classes);
    check_store(spec, params);
    if (!(mask_lr > 0.0)) throw ConfigError("filter unlearning mask lr must be positive");
    if (defense.size() == 0) throw ConfigError("unlearning needs a non-empty defense set");
    if (!defense.poisoned_indices().empty()) throw ConfigError("defense set contains poisoned samples");
    const double ca_min = cfg.resolved_ca_min(spec.num_classes);

    FilterUnlearnResult result;
    result.mask = UnitMask::ones(spec, Granularity::Filter);
    Engine<float> engine(spec);
    EngineGrads<float> grads;
    const auto views = view_params(params);
    BatchCursor cursor(defense, cfg.batch_size, cfg.seed);
    std::vector<float> images;
    std::vector<int> labels;
    const float lr = static_cast<float>(mask_lr);
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const std::size_t batches = cursor.begin_epoch(epoch);
        for (std::size_t b = 0; b < batches; ++b) {
            const std::size_t count = cursor.fill(b, images, labels);
            const MaskInput<float> mi{Granularity::Filter, result.mask.values()};
            engine.forward(views, images, static_cast<int>(count), Mode::Eval, &mi);
            const double loss = engine.cross_entropy(labels);
            if (!std::isfinite(loss)) throw NumericError("filter unlearning loss non-finite at epoch " + std::to_string(epoch));
            engine.backward(views, &mi, BackwardRequest{false, true, false}, grads);
            auto m = result.mask.values();
            for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::clamp(m[i] + lr * grads.mask[i], 0.0f, 1.0f);
        }
        const double ca = accuracy(spec, params, defense, &result.mask);
        result.ca_trace.push_back(ca);
        result.epochs_used = epoch + 1;
        if (ca <= ca_min) {
            result.reached_ca_min = true;
            if (cfg.early_stop) break;
        }
    }
    result.params = apply_filter_mask(spec, params, result.mask);
    return result;
}

std::vector<double> filter_change_scores(const ModelSpec& spec, const ParameterStore& original,
                                         const ParameterStore& unlearned) {
    check_store(spec, original);
    check_store(spec, unlearned);
    std::vector<double> scores;
    for (int l = 0; l < spec.layer_count(); ++l) {
        const auto a = original[ModelSpec::kernel_index(l)].value.values();
        const auto b = unlearned[ModelSpec::kernel_index(l)].value.values();
        const int out = spec.layer_out_channels(l);
        const std::size_t per = a.size() / out;
        for (int o = 0; o < out; ++o) {
            double s = 0.0;
            for (std::size_t k = o * per; k < (o + 1) * per; ++k) {
                const double d = static_cast<double>(b[k]) - static_cast<double>(a[k]);
                s += d * d;
            }
            scores.push_back(std::sqrt(s));
        }
    }
    return scores;
}

PruneResult prune_without_recovering(const ModelSpec& spec, const ParameterStore& original,
                                     const ParameterStore& unlearned, double fraction) {
    const auto scores = filter_change_scores(spec, original, unlearned);
    PruneResult r;
    r.pruned_filters = smallest_first(scores, fraction_count(fraction, scores.size()));
    r.pruned_count = static_cast<int>(r.pruned_filters.size());
    r.params = zero_filters(spec, original, r.pruned_filters);
    return r;
}

ParameterStore learn_incorrectly(const ModelSpec& spec, const ParameterStore& original, const Dataset& defense,
                                 const ParameterStore& label_model, const UnlearnConfig& cfg, int epochs) {
    cfg.validate(spec.num_classes);
    check_store(spec, original);
    if (epochs < 0) throw ConfigError("learn-incorrectly epochs must be >= 0");
    if (defense.size() == 0) throw ConfigError("learn-incorrectly needs a non-empty defense set");
    Dataset relabelled = defense;
    relabelled.labels = predict(spec, label_model, defense.images);

    ParameterStore params = original;
    Engine<float> engine(spec);
    EngineGrads<float> grads;
    BatchCursor cursor(relabelled, cfg.batch_size, cfg.seed);
    std::vector<float> images;
    std::vector<int> labels;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        const std::size_t batches = cursor.begin_epoch(epoch);
        for (std::size_t b = 0; b < batches; ++b) {
            const std::size_t count = cursor.fill(b, images, labels);
            const auto views = view_params(params);
            engine.forward(views, images, static_cast<int>(count), Mode::Train);
            const double loss = engine.cross_entropy(labels);
            if (!std::isfinite(loss)) throw NumericError("learn-incorrectly loss non-finite at epoch " + std::to_string(epoch));
            engine.backward(views, nullptr, BackwardRequest{true, false, false}, grads);
            update_running_stats(engine, params);
            for (std::size_t t = 0; t < params.size(); ++t) {
                if (!is_trainable(params[t].role)) continue;
                sgd_apply(params[t].value.values(), grads.params[t], cfg.lr, cfg.weight_decay, Direction::Descend,
                          params[t].name);
            }
        }
    }
    return params;
}

std::vector<double> last_layer_mean_activation(const ModelSpec& spec, const ParameterStore& params,
                                               const Dataset& defense) {
    check_store(spec, params);
    if (defense.size() == 0) throw ConfigError("fine-pruning needs a non-empty defense set");
    const int last = spec.layer_count() - 1;
    const int channels = spec.layer_out_channels(last);
    std::vector<double> sums(channels, 0.0);
    std::size_t elements = 0;
    Engine<float> engine(spec);
    const auto views = view_params(params);
    const std::size_t n = defense.size();
    constexpr std::size_t chunk = 250;
    for (std::size_t from = 0; from < n; from += chunk) {
        const std::size_t count = std::min(chunk, n - from);
        engine.forward(views, sample_span(defense.images, from, count), static_cast<int>(count), Mode::Eval);
        const auto act = engine.activation(last);
        const std::size_t per = act.size() / channels;
        for (int c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < per; ++i) sums[c] += act[c * per + i];
        elements += per;
    }
    for (double& s : sums) s /= static_cast<double>(elements);
    return sums;
}

PruneResult fine_pruning(const ModelSpec& spec, const ParameterStore& params, const Dataset& defense,
                         double ca_stop, const ParameterStore* rank_by) {
    if (!(ca_stop >= 0.0 && ca_stop < 1.0)) throw ConfigError("fine-pruning ca_stop must lie in [0,1)");
    const auto activation = last_layer_mean_activation(spec, rank_by ? *rank_by : params, defense);
    const int last = spec.layer_count() - 1;
    const int offset = static_cast<int>(spec.filter_offset(last));
    std::vector<int> order(activation.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return activation[a] < activation[b]; });

    PruneResult r;
    r.params = params;
    for (int c : order) {
        std::vector<int> next = r.pruned_filters;
        next.push_back(offset + c);
        ParameterStore candidate = zero_filters(spec, params, next);
        if (accuracy(spec, candidate, defense) < ca_stop) break;
        r.pruned_filters = std::move(next);
        r.params = std::move(candidate);
    }
    std::sort(r.pruned_filters.begin(), r.pruned_filters.end());
    r.pruned_count = static_cast<int>(r.pruned_filters.size());
    return r;
}

NeuronPruneResult prune_neurons(const ModelSpec& spec, const ParameterStore& original, const UnitMask& mask,
                                double threshold) {
    if (mask.granularity() != Granularity::Neuron) throw ShapeError("neuron pruning needs a neuron-granularity mask");
    mask.check_layout(spec);
    check_store(spec, original);
    NeuronPruneResult r;
    r.params = original;
    int filter = 0;
    for (int l = 0; l < spec.layer_count(); ++l) {
        auto w = r.params[ModelSpec::kernel_index(l)].value.values();
        const auto m = mask.layer(l);
        const int out = spec.layer_out_channels(l);
        const std::size_t per = w.size() / out;
        for (int o = 0; o < out; ++o, ++filter) {
            std::size_t pruned = 0;
            for (std::size_t k = o * per; k < (o + 1) * per; ++k) {
                if (static_cast<double>(m[k]) <= threshold) {
                    w[k] = 0.0f;
                    ++pruned;
                }
            }
            r.pruned_weights += pruned;
            if (static_cast<double>(pruned) >= kFilterPrunedShare * static_cast<double>(per))
                r.pruned_filters.push_back(filter);
        }
    }
    r.pruned_count = static_cast<int>(r.pruned_filters.size());
    return r;
}

ThresholdSelection select_dynamic_threshold_neurons(const ModelSpec& spec, const ParameterStore& original,
                                                    const UnitMask& mask, const Dataset& defense,
                                                    double ca_budget) {
    if (!(ca_budget > 0.0)) throw ConfigError("ca_budget must be positive");
    ThresholdSelection sel;
    sel.base_accuracy = accuracy(spec, original, defense);
    std::map<std::size_t, double> by_weights;
    bool found = false;
    for (int k = 0; k <= 20; ++k) {
        const double dt = 0.05 * k;
        const NeuronPruneResult pr = prune_neurons(spec, original, mask, dt);
        auto it = by_weights.find(pr.pruned_weights);
        if (it == by_weights.end())
            it = by_weights.emplace(pr.pruned_weights, accuracy(spec, pr.params, defense)).first;
        sel.trace.push_back({dt, pr.pruned_count, it->second});
        if (it->second >= sel.base_accuracy - ca_budget - 1e-12) {
            sel.threshold = dt;
            found = true;
        }
    }
    if (!found) {
        sel.threshold = 0.0;
        sel.within_budget = false;
    }
    return sel;
}

namespace {

struct Defended {
    ParameterStore params;
    int pruned_count = 0;
    std::vector<int> pruned_filters;
    std::string notes;
};

// Recovers a mask on `recover_from` and prunes the original model with it.
Defended recover_and_prune(const AblationContext& ctx, const ParameterStore& recover_from, Granularity g,
                           const AblationConfig& cfg) {
    RecoverConfig rc = cfg.recover;
    rc.granularity = g;
    const UnitMask mask = recover(ctx.spec, recover_from, ctx.defense, rc);
    Defended d;
    if (g == Granularity::Filter) {
        ThresholdSelection sel;
        PruneResult pr = prune_by_config(ctx.spec, ctx.original, mask, ctx.defense, cfg.prune, &sel);
        d.params = std::move(pr.params);
        d.pruned_count = pr.pruned_count;
        d.pruned_filters = std::move(pr.pruned_filters);
        if (cfg.prune.mode == PruneMode::Threshold) d.notes = "threshold=" + std::to_string(sel.threshold);
        else d.notes = "fraction=" + std::to_string(cfg.prune.fraction);
        if (!sel.within_budget) d.notes += " (no threshold met the budget)";
        return d;
    }
    double dt = 0.0;
    bool within = true;
    if (cfg.prune.threshold) {
        dt = *cfg.prune.threshold;
    } else {
        const ThresholdSelection sel =
            select_dynamic_threshold_neurons(ctx.spec, ctx.original, mask, ctx.defense, cfg.prune.ca_budget);
        dt = sel.threshold;
        within = sel.within_budget;
    }
    NeuronPruneResult pr = prune_neurons(ctx.spec, ctx.original, mask, dt);
    d.params = std::move(pr.params);
    d.pruned_count = pr.pruned_count;
    d.pruned_filters = std::move(pr.pruned_filters);
    d.notes = "threshold=" + std::to_string(dt) + " pruned_weights=" + std::to_string(pr.pruned_weights);
    if (!within) d.notes += " (no threshold met the budget)";
    return d;
}

}  // namespace

AblationReport run_variant(const AblationContext& ctx, Variant variant, const AblationConfig& cfg,
                           ParameterStore* defended) {
    if (!ctx.eval.clean_test || !ctx.eval.asr_test) throw ConfigError("ablations need clean and ASR test sets");
    const ModelSpec& spec = ctx.spec;
    AblationReport report;
    report.variant = variant;
    report.before = attack_metrics(spec, ctx.original, *ctx.eval.clean_test, *ctx.eval.asr_test);

    Defended d;
    switch (variant) {
        case Variant::NuFr:
        case Variant::NuNr: {
            const UnlearnResult u = unlearn(spec, ctx.original, ctx.defense, cfg.unlearn);
            d = recover_and_prune(ctx, u.params, variant == Variant::NuFr ? Granularity::Filter : Granularity::Neuron, cfg);
            d.notes += " unlearn_epochs=" + std::to_string(u.epochs_used);
            break;
        }
        case Variant::FuFr:
        case Variant::FuNr: {
            const FilterUnlearnResult u = filter_unlearn(spec, ctx.original, ctx.defense, cfg.unlearn, cfg.fu_mask_lr);
            d = recover_and_prune(ctx, u.params, variant == Variant::FuFr ? Granularity::Filter : Granularity::Neuron, cfg);
            d.notes += " unlearn_epochs=" + std::to_string(u.epochs_used);
            break;
        }
        case Variant::PruneWoRecover: {
            const UnlearnResult u = unlearn(spec, ctx.original, ctx.defense, cfg.unlearn);
            double fraction = 0.0;
            if (cfg.pwr_fraction) {
                fraction = *cfg.pwr_fraction;
            } else {
                const Defended ref = recover_and_prune(ctx, u.params, Granularity::Filter, cfg);
                fraction = static_cast<double>(ref.pruned_count) / static_cast<double>(spec.filter_count());
            }
            PruneResult pr = prune_without_recovering(spec, ctx.original, u.params, fraction);
            d.params = std::move(pr.params);
            d.pruned_count = pr.pruned_count;
            d.pruned_filters = std::move(pr.pruned_filters);
            d.notes = "fraction=" + std::to_string(fraction);
            break;
        }
        case Variant::RecoverWoUnlearn:
            d = recover_and_prune(ctx, ctx.original, Granularity::Filter, cfg);
            break;
        case Variant::LearnIncorrect: {
            const UnlearnResult u = unlearn(spec, ctx.original, ctx.defense, cfg.unlearn);
            const ParameterStore li =
                learn_incorrectly(spec, ctx.original, ctx.defense, u.params, cfg.unlearn, u.epochs_used);
            d = recover_and_prune(ctx, li, Granularity::Filter, cfg);
            d.notes += " epochs=" + std::to_string(u.epochs_used);
            break;
        }
        case Variant::FinePruning: {
            PruneResult pr = fine_pruning(spec, ctx.original, ctx.defense, cfg.fp_ca_stop);
            d.params = std::move(pr.params);
            d.pruned_count = pr.pruned_count;
            d.pruned_filters = std::move(pr.pruned_filters);
            d.notes = "ca_stop=" + std::to_string(cfg.fp_ca_stop);
            break;
        }
    }
    report.after = attack_metrics(spec, d.params, *ctx.eval.clean_test, *ctx.eval.asr_test);
    report.pruned_count = d.pruned_count;
    report.pruned_filters = std::move(d.pruned_filters);
    report.notes = std::move(d.notes);
    if (defended) *defended = std::move(d.params);
    return report;
}

std::vector<AblationReport> granularity_matrix(const AblationContext& ctx, const AblationConfig& cfg,
                                               const std::filesystem::path& feature_dir) {
    std::vector<AblationReport> out;
    std::vector<ParameterStore> models(4);
    const Variant variants[] = {Variant::NuFr, Variant::NuNr, Variant::FuFr, Variant::FuNr};
    for (int i = 0; i < 4; ++i) out.push_back(run_variant(ctx, variants[i], cfg, &models[i]));
    if (!feature_dir.empty() && ctx.eval.asr_test->size() > 0) {
        std::filesystem::create_directories(feature_dir);
        const Dataset& asr = *ctx.eval.asr_test;
        const std::size_t per = asr.image_size();
        Tensor image({asr.channels(), asr.height(), asr.width()},
                     std::vector<float>(asr.images.data(), asr.images.data() + per));
        const int last = ctx.spec.layer_count() - 1;
        for (int i = 0; i < 4; ++i)
            write_feature_map_csv(emit_feature_maps(ctx.spec, models[i], image, last),
                                  feature_dir / (std::string(to_string(variants[i])) + "_features.csv"));
    }
    return out;
}

void write_matrix_csv(const std::vector<AblationReport>& reports, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "variant,ca_before,asr_before,ca_after,asr_after,pruned_count\n";
    for (const auto& r : reports) {
        out << to_string(r.variant) << ',' << r.before.ca << ',' << r.before.asr << ',' << r.after.ca << ','
            << r.after.asr << ',' << r.pruned_count << '\n';
    }
}

}  // namespace rnp
