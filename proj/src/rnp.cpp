#include "rnp/rnp.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "rnp/engine.hpp"
#include "rnp/rng.hpp"

namespace rnp {

void UnlearnConfig::validate(int num_classes) const {
    if (!(lr > 0.0)) throw ConfigError("unlearn.lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("unlearn.weight_decay must be >= 0");
    if (max_epochs < 0) throw ConfigError("unlearn.max_epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("unlearn.batch_size must be >= 1");
    const double c = resolved_ca_min(num_classes);
    if (!(c > 0.0 && c <= 1.0)) throw ConfigError("unlearn.ca_min must lie in (0,1]");
}

void RecoverConfig::validate(const ModelSpec& spec) const {
    if (!(lr > 0.0)) throw ConfigError("recover.lr must be positive");
    if (epochs < 0) throw ConfigError("recover.epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("recover.batch_size must be >= 1");
    if (!layer_subset) return;
    if (layer_subset->empty()) throw ConfigError("recover.layer_subset is empty");
    for (int l : *layer_subset)
        if (l < 0 || l >= spec.layer_count())
            throw ConfigError("recover.layer_subset names unknown layer " + std::to_string(l));
}

void PruneConfig::validate() const {
    if (threshold && !(*threshold >= 0.0 && *threshold <= 1.0)) throw ConfigError("prune.threshold must lie in [0,1]");
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("prune.fraction must lie in [0,1]");
    if (!(ca_budget > 0.0)) throw ConfigError("prune.ca_budget must be positive");
}

std::string_view to_string(PruneMode mode) { return mode == PruneMode::Threshold ? "threshold" : "fraction"; }

PruneMode prune_mode_from_string(std::string_view text) {
    if (text == "threshold") return PruneMode::Threshold;
    if (text == "fraction") return PruneMode::Fraction;
    throw ConfigError("unknown prune mode '" + std::string(text) + "'");
}

BatchCursor::BatchCursor(const Dataset& data, int batch_size, std::uint64_t seed)
    : data_(data), batch_size_(batch_size), seed_(seed), order_(data.size()) {}

std::size_t BatchCursor::begin_epoch(int epoch) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(mix_seed(seed_, 11, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(std::span<std::size_t>(order_));
    return (order_.size() + batch_size_ - 1) / batch_size_;
}

std::size_t BatchCursor::fill(std::size_t b, std::vector<float>& images, std::vector<int>& labels) const {
    const std::size_t start = b * batch_size_;
    const std::size_t count = std::min<std::size_t>(batch_size_, order_.size() - start);
    const std::size_t per = data_.image_size();
    images.resize(count * per);
    labels.resize(count);
    for (std::size_t j = 0; j < count; ++j) {
        const std::size_t i = order_[start + j];
        std::copy_n(data_.images.data() + i * per, per, images.data() + j * per);
        labels[j] = data_.labels[i];
    }
    return count;
}

UnlearnResult unlearn(const ModelSpec& spec, const ParameterStore& params, const Dataset& defense,
                      const UnlearnConfig& cfg) {
    cfg.validate(spec.num_classes);
    check_store(spec, params);
    if (defense.size() == 0) throw ConfigError("unlearning needs a non-empty defense set");
    if (!defense.poisoned_indices().empty()) throw ConfigError("defense set contains poisoned samples");
    const double ca_min = cfg.resolved_ca_min(spec.num_classes);

    UnlearnResult result;
    result.params = params;
    Engine<float> engine(spec);
    EngineGrads<float> grads;
    BatchCursor cursor(defense, cfg.batch_size, cfg.seed);
    std::vector<float> images;
    std::vector<int> labels;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const std::size_t batches = cursor.begin_epoch(epoch);
        for (std::size_t b = 0; b < batches; ++b) {
            const std::size_t count = cursor.fill(b, images, labels);
            const auto views = view_params(result.params);
            engine.forward(views, images, static_cast<int>(count), Mode::Train);
            const double loss = engine.cross_entropy(labels);
            if (!std::isfinite(loss)) throw NumericError("unlearning loss non-finite at epoch " + std::to_string(epoch));
            engine.backward(views, nullptr, BackwardRequest{true, false, false}, grads);
            update_running_stats(engine, result.params);
            for (std::size_t t = 0; t < result.params.size(); ++t) {
                if (!is_trainable(result.params[t].role)) continue;
                sgd_apply(result.params[t].value.values(), grads.params[t], cfg.lr, cfg.weight_decay,
                          Direction::Ascend, result.params[t].name);
            }
        }
        const double ca = accuracy(spec, result.params, defense);
        result.ca_trace.push_back(ca);
        result.epochs_used = epoch + 1;
        if (ca <= ca_min) {
            result.reached_ca_min = true;
            if (cfg.early_stop) break;
        }
    }
    return result;
}

LabelVote infer_backdoor_label(const ModelSpec& spec, const ParameterStore& unlearned, const Dataset& defense) {
    if (defense.size() == 0) throw ConfigError("label inference needs a non-empty defense set");
    const auto preds = predict(spec, unlearned, defense.images);
    LabelVote vote;
    vote.votes.assign(spec.num_classes, 0);
    for (int p : preds) ++vote.votes[p];
    const auto best = std::max_element(vote.votes.begin(), vote.votes.end());  // first maximum = lowest index
    vote.label = static_cast<int>(best - vote.votes.begin());
    vote.vote_share = static_cast<double>(*best) / static_cast<double>(preds.size());
    vote.tie = std::count(vote.votes.begin(), vote.votes.end(), *best) > 1;
    return vote;
}

UnitMask recover(const ModelSpec& spec, const ParameterStore& unlearned, const Dataset& defense,
                 const RecoverConfig& cfg, const MaskObserver& observer) {
    cfg.validate(spec);
    check_store(spec, unlearned);
    if (defense.size() == 0) throw ConfigError("recovering needs a non-empty defense set");
    UnitMask mask = UnitMask::ones(spec, cfg.granularity);
    std::vector<char> active(spec.layer_count(), cfg.layer_subset ? 0 : 1);
    if (cfg.layer_subset)
        for (int l : *cfg.layer_subset) active[l] = 1;

    Engine<float> engine(spec);
    EngineGrads<float> grads;
    const auto views = view_params(unlearned);
    BatchCursor cursor(defense, cfg.batch_size, cfg.seed);
    std::vector<float> images;
    std::vector<int> labels;
    const float lr = static_cast<float>(cfg.lr);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::size_t batches = cursor.begin_epoch(epoch);
        for (std::size_t b = 0; b < batches; ++b) {
            const std::size_t count = cursor.fill(b, images, labels);
            const MaskInput<float> mi{mask.granularity(), mask.values()};
            engine.forward(views, images, static_cast<int>(count), Mode::Eval, &mi);
            const double loss = engine.cross_entropy(labels);
            if (!std::isfinite(loss)) throw NumericError("recovering loss non-finite at epoch " + std::to_string(epoch));
            engine.backward(views, &mi, BackwardRequest{false, true, false}, grads);
            for (int l = 0; l < spec.layer_count(); ++l) {
                if (!active[l]) continue;
                auto m = mask.layer(l);
                const std::size_t off = mask.layer_offsets()[l];
                for (std::size_t i = 0; i < m.size(); ++i) {
                    const float g = grads.mask[off + i];
                    if (!std::isfinite(g)) throw NumericError("non-finite mask gradient in layer " + std::to_string(l));
                    m[i] = std::clamp(m[i] - lr * g, 0.0f, 1.0f);
                }
            }
            if (observer) observer(mask);
        }
    }
    return mask;
}

ParameterStore zero_filters(const ModelSpec& spec, const ParameterStore& params, const std::vector<int>& filters) {
    ParameterStore out = params;
    const auto registry = spec.filter_registry();
    for (int f : filters) {
        if (f < 0 || f >= static_cast<int>(registry.size())) throw ConfigError("filter index out of range");
        const auto [layer, channel] = registry[f];
        auto w = out[ModelSpec::kernel_index(layer)].value.values();
        const std::size_t per = spec.layer_weight_count(layer) / spec.layer_out_channels(layer);
        std::fill_n(w.begin() + channel * per, per, 0.0f);
        out[ModelSpec::bias_index(layer)].value[channel] = 0.0f;
    }
    return out;
}

namespace {

void require_filter_mask(const ModelSpec& spec, const UnitMask& mask) {
    if (mask.granularity() != Granularity::Filter)
        throw ShapeError("filter pruning needs a filter-granularity mask");
    mask.check_layout(spec);
}

std::vector<int> filters_at_or_below(const UnitMask& mask, double threshold) {
    std::vector<int> out;
    const auto values = mask.values();
    for (std::size_t i = 0; i < values.size(); ++i)
        if (static_cast<double>(values[i]) <= threshold) out.push_back(static_cast<int>(i));
    return out;
}

}  // namespace

PruneResult prune_threshold(const ModelSpec& spec, const ParameterStore& original, const UnitMask& mask,
                            double threshold) {
    require_filter_mask(spec, mask);
    check_store(spec, original);
    PruneResult r;
    r.pruned_filters = filters_at_or_below(mask, threshold);
    r.pruned_count = static_cast<int>(r.pruned_filters.size());
    r.params = zero_filters(spec, original, r.pruned_filters);
    return r;
}

PruneResult prune_fraction(const ModelSpec& spec, const ParameterStore& original, const UnitMask& mask,
                           double fraction) {
    require_filter_mask(spec, mask);
    check_store(spec, original);
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("prune fraction must lie in [0,1]");
    const auto values = mask.values();
    std::vector<int> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return values[a] < values[b]; });
    const auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(values.size()) + 1e-9));
    PruneResult r;
    r.pruned_filters.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
    std::sort(r.pruned_filters.begin(), r.pruned_filters.end());
    r.pruned_count = static_cast<int>(count);
    r.params = zero_filters(spec, original, r.pruned_filters);
    return r;
}

std::vector<double> threshold_candidates(const UnitMask& mask) {
    std::vector<double> out;
    for (int k = 0; k <= 20; ++k) out.push_back(0.05 * k);
    for (float v : mask.values()) out.push_back(static_cast<double>(v));
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

ThresholdSelection select_dynamic_threshold(const ModelSpec& spec, const ParameterStore& original,
                                            const UnitMask& mask, const Dataset& defense, double ca_budget) {
    require_filter_mask(spec, mask);
    if (!(ca_budget > 0.0)) throw ConfigError("ca_budget must be positive");
    ThresholdSelection sel;
    sel.base_accuracy = accuracy(spec, original, defense);
    // Pruned sets are nested in the threshold, so the count identifies the set.
    std::map<int, double> by_count;
    bool found = false;
    for (double dt : threshold_candidates(mask)) {
        const auto filters = filters_at_or_below(mask, dt);
        const int count = static_cast<int>(filters.size());
        auto it = by_count.find(count);
        if (it == by_count.end()) {
            const double acc = count == 0 ? sel.base_accuracy : accuracy(spec, zero_filters(spec, original, filters), defense);
            it = by_count.emplace(count, acc).first;
        }
        sel.trace.push_back({dt, count, it->second});
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

PruneResult prune_by_config(const ModelSpec& spec, const ParameterStore& original, const UnitMask& mask,
                            const Dataset& defense, const PruneConfig& cfg, ThresholdSelection* selection) {
    cfg.validate();
    if (cfg.mode == PruneMode::Fraction) return prune_fraction(spec, original, mask, cfg.fraction);
    double dt = 0.0;
    if (cfg.threshold) {
        dt = *cfg.threshold;
        if (selection) {
            selection->threshold = dt;
            selection->within_budget = true;
        }
    } else {
        ThresholdSelection sel = select_dynamic_threshold(spec, original, mask, defense, cfg.ca_budget);
        dt = sel.threshold;
        if (selection) *selection = std::move(sel);
    }
    return prune_threshold(spec, original, mask, dt);
}

std::vector<int> mask_histogram(const UnitMask& mask, int bins) {
    std::vector<int> h(bins, 0);
    for (float v : mask.values()) ++h[std::clamp(static_cast<int>(v * bins), 0, bins - 1)];
    return h;
}

PipelineArtifacts run_pipeline(const ModelSpec& spec, const ParameterStore& original, const Dataset& defense,
                               const EvalSets& eval, const UnlearnConfig& unlearn_cfg,
                               const RecoverConfig& recover_cfg, const PruneConfig& prune_cfg) {
    unlearn_cfg.validate(spec.num_classes);
    recover_cfg.validate(spec);
    prune_cfg.validate();
    if (!eval.clean_test || !eval.asr_test) throw ConfigError("pipeline needs clean and ASR test sets");
    auto stage = [](const char* name, auto&& fn) {
        try {
            return fn();
        } catch (const Error& e) {
            throw Error(std::string("[") + name + "] " + e.what());
        }
    };

    PipelineArtifacts art;
    PipelineReport& rep = art.report;
    rep.before = stage("evaluate", [&] { return attack_metrics(spec, original, *eval.clean_test, *eval.asr_test); });
    art.unlearned = stage("unlearn", [&] { return unlearn(spec, original, defense, unlearn_cfg); });
    rep.unlearn_epochs = art.unlearned.epochs_used;
    rep.unlearn_reached_ca_min = art.unlearned.reached_ca_min;
    rep.unlearn_ca_trace = art.unlearned.ca_trace;
    const LabelVote vote = stage("infer-label", [&] { return infer_backdoor_label(spec, art.unlearned.params, defense); });
    rep.inferred_label = vote.label;
    rep.vote_share = vote.vote_share;
    rep.vote_tie = vote.tie;
    art.mask = stage("recover", [&] { return recover(spec, art.unlearned.params, defense, recover_cfg); });
    rep.mask_histogram = mask_histogram(art.mask);
    ThresholdSelection sel;
    art.pruned = stage("prune", [&] { return prune_by_config(spec, original, art.mask, defense, prune_cfg, &sel); });
    rep.threshold = prune_cfg.mode == PruneMode::Threshold ? sel.threshold : 0.0;
    rep.threshold_within_budget = sel.within_budget;
    rep.threshold_trace = sel.trace;
    rep.pruned_count = art.pruned.pruned_count;
    rep.pruned_filters = art.pruned.pruned_filters;
    rep.after = stage("evaluate", [&] { return attack_metrics(spec, art.pruned.params, *eval.clean_test, *eval.asr_test); });
    return art;
}

io::json to_json(const Metrics& m) { return {{"ca", m.ca}, {"asr", m.asr}}; }

Metrics metrics_from_json(const io::json& j) { return {j.at("ca").get<double>(), j.at("asr").get<double>()}; }

io::json to_json(const PipelineReport& r) {
    io::json trace = io::json::array();
    for (const auto& row : r.threshold_trace)
        trace.push_back({{"threshold", row.threshold}, {"pruned", row.pruned_count}, {"defense_acc", row.defense_accuracy}});
    return {
        {"inferred_label", r.inferred_label},
        {"vote_share", r.vote_share},
        {"vote_tie", r.vote_tie},
        {"unlearn_epochs", r.unlearn_epochs},
        {"unlearn_reached_ca_min", r.unlearn_reached_ca_min},
        {"unlearn_ca_trace", r.unlearn_ca_trace},
        {"threshold", r.threshold},
        {"threshold_within_budget", r.threshold_within_budget},
        {"threshold_trace", trace},
        {"pruned_count", r.pruned_count},
        {"pruned_filters", r.pruned_filters},
        {"before", to_json(r.before)},
        {"after", to_json(r.after)},
        {"mask_histogram", r.mask_histogram},
    };
}

PipelineReport pipeline_report_from_json(const io::json& j) {
    PipelineReport r;
    r.inferred_label = j.at("inferred_label").get<int>();
    r.vote_share = j.at("vote_share").get<double>();
    r.vote_tie = j.at("vote_tie").get<bool>();
    r.unlearn_epochs = j.at("unlearn_epochs").get<int>();
    r.unlearn_reached_ca_min = j.at("unlearn_reached_ca_min").get<bool>();
    r.unlearn_ca_trace = j.at("unlearn_ca_trace").get<std::vector<double>>();
    r.threshold = j.at("threshold").get<double>();
    r.threshold_within_budget = j.at("threshold_within_budget").get<bool>();
    for (const auto& row : j.at("threshold_trace"))
        r.threshold_trace.push_back({row.at("threshold").get<double>(), row.at("pruned").get<int>(),
                                     row.at("defense_acc").get<double>()});
    r.pruned_count = j.at("pruned_count").get<int>();
    r.pruned_filters = j.at("pruned_filters").get<std::vector<int>>();
    r.before = metrics_from_json(j.at("before"));
    r.after = metrics_from_json(j.at("after"));
    r.mask_histogram = j.at("mask_histogram").get<std::vector<int>>();
    return r;
}

}  // namespace rnp
