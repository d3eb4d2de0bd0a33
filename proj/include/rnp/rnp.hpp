#pragma once

// Reconstructive neuron pruning: unlearn the clean task on a small clean
// defense set, learn a filter mask that restores it, and prune the filters
// the restored model no longer needs from the ORIGINAL model.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rnp/data.hpp"
#include "rnp/io.hpp"
#include "rnp/mask.hpp"
#include "rnp/train.hpp"

namespace rnp {

struct UnlearnConfig {
    double lr = 0.01;
    double weight_decay = 0.05;
    int max_epochs = 20;
    std::optional<double> ca_min;  // defaults to 1/K
    bool early_stop = true;        // false: always run max_epochs (epoch sweeps)
    int batch_size = 128;
    std::uint64_t seed = 0;

    double resolved_ca_min(int num_classes) const { return ca_min.value_or(1.0 / num_classes); }
    void validate(int num_classes) const;
};

struct UnlearnResult {
    ParameterStore params;
    int epochs_used = 0;
    std::vector<double> ca_trace;  // defense accuracy after each epoch
    bool reached_ca_min = false;   // false = stopped at max_epochs (warning)
};

// Gradient ascent on every trainable parameter (batchnorm in train mode)
// until defense accuracy <= ca_min or max_epochs.
UnlearnResult unlearn(const ModelSpec& spec, const ParameterStore& params, const Dataset& defense,
                      const UnlearnConfig& cfg);

struct LabelVote {
    int label = 0;
    double vote_share = 0.0;
    std::vector<std::size_t> votes;  // per class
    bool tie = false;                // true if another class had the same count
};

// Modal prediction of the unlearned model over the defense set; ties go to
// the lowest class index.
LabelVote infer_backdoor_label(const ModelSpec& spec, const ParameterStore& unlearned, const Dataset& defense);

struct RecoverConfig {
    double lr = 0.2;
    int epochs = 20;
    Granularity granularity = Granularity::Filter;
    std::optional<std::vector<int>> layer_subset;  // unset = all conv layers; empty is an error
    int batch_size = 128;
    std::uint64_t seed = 0;

    void validate(const ModelSpec& spec) const;
};

// Called after every mask update (for tracing and invariant checks).
using MaskObserver = std::function<void(const UnitMask&)>;

// Mask minimization over frozen parameters with frozen batchnorm statistics:
// m <- clip01(m - lr * dL/dm), starting from all ones.
UnitMask recover(const ModelSpec& spec, const ParameterStore& unlearned, const Dataset& defense,
                 const RecoverConfig& cfg, const MaskObserver& observer = {});

struct PruneResult {
    ParameterStore params;
    int pruned_count = 0;
    std::vector<int> pruned_filters;  // registry indices, ascending
};

// Zeroes kernel and bias of every filter whose mask value is <= threshold.
PruneResult prune_threshold(const ModelSpec& spec, const ParameterStore& original, const UnitMask& mask,
                            double threshold);
// Zeroes the floor(q*n) filters with the smallest mask values (ties: lowest index).
PruneResult prune_fraction(const ModelSpec& spec, const ParameterStore& original, const UnitMask& mask,
                           double fraction);
// Zeroes the listed registry filters in a copy of params.
ParameterStore zero_filters(const ModelSpec& spec, const ParameterStore& params, const std::vector<int>& filters);

struct ThresholdSweepRow {
    double threshold;
    int pruned_count;
    double defense_accuracy;

    friend bool operator==(const ThresholdSweepRow&, const ThresholdSweepRow&) = default;
};

struct ThresholdSelection {
    double threshold = 0.0;
    bool within_budget = true;  // false = nothing met the budget, threshold forced to 0
    double base_accuracy = 0.0;
    std::vector<ThresholdSweepRow> trace;
};

// Candidate thresholds: distinct mask values and the 0.05 grid on [0,1].
std::vector<double> threshold_candidates(const UnitMask& mask);

// Largest candidate whose pruned model keeps defense accuracy within
// ca_budget of the unpruned model.
ThresholdSelection select_dynamic_threshold(const ModelSpec& spec, const ParameterStore& original,
                                            const UnitMask& mask, const Dataset& defense, double ca_budget);

enum class PruneMode { Threshold, Fraction };

std::string_view to_string(PruneMode mode);
PruneMode prune_mode_from_string(std::string_view text);

struct PruneConfig {
    PruneMode mode = PruneMode::Threshold;
    std::optional<double> threshold;  // unset = dynamic threshold
    double fraction = 0.0;
    double ca_budget = 0.02;

    void validate() const;
};

struct EvalSets {
    const Dataset* clean_test = nullptr;
    const Dataset* asr_test = nullptr;
};

struct PipelineReport {
    int inferred_label = 0;
    double vote_share = 0.0;
    bool vote_tie = false;
    int unlearn_epochs = 0;
    bool unlearn_reached_ca_min = false;
    std::vector<double> unlearn_ca_trace;
    double threshold = 0.0;
    bool threshold_within_budget = true;
    std::vector<ThresholdSweepRow> threshold_trace;
    int pruned_count = 0;
    std::vector<int> pruned_filters;
    Metrics before;
    Metrics after;
    std::vector<int> mask_histogram;  // 10 equal bins on [0,1]

    friend bool operator==(const PipelineReport&, const PipelineReport&) = default;
};

struct PipelineArtifacts {
    UnlearnResult unlearned;
    UnitMask mask;
    PruneResult pruned;
    PipelineReport report;
};

PipelineArtifacts run_pipeline(const ModelSpec& spec, const ParameterStore& original, const Dataset& defense,
                               const EvalSets& eval, const UnlearnConfig& unlearn_cfg,
                               const RecoverConfig& recover_cfg, const PruneConfig& prune_cfg);

// Prunes according to prune_cfg (fixed/dynamic threshold or fraction). A
// dynamic search that finds no threshold within budget prunes at DT=0 and
// clears within_budget.
PruneResult prune_by_config(const ModelSpec& spec, const ParameterStore& original, const UnitMask& mask,
                            const Dataset& defense, const PruneConfig& cfg, ThresholdSelection* selection = nullptr);

std::vector<int> mask_histogram(const UnitMask& mask, int bins = 10);

io::json to_json(const PipelineReport& report);
PipelineReport pipeline_report_from_json(const io::json& j);
io::json to_json(const Metrics& m);
Metrics metrics_from_json(const io::json& j);

// Iterates over shuffled mini-batches of a dataset (shared by the defense loops).
class BatchCursor {
public:
    BatchCursor(const Dataset& data, int batch_size, std::uint64_t seed);
    // Prepares the next epoch's order; returns the number of batches.
    std::size_t begin_epoch(int epoch);
    // Copies batch b of the current epoch into images/labels.
    std::size_t fill(std::size_t b, std::vector<float>& images, std::vector<int>& labels) const;

private:
    const Dataset& data_;
    int batch_size_;
    std::uint64_t seed_;
    std::vector<std::size_t> order_;
};

}  // namespace rnp
