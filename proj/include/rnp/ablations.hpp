#pragma once

// Controlled variants of the defense: the unlearning/recovering granularity
// matrix, the necessity baselines and fine-pruning.

#include <filesystem>
#include <string>
#include <vector>

#include "rnp/rnp.hpp"

namespace rnp {

enum class Variant { NuFr, NuNr, FuFr, FuNr, PruneWoRecover, RecoverWoUnlearn, LearnIncorrect, FinePruning };

std::string_view to_string(Variant v);
Variant variant_from_string(std::string_view text);
const std::vector<Variant>& all_variants();

struct AblationReport {
    Variant variant = Variant::NuFr;
    Metrics before;
    Metrics after;
    int pruned_count = 0;
    std::vector<int> pruned_filters;
    std::string notes;

    friend bool operator==(const AblationReport&, const AblationReport&) = default;
};

io::json to_json(const AblationReport& r);
AblationReport ablation_report_from_json(const io::json& j);

struct FilterUnlearnResult {
    ParameterStore params;  // theta with the ascended mask baked in
    UnitMask mask;
    int epochs_used = 0;
    std::vector<double> ca_trace;
    bool reached_ca_min = false;
};

// Gradient ascent on a per-filter mask over frozen parameters (batchnorm in
// eval mode): m <- clip01(m + mask_lr * dL/dm), stopped like unlearn().
FilterUnlearnResult filter_unlearn(const ModelSpec& spec, const ParameterStore& params, const Dataset& defense,
                                   const UnlearnConfig& cfg, double mask_lr = 0.2);

// Per-filter L2 norm of the kernel change between theta and theta-hat.
std::vector<double> filter_change_scores(const ModelSpec& spec, const ParameterStore& original,
                                         const ParameterStore& unlearned);

// Zeroes the floor(q*n) filters of theta whose kernels changed least during
// unlearning (ties: lowest index).
PruneResult prune_without_recovering(const ModelSpec& spec, const ParameterStore& original,
                                     const ParameterStore& unlearned, double fraction);

// Relabels the defense set with the unlearned model's predictions and fits
// theta to those labels by plain SGD descent for `epochs` epochs.
ParameterStore learn_incorrectly(const ModelSpec& spec, const ParameterStore& original, const Dataset& defense,
                                 const ParameterStore& label_model, const UnlearnConfig& cfg, int epochs);

// Mean post-relu activation of each last-layer filter over the defense set.
std::vector<double> last_layer_mean_activation(const ModelSpec& spec, const ParameterStore& params,
                                               const Dataset& defense);

// Zeroes last-layer filters from most to least dormant while defense
// accuracy stays >= ca_stop. Dormancy is measured on rank_by when given
// (the unlearned model, for NU+FP) and on params otherwise.
PruneResult fine_pruning(const ModelSpec& spec, const ParameterStore& params, const Dataset& defense,
                         double ca_stop, const ParameterStore* rank_by = nullptr);

struct NeuronPruneResult {
    ParameterStore params;
    std::size_t pruned_weights = 0;
    int pruned_count = 0;  // filters with >= 90% of their weights pruned
    std::vector<int> pruned_filters;
};

inline constexpr double kFilterPrunedShare = 0.9;

// Zeroes every conv weight whose neuron-mask value is <= threshold.
NeuronPruneResult prune_neurons(const ModelSpec& spec, const ParameterStore& original, const UnitMask& mask,
                                double threshold);

// Dynamic threshold for neuron masks, over the 0.05 grid only.
ThresholdSelection select_dynamic_threshold_neurons(const ModelSpec& spec, const ParameterStore& original,
                                                    const UnitMask& mask, const Dataset& defense,
                                                    double ca_budget);

struct AblationConfig {
    UnlearnConfig unlearn;
    RecoverConfig recover;  // granularity is overridden per variant
    PruneConfig prune;
    double fu_mask_lr = 0.2;
    double fp_ca_stop = 0.8;
    // Fraction for prune-wo-recover; unset = match the NU-FR pruned count.
    std::optional<double> pwr_fraction;
};

struct AblationContext {
    const ModelSpec& spec;
    const ParameterStore& original;
    const Dataset& defense;
    EvalSets eval;
};

// `defended`, when given, receives the defended model.
AblationReport run_variant(const AblationContext& ctx, Variant variant, const AblationConfig& cfg,
                           ParameterStore* defended = nullptr);

// {NU,FU} x {FR,NR}. When feature_dir is non-empty a channel-averaged last
// layer feature map of the first ASR test sample is written per variant.
std::vector<AblationReport> granularity_matrix(const AblationContext& ctx, const AblationConfig& cfg,
                                               const std::filesystem::path& feature_dir = {});

void write_matrix_csv(const std::vector<AblationReport>& reports, const std::filesystem::path& path);

}  // namespace rnp
