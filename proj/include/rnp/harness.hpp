#pragma once

// Experiment configuration, artifact directories, sweeps and table rendering.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rnp/ablations.hpp"
#include "rnp/aux.hpp"
#include "rnp/data.hpp"
#include "rnp/rnp.hpp"
#include "rnp/train.hpp"

namespace rnp {

inline constexpr int kSchemaVersion = 1;
std::string_view tool_version();

struct DataConfig {
    std::string source = "synth";  // synth | cifar10
    std::filesystem::path cifar_dir;
    int train_per_class = 500;
    int test_per_class = 100;
    std::uint64_t train_seed = 1;
    std::uint64_t test_seed = 2;
    // Defense samples: a count when >= 1, otherwise a fraction of the training set.
    double defense_size = 500;
};

struct AttackConfig {
    TriggerSpec trigger;
    double rate = 0.1;
    int target = 0;
    PoisonMode mode = PoisonMode::AllToOne;
    // Reuse a trained backdoored model instead of training one.
    std::optional<std::filesystem::path> checkpoint;
};

struct AuxConfig {
    bool nc = false;
    bool strip = false;
    bool fp = false;
    NCConfig nc_cfg;
    int strip_overlays = kStripOverlays;
    int strip_samples = 100;  // clean and triggered test samples scored
    double fp_ca_stop = 0.8;
};

struct AblationSettings {
    double fu_mask_lr = 0.2;
    std::optional<double> pwr_fraction;
};

struct ExperimentConfig {
    int schema_version = kSchemaVersion;
    std::string name = "experiment";
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "runs/experiment";
    DataConfig data;
    AttackConfig attack;
    TrainConfig train;
    UnlearnConfig unlearn;
    RecoverConfig recover;
    PruneConfig prune;
    AuxConfig aux;
    AblationSettings ablation;

    void validate() const;
};

// Per-stage seeds derived from the global seed.
struct StageSeeds {
    std::uint64_t poison, train, defense, unlearn, recover, nc, strip;
};
StageSeeds stage_seeds(std::uint64_t seed);

// Relative paths inside the config resolve against base_dir.
ExperimentConfig config_from_json(const io::json& j, const std::filesystem::path& base_dir = {});
io::json to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

struct Prepared {
    ModelSpec spec;
    Dataset train;  // poisoned
    Dataset test;
    Dataset asr_test;
    Dataset defense;
    ParameterStore backdoored;
    std::vector<EpochRecord> history;  // empty when loaded from a checkpoint
};

// Data, poisoning and (unless attack.checkpoint is set) training.
Prepared prepare(const ExperimentConfig& cfg);
Dataset sample_defense_for(const ExperimentConfig& cfg, const Dataset& train);

std::string attack_label(const AttackConfig& attack);

struct ExperimentReport {
    int schema_version = kSchemaVersion;
    std::string kind = "run";  // run | ablation
    std::string tool_version;
    std::string attack;
    std::string defense = "RNP";
    io::json config;
    std::map<std::string, std::uint64_t> seeds;
    PipelineReport pipeline;
    std::vector<AblationReport> ablations;  // kind == ablation
    io::json aux;                           // null unless aux tasks ran
    double wall_clock_seconds = 0.0;

    friend bool operator==(const ExperimentReport&, const ExperimentReport&) = default;
};

io::json to_json(const ExperimentReport& r);
ExperimentReport experiment_report_from_json(const io::json& j);
ExperimentReport load_report(const std::filesystem::path& path);

// data -> attack -> pipeline (-> aux). Writes backdoored.ckpt, unlearned.ckpt,
// mask.bin/.json, pruned.ckpt, report.json, tables.csv and status.json under
// output_dir. On failure status.json names the failing stage and the
// exception is rethrown.
ExperimentReport run_experiment(const ExperimentConfig& cfg);

// Aux tasks on a prepared experiment; returns the "aux" report section.
io::json run_aux(const ExperimentConfig& cfg, const Prepared& prep, const ParameterStore& unlearned,
                 const std::filesystem::path& out_dir);

// One ablation variant (or the full matrix when variant == "matrix").
ExperimentReport run_ablation(const ExperimentConfig& cfg, const std::string& variant);

inline const std::vector<std::string> kSweepAxes = {"defense_size", "unlearn_epochs", "mask_location", "trigger_size",
                                                    "poison_rate",  "threshold",      "fraction"};

struct SweepRow {
    std::string value;
    Metrics metrics;
    int pruned_count = 0;
    bool ok = true;
    std::string error;
};

// One pipeline run per value; writes sweep.csv under output_dir.
std::vector<SweepRow> sweep(const ExperimentConfig& cfg, const std::string& axis,
                            const std::vector<std::string>& values);
void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path);

struct TableRow {
    std::string attack;
    std::string defense;
    double asr = 0.0;
    double ca = 0.0;
    int pruned = 0;
};

// Rows sorted by (attack, defense). Mixed schema versions are rejected.
std::vector<TableRow> table_rows(const std::vector<ExperimentReport>& reports);
std::string render_markdown(const std::vector<TableRow>& rows);
std::string render_csv(const std::vector<TableRow>& rows);

}  // namespace rnp
