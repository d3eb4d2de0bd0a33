// Command-line front end: data generation, attack training, the defense
// pipeline, sweeps, ablations, auxiliary detectors and table rendering.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "rnp/checkpoint.hpp"
#include "rnp/harness.hpp"
#include "rnp/kernels.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "override the global seed");
    cmd->add_option("--out", c.out, "override the output directory");
}

rnp::ExperimentConfig load(const Common& c) {
    rnp::ExperimentConfig cfg = rnp::load_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (!c.out.empty()) cfg.output_dir = c.out;
    return cfg;
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

void print_metrics(const char* label, const rnp::Metrics& m) {
    std::printf("%-10s CA %6.2f%%  ASR %6.2f%%\n", label, 100.0 * m.ca, 100.0 * m.asr);
}

int cmd_gen_data(const Common& c) {
    const auto cfg = load(c);
    const auto seeds = rnp::stage_seeds(cfg.seed);
    rnp::Dataset train, test;
    if (cfg.data.source == "synth") {
        train = rnp::gen_synth(cfg.data.train_seed, cfg.data.train_per_class);
        test = rnp::gen_synth(cfg.data.test_seed, cfg.data.test_per_class);
    } else {
        train = rnp::load_cifar10(cfg.data.cifar_dir, true);
        test = rnp::load_cifar10(cfg.data.cifar_dir, false);
    }
    const auto poisoned = rnp::poison_train(
        train, cfg.attack.trigger, {cfg.attack.rate, cfg.attack.target, cfg.attack.mode, seeds.poison});
    const auto asr = cfg.attack.mode == rnp::PoisonMode::AllToOne
                         ? rnp::build_asr_testset(test, cfg.attack.trigger, cfg.attack.target)
                         : rnp::build_asr_testset_all_to_all(test, cfg.attack.trigger);
    const fs::path out = cfg.output_dir;
    rnp::save_dataset(poisoned, out / "train");
    rnp::save_dataset(test, out / "test");
    rnp::save_dataset(asr, out / "asr_test");
    rnp::save_dataset(rnp::sample_defense_for(cfg, poisoned), out / "defense");
    std::printf("wrote %zu train (%zu poisoned), %zu test, %zu ASR test samples to %s\n", poisoned.size(),
                poisoned.poisoned_indices().size(), test.size(), asr.size(), out.string().c_str());
    return 0;
}

int cmd_train_attack(const Common& c) {
    const auto cfg = load(c);
    const rnp::Prepared prep = rnp::prepare(cfg);
    const fs::path out = cfg.output_dir;
    rnp::save_checkpoint(prep.spec, prep.backdoored, out / "backdoored.ckpt", rnp::stage_seeds(cfg.seed).train);
    if (!prep.history.empty()) rnp::write_history_csv(prep.history, out / "train_history.csv");
    const auto m = rnp::attack_metrics(prep.spec, prep.backdoored, prep.test, prep.asr_test);
    rnp::io::write_json(out / "metrics.json", rnp::to_json(m));
    print_metrics("backdoored", m);
    return 0;
}

int cmd_run(const Common& c) {
    const auto r = rnp::run_experiment(load(c));
    print_metrics("before", r.pipeline.before);
    print_metrics("after", r.pipeline.after);
    std::printf("backdoor label %d (vote share %.2f), unlearn epochs %d, threshold %.3f, pruned %d filters\n",
                r.pipeline.inferred_label, r.pipeline.vote_share, r.pipeline.unlearn_epochs, r.pipeline.threshold,
                r.pipeline.pruned_count);
    if (!r.pipeline.unlearn_reached_ca_min) std::fprintf(stderr, "warning: unlearning never reached ca_min\n");
    if (!r.pipeline.threshold_within_budget) std::fprintf(stderr, "warning: no threshold met the accuracy budget\n");
    return 0;
}

int cmd_sweep(const Common& c, const std::string& axis, const std::string& values) {
    const auto rows = rnp::sweep(load(c), axis, split_list(values));
    std::printf("%-12s %8s %8s %7s\n", axis.c_str(), "ASR", "CA", "pruned");
    int failed = 0;
    for (const auto& r : rows) {
        if (r.ok) {
            std::printf("%-12s %8.2f %8.2f %7d\n", r.value.c_str(), 100.0 * r.metrics.asr, 100.0 * r.metrics.ca,
                        r.pruned_count);
        } else {
            std::printf("%-12s failed: %s\n", r.value.c_str(), r.error.c_str());
            ++failed;
        }
    }
    return failed ? 1 : 0;
}

int cmd_ablate(const Common& c, const std::string& variant) {
    const auto r = rnp::run_ablation(load(c), variant);
    for (const auto& a : r.ablations) {
        std::printf("%-20s ", std::string(rnp::to_string(a.variant)).c_str());
        print_metrics("after", a.after);
    }
    return 0;
}

int cmd_aux(const Common& c, const std::string& task) {
    auto cfg = load(c);
    cfg.aux.nc = task == "nc";
    cfg.aux.strip = task == "strip";
    cfg.aux.fp = task == "fp";
    if (!cfg.aux.nc && !cfg.aux.strip && !cfg.aux.fp) throw rnp::ConfigError("unknown aux task '" + task + "'");
    cfg.validate();
    const rnp::Prepared prep = rnp::prepare(cfg);
    rnp::UnlearnConfig uc = cfg.unlearn;
    uc.seed = rnp::stage_seeds(cfg.seed).unlearn;
    const auto unlearned = rnp::unlearn(prep.spec, prep.backdoored, prep.defense, uc);
    const fs::path out = cfg.output_dir;
    fs::create_directories(out);
    const auto section = rnp::run_aux(cfg, prep, unlearned.params, out);
    rnp::io::write_json(out / ("aux_" + task + ".json"), section);
    std::printf("%s\n", section.dump(2).c_str());
    return 0;
}

int cmd_report(const std::vector<std::string>& paths, const std::string& out) {
    std::vector<rnp::ExperimentReport> reports;
    for (const auto& p : paths) reports.push_back(rnp::load_report(p));
    const auto rows = rnp::table_rows(reports);
    const std::string md = rnp::render_markdown(rows);
    if (!out.empty()) {
        fs::create_directories(out);
        std::ofstream(fs::path(out) / "tables.md") << md;
        std::ofstream(fs::path(out) / "tables.csv") << rnp::render_csv(rows);
    }
    std::fputs(md.c_str(), stdout);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    rnp::configure_threads_from_env();
    CLI::App app{"Backdoor implanting and reconstructive neuron pruning desk lab"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(rnp::tool_version()));

    Common common;
    auto* gen = app.add_subcommand("gen-data", "generate, poison and store datasets");
    add_common(gen, common);
    auto* train = app.add_subcommand("train-attack", "train a backdoored model");
    add_common(train, common);

    auto* rnp_cmd = app.add_subcommand("rnp", "run the defense");
    rnp_cmd->require_subcommand(1);
    auto* run = rnp_cmd->add_subcommand("run", "full pipeline with artifacts and report");
    add_common(run, common);
    auto* sw = rnp_cmd->add_subcommand("sweep", "one pipeline run per axis value");
    add_common(sw, common);
    std::string axis, values;
    sw->add_option("--axis", axis, "sweep axis")->required()->check(CLI::IsMember(rnp::kSweepAxes));
    sw->add_option("--values", values, "comma-separated values")->required();

    auto* ablate = app.add_subcommand("ablate", "run an ablation variant, or 'matrix' for the granularity matrix");
    add_common(ablate, common);
    std::string variant;
    ablate->add_option("variant", variant, "variant id")->required();

    auto* aux = app.add_subcommand("aux", "auxiliary detectors on original and unlearned models");
    add_common(aux, common);
    std::string task;
    aux->add_option("task", task, "nc | strip | fp")->required()->check(CLI::IsMember({"nc", "strip", "fp"}));

    auto* report = app.add_subcommand("report", "render tables from report.json files");
    std::vector<std::string> report_paths;
    std::string report_out;
    report->add_option("reports", report_paths, "report.json files or run directories")->required();
    report->add_option("--out", report_out, "directory for tables.md and tables.csv");

    CLI11_PARSE(app, argc, argv);
    try {
        if (gen->parsed()) return cmd_gen_data(common);
        if (train->parsed()) return cmd_train_attack(common);
        if (run->parsed()) return cmd_run(common);
        if (sw->parsed()) return cmd_sweep(common, axis, values);
        if (ablate->parsed()) return cmd_ablate(common, variant);
        if (aux->parsed()) return cmd_aux(common, task);
        if (report->parsed()) return cmd_report(report_paths, report_out);
    } catch (const rnp::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
