#include "rnp/harness.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "rnp/checkpoint.hpp"
#include "rnp/rng.hpp"

namespace rnp {

namespace fs = std::filesystem;

std::string_view tool_version() { return "rnp 0.1.0"; }

StageSeeds stage_seeds(std::uint64_t seed) {
    return {mix_seed(seed, 1), mix_seed(seed, 2), mix_seed(seed, 3), mix_seed(seed, 4),
            mix_seed(seed, 5), mix_seed(seed, 6), mix_seed(seed, 7)};
}

namespace {

// Reads one config object, remembering which keys it asked for so that
// anything else can be reported as unknown.
class Section {
public:
    Section(const io::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError("config section '" + path_ + "' must be an object");
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        known_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const io::json::exception&) {
            throw ConfigError("config key '" + where(key) + "' has the wrong type");
        }
    }

    template <typename T>
    void get_optional(const std::string& key, std::optional<T>& out) {
        known_.insert(key);
        if (!j_.contains(key)) return;
        if (j_.at(key).is_null()) {
            out.reset();
            return;
        }
        T value{};
        get(key, value);
        out = value;
    }

    Section child(const std::string& key) {
        known_.insert(key);
        static const io::json empty = io::json::object();
        return Section(j_.contains(key) ? j_.at(key) : empty, where(key));
    }

    std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (const auto& [key, value] : j_.items())
            if (!known_.count(key)) throw ConfigError("unknown config key '" + where(key) + "'");
    }

private:
    const io::json& j_;
    std::string path_;
    std::set<std::string> known_;
};

fs::path resolve(const fs::path& p, const fs::path& base) { return p.is_absolute() || base.empty() ? p : base / p; }

}  // namespace

void ExperimentConfig::validate() const {
    if (schema_version != kSchemaVersion)
        throw ConfigError("unsupported config schema_version " + std::to_string(schema_version));
    if (data.source != "synth" && data.source != "cifar10")
        throw ConfigError("data.source must be 'synth' or 'cifar10'");
    if (data.source == "cifar10" && !fs::is_directory(data.cifar_dir))
        throw ConfigError("data.cifar_dir does not exist: " + data.cifar_dir.string());
    if (data.train_per_class < 1 || data.test_per_class < 1) throw ConfigError("data per-class counts must be >= 1");
    if (!(data.defense_size > 0.0)) throw ConfigError("data.defense_size must be positive");
    if (!(attack.rate >= 0.0 && attack.rate <= 1.0)) throw ConfigError("attack.rate must lie in [0,1]");
    if (attack.checkpoint && !fs::exists(*attack.checkpoint / "manifest.json"))
        throw ConfigError("attack.checkpoint does not exist: " + attack.checkpoint->string());
    train.validate();
    unlearn.validate(10);
    prune.validate();
    aux.nc_cfg.validate();
    if (aux.strip_overlays < 1 || aux.strip_samples < 1) throw ConfigError("aux STRIP counts must be >= 1");
    if (!(aux.fp_ca_stop >= 0.0 && aux.fp_ca_stop < 1.0)) throw ConfigError("aux.fp_ca_stop must lie in [0,1)");
    if (!(ablation.fu_mask_lr > 0.0)) throw ConfigError("ablation.fu_mask_lr must be positive");
}

ExperimentConfig config_from_json(const io::json& j, const fs::path& base_dir) {
    ExperimentConfig cfg;
    Section root(j, "");
    if (!j.is_object() || !j.contains("schema_version")) throw ConfigError("config is missing 'schema_version'");
    root.get("schema_version", cfg.schema_version);
    if (cfg.schema_version != kSchemaVersion)
        throw ConfigError("unsupported config schema_version " + std::to_string(cfg.schema_version));
    root.get("name", cfg.name);
    root.get("seed", cfg.seed);
    std::string out = cfg.output_dir.string();
    root.get("output_dir", out);
    cfg.output_dir = resolve(out, base_dir);

    Section data = root.child("data");
    data.get("source", cfg.data.source);
    std::string cifar;
    data.get("cifar_dir", cifar);
    if (!cifar.empty()) cfg.data.cifar_dir = resolve(cifar, base_dir);
    data.get("train_per_class", cfg.data.train_per_class);
    data.get("test_per_class", cfg.data.test_per_class);
    data.get("train_seed", cfg.data.train_seed);
    data.get("test_seed", cfg.data.test_seed);
    data.get("defense_size", cfg.data.defense_size);
    data.finish();

    Section attack = root.child("attack");
    std::string kind(to_string(cfg.attack.trigger.kind));
    attack.get("trigger", kind);
    cfg.attack.trigger.kind = trigger_kind_from_string(kind);
    attack.get("patch_size", cfg.attack.trigger.patch_size);
    attack.get("margin", cfg.attack.trigger.margin);
    attack.get("alpha", cfg.attack.trigger.alpha);
    attack.get("delta", cfg.attack.trigger.delta);
    attack.get("frequency", cfg.attack.trigger.frequency);
    attack.get("pattern_seed", cfg.attack.trigger.pattern_seed);
    attack.get("rate", cfg.attack.rate);
    attack.get("target", cfg.attack.target);
    std::string mode(to_string(cfg.attack.mode));
    attack.get("mode", mode);
    cfg.attack.mode = poison_mode_from_string(mode);
    std::optional<std::string> ckpt;
    attack.get_optional("checkpoint", ckpt);
    if (ckpt) cfg.attack.checkpoint = resolve(*ckpt, base_dir);
    attack.finish();

    Section train = root.child("train");
    train.get("epochs", cfg.train.epochs);
    train.get("batch_size", cfg.train.batch_size);
    train.get("lr", cfg.train.lr);
    train.get("momentum", cfg.train.momentum);
    train.get("weight_decay", cfg.train.weight_decay);
    train.get("milestones", cfg.train.milestones);
    train.get("lr_decay", cfg.train.lr_decay);
    train.get("augment", cfg.train.augment);
    train.finish();

    Section unlearn = root.child("unlearn");
    unlearn.get("lr", cfg.unlearn.lr);
    unlearn.get("weight_decay", cfg.unlearn.weight_decay);
    unlearn.get("max_epochs", cfg.unlearn.max_epochs);
    unlearn.get_optional("ca_min", cfg.unlearn.ca_min);
    unlearn.get("early_stop", cfg.unlearn.early_stop);
    unlearn.get("batch_size", cfg.unlearn.batch_size);
    unlearn.finish();

    Section recover = root.child("recover");
    recover.get("lr", cfg.recover.lr);
    recover.get("epochs", cfg.recover.epochs);
    std::string gran(to_string(cfg.recover.granularity));
    recover.get("granularity", gran);
    cfg.recover.granularity = granularity_from_string(gran);
    recover.get_optional("layer_subset", cfg.recover.layer_subset);
    recover.get("batch_size", cfg.recover.batch_size);
    recover.finish();

    Section prune = root.child("prune");
    std::string pmode(to_string(cfg.prune.mode));
    prune.get("mode", pmode);
    cfg.prune.mode = prune_mode_from_string(pmode);
    prune.get_optional("threshold", cfg.prune.threshold);
    prune.get("fraction", cfg.prune.fraction);
    prune.get("ca_budget", cfg.prune.ca_budget);
    prune.finish();

    Section aux = root.child("aux");
    aux.get("nc", cfg.aux.nc);
    aux.get("strip", cfg.aux.strip);
    aux.get("fp", cfg.aux.fp);
    aux.get("nc_lambda", cfg.aux.nc_cfg.lambda);
    aux.get("nc_steps", cfg.aux.nc_cfg.steps);
    aux.get("nc_lr", cfg.aux.nc_cfg.lr);
    aux.get("nc_batch_size", cfg.aux.nc_cfg.batch_size);
    aux.get("strip_overlays", cfg.aux.strip_overlays);
    aux.get("strip_samples", cfg.aux.strip_samples);
    aux.get("fp_ca_stop", cfg.aux.fp_ca_stop);
    aux.finish();

    Section abl = root.child("ablation");
    abl.get("fu_mask_lr", cfg.ablation.fu_mask_lr);
    abl.get_optional("pwr_fraction", cfg.ablation.pwr_fraction);
    abl.finish();

    root.finish();
    return cfg;
}

io::json to_json(const ExperimentConfig& cfg) {
    io::json j;
    j["schema_version"] = cfg.schema_version;
    j["name"] = cfg.name;
    j["seed"] = cfg.seed;
    j["output_dir"] = cfg.output_dir.string();
    j["data"] = {{"source", cfg.data.source},
                 {"cifar_dir", cfg.data.cifar_dir.string()},
                 {"train_per_class", cfg.data.train_per_class},
                 {"test_per_class", cfg.data.test_per_class},
                 {"train_seed", cfg.data.train_seed},
                 {"test_seed", cfg.data.test_seed},
                 {"defense_size", cfg.data.defense_size}};
    const auto& t = cfg.attack.trigger;
    j["attack"] = {{"trigger", to_string(t.kind)},
                   {"patch_size", t.patch_size},
                   {"margin", t.margin},
                   {"alpha", t.alpha},
                   {"delta", t.delta},
                   {"frequency", t.frequency},
                   {"pattern_seed", t.pattern_seed},
                   {"rate", cfg.attack.rate},
                   {"target", cfg.attack.target},
                   {"mode", to_string(cfg.attack.mode)},
                   {"checkpoint", cfg.attack.checkpoint ? io::json(cfg.attack.checkpoint->string()) : io::json()}};
    j["train"] = {{"epochs", cfg.train.epochs},         {"batch_size", cfg.train.batch_size},
                  {"lr", cfg.train.lr},                 {"momentum", cfg.train.momentum},
                  {"weight_decay", cfg.train.weight_decay}, {"milestones", cfg.train.milestones},
                  {"lr_decay", cfg.train.lr_decay},     {"augment", cfg.train.augment}};
    j["unlearn"] = {{"lr", cfg.unlearn.lr},
                    {"weight_decay", cfg.unlearn.weight_decay},
                    {"max_epochs", cfg.unlearn.max_epochs},
                    {"ca_min", cfg.unlearn.ca_min ? io::json(*cfg.unlearn.ca_min) : io::json()},
                    {"early_stop", cfg.unlearn.early_stop},
                    {"batch_size", cfg.unlearn.batch_size}};
    j["recover"] = {{"lr", cfg.recover.lr},
                    {"epochs", cfg.recover.epochs},
                    {"granularity", to_string(cfg.recover.granularity)},
                    {"layer_subset", cfg.recover.layer_subset ? io::json(*cfg.recover.layer_subset) : io::json()},
                    {"batch_size", cfg.recover.batch_size}};
    j["prune"] = {{"mode", to_string(cfg.prune.mode)},
                  {"threshold", cfg.prune.threshold ? io::json(*cfg.prune.threshold) : io::json()},
                  {"fraction", cfg.prune.fraction},
                  {"ca_budget", cfg.prune.ca_budget}};
    j["aux"] = {{"nc", cfg.aux.nc},
                {"strip", cfg.aux.strip},
                {"fp", cfg.aux.fp},
                {"nc_lambda", cfg.aux.nc_cfg.lambda},
                {"nc_steps", cfg.aux.nc_cfg.steps},
                {"nc_lr", cfg.aux.nc_cfg.lr},
                {"nc_batch_size", cfg.aux.nc_cfg.batch_size},
                {"strip_overlays", cfg.aux.strip_overlays},
                {"strip_samples", cfg.aux.strip_samples},
                {"fp_ca_stop", cfg.aux.fp_ca_stop}};
    j["ablation"] = {{"fu_mask_lr", cfg.ablation.fu_mask_lr},
                     {"pwr_fraction", cfg.ablation.pwr_fraction ? io::json(*cfg.ablation.pwr_fraction) : io::json()}};
    return j;
}

ExperimentConfig load_config(const fs::path& path) {
    io::json j;
    try {
        j = io::read_json(path);
    } catch (const FormatError& e) {
        throw ConfigError(e.what());
    }
    ExperimentConfig cfg = config_from_json(j, path.parent_path());
    cfg.validate();
    return cfg;
}

std::string attack_label(const AttackConfig& attack) {
    if (attack.rate == 0.0) return "clean";
    std::string label(to_string(attack.trigger.kind));
    if (attack.mode == PoisonMode::AllToAll) label += "-all2all";
    return label;
}

Dataset sample_defense_for(const ExperimentConfig& cfg, const Dataset& train) {
    const Dataset clean = train.clean_portion();
    const double size = cfg.data.defense_size;
    const auto n = size >= 1.0 ? static_cast<std::size_t>(size)
                               : static_cast<std::size_t>(std::llround(size * static_cast<double>(train.size())));
    if (n == 0) throw ConfigError("defense set would be empty");
    return sample_defense(clean, n, stage_seeds(cfg.seed).defense);
}

Prepared prepare(const ExperimentConfig& cfg) {
    const StageSeeds seeds = stage_seeds(cfg.seed);
    Prepared p;
    Dataset clean_train, test;
    if (cfg.data.source == "synth") {
        clean_train = gen_synth(cfg.data.train_seed, cfg.data.train_per_class);
        test = gen_synth(cfg.data.test_seed, cfg.data.test_per_class);
    } else {
        clean_train = load_cifar10(cfg.data.cifar_dir, true);
        test = load_cifar10(cfg.data.cifar_dir, false);
    }
    p.spec = ModelSpec::small_conv_net(clean_train.num_classes);
    p.train = poison_train(clean_train, cfg.attack.trigger, {cfg.attack.rate, cfg.attack.target, cfg.attack.mode, seeds.poison});
    p.test = test;
    p.asr_test = cfg.attack.mode == PoisonMode::AllToOne
                     ? build_asr_testset(test, cfg.attack.trigger, cfg.attack.target)
                     : build_asr_testset_all_to_all(test, cfg.attack.trigger);
    p.defense = sample_defense_for(cfg, p.train);
    if (cfg.attack.checkpoint) {
        Checkpoint ck = load_checkpoint(*cfg.attack.checkpoint);
        if (!(ck.spec == p.spec)) throw ConfigError("attack.checkpoint was trained for a different model");
        p.backdoored = std::move(ck.params);
    } else {
        TrainConfig tc = cfg.train;
        tc.seed = seeds.train;
        TrainResult tr = train(p.spec, p.train, tc);
        p.backdoored = std::move(tr.params);
        p.history = std::move(tr.history);
    }
    return p;
}

io::json to_json(const ExperimentReport& r) {
    io::json j;
    j["schema_version"] = r.schema_version;
    j["kind"] = r.kind;
    j["tool_version"] = r.tool_version;
    j["attack"] = r.attack;
    j["defense"] = r.defense;
    j["config"] = r.config;
    j["seeds"] = r.seeds;
    j["pipeline"] = to_json(r.pipeline);
    io::json abl = io::json::array();
    for (const auto& a : r.ablations) abl.push_back(to_json(a));
    j["ablations"] = abl;
    j["aux"] = r.aux;
    j["wall_clock_seconds"] = r.wall_clock_seconds;
    return j;
}

ExperimentReport experiment_report_from_json(const io::json& j) {
    try {
        ExperimentReport r;
        r.schema_version = j.at("schema_version").get<int>();
        if (r.schema_version != kSchemaVersion)
            throw FormatError("unsupported report schema_version " + std::to_string(r.schema_version));
        r.kind = j.at("kind").get<std::string>();
        r.tool_version = j.at("tool_version").get<std::string>();
        r.attack = j.at("attack").get<std::string>();
        r.defense = j.at("defense").get<std::string>();
        r.config = j.at("config");
        r.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
        r.pipeline = pipeline_report_from_json(j.at("pipeline"));
        for (const auto& a : j.at("ablations")) r.ablations.push_back(ablation_report_from_json(a));
        r.aux = j.at("aux");
        r.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
        return r;
    } catch (const io::json::exception& e) {
        throw FormatError(std::string("malformed report: ") + e.what());
    }
}

ExperimentReport load_report(const fs::path& path) {
    const fs::path file = fs::is_directory(path) ? path / "report.json" : path;
    return experiment_report_from_json(io::read_json(file));
}

namespace {

using Clock = std::chrono::steady_clock;

ExperimentReport base_report(const ExperimentConfig& cfg, const char* kind) {
    ExperimentReport r;
    r.kind = kind;
    r.tool_version = std::string(tool_version());
    r.attack = attack_label(cfg.attack);
    r.config = to_json(cfg);
    const StageSeeds s = stage_seeds(cfg.seed);
    r.seeds = {{"global", cfg.seed},   {"poison", s.poison},   {"train", s.train}, {"defense", s.defense},
               {"unlearn", s.unlearn}, {"recover", s.recover}, {"nc", s.nc},       {"strip", s.strip}};
    return r;
}

UnlearnConfig unlearn_cfg(const ExperimentConfig& cfg) {
    UnlearnConfig u = cfg.unlearn;
    u.seed = stage_seeds(cfg.seed).unlearn;
    return u;
}

RecoverConfig recover_cfg(const ExperimentConfig& cfg) {
    RecoverConfig r = cfg.recover;
    r.seed = stage_seeds(cfg.seed).recover;
    return r;
}

void write_status(const fs::path& dir, const std::string& status, const std::string& stage, const std::string& error) {
    fs::create_directories(dir);
    io::json j{{"status", status}, {"stage", stage}, {"error", error}};
    io::write_json(dir / "status.json", j);
}

// Runs fn, tagging failures with the stage name in status.json.
class StageRunner {
public:
    explicit StageRunner(fs::path dir) : dir_(std::move(dir)) {}

    template <typename F>
    auto operator()(const std::string& stage, F&& fn) {
        write_status(dir_, "running", stage, "");
        try {
            return fn();
        } catch (const std::exception& e) {
            write_status(dir_, "failed", stage, e.what());
            throw Error("stage '" + stage + "' failed: " + e.what());
        }
    }

    void done() { write_status(dir_, "ok", "", ""); }

private:
    fs::path dir_;
};

void write_report(const ExperimentReport& r, const fs::path& dir) { io::write_json(dir / "report.json", to_json(r)); }

void write_tables(const std::vector<ExperimentReport>& reports, const fs::path& dir) {
    const auto rows = table_rows(reports);
    std::ofstream(dir / "tables.csv") << render_csv(rows);
}

io::json nc_section(const ModelSpec& spec, const ParameterStore& params, const Dataset& defense, const NCConfig& cfg,
                    const fs::path& dir) {
    std::vector<double> norms;
    for (int y = 0; y < spec.num_classes; ++y) {
        const RecoveredTrigger t = nc_optimize(spec, params, y, defense, cfg);
        save_trigger(t, dir / ("class_" + std::to_string(y)));
        norms.push_back(t.l1_norm);
    }
    const AnomalyResult a = nc_anomaly(norms);
    return {{"l1_norms", norms}, {"anomaly_index", a.anomaly_index}, {"flagged", a.flagged}};
}

}  // namespace

io::json run_aux(const ExperimentConfig& cfg, const Prepared& prep, const ParameterStore& unlearned,
                 const fs::path& out_dir) {
    const StageSeeds seeds = stage_seeds(cfg.seed);
    io::json aux = io::json::object();
    if (cfg.aux.nc) {
        NCConfig nc = cfg.aux.nc_cfg;
        nc.seed = seeds.nc;
        aux["nc"] = {{"original", nc_section(prep.spec, prep.backdoored, prep.defense, nc, out_dir / "nc" / "original")},
                     {"unlearned", nc_section(prep.spec, unlearned, prep.defense, nc, out_dir / "nc" / "unlearned")}};
    }
    if (cfg.aux.strip) {
        const std::size_t n = std::min<std::size_t>(cfg.aux.strip_samples, std::min(prep.test.size(), prep.asr_test.size()));
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        const Dataset clean = prep.test.subset(idx);
        const Dataset stamped = prep.asr_test.subset(idx);
        aux["strip"] = {
            {"original", strip_gap(prep.spec, prep.backdoored, clean, stamped, prep.defense, cfg.aux.strip_overlays, seeds.strip)},
            {"unlearned", strip_gap(prep.spec, unlearned, clean, stamped, prep.defense, cfg.aux.strip_overlays, seeds.strip)}};
    }
    if (cfg.aux.fp) {
        const PruneResult fp = fine_pruning(prep.spec, prep.backdoored, prep.defense, cfg.aux.fp_ca_stop);
        const PruneResult nufp = fine_pruning(prep.spec, prep.backdoored, prep.defense, cfg.aux.fp_ca_stop, &unlearned);
        auto entry = [&](const PruneResult& r) {
            return io::json{{"metrics", to_json(attack_metrics(prep.spec, r.params, prep.test, prep.asr_test))},
                            {"pruned_count", r.pruned_count},
                            {"pruned_filters", r.pruned_filters}};
        };
        aux["fp"] = {{"original", entry(fp)}, {"unlearned", entry(nufp)}};
    }
    return aux;
}

ExperimentReport run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto t0 = Clock::now();
    const fs::path dir = cfg.output_dir;
    fs::create_directories(dir);
    io::write_json(dir / "config.json", to_json(cfg));
    StageRunner stage(dir);

    const Prepared prep = stage("attack", [&] { return prepare(cfg); });
    stage("save-backdoored", [&] {
        save_checkpoint(prep.spec, prep.backdoored, dir / "backdoored.ckpt", stage_seeds(cfg.seed).train);
        if (!prep.history.empty()) write_history_csv(prep.history, dir / "train_history.csv");
        return 0;
    });
    const PipelineArtifacts art = stage("pipeline", [&] {
        return run_pipeline(prep.spec, prep.backdoored, prep.defense, {&prep.test, &prep.asr_test}, unlearn_cfg(cfg),
                            recover_cfg(cfg), cfg.prune);
    });
    stage("save-artifacts", [&] {
        save_checkpoint(prep.spec, art.unlearned.params, dir / "unlearned.ckpt");
        save_mask(art.mask, dir / "mask.bin");
        save_checkpoint(prep.spec, art.pruned.params, dir / "pruned.ckpt");
        return 0;
    });
    ExperimentReport report = base_report(cfg, "run");
    report.pipeline = art.report;
    if (cfg.aux.nc || cfg.aux.strip || cfg.aux.fp)
        report.aux = stage("aux", [&] { return run_aux(cfg, prep, art.unlearned.params, dir); });
    report.wall_clock_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    stage("report", [&] {
        write_report(report, dir);
        write_tables({report}, dir);
        return 0;
    });
    stage.done();
    return report;
}

ExperimentReport run_ablation(const ExperimentConfig& cfg, const std::string& variant) {
    cfg.validate();
    const auto t0 = Clock::now();
    const fs::path dir = cfg.output_dir;
    fs::create_directories(dir);
    io::write_json(dir / "config.json", to_json(cfg));
    StageRunner stage(dir);
    const Prepared prep = stage("attack", [&] { return prepare(cfg); });
    AblationConfig acfg;
    acfg.unlearn = unlearn_cfg(cfg);
    acfg.recover = recover_cfg(cfg);
    acfg.prune = cfg.prune;
    acfg.fu_mask_lr = cfg.ablation.fu_mask_lr;
    acfg.fp_ca_stop = cfg.aux.fp_ca_stop;
    acfg.pwr_fraction = cfg.ablation.pwr_fraction;
    const AblationContext ctx{prep.spec, prep.backdoored, prep.defense, {&prep.test, &prep.asr_test}};

    ExperimentReport report = base_report(cfg, "ablation");
    report.defense = variant;
    report.ablations = stage("ablation", [&] {
        if (variant == "matrix") return granularity_matrix(ctx, acfg, dir / "feature_maps");
        return std::vector<AblationReport>{run_variant(ctx, variant_from_string(variant), acfg)};
    });
    report.wall_clock_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    stage("report", [&] {
        for (const auto& a : report.ablations)
            io::write_json(dir / (std::string(to_string(a.variant)) + "_ablation_report.json"), to_json(a));
        if (variant == "matrix") write_matrix_csv(report.ablations, dir / "matrix.csv");
        write_report(report, dir);
        write_tables({report}, dir);
        return 0;
    });
    stage.done();
    return report;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "value,asr,ca,pruned_count,status\n";
    for (const auto& r : rows) {
        out << r.value << ',';
        if (r.ok)
            out << r.metrics.asr << ',' << r.metrics.ca << ',' << r.pruned_count << ",ok\n";
        else
            out << ",,,failed\n";
    }
}

namespace {

double parse_number(const std::string& text, const std::string& axis) {
    try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("sweep axis '" + axis + "' expects numbers, got '" + text + "'");
    }
}

// "all", or conv layer indices joined by '+', e.g. "0+2".
std::optional<std::vector<int>> parse_layers(const std::string& text, int layers) {
    if (text == "all") return std::nullopt;
    std::vector<int> out;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, '+')) {
        const double v = parse_number(part, "mask_location");
        if (v != static_cast<int>(v) || v < 0 || v >= layers)
            throw ConfigError("mask_location value '" + text + "' names an unknown layer");
        out.push_back(static_cast<int>(v));
    }
    if (out.empty()) throw ConfigError("mask_location value is empty");
    return out;
}

std::string row_dir_name(const std::string& axis, const std::string& value) {
    std::string v = value;
    std::replace(v.begin(), v.end(), '/', '_');
    return axis + "=" + v;
}

}  // namespace

std::vector<SweepRow> sweep(const ExperimentConfig& cfg, const std::string& axis, const std::vector<std::string>& values) {
    if (std::find(kSweepAxes.begin(), kSweepAxes.end(), axis) == kSweepAxes.end())
        throw ConfigError("unknown sweep axis '" + axis + "'");
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    cfg.validate();
    const fs::path dir = cfg.output_dir;
    fs::create_directories(dir);
    io::write_json(dir / "config.json", to_json(cfg));
    const bool retrain = axis == "trigger_size" || axis == "poison_rate";
    const bool prune_only = axis == "threshold" || axis == "fraction";

    // Shared model (and, for pruning axes, the shared mask) for rows that do not retrain.
    std::optional<Prepared> shared;
    std::optional<PipelineArtifacts> base;
    if (!retrain) {
        shared = prepare(cfg);
        save_checkpoint(shared->spec, shared->backdoored, dir / "backdoored.ckpt", stage_seeds(cfg.seed).train);
    }
    if (prune_only) {
        base = run_pipeline(shared->spec, shared->backdoored, shared->defense, {&shared->test, &shared->asr_test},
                            unlearn_cfg(cfg), recover_cfg(cfg), cfg.prune);
        save_mask(base->mask, dir / "mask.bin");
    }

    std::vector<SweepRow> rows;
    for (const std::string& value : values) {
        SweepRow row;
        row.value = value;
        const fs::path row_dir = dir / row_dir_name(axis, value);
        try {
            ExperimentConfig rc = cfg;
            rc.output_dir = row_dir;
            if (prune_only) {
                const double v = parse_number(value, axis);
                PruneConfig pc = cfg.prune;
                if (axis == "threshold") {
                    pc.mode = PruneMode::Threshold;
                    pc.threshold = v;
                } else {
                    pc.mode = PruneMode::Fraction;
                    pc.fraction = v;
                }
                const PruneResult pr =
                    prune_by_config(shared->spec, shared->backdoored, base->mask, shared->defense, pc);
                row.metrics = attack_metrics(shared->spec, pr.params, shared->test, shared->asr_test);
                row.pruned_count = pr.pruned_count;
            } else {
                if (axis == "defense_size") rc.data.defense_size = parse_number(value, axis);
                if (axis == "unlearn_epochs") {
                    const double v = parse_number(value, axis);
                    rc.unlearn.max_epochs = static_cast<int>(v);
                    rc.unlearn.early_stop = false;
                }
                if (axis == "mask_location") rc.recover.layer_subset = parse_layers(value, 3);
                if (axis == "trigger_size") rc.attack.trigger.patch_size = static_cast<int>(parse_number(value, axis));
                if (axis == "poison_rate") rc.attack.rate = parse_number(value, axis);
                rc.validate();
                Prepared local;
                const Prepared* prep = nullptr;
                if (retrain) {
                    local = prepare(rc);
                    prep = &local;
                } else {
                    local = *shared;
                    local.defense = sample_defense_for(rc, shared->train);
                    prep = &local;
                }
                const PipelineArtifacts art =
                    run_pipeline(prep->spec, prep->backdoored, prep->defense, {&prep->test, &prep->asr_test},
                                 unlearn_cfg(rc), recover_cfg(rc), rc.prune);
                ExperimentReport r = base_report(rc, "run");
                r.pipeline = art.report;
                fs::create_directories(row_dir);
                write_report(r, row_dir);
                row.metrics = art.report.after;
                row.pruned_count = art.report.pruned_count;
            }
        } catch (const std::exception& e) {
            row.ok = false;
            row.error = e.what();
            write_status(row_dir, "failed", axis, e.what());
        }
        rows.push_back(row);
    }
    write_sweep_csv(rows, dir / "sweep.csv");
    return rows;
}

std::vector<TableRow> table_rows(const std::vector<ExperimentReport>& reports) {
    if (reports.empty()) throw ConfigError("no reports to render");
    std::vector<TableRow> rows;
    const int version = reports.front().schema_version;
    for (const auto& r : reports) {
        if (r.schema_version != version) throw FormatError("reports mix schema versions");
        if (r.kind == "run") {
            rows.push_back({r.attack, "none", r.pipeline.before.asr, r.pipeline.before.ca, 0});
            rows.push_back({r.attack, r.defense, r.pipeline.after.asr, r.pipeline.after.ca, r.pipeline.pruned_count});
        } else {
            for (const auto& a : r.ablations)
                rows.push_back({r.attack, std::string(to_string(a.variant)), a.after.asr, a.after.ca, a.pruned_count});
        }
    }
    std::stable_sort(rows.begin(), rows.end(), [](const TableRow& a, const TableRow& b) {
        return std::tie(a.attack, a.defense) < std::tie(b.attack, b.defense);
    });
    return rows;
}

namespace {

std::string percent(double v) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(2) << 100.0 * v;
    return out.str();
}

}  // namespace

std::string render_markdown(const std::vector<TableRow>& rows) {
    std::ostringstream out;
    out << "| Attack | Defense | ASR | CA | Pruned |\n|---|---|---|---|---|\n";
    for (const auto& r : rows)
        out << "| " << r.attack << " | " << r.defense << " | " << percent(r.asr) << " | " << percent(r.ca) << " | "
            << r.pruned << " |\n";
    return out.str();
}

std::string render_csv(const std::vector<TableRow>& rows) {
    std::ostringstream out;
    out << "Attack,Defense,ASR,CA,Pruned\n";
    for (const auto& r : rows)
        out << r.attack << ',' << r.defense << ',' << percent(r.asr) << ',' << percent(r.ca) << ',' << r.pruned << '\n';
    return out.str();
}

}  // namespace rnp
