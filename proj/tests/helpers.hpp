#pragma once

// Small fixtures shared by the unit tests.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rnp/data.hpp"
#include "rnp/model.hpp"
#include "rnp/rng.hpp"
#include "rnp/train.hpp"

namespace testing {

// Random images in [0,1] for a spec, labels cycling through the classes.
inline rnp::Dataset random_dataset(const rnp::ModelSpec& spec, int n, std::uint64_t seed) {
    rnp::Rng rng(seed);
    rnp::Dataset d;
    d.num_classes = spec.num_classes;
    d.images = rnp::Tensor({n, spec.in_channels, spec.height, spec.width});
    for (auto& v : d.images.values()) v = static_cast<float>(rng.uniform());
    for (int i = 0; i < n; ++i) d.labels.push_back(i % spec.num_classes);
    d.flags.assign(n, 0);
    return d;
}

// A model whose output ignores the input: zero fc weights and a bias that
// favours `label` by `margin` (margin 0 gives uniform logits).
inline rnp::ParameterStore constant_model(const rnp::ModelSpec& spec, int label, float margin,
                                          std::uint64_t seed = 3) {
    auto params = rnp::build_model(spec, seed);
    for (auto& v : params[spec.fc_weight_index()].value.values()) v = 0.0f;
    auto& bias = params[spec.fc_bias_index()].value;
    for (auto& v : bias.values()) v = 0.0f;
    bias[label] = margin;
    return params;
}

// Synthetic images at reduced size for quick end-to-end checks.
inline rnp::ModelSpec mini_spec() {
    rnp::ModelSpec spec;
    spec.num_classes = 4;
    spec.in_channels = 3;
    spec.height = 8;
    spec.width = 8;
    spec.convs = {{4, true}, {6, false}};
    return spec;
}

// A BadNets-poisoned 8x8 four-class task and a model trained on it; built
// once per test binary.
struct MiniAttack {
    rnp::ModelSpec spec;
    rnp::Dataset train;
    rnp::Dataset test;
    rnp::Dataset asr_test;
    rnp::Dataset defense;
    rnp::ParameterStore backdoored;
};

inline rnp::TriggerSpec mini_trigger() {
    rnp::TriggerSpec t;
    t.patch_size = 2;
    return t;
}

inline const MiniAttack& mini_attack() {
    static const MiniAttack attack = [] {
        MiniAttack a;
        a.spec = mini_spec();
        const auto clean = rnp::gen_synth(1, 150, 4, 8, 8);
        a.train = rnp::poison_train(clean, mini_trigger(), {0.1, 0, rnp::PoisonMode::AllToOne, 2});
        a.test = rnp::gen_synth(2, 50, 4, 8, 8);
        a.asr_test = rnp::build_asr_testset(a.test, mini_trigger(), 0);
        a.defense = rnp::sample_defense(a.train.clean_portion(), 80, 3);
        rnp::TrainConfig cfg;
        cfg.epochs = 15;
        cfg.batch_size = 32;
        cfg.milestones = {10};
        cfg.seed = 4;
        a.backdoored = rnp::train(a.spec, a.train, cfg).params;
        return a;
    }();
    return attack;
}

inline std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("rnp_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline double max_abs_diff(const rnp::Tensor& a, const rnp::Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

}  // namespace testing
