#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "rnp/rng.hpp"

#include "rnp/data.hpp"
#include "rnp/mask.hpp"
#include "rnp/network.hpp"

namespace rnp {

struct TrainConfig {
    int epochs = 30;
    int batch_size = 128;
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::vector<int> milestones{20};  // lr *= lr_decay at each listed epoch
    double lr_decay = 0.1;
    std::uint64_t seed = 0;
    bool augment = false;  // horizontal flip + pad-4 random crop; off for desk runs (see README)

    void validate() const;
};

struct EpochRecord {
    int epoch;
    double loss;
    double accuracy;  // on the (augmented) training batches
};

struct TrainResult {
    ParameterStore params;
    std::vector<EpochRecord> history;
};

TrainResult train(const ModelSpec& spec, const Dataset& data, const TrainConfig& cfg);
void write_history_csv(std::span<const EpochRecord> history, const std::filesystem::path& path);

// Flip + pad-4 crop of one [C,H,W] image into out, driven by rng.
void augment_image(std::span<const float> image, int channels, int height, int width, Rng& rng, std::span<float> out);

// Eval-mode argmax predictions (ties go to the lowest class index).
std::vector<int> predict(const ModelSpec& spec, const ParameterStore& params, const Tensor& images,
                         const UnitMask* mask = nullptr);

double accuracy(const ModelSpec& spec, const ParameterStore& params, const Dataset& data,
                const UnitMask* mask = nullptr);
double accuracy_of(std::span<const int> predictions, std::span<const int> labels);

struct Metrics {
    double ca = 0.0;
    double asr = 0.0;

    friend bool operator==(const Metrics&, const Metrics&) = default;
};

Metrics attack_metrics(const ModelSpec& spec, const ParameterStore& params, const Dataset& clean_test,
                       const Dataset& asr_test);

}  // namespace rnp
