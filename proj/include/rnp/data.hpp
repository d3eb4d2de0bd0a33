#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rnp/network.hpp"
#include "rnp/tensor.hpp"

namespace rnp {

struct Dataset {
    Tensor images;                      // [N, C, H, W] in [0, 1]
    std::vector<int> labels;            // [N]
    std::vector<std::uint8_t> flags;    // [N], 1 = trigger-stamped
    int num_classes = 10;
    std::map<std::string, std::string> meta;

    std::size_t size() const { return labels.size(); }
    int channels() const { return images.dim(1); }
    int height() const { return images.dim(2); }
    int width() const { return images.dim(3); }
    std::size_t image_size() const { return images.size() / (labels.empty() ? 1 : labels.size()); }

    void validate() const;
    Dataset subset(std::span<const std::size_t> indices) const;
    Batch batch(std::span<const std::size_t> indices) const;
    std::vector<std::size_t> poisoned_indices() const;
    // Samples without a poison flag.
    Dataset clean_portion() const;
    std::vector<std::size_t> class_histogram() const;

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

enum class TriggerKind { BadNets, Blend, Sig };

std::string_view to_string(TriggerKind kind);
TriggerKind trigger_kind_from_string(std::string_view text);

struct TriggerSpec {
    TriggerKind kind = TriggerKind::BadNets;
    int patch_size = 3;           // badnets: side of the checkerboard
    int margin = 0;               // badnets: offset from the bottom-right corner
    double alpha = 0.2;           // blend ratio
    double delta = 20.0 / 255.0;  // sig amplitude
    double frequency = 6.0;       // sig cycles across the width
    std::uint64_t pattern_seed = 0;

    void validate(int height, int width) const;
    std::string describe() const;
};

enum class PoisonMode { AllToOne, AllToAll };

std::string_view to_string(PoisonMode mode);
PoisonMode poison_mode_from_string(std::string_view text);

struct PoisonPolicy {
    double rate = 0.1;
    int target = 0;
    PoisonMode mode = PoisonMode::AllToOne;
    std::uint64_t seed = 0;
};

// Synthetic stand-in for CIFAR-10: colored sinusoidal gratings, one hue and
// grating per class, plus Gaussian pixel noise.
Dataset gen_synth(std::uint64_t seed, int per_class, int num_classes = 10, int height = 32, int width = 32);

// CIFAR-10 binary batches (data_batch_1..5.bin, or test_batch.bin).
Dataset load_cifar10(const std::filesystem::path& dir, bool train = true);
// Parses one binary batch file's contents.
Dataset parse_cifar10_records(std::span<const std::uint8_t> bytes, const std::string& source = "buffer");

// Stamps a trigger onto one [C, H, W] image in place.
void apply_trigger(std::span<float> image, int channels, int height, int width, const TriggerSpec& trigger);
Tensor apply_trigger(const Tensor& image, const TriggerSpec& trigger);

// Fixed [0,1] noise image used by the blend trigger.
std::vector<float> blend_pattern(const TriggerSpec& trigger, int channels, int height, int width);

Dataset poison_train(const Dataset& train, const TriggerSpec& trigger, const PoisonPolicy& policy);

// Non-target samples, stamped and relabelled to the target.
Dataset build_asr_testset(const Dataset& test, const TriggerSpec& trigger, int target);
// All-to-all variant: every sample stamped and relabelled to (y + 1) mod K.
Dataset build_asr_testset_all_to_all(const Dataset& test, const TriggerSpec& trigger);

// Class-stratified sample of n clean samples, in seeded random order.
Dataset sample_defense(const Dataset& clean, std::size_t n, std::uint64_t seed);
std::vector<std::size_t> stratified_indices(const Dataset& source, std::size_t n, std::uint64_t seed);

void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace rnp
