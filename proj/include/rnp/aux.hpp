#pragma once

// Trigger reverse-engineering with MAD outlier detection, and STRIP-style
// entropy detection of trigger-stamped inputs. Both run on any model, in
// particular on the original and the unlearned one.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "rnp/data.hpp"
#include "rnp/model.hpp"

namespace rnp {

struct NCConfig {
    double lambda = 0.01;  // weight of the mask L1 norm (sum over pixels)
    int steps = 100;       // epochs over the defense samples
    double lr = 0.1;       // Adam step size
    int batch_size = 128;
    std::uint64_t seed = 0;

    void validate() const;
};

struct RecoveredTrigger {
    int target = 0;
    Tensor mask;     // [H, W]
    Tensor pattern;  // [C, H, W]
    double l1_norm = 0.0;

    friend bool operator==(const RecoveredTrigger&, const RecoveredTrigger&) = default;
};

// Minimizes CE(f((1-m)*x + m*pattern), y) + lambda*|m|_1 with Adam, clipping
// m and pattern to [0,1] after every step.
RecoveredTrigger nc_optimize(const ModelSpec& spec, const ParameterStore& params, int target, const Dataset& defense,
                             const NCConfig& cfg);

struct AnomalyResult {
    std::vector<double> anomaly_index;
    std::vector<int> flagged;  // ascending class ids
    double median = 0.0;
    double mad = 0.0;
};

inline constexpr double kMadConsistency = 1.4826;
inline constexpr double kAnomalyCutoff = 2.0;

// a_i = |l_i - median| / (1.4826 * MAD); flags a_i > 2 with l_i < median.
AnomalyResult nc_anomaly(std::span<const double> l1_norms);

// Share of the mask's mass inside the bottom-right size x size corner.
double corner_mass(const RecoveredTrigger& trigger, int size);

// Stamps a recovered trigger onto one [C, H, W] image.
Tensor stamp(const RecoveredTrigger& trigger, const Tensor& image);

void save_trigger(const RecoveredTrigger& trigger, const std::filesystem::path& dir);
RecoveredTrigger load_trigger(const std::filesystem::path& dir);

inline constexpr int kStripOverlays = 64;

// Mean softmax entropy of `sample` blended 0.5/0.5 with `overlays` pool
// images chosen by seed.
double strip_entropy(const ModelSpec& spec, const ParameterStore& params, const Tensor& sample, const Dataset& pool,
                     int overlays = kStripOverlays, std::uint64_t seed = 0);

// strip_entropy of every sample in a set; sample i uses mix_seed(seed, i).
std::vector<double> strip_entropies(const ModelSpec& spec, const ParameterStore& params, const Dataset& samples,
                                    const Dataset& pool, int overlays = kStripOverlays, std::uint64_t seed = 0);

// mean entropy(clean) - mean entropy(backdoored).
double strip_gap(const ModelSpec& spec, const ParameterStore& params, const Dataset& clean, const Dataset& backdoored,
                 const Dataset& pool, int overlays = kStripOverlays, std::uint64_t seed = 0);

}  // namespace rnp
