#include "rnp/aux.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rnp/engine.hpp"
#include "rnp/io.hpp"
#include "rnp/rnp.hpp"
#include "rnp/rng.hpp"

namespace rnp {

void NCConfig::validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("nc.lambda must be >= 0");
    if (steps < 0) throw ConfigError("nc.steps must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("nc.lr must be positive");
    if (batch_size < 1) throw ConfigError("nc.batch_size must be >= 1");
}

namespace {

// Adam with the betas commonly used for trigger reverse-engineering.
struct Adam {
    double lr, beta1 = 0.5, beta2 = 0.9, eps = 1e-8;
    std::vector<double> m, v;
    int t = 0;

    Adam(double lr_, std::size_t n) : lr(lr_), m(n, 0.0), v(n, 0.0) {}

    void step(std::span<float> x, std::span<const double> g) {
        ++t;
        const double c1 = 1.0 - std::pow(beta1, t);
        const double c2 = 1.0 - std::pow(beta2, t);
        for (std::size_t i = 0; i < x.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            const double upd = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
            x[i] = std::clamp(static_cast<float>(x[i] - upd), 0.0f, 1.0f);
        }
    }
};

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

RecoveredTrigger nc_optimize(const ModelSpec& spec, const ParameterStore& params, int target, const Dataset& defense,
                             const NCConfig& cfg) {
    cfg.validate();
    check_store(spec, params);
    if (target < 0 || target >= spec.num_classes) throw ConfigError("trigger target out of range");
    if (defense.size() == 0) throw ConfigError("trigger recovery needs a non-empty defense set");
    const int C = spec.in_channels, H = spec.height, W = spec.width;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t per = plane * C;

    RecoveredTrigger trig;
    trig.target = target;
    trig.mask = Tensor({H, W}, 0.5f);
    trig.pattern = Tensor({C, H, W});
    Rng init(mix_seed(cfg.seed, 0x7C, static_cast<std::uint64_t>(target)));
    for (float& p : trig.pattern.values()) p = static_cast<float>(init.uniform());

    Adam mask_opt(cfg.lr, plane), pattern_opt(cfg.lr, per);
    std::vector<double> gm(plane), gp(per);
    Engine<float> engine(spec);
    EngineGrads<float> grads;
    const auto views = view_params(params);
    BatchCursor cursor(defense, cfg.batch_size, mix_seed(cfg.seed, static_cast<std::uint64_t>(target)));
    std::vector<float> images, stamped;
    std::vector<int> labels;
    for (int epoch = 0; epoch < cfg.steps; ++epoch) {
        const std::size_t batches = cursor.begin_epoch(epoch);
        for (std::size_t b = 0; b < batches; ++b) {
            const std::size_t count = cursor.fill(b, images, labels);
            const auto m = trig.mask.values();
            const auto p = trig.pattern.values();
            stamped.resize(images.size());
            for (std::size_t n = 0; n < count; ++n)
                for (int c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < plane; ++i) {
                        const std::size_t k = n * per + c * plane + i;
                        stamped[k] = (1.0f - m[i]) * images[k] + m[i] * p[c * plane + i];
                    }
            engine.forward(views, stamped, static_cast<int>(count), Mode::Eval);
            std::fill(labels.begin(), labels.end(), target);
            const double loss = engine.cross_entropy(labels);
            if (!std::isfinite(loss)) throw NumericError("trigger recovery diverged at epoch " + std::to_string(epoch));
            engine.backward(views, nullptr, BackwardRequest{false, false, true}, grads);
            std::fill(gm.begin(), gm.end(), cfg.lambda);  // d|m|_1/dm, m >= 0
            std::fill(gp.begin(), gp.end(), 0.0);
            for (std::size_t n = 0; n < count; ++n)
                for (int c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < plane; ++i) {
                        const std::size_t k = n * per + c * plane + i;
                        const double g = grads.input[k];
                        gm[i] += g * (p[c * plane + i] - images[k]);
                        gp[c * plane + i] += g * m[i];
                    }
            mask_opt.step(trig.mask.values(), gm);
            pattern_opt.step(trig.pattern.values(), gp);
        }
    }
    double l1 = 0.0;
    for (float v : trig.mask.values()) l1 += v;
    trig.l1_norm = l1;
    return trig;
}

AnomalyResult nc_anomaly(std::span<const double> l1_norms) {
    if (l1_norms.size() < 3) throw ConfigError("anomaly detection needs at least 3 classes");
    AnomalyResult r;
    r.median = median_of({l1_norms.begin(), l1_norms.end()});
    std::vector<double> dev;
    for (double l : l1_norms) dev.push_back(std::abs(l - r.median));
    r.mad = median_of(dev);
    for (std::size_t i = 0; i < l1_norms.size(); ++i) {
        double a = 0.0;
        if (dev[i] > 0.0)
            a = r.mad > 0.0 ? dev[i] / (kMadConsistency * r.mad) : std::numeric_limits<double>::infinity();
        r.anomaly_index.push_back(a);
        if (a > kAnomalyCutoff && l1_norms[i] < r.median) r.flagged.push_back(static_cast<int>(i));
    }
    return r;
}

double corner_mass(const RecoveredTrigger& trigger, int size) {
    const int H = trigger.mask.dim(0), W = trigger.mask.dim(1);
    if (size < 1 || size > H || size > W) throw ConfigError("corner size out of range");
    double total = 0.0, corner = 0.0;
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
            const double v = trigger.mask[static_cast<std::size_t>(h) * W + w];
            total += v;
            if (h >= H - size && w >= W - size) corner += v;
        }
    return total > 0.0 ? corner / total : 0.0;
}

Tensor stamp(const RecoveredTrigger& trigger, const Tensor& image) {
    if (image.rank() != 3 || image.dim(1) != trigger.mask.dim(0) || image.dim(2) != trigger.mask.dim(1) ||
        image.shape() != trigger.pattern.shape())
        throw ShapeError("trigger does not fit image of shape " + shape_string(image.shape()));
    Tensor out = image;
    const std::size_t plane = trigger.mask.size();
    for (std::size_t k = 0; k < out.size(); ++k) {
        const float m = trigger.mask[k % plane];
        out[k] = (1.0f - m) * image[k] + m * trigger.pattern[k];
    }
    return out;
}

void save_trigger(const RecoveredTrigger& trigger, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto mask = io::encode_f32le(trigger.mask.values());
    const auto pattern = io::encode_f32le(trigger.pattern.values());
    io::json j;
    j["format"] = "rnp-trigger";
    j["version"] = 1;
    j["target"] = trigger.target;
    j["l1_norm"] = trigger.l1_norm;
    j["mask_shape"] = trigger.mask.shape();
    j["pattern_shape"] = trigger.pattern.shape();
    j["mask_sha256"] = io::sha256_hex(mask);
    j["pattern_sha256"] = io::sha256_hex(pattern);
    io::write_bytes(dir / "mask.bin", mask);
    io::write_bytes(dir / "pattern.bin", pattern);
    io::write_json(dir / "trigger.json", j);
}

RecoveredTrigger load_trigger(const std::filesystem::path& dir) {
    const auto j = io::read_json(dir / "trigger.json");
    if (j.value("format", "") != "rnp-trigger" || j.value("version", 0) != 1)
        throw FormatError((dir / "trigger.json").string() + ": not an rnp-trigger v1 file");
    const auto mask = io::read_bytes(dir / "mask.bin");
    const auto pattern = io::read_bytes(dir / "pattern.bin");
    if (io::sha256_hex(mask) != j.at("mask_sha256").get<std::string>() ||
        io::sha256_hex(pattern) != j.at("pattern_sha256").get<std::string>())
        throw FormatError(dir.string() + ": trigger payload is corrupted (hash mismatch)");
    RecoveredTrigger t;
    t.target = j.at("target").get<int>();
    t.l1_norm = j.at("l1_norm").get<double>();
    t.mask = Tensor(j.at("mask_shape").get<std::vector<int>>(), io::decode_f32le(mask));
    t.pattern = Tensor(j.at("pattern_shape").get<std::vector<int>>(), io::decode_f32le(pattern));
    return t;
}

namespace {

// Overlay indices for one sample.
std::vector<std::size_t> overlay_indices(std::size_t pool_size, int overlays, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::size_t> idx(overlays);
    for (auto& i : idx) i = rng.below(pool_size);
    return idx;
}

double mean_entropy(std::span<const float> logits, int rows, int classes) {
    double total = 0.0;
    std::vector<double> p(classes);
    for (int r = 0; r < rows; ++r) {
        const float* z = logits.data() + static_cast<std::size_t>(r) * classes;
        const double zmax = *std::max_element(z, z + classes);
        double sum = 0.0;
        for (int k = 0; k < classes; ++k) sum += p[k] = std::exp(static_cast<double>(z[k]) - zmax);
        double h = 0.0;
        for (int k = 0; k < classes; ++k) {
            const double q = p[k] / sum;
            if (q > 0.0) h -= q * std::log(q);
        }
        total += h;
    }
    return total / rows;
}

}  // namespace

std::vector<double> strip_entropies(const ModelSpec& spec, const ParameterStore& params, const Dataset& samples,
                                    const Dataset& pool, int overlays, std::uint64_t seed) {
    check_store(spec, params);
    if (pool.size() == 0) throw ConfigError("STRIP needs a non-empty overlay pool");
    if (overlays < 1) throw ConfigError("STRIP needs at least one overlay");
    if (pool.image_size() != samples.image_size() && samples.size() > 0)
        throw ShapeError("STRIP pool and samples have different image shapes");
    const std::size_t per = samples.image_size();
    Engine<float> engine(spec);
    const auto views = view_params(params);
    std::vector<float> blended(static_cast<std::size_t>(overlays) * per);
    std::vector<double> out;
    out.reserve(samples.size());
    for (std::size_t s = 0; s < samples.size(); ++s) {
        const float* x = samples.images.data() + s * per;
        const auto idx = overlay_indices(pool.size(), overlays, mix_seed(seed, s));
        for (int o = 0; o < overlays; ++o) {
            const float* y = pool.images.data() + idx[o] * per;
            float* dst = blended.data() + static_cast<std::size_t>(o) * per;
            for (std::size_t k = 0; k < per; ++k) dst[k] = std::clamp(0.5f * x[k] + 0.5f * y[k], 0.0f, 1.0f);
        }
        engine.forward(views, blended, overlays, Mode::Eval);
        out.push_back(mean_entropy(engine.logits(), overlays, spec.num_classes));
    }
    return out;
}

double strip_entropy(const ModelSpec& spec, const ParameterStore& params, const Tensor& sample, const Dataset& pool,
                     int overlays, std::uint64_t seed) {
    Dataset one;
    std::vector<int> shape{1};
    shape.insert(shape.end(), sample.shape().begin(), sample.shape().end());
    one.images = Tensor(shape, std::vector<float>(sample.values().begin(), sample.values().end()));
    one.labels = {0};
    one.flags = {0};
    return strip_entropies(spec, params, one, pool, overlays, seed).front();
}

double strip_gap(const ModelSpec& spec, const ParameterStore& params, const Dataset& clean, const Dataset& backdoored,
                 const Dataset& pool, int overlays, std::uint64_t seed) {
    if (clean.size() == 0 || backdoored.size() == 0) throw ConfigError("STRIP gap needs two non-empty sets");
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    const double hc = mean(strip_entropies(spec, params, clean, pool, overlays, seed));
    const double hb = mean(strip_entropies(spec, params, backdoored, pool, overlays, seed));
    return hc - hb;
}

}  // namespace rnp
