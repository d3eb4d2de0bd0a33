#include "rnp/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>

#include "rnp/io.hpp"
#include "rnp/rng.hpp"

namespace rnp {

void Dataset::validate() const {
    if (images.rank() != 4) throw ShapeError("dataset images must be [N,C,H,W]");
    const std::size_t n = static_cast<std::size_t>(images.dim(0));
    if (labels.size() != n || flags.size() != n)
        throw ShapeError("dataset arrays disagree: " + std::to_string(n) + " images, " + std::to_string(labels.size()) +
                         " labels, " + std::to_string(flags.size()) + " flags");
    for (int y : labels)
        if (y < 0 || y >= num_classes) throw ConfigError("dataset label out of range: " + std::to_string(y));
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.num_classes = num_classes;
    out.meta = meta;
    const std::size_t per = image_size();
    std::vector<int> shape = images.shape();
    shape[0] = static_cast<int>(indices.size());
    std::vector<float> values(per * indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const std::size_t src = indices[i];
        if (src >= size()) throw ConfigError("subset index out of range");
        std::copy_n(images.data() + src * per, per, values.data() + i * per);
        out.labels.push_back(labels[src]);
        out.flags.push_back(flags[src]);
    }
    if (indices.empty()) {
        out.images = Tensor();
        return out;
    }
    out.images = Tensor(std::move(shape), std::move(values));
    return out;
}

Batch Dataset::batch(std::span<const std::size_t> indices) const {
    Dataset sub = subset(indices);
    return Batch{std::move(sub.images), std::move(sub.labels)};
}

std::vector<std::size_t> Dataset::poisoned_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < flags.size(); ++i)
        if (flags[i]) out.push_back(i);
    return out;
}

Dataset Dataset::clean_portion() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < flags.size(); ++i)
        if (!flags[i]) idx.push_back(i);
    return subset(idx);
}

std::vector<std::size_t> Dataset::class_histogram() const {
    std::vector<std::size_t> h(num_classes, 0);
    for (int y : labels) ++h[y];
    return h;
}

std::string_view to_string(TriggerKind kind) {
    switch (kind) {
        case TriggerKind::BadNets: return "badnets";
        case TriggerKind::Blend: return "blend";
        case TriggerKind::Sig: return "sig";
    }
    return "?";
}

TriggerKind trigger_kind_from_string(std::string_view text) {
    if (text == "badnets") return TriggerKind::BadNets;
    if (text == "blend") return TriggerKind::Blend;
    if (text == "sig") return TriggerKind::Sig;
    throw ConfigError("unknown trigger kind '" + std::string(text) + "'");
}

std::string_view to_string(PoisonMode mode) { return mode == PoisonMode::AllToOne ? "all-to-one" : "all-to-all"; }

PoisonMode poison_mode_from_string(std::string_view text) {
    if (text == "all-to-one") return PoisonMode::AllToOne;
    if (text == "all-to-all") return PoisonMode::AllToAll;
    throw ConfigError("unknown poison mode '" + std::string(text) + "'");
}

void TriggerSpec::validate(int height, int width) const {
    switch (kind) {
        case TriggerKind::BadNets:
            if (patch_size < 1 || margin < 0 || patch_size + margin > std::min(height, width))
                throw ConfigError("badnets patch of size " + std::to_string(patch_size) + " does not fit a " +
                                  std::to_string(height) + "x" + std::to_string(width) + " image");
            break;
        case TriggerKind::Blend:
            if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("blend ratio must lie in (0,1)");
            break;
        case TriggerKind::Sig:
            if (!(delta > 0.0 && delta <= 1.0)) throw ConfigError("sig amplitude must lie in (0,1]");
            if (!(frequency >= 1.0)) throw ConfigError("sig frequency must be >= 1");
            break;
    }
}

std::string TriggerSpec::describe() const {
    std::ostringstream out;
    out << to_string(kind);
    switch (kind) {
        case TriggerKind::BadNets: out << " size=" << patch_size << " margin=" << margin; break;
        case TriggerKind::Blend: out << " alpha=" << alpha << " seed=" << pattern_seed; break;
        case TriggerKind::Sig: out << " delta=" << delta << " freq=" << frequency; break;
    }
    return out.str();
}

namespace {

std::array<float, 3> hue_rgb(double hue) {
    const double h = hue * 6.0;
    const int sector = static_cast<int>(std::floor(h)) % 6;
    const double f = h - std::floor(h);
    const float q = static_cast<float>(1.0 - f), t = static_cast<float>(f);
    switch (sector) {
        case 0: return {1.0f, t, 0.0f};
        case 1: return {q, 1.0f, 0.0f};
        case 2: return {0.0f, 1.0f, t};
        case 3: return {0.0f, q, 1.0f};
        case 4: return {t, 0.0f, 1.0f};
        default: return {1.0f, 0.0f, q};
    }
}

}  // namespace

Dataset gen_synth(std::uint64_t seed, int per_class, int num_classes, int height, int width) {
    if (per_class < 1) throw ConfigError("per_class must be >= 1");
    if (num_classes < 2) throw ConfigError("need at least 2 classes");
    const int channels = 3;
    const std::size_t n = static_cast<std::size_t>(per_class) * num_classes;
    const std::size_t per = static_cast<std::size_t>(channels) * height * width;
    Dataset d;
    d.num_classes = num_classes;
    d.images = Tensor({static_cast<int>(n), channels, height, width});
    d.labels.resize(n);
    d.flags.assign(n, 0);
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i % num_classes);
        d.labels[i] = c;
        const auto palette = hue_rgb(static_cast<double>(c) / num_classes);
        const double freq = 1 + c % 5;
        const double angle = std::numbers::pi * c / num_classes;
        const double ax = std::cos(angle), ay = std::sin(angle);
        float* img = d.images.data() + i * per;
        for (int ch = 0; ch < channels; ++ch) {
            for (int y = 0; y < height; ++y) {
                for (int x = 0; x < width; ++x) {
                    const double g =
                        0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * freq * (x * ax + y * ay) / width);
                    const double v = palette[ch] * (0.4 + 0.6 * g) + 0.1 * rng.normal();
                    img[(static_cast<std::size_t>(ch) * height + y) * width + x] =
                        static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
            }
        }
    }
    d.meta["source"] = "synthetic";
    d.meta["seed"] = std::to_string(seed);
    return d;
}

Dataset parse_cifar10_records(std::span<const std::uint8_t> bytes, const std::string& source) {
    constexpr std::size_t record = 3073;
    if (bytes.size() % record != 0) {
        throw FormatError(source + ": truncated CIFAR-10 record at offset " +
                          std::to_string(bytes.size() - bytes.size() % record) + " (file length " +
                          std::to_string(bytes.size()) + " is not a multiple of 3073)");
    }
    const std::size_t n = bytes.size() / record;
    Dataset d;
    d.num_classes = 10;
    d.images = n ? Tensor({static_cast<int>(n), 3, 32, 32}) : Tensor();
    d.labels.resize(n);
    d.flags.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* rec = bytes.data() + i * record;
        if (rec[0] > 9) throw FormatError(source + ": label byte " + std::to_string(rec[0]) + " at offset " +
                                          std::to_string(i * record));
        d.labels[i] = rec[0];
        float* img = d.images.data() + i * 3072;
        for (std::size_t p = 0; p < 3072; ++p) img[p] = static_cast<float>(rec[1 + p]) / 255.0f;
    }
    d.meta["source"] = source;
    return d;
}

Dataset load_cifar10(const std::filesystem::path& dir, bool train) {
    std::vector<std::string> files;
    if (train)
        for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
    else
        files.push_back("test_batch.bin");
    std::vector<std::uint8_t> all;
    for (const auto& f : files) {
        const auto path = dir / f;
        if (!std::filesystem::exists(path)) {
            // Partial archives are accepted as long as the first batch exists.
            if (f != files.front()) continue;
            throw FormatError("missing CIFAR-10 batch " + path.string());
        }
        const auto bytes = io::read_bytes(path);
        if (bytes.size() % 3073 != 0)
            throw FormatError(path.string() + ": truncated CIFAR-10 record at offset " +
                              std::to_string(bytes.size() - bytes.size() % 3073));
        all.insert(all.end(), bytes.begin(), bytes.end());
    }
    Dataset d = parse_cifar10_records(all, dir.string());
    d.meta["source"] = "cifar10:" + std::string(train ? "train" : "test");
    return d;
}

void apply_trigger(std::span<float> image, int channels, int height, int width, const TriggerSpec& trigger) {
    trigger.validate(height, width);
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    if (image.size() != plane * channels) throw ShapeError("trigger target is not a [C,H,W] image");
    switch (trigger.kind) {
        case TriggerKind::BadNets: {
            const int s = trigger.patch_size;
            const int y0 = height - trigger.margin - s;
            const int x0 = width - trigger.margin - s;
            for (int c = 0; c < channels; ++c)
                for (int dy = 0; dy < s; ++dy)
                    for (int dx = 0; dx < s; ++dx)
                        image[c * plane + static_cast<std::size_t>(y0 + dy) * width + x0 + dx] =
                            (dy + dx) % 2 == 0 ? 1.0f : 0.0f;
            break;
        }
        case TriggerKind::Blend: {
            const auto noise = blend_pattern(trigger, channels, height, width);
            const float a = static_cast<float>(trigger.alpha);
            for (std::size_t i = 0; i < image.size(); ++i)
                image[i] = std::clamp((1.0f - a) * image[i] + a * noise[i], 0.0f, 1.0f);
            break;
        }
        case TriggerKind::Sig: {
            std::vector<float> wave(width);
            for (int x = 0; x < width; ++x)
                wave[x] = static_cast<float>(trigger.delta *
                                             std::sin(2.0 * std::numbers::pi * x * trigger.frequency / width));
            for (int c = 0; c < channels; ++c)
                for (int y = 0; y < height; ++y)
                    for (int x = 0; x < width; ++x) {
                        float& v = image[c * plane + static_cast<std::size_t>(y) * width + x];
                        v = std::clamp(v + wave[x], 0.0f, 1.0f);
                    }
            break;
        }
    }
}

Tensor apply_trigger(const Tensor& image, const TriggerSpec& trigger) {
    if (image.rank() != 3) throw ShapeError("apply_trigger expects a [C,H,W] image");
    Tensor out = image;
    apply_trigger(out.values(), image.dim(0), image.dim(1), image.dim(2), trigger);
    return out;
}

std::vector<float> blend_pattern(const TriggerSpec& trigger, int channels, int height, int width) {
    Rng rng(mix_seed(trigger.pattern_seed, 0xB1E4D));
    std::vector<float> noise(static_cast<std::size_t>(channels) * height * width);
    for (float& v : noise) v = static_cast<float>(rng.uniform());
    return noise;
}

Dataset poison_train(const Dataset& train, const TriggerSpec& trigger, const PoisonPolicy& policy) {
    train.validate();
    if (!(policy.rate >= 0.0 && policy.rate <= 1.0))
        throw ConfigError("poisoning rate must lie in [0,1], got " + std::to_string(policy.rate));
    if (policy.target < 0 || policy.target >= train.num_classes)
        throw ConfigError("target label out of range: " + std::to_string(policy.target));
    if (!train.poisoned_indices().empty()) throw ConfigError("training set already carries poison flags");
    Dataset out = train;
    const std::size_t n = train.size();
    const auto count = static_cast<std::size_t>(std::llround(policy.rate * static_cast<double>(n)));
    if (count == 0) return out;
    trigger.validate(train.height(), train.width());
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(policy.seed);
    rng.shuffle(std::span<std::size_t>(order));
    const std::size_t per = train.image_size();
    for (std::size_t k = 0; k < count; ++k) {
        const std::size_t i = order[k];
        apply_trigger(out.images.values().subspan(i * per, per), train.channels(), train.height(), train.width(),
                      trigger);
        out.labels[i] = policy.mode == PoisonMode::AllToOne ? policy.target : (train.labels[i] + 1) % train.num_classes;
        out.flags[i] = 1;
    }
    out.meta["trigger"] = trigger.describe();
    out.meta["poison_rate"] = std::to_string(policy.rate);
    out.meta["poison_mode"] = std::string(to_string(policy.mode));
    out.meta["poison_seed"] = std::to_string(policy.seed);
    return out;
}

Dataset build_asr_testset(const Dataset& test, const TriggerSpec& trigger, int target) {
    test.validate();
    if (target < 0 || target >= test.num_classes) throw ConfigError("target label out of range");
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < test.size(); ++i)
        if (test.labels[i] != target) keep.push_back(i);
    if (keep.empty()) throw ConfigError("ASR test set is empty: every test sample carries the target label");
    Dataset out = test.subset(keep);
    const std::size_t per = out.image_size();
    for (std::size_t i = 0; i < out.size(); ++i) {
        apply_trigger(out.images.values().subspan(i * per, per), out.channels(), out.height(), out.width(), trigger);
        out.labels[i] = target;
        out.flags[i] = 1;
    }
    out.meta["trigger"] = trigger.describe();
    out.meta["role"] = "asr-test";
    return out;
}

Dataset build_asr_testset_all_to_all(const Dataset& test, const TriggerSpec& trigger) {
    test.validate();
    Dataset out = test;
    const std::size_t per = out.image_size();
    for (std::size_t i = 0; i < out.size(); ++i) {
        apply_trigger(out.images.values().subspan(i * per, per), out.channels(), out.height(), out.width(), trigger);
        out.labels[i] = (test.labels[i] + 1) % test.num_classes;
        out.flags[i] = 1;
    }
    out.meta["trigger"] = trigger.describe();
    out.meta["role"] = "asr-test";
    return out;
}

std::vector<std::size_t> stratified_indices(const Dataset& source, std::size_t n, std::uint64_t seed) {
    if (n > source.size())
        throw ConfigError("requested " + std::to_string(n) + " samples from a pool of " + std::to_string(source.size()));
    const int K = source.num_classes;
    std::vector<std::vector<std::size_t>> by_class(K);
    for (std::size_t i = 0; i < source.size(); ++i) by_class[source.labels[i]].push_back(i);
    // Equal quota per class; any shortfall moves to classes with spare samples in index order.
    std::vector<std::size_t> quota(K, n / K);
    for (std::size_t c = 0; c < n % K; ++c) ++quota[c];
    std::size_t shortfall = 0;
    for (int c = 0; c < K; ++c) {
        if (quota[c] > by_class[c].size()) {
            shortfall += quota[c] - by_class[c].size();
            quota[c] = by_class[c].size();
        }
    }
    for (int c = 0; c < K && shortfall > 0; ++c) {
        const std::size_t spare = by_class[c].size() - quota[c];
        const std::size_t take = std::min(spare, shortfall);
        quota[c] += take;
        shortfall -= take;
    }
    Rng rng(seed);
    std::vector<std::size_t> out;
    for (int c = 0; c < K; ++c) {
        rng.shuffle(std::span<std::size_t>(by_class[c]));
        out.insert(out.end(), by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(quota[c]));
    }
    rng.shuffle(std::span<std::size_t>(out));
    return out;
}

Dataset sample_defense(const Dataset& clean, std::size_t n, std::uint64_t seed) {
    clean.validate();
    if (!clean.poisoned_indices().empty()) throw ConfigError("defense pool contains poisoned samples");
    Dataset out = clean.subset(stratified_indices(clean, n, seed));
    out.meta["role"] = "defense";
    out.meta["defense_seed"] = std::to_string(seed);
    return out;
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
    data.validate();
    std::filesystem::create_directories(dir);
    io::json manifest;
    manifest["format"] = "rnp-dataset";
    manifest["version"] = 1;
    manifest["shape"] = data.images.shape();
    manifest["num_classes"] = data.num_classes;
    manifest["dtype"] = "f32le";
    manifest["meta"] = data.meta;
    const auto img = io::encode_f32le(data.images.values());
    std::vector<std::uint8_t> labels(data.labels.begin(), data.labels.end());
    manifest["images_sha256"] = io::sha256_hex(img);
    io::write_bytes(dir / "images.bin", img);
    io::write_bytes(dir / "labels.bin", labels);
    io::write_bytes(dir / "flags.bin", data.flags);
    io::write_json(dir / "manifest.json", manifest);
}

Dataset load_dataset(const std::filesystem::path& dir) {
    const auto manifest = io::read_json(dir / "manifest.json");
    if (manifest.value("format", "") != "rnp-dataset" || manifest.value("version", 0) != 1)
        throw FormatError(dir.string() + ": not an rnp-dataset v1 directory");
    Dataset d;
    d.num_classes = manifest.at("num_classes").get<int>();
    const auto shape = manifest.at("shape").get<std::vector<int>>();
    const auto img = io::read_bytes(dir / "images.bin");
    if (io::sha256_hex(img) != manifest.at("images_sha256").get<std::string>())
        throw FormatError(dir.string() + ": images.bin does not match manifest hash");
    d.images = Tensor(shape, io::decode_f32le(img));
    const auto labels = io::read_bytes(dir / "labels.bin");
    d.labels.assign(labels.begin(), labels.end());
    d.flags = io::read_bytes(dir / "flags.bin");
    d.meta = manifest.at("meta").get<std::map<std::string, std::string>>();
    d.validate();
    return d;
}

}  // namespace rnp
