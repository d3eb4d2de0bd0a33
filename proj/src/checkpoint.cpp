#include "rnp/checkpoint.hpp"

namespace rnp {

io::json spec_to_json(const ModelSpec& spec) {
    io::json j;
    j["num_classes"] = spec.num_classes;
    j["input"] = {spec.in_channels, spec.height, spec.width};
    io::json convs = io::json::array();
    for (const auto& c : spec.convs) convs.push_back({{"out_channels", c.out_channels}, {"max_pool", c.max_pool}});
    j["convs"] = convs;
    j["description"] = spec.describe();
    return j;
}

ModelSpec spec_from_json(const io::json& j) {
    try {
        ModelSpec spec;
        spec.num_classes = j.at("num_classes").get<int>();
        const auto input = j.at("input").get<std::vector<int>>();
        if (input.size() != 3) throw FormatError("model input must have 3 dimensions");
        spec.in_channels = input[0];
        spec.height = input[1];
        spec.width = input[2];
        for (const auto& c : j.at("convs"))
            spec.convs.push_back({c.at("out_channels").get<int>(), c.at("max_pool").get<bool>()});
        spec.validate();
        return spec;
    } catch (const io::json::exception& e) {
        throw FormatError(std::string("invalid model description: ") + e.what());
    }
}

std::vector<std::uint8_t> encode_params(const ParameterStore& params) {
    std::vector<std::uint8_t> out;
    for (const auto& e : params) {
        const auto bytes = io::encode_f32le(e.value.values());
        out.insert(out.end(), bytes.begin(), bytes.end());
    }
    return out;
}

void save_checkpoint(const ModelSpec& spec, const ParameterStore& params, const std::filesystem::path& dir,
                     std::optional<std::uint64_t> seed) {
    check_store(spec, params);
    std::filesystem::create_directories(dir);
    const auto payload = encode_params(params);
    io::json manifest;
    manifest["format"] = "rnp-checkpoint";
    manifest["version"] = 1;
    manifest["dtype"] = "f32le";
    manifest["spec"] = spec_to_json(spec);
    if (seed)
        manifest["seed"] = *seed;
    else
        manifest["seed"] = nullptr;
    manifest["params_sha256"] = io::sha256_hex(payload);
    manifest["params_bytes"] = payload.size();
    io::json tensors = io::json::array();
    std::size_t offset = 0;
    for (const auto& e : params) {
        const std::size_t bytes = e.value.size() * 4;
        tensors.push_back({{"name", e.name},
                           {"role", std::string(to_string(e.role))},
                           {"shape", e.value.shape()},
                           {"offset", offset},
                           {"bytes", bytes}});
        offset += bytes;
    }
    manifest["tensors"] = tensors;
    io::write_bytes(dir / "params.bin", payload);
    io::write_json(dir / "manifest.json", manifest);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    const auto manifest = io::read_json(dir / "manifest.json");
    if (manifest.value("format", "") != "rnp-checkpoint")
        throw FormatError(dir.string() + ": not a checkpoint directory");
    if (manifest.value("version", 0) != 1)
        throw FormatError(dir.string() + ": unsupported checkpoint version");
    if (manifest.value("dtype", "") != "f32le") throw FormatError(dir.string() + ": unsupported dtype");
    const auto payload = io::read_bytes(dir / "params.bin");
    if (payload.size() != manifest.at("params_bytes").get<std::size_t>())
        throw FormatError(dir.string() + ": params.bin has " + std::to_string(payload.size()) + " bytes, manifest says " +
                          std::to_string(manifest.at("params_bytes").get<std::size_t>()));
    if (io::sha256_hex(payload) != manifest.at("params_sha256").get<std::string>())
        throw FormatError(dir.string() + ": params.bin is corrupted (hash mismatch)");

    Checkpoint ck;
    ck.spec = spec_from_json(manifest.at("spec"));
    if (!manifest.at("seed").is_null()) ck.seed = manifest.at("seed").get<std::uint64_t>();
    for (const auto& t : manifest.at("tensors")) {
        const std::size_t offset = t.at("offset").get<std::size_t>();
        const std::size_t bytes = t.at("bytes").get<std::size_t>();
        if (offset + bytes > payload.size()) throw FormatError(dir.string() + ": tensor extends past params.bin");
        auto values = io::decode_f32le(std::span<const std::uint8_t>(payload).subspan(offset, bytes));
        ck.params.add(t.at("name").get<std::string>(), role_from_string(t.at("role").get<std::string>()),
                      Tensor(t.at("shape").get<std::vector<int>>(), std::move(values)));
    }
    check_store(ck.spec, ck.params);
    return ck;
}

void save_mask(const UnitMask& mask, const std::filesystem::path& bin_path) {
    if (bin_path.has_parent_path()) std::filesystem::create_directories(bin_path.parent_path());
    auto manifest_path = bin_path;
    manifest_path.replace_extension(".json");
    const auto payload = io::encode_f32le(mask.values());
    io::json manifest;
    manifest["format"] = "rnp-mask";
    manifest["version"] = 1;
    manifest["granularity"] = std::string(to_string(mask.granularity()));
    manifest["layer_offsets"] = mask.layer_offsets();
    manifest["dtype"] = "f32le";
    manifest["sha256"] = io::sha256_hex(payload);
    io::write_bytes(bin_path, payload);
    io::write_json(manifest_path, manifest);
}

UnitMask load_mask(const std::filesystem::path& bin_path) {
    auto manifest_path = bin_path;
    manifest_path.replace_extension(".json");
    const auto manifest = io::read_json(manifest_path);
    if (manifest.value("format", "") != "rnp-mask" || manifest.value("version", 0) != 1)
        throw FormatError(manifest_path.string() + ": not an rnp-mask v1 manifest");
    const auto payload = io::read_bytes(bin_path);
    if (io::sha256_hex(payload) != manifest.at("sha256").get<std::string>())
        throw FormatError(bin_path.string() + " is corrupted (hash mismatch)");
    return UnitMask(granularity_from_string(manifest.at("granularity").get<std::string>()),
                    manifest.at("layer_offsets").get<std::vector<std::size_t>>(), io::decode_f32le(payload));
}

}  // namespace rnp
