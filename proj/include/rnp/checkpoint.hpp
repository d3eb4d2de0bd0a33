#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "rnp/io.hpp"
#include "rnp/mask.hpp"
#include "rnp/model.hpp"

namespace rnp {

io::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const io::json& j);

struct Checkpoint {
    ModelSpec spec;
    ParameterStore params;
    std::optional<std::uint64_t> seed;
};

// Directory with manifest.json (tensor names, roles, shapes, byte offsets,
// spec, seed, sha256 of the payload) and params.bin (concatenated f32le).
void save_checkpoint(const ModelSpec& spec, const ParameterStore& params, const std::filesystem::path& dir,
                     std::optional<std::uint64_t> seed = std::nullopt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Raw params.bin payload for a store (what the manifest hash covers).
std::vector<std::uint8_t> encode_params(const ParameterStore& params);

// <name>.bin (f32le values) next to <name>.json (granularity, layer map, hash).
void save_mask(const UnitMask& mask, const std::filesystem::path& bin_path);
UnitMask load_mask(const std::filesystem::path& bin_path);

}  // namespace rnp
