#pragma once

// ModelBundle: the on-disk unit of deployment.
//
// Layout (all integers little-endian, reals IEEE-754 binary64 little-endian):
//
//   magic            8 bytes  "KOHSCANB"
//   format_version   u32
//   metadata_length  u64
//   metadata         UTF-8 JSON: spec, fingerprint, parameter counts, checkpoint
//   tensor_count     u32
//   tensor_count x { name_length u32, name bytes, rank u32, dims u64[rank], values f64[prod(dims)] }
//   crc32            u32 over every preceding byte (zlib polynomial)

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kohscan/model/model.hpp"

namespace kohscan::model {

inline constexpr std::uint32_t kBundleFormatVersion = 1;

struct TrainingFingerprint {
    std::uint64_t seed = 0;
    std::string config_hash;
    std::size_t epochs = 0;

    bool operator==(const TrainingFingerprint&) const = default;
};

using NamedTensors = std::vector<std::pair<std::string, nn::Tensor>>;

/// Extra state carried by training checkpoints (optimizer moments, rng, history).
struct CheckpointState {
    nlohmann::json meta;
    NamedTensors tensors;
};

struct ModelBundle {
    explicit ModelBundle(Model m) : model(std::move(m)) {}

    Model model;
    TrainingFingerprint fingerprint;
    std::uint32_t format_version = kBundleFormatVersion;
    std::optional<CheckpointState> checkpoint;
};

std::string serialize(const ModelBundle& bundle);

/// Throws IntegrityError (bad magic, truncation, checksum), VersionError
/// (format_version newer than supported) or FormatError (bad metadata).
ModelBundle deserialize(std::string_view bytes);

void save(const ModelBundle& bundle, const std::filesystem::path& path);
ModelBundle load(const std::filesystem::path& path);

/// Metadata document only (spec, fingerprint, counts), as stored in the archive.
nlohmann::json metadata(const ModelBundle& bundle);

}  // namespace kohscan::model
