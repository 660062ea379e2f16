#pragma once

// Binary model checkpoints ("VPE1") plus a JSON metadata sidecar.
//
// Layout (little-endian): magic "VPE1", format version u32, d_z u32, tensor count u32, then per
// tensor: name length u16, name bytes, rank u8, dims u32[rank], float32 payload.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "signadapt/vpe.hpp"

namespace signadapt {

inline constexpr std::uint32_t kCheckpointFormat = 1;

struct CheckpointMeta {
    std::uint64_t version = 0;
    std::optional<std::uint64_t> parent_version;
    std::string parent_path;
    /// Hash of the training data; see dataset_fingerprint.
    std::string data_fingerprint;
    std::uint64_t seed = 0;
    int epochs = 0;
    std::string note;

    friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct Checkpoint {
    Model model;
    PrototypeCatalog catalog;
    CheckpointMeta meta;
};

struct NamedTensor {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> values;
};

/// Serialize tensors to the binary format. Throws IoError.
std::vector<std::uint8_t> encode_tensors(std::uint32_t latent_dim, std::span<const NamedTensor> tensors);
/// Parse the binary format. Throws DataError on any malformed input.
std::vector<NamedTensor> decode_tensors(std::span<const std::uint8_t> bytes, std::uint32_t* latent_dim = nullptr);

/// Writes `<path>` and `<path>.json` atomically (temp file + rename).
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Bytes save_checkpoint would write for the binary part.
std::vector<std::uint8_t> checkpoint_bytes(const Checkpoint& checkpoint);

/// Hex FNV-1a over labels and pixel bytes, order-sensitive.
std::string dataset_fingerprint(std::span<const LabeledSample> samples);

/// Write `bytes` to `path` through a temporary sibling and rename.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace signadapt
