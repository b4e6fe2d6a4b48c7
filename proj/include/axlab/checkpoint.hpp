#pragma once

// Binary checkpoint container:
//   "AXCK" | u32 version | u64 header length | JSON header | u64 FNV-1a of header
//   | little-endian float32 blobs in the order the header lists them.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "axlab/errors.hpp"
#include "axlab/train.hpp"

namespace axlab::ckpt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointErrorKind { bad_magic, version_mismatch, corrupt_header, truncated, shape_mismatch, config_mismatch };

std::string_view to_string(CheckpointErrorKind kind);

class CheckpointError : public Error {
public:
    CheckpointError(CheckpointErrorKind kind, const std::string& what);
    CheckpointErrorKind kind() const { return kind_; }

private:
    CheckpointErrorKind kind_;
};

std::string serialize(const train::TrainState& state);
/// With `expected` set, a checkpoint built for a different ModelConfig is rejected.
train::TrainState deserialize(std::string_view bytes, const std::optional<model::ModelConfig>& expected = {});

void save_checkpoint(const train::TrainState& state, const std::filesystem::path& path);
train::TrainState load_checkpoint(const std::filesystem::path& path,
                                  const std::optional<model::ModelConfig>& expected = {});

}  // namespace axlab::ckpt
