#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>

#include <nlohmann/json.hpp>

#include "brainmass/ssl.hpp"

namespace brainmass {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  EncoderConfig encoder;
  nlohmann::json train = nlohmann::json::object();
  std::size_t epoch = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  std::uint32_t format_version = kCheckpointVersion;
};

struct Checkpoint {
  CheckpointMeta meta;
  BrainMassModel<float> model;
};

/// Digest of the canonical parameter enumeration (names and shapes).
std::string enumeration_digest(const nn::ParameterList<float>& params);
/// FNV-1a over the little-endian float32 parameter blob.
std::uint64_t parameter_digest(const BrainMassModel<float>& model);

/// Layout: "BMASS1", u64 LE metadata length, UTF-8 JSON metadata, float32 LE
/// blob in canonical order, u64 LE FNV-1a digest of the blob.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Throws FormatError (bad magic), CorruptionError (truncation or digest
/// mismatch) or IncompatibleError (version or enumeration mismatch).
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// As above, additionally requiring the stored encoder config to equal
/// `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const EncoderConfig& expected);

}  // namespace brainmass
