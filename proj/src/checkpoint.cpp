#include "brainmass/checkpoint.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

#include "brainmass/errors.hpp"
#include "brainmass/hashing.hpp"

namespace brainmass {
namespace {

constexpr std::array<char, 6> kMagic = {'B', 'M', 'A', 'S', 'S', '1'};

std::vector<float> flatten(const BrainMassModel<float>& model) {
  std::vector<float> blob;
  blob.reserve(model.value_count());
  for (const auto& p : model.all_parameters()) blob.insert(blob.end(), p.tensor.values().begin(), p.tensor.values().end());
  return blob;
}

std::uint64_t blob_digest(const std::vector<float>& blob) {
  return fnv1a(std::as_bytes(std::span(blob)));
}

nlohmann::json meta_to_json(const CheckpointMeta& meta, const BrainMassModel<float>& model) {
  const auto params = model.all_parameters();
  return {{"format_version", meta.format_version},
          {"encoder", to_json(meta.encoder)},
          {"train", meta.train},
          {"epoch", meta.epoch},
          {"best_loss", std::isfinite(meta.best_loss) ? nlohmann::json(meta.best_loss) : nlohmann::json("untrained")},
          {"enumeration_digest", enumeration_digest(params)},
          {"n_values", model.value_count()}};
}

}  // namespace

std::string enumeration_digest(const nn::ParameterList<float>& params) {
  std::uint64_t h = kFnvOffset;
  for (const auto& p : params) h = fnv1a(p.name + ":" + p.tensor.shape().str() + ";", h);
  return to_hex(h);
}

std::uint64_t parameter_digest(const BrainMassModel<float>& model) { return blob_digest(flatten(model)); }

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string meta = meta_to_json(ckpt.meta, ckpt.model).dump();
  const auto blob = flatten(ckpt.model);
  const std::uint64_t meta_len = meta.size();
  const std::uint64_t digest = blob_digest(blob);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  out.write(kMagic.data(), kMagic.size());
  out.write(reinterpret_cast<const char*>(&meta_len), sizeof(meta_len));
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size() * sizeof(float)));
  out.write(reinterpret_cast<const char*>(&digest), sizeof(digest));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";

  if (bytes.size() < kMagic.size() || std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0)
    throw FormatError(where + "not a BMASS1 checkpoint");
  std::size_t pos = kMagic.size();
  auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() < pos + n) throw CorruptionError(where + "truncated while reading " + what);
  };
  need(sizeof(std::uint64_t), "metadata length");
  std::uint64_t meta_len = 0;
  std::memcpy(&meta_len, bytes.data() + pos, sizeof(meta_len));
  pos += sizeof(meta_len);
  need(meta_len, "metadata");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                bytes.begin() + static_cast<std::ptrdiff_t>(pos + meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(where + "unreadable metadata (" + e.what() + ")");
  }
  pos += meta_len;

  Checkpoint ckpt;
  try {
    ckpt.meta.format_version = doc.at("format_version").get<std::uint32_t>();
    if (ckpt.meta.format_version != kCheckpointVersion)
      throw IncompatibleError(where + "format version " + std::to_string(ckpt.meta.format_version) +
                              " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
    ckpt.meta.encoder = encoder_config_from_json(doc.at("encoder"));
    ckpt.meta.train = doc.at("train");
    ckpt.meta.epoch = doc.at("epoch").get<std::size_t>();
    const auto& best = doc.at("best_loss");
    ckpt.meta.best_loss = best.is_number() ? best.get<double>() : std::numeric_limits<double>::infinity();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(where + "malformed metadata (" + e.what() + ")");
  }

  ckpt.model = init_model<float>(ckpt.meta.encoder, 0);
  const auto params = ckpt.model.all_parameters();
  if (doc.value("enumeration_digest", std::string()) != enumeration_digest(params))
    throw IncompatibleError(where + "parameter enumeration does not match this build");
  const std::size_t n_values = ckpt.model.value_count();
  if (doc.value("n_values", std::size_t{0}) != n_values)
    throw CorruptionError(where + "metadata value count disagrees with the encoder config");

  need(n_values * sizeof(float), "parameter blob");
  std::vector<float> blob(n_values);
  std::memcpy(blob.data(), bytes.data() + pos, n_values * sizeof(float));
  pos += n_values * sizeof(float);
  need(sizeof(std::uint64_t), "digest");
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + pos, sizeof(stored));
  pos += sizeof(stored);
  if (pos != bytes.size()) throw CorruptionError(where + "trailing bytes after digest");
  if (stored != blob_digest(blob)) throw CorruptionError(where + "parameter digest mismatch");

  std::size_t offset = 0;
  for (const auto& p : params) {
    auto values = nn::Tensor<float>(p.tensor).mutable_values();
    std::copy(blob.begin() + static_cast<std::ptrdiff_t>(offset),
              blob.begin() + static_cast<std::ptrdiff_t>(offset + values.size()), values.begin());
    offset += values.size();
  }
  return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const EncoderConfig& expected) {
  auto ckpt = load_checkpoint(path);
  if (!(ckpt.meta.encoder == expected))
    throw IncompatibleError(path.string() + ": checkpoint encoder " + describe(ckpt.meta.encoder) +
                            " is incompatible with requested " + describe(expected));
  return ckpt;
}

}  // namespace brainmass
