#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace brainmass {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

/// 64-bit FNV-1a, resumable by passing the previous hash as `state`.
std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t state = kFnvOffset);
std::uint64_t fnv1a(std::string_view text, std::uint64_t state = kFnvOffset);

std::string to_hex(std::uint64_t value);

/// Digest of a file's contents; throws IoError when unreadable.
std::uint64_t file_digest(const std::string& path);

/// Seed derivation: base ⊕ FNV(subject_id, view index, tag).
std::uint64_t derive_seed(std::uint64_t base, std::string_view subject_id,
                          std::uint64_t view_index, std::uint64_t tag = 0);

/// SplitMix64 finalizer; mixes a counter into a well-spread 64-bit seed.
std::uint64_t mix_seed(std::uint64_t x);

}  // namespace brainmass
