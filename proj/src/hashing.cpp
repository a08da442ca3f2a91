#include "brainmass/hashing.hpp"

#include <cstdio>
#include <fstream>
#include <vector>

#include "brainmass/errors.hpp"

namespace brainmass {

std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t state) {
  for (std::byte b : bytes) {
    state ^= static_cast<std::uint64_t>(b);
    state *= kFnvPrime;
  }
  return state;
}

std::uint64_t fnv1a(std::string_view text, std::uint64_t state) {
  return fnv1a(std::as_bytes(std::span(text.data(), text.size())), state);
}

std::string to_hex(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

std::uint64_t file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for hashing");
  std::uint64_t h = kFnvOffset;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto n = static_cast<std::size_t>(in.gcount());
    h = fnv1a(std::as_bytes(std::span(buf.data(), n)), h);
  }
  return h;
}

std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view subject_id,
                          std::uint64_t view_index, std::uint64_t tag) {
  std::uint64_t h = fnv1a(subject_id);
  const std::uint64_t extra[2] = {view_index, tag};
  h = fnv1a(std::as_bytes(std::span(extra)), h);
  return mix_seed(base ^ h);
}

}  // namespace brainmass
