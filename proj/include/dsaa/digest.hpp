#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace dsaa {

/// 64-bit FNV-1a. Used for config digests and file fingerprints, not security.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);
std::string digest_of(std::string_view bytes);
std::string file_digest(const std::filesystem::path& path);

}  // namespace dsaa
