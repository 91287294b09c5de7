#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace qfaap {

// Writes to a sibling temp file and renames it over `path`, so readers never
// observe a partially written artifact.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::string read_file(const std::filesystem::path& path);

// 64-bit FNV-1a, rendered as 16 lowercase hex digits by `hex64`.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 1469598103934665603ull);
std::string hex64(std::uint64_t v);

}  // namespace qfaap
