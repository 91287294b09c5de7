#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace qfaap {

// Inserts a tEXt chunk right after IHDR of an encoded PNG.
std::vector<std::uint8_t> png_add_text(const std::vector<std::uint8_t>& png, const std::string& key,
                                       const std::string& text);
// First tEXt value stored under `key`, or empty.
std::string png_read_text(const std::vector<std::uint8_t>& png, const std::string& key);

}  // namespace qfaap
