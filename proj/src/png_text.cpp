#include "qfaap/png_text.hpp"

#include <cstring>

#include <zlib.h>

#include "qfaap/tensor.hpp"

namespace qfaap {
namespace {

constexpr std::size_t kSignature = 8;

std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>((v >> s) & 0xff));
}

}  // namespace

std::vector<std::uint8_t> png_add_text(const std::vector<std::uint8_t>& png, const std::string& key,
                                       const std::string& text) {
  if (png.size() < kSignature + 12 || std::memcmp(png.data() + 12, "IHDR", 4) != 0) {
    throw InvalidInput("not a PNG stream");
  }
  const std::size_t ihdr_end = kSignature + 12 + be32(png.data() + kSignature);
  std::vector<std::uint8_t> chunk;
  const std::string body = key + '\0' + text;
  put_be32(chunk, static_cast<std::uint32_t>(body.size()));
  const std::size_t type_at = chunk.size();
  chunk.insert(chunk.end(), {'t', 'E', 'X', 't'});
  chunk.insert(chunk.end(), body.begin(), body.end());
  const auto crc = crc32(0L, chunk.data() + type_at, static_cast<uInt>(chunk.size() - type_at));
  put_be32(chunk, static_cast<std::uint32_t>(crc));
  std::vector<std::uint8_t> out(png.begin(), png.begin() + static_cast<std::ptrdiff_t>(ihdr_end));
  out.insert(out.end(), chunk.begin(), chunk.end());
  out.insert(out.end(), png.begin() + static_cast<std::ptrdiff_t>(ihdr_end), png.end());
  return out;
}

std::string png_read_text(const std::vector<std::uint8_t>& png, const std::string& key) {
  std::size_t at = kSignature;
  while (at + 12 <= png.size()) {
    const std::uint32_t len = be32(png.data() + at);
    if (at + 12 + len > png.size()) break;
    if (std::memcmp(png.data() + at + 4, "tEXt", 4) == 0) {
      const std::string body(reinterpret_cast<const char*>(png.data() + at + 8), len);
      const auto nul = body.find('\0');
      if (nul != std::string::npos && body.substr(0, nul) == key) return body.substr(nul + 1);
    }
    at += 12 + len;
  }
  return {};
}

}  // namespace qfaap
