// SPDX-License-Identifier: Apache-2.0
#include "prefprobe/hashing.hpp"

#include <openssl/evp.h>

#include <array>
#include <memory>

#include "prefprobe/error.hpp"

namespace prefprobe {

std::string sha256_hex(std::string_view bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(),
                                                               &EVP_MD_CTX_free);
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int length = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest.data(), &length) != 1) {
    throw Error(Errc::InvalidArgument, "SHA-256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * length);
  for (unsigned int i = 0; i < length; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0x0f]);
  }
  return out;
}

std::uint64_t digest_prefix64(std::string_view hex_digest) {
  std::uint64_t value = 0;
  for (std::size_t i = 0; i < 16 && i < hex_digest.size(); ++i) {
    const char c = hex_digest[i];
    const std::uint64_t nibble = (c >= '0' && c <= '9') ? c - '0' : (c - 'a' + 10);
    value = (value << 4) | (nibble & 0xf);
  }
  return value;
}

std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace prefprobe
