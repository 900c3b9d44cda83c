// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace prefprobe {

/// Lowercase 64-hex-char SHA-256 digest of the given bytes.
std::string sha256_hex(std::string_view bytes);

/// First 8 bytes of a hex digest as an integer (big-endian).
std::uint64_t digest_prefix64(std::string_view hex_digest);

/// splitmix64 finalizer; used to derive independent RNG streams from keys.
std::uint64_t mix64(std::uint64_t x) noexcept;

}  // namespace prefprobe
