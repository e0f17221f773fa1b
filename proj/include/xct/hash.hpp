#pragma once

#include <cstdint>
#include <string>

namespace xct {

// Hex-encoded SHA-256, used for artifact provenance in command manifests.
std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_file(const std::string& path);

// Cheap 64-bit FNV-1a for non-provenance keys (corpus alignment keys).
std::uint64_t fnv1a64(const void* data, std::size_t len);

}  // namespace xct
