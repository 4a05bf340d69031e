#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace scalenet {

std::string read_file(const std::filesystem::path& path);

// Writes to `<path>.tmp` then renames over `path`, so readers never observe a
// partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);

// Independent, reproducible sub-seed for a named purpose (stage index,
// epoch, ...). SplitMix64 finalizer over the combined inputs.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace scalenet
