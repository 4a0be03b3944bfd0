#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace layerlens::corpus {

// Reads a file as byte tokens (0..255).
std::vector<std::uint32_t> load_bytes(const std::filesystem::path& file);

// Start offsets of `count` windows of `length` tokens drawn uniformly from
// [begin, end - length], deterministic in seed.
std::vector<std::size_t> window_starts(std::size_t begin, std::size_t end,
                                       std::size_t length, std::size_t count,
                                       std::uint64_t seed);

}  // namespace layerlens::corpus
