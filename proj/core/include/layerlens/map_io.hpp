#pragma once

#include <filesystem>
#include <vector>

#include "layerlens/map_fit.hpp"

namespace layerlens::fit {

inline constexpr std::uint32_t kMapFileVersion = 1;

// A set of per-anchor maps of a single class for one layer, as stored in
// maps_<layer>.lmp. Layout (little-endian): "LMP1" | u32 version |
// u32 class tag | u32 layer | u32 dim | u32 rank | u64 count, then one block
// per map: u64 anchor (all ones if none) | u8 flags | f64 ridge | params |
// optional SVD (u, s, v as f64, row-major).
struct MapSet {
  std::uint32_t layer_index = 0;
  MapClass map_class = MapClass::kLocalLowRank;
  std::uint32_t dim = 0;
  std::uint32_t rank = 0;
  std::vector<TokenwiseMap> maps;
};

std::string map_file_name(std::uint32_t layer_index);

void write_map_set(const MapSet& set, const std::filesystem::path& file);
MapSet read_map_set(const std::filesystem::path& file);

}  // namespace layerlens::fit
