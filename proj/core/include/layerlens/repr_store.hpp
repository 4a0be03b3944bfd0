#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace layerlens::store {

inline constexpr std::uint32_t kPairFileVersion = 1;
inline constexpr int kManifestFormatVersion = 1;

enum class Split { kTrain, kTest };

std::string_view split_name(Split split);
Split parse_split(std::string_view name);

// One token's hidden state before and after a layer transition.
struct ReprPair {
  std::uint32_t seq_id = 0;
  std::uint32_t pos = 0;
  std::uint32_t token_id = 0;
  std::vector<float> h_in;
  std::vector<float> h_out;

  bool operator==(const ReprPair&) const = default;
};

// All pairs of one transition layer_index -> layer_index + 1 for one split.
struct LayerDataset {
  std::uint32_t layer_index = 0;
  std::uint32_t dim = 0;
  Split split = Split::kTrain;
  std::vector<ReprPair> pairs;

  std::size_t size() const { return pairs.size(); }

  // n x d matrices with one row per pair, promoted to double.
  Eigen::MatrixXd inputs() const;
  Eigen::MatrixXd outputs() const;

  // Throws Error(kFormat) on the first violated invariant. When seq_len is
  // given, positions must be below it.
  void validate(std::optional<std::uint32_t> seq_len = std::nullopt) const;

  bool operator==(const LayerDataset&) const = default;
};

struct LayerFileEntry {
  std::uint32_t layer_index = 0;
  std::string path;  // relative to the dump directory
  std::uint64_t count = 0;
  Split split = Split::kTrain;

  bool operator==(const LayerFileEntry&) const = default;
};

struct DumpManifest {
  int format_version = kManifestFormatVersion;
  std::string model_name;
  std::uint32_t num_layers = 0;
  std::uint32_t hidden_dim = 0;
  std::string dtype = "f32";
  std::uint32_t seq_len = 0;
  std::uint64_t seed = 0;
  std::vector<LayerFileEntry> layer_files;
  // Additional top-level string fields (e.g. "hook", "toy_checkpoint").
  std::map<std::string, std::string> attributes;

  bool operator==(const DumpManifest&) const = default;
};

std::string layer_file_name(std::uint32_t layer_index, Split split);

// Builds the layer_files list from the datasets (one entry per dataset, in
// the given order).
std::vector<LayerFileEntry> describe_layer_files(
    const std::vector<LayerDataset>& datasets);

void write_dump(const DumpManifest& manifest,
                const std::vector<LayerDataset>& datasets,
                const std::filesystem::path& dir);

struct Dump {
  DumpManifest manifest;
  std::vector<LayerDataset> datasets;

  // Dataset for (layer, split) or nullptr.
  const LayerDataset* find(std::uint32_t layer, Split split) const;
};

Dump read_dump(const std::filesystem::path& dir);

// Manifest only; the layer files are not opened.
DumpManifest read_manifest(const std::filesystem::path& dir);

// Single pair file codec, exposed for tools and corruption tests.
void write_pair_file(const LayerDataset& dataset,
                     const std::filesystem::path& file);
LayerDataset read_pair_file(const std::filesystem::path& file, Split split);

// Uniformly chooses n distinct positions among those with valid_mask set.
// Result is sorted ascending and depends only on the arguments.
std::vector<std::uint32_t> sample_positions(std::uint32_t seq_len,
                                            const std::vector<bool>& valid_mask,
                                            std::size_t n, std::uint64_t seed);

}  // namespace layerlens::store
