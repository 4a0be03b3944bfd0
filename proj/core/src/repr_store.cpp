#include "layerlens/repr_store.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "byte_io.hpp"
#include "layerlens/error.hpp"
#include "layerlens/rng.hpp"

namespace layerlens {
namespace detail {

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::kIo, "write failed for " + path);
}

}  // namespace detail

namespace store {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr char kPairMagic[4] = {'L', 'U', 'P', '1'};
const std::set<std::string> kManifestKeys = {
    "format_version", "model_name", "num_layers", "hidden_dim",
    "dtype",          "seq_len",    "seed",       "layer_files"};

[[noreturn]] void format_error(const std::string& msg) {
  throw Error(ErrorKind::kFormat, msg);
}

Eigen::MatrixXd stack(const std::vector<ReprPair>& pairs, std::uint32_t dim,
                      bool outputs) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(pairs.size()), dim);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& v = outputs ? pairs[i].h_out : pairs[i].h_in;
    for (std::uint32_t j = 0; j < dim; ++j) {
      m(static_cast<Eigen::Index>(i), j) = v[j];
    }
  }
  return m;
}

json manifest_to_json(const DumpManifest& m) {
  json j;
  for (const auto& [key, value] : m.attributes) j[key] = value;
  j["format_version"] = m.format_version;
  j["model_name"] = m.model_name;
  j["num_layers"] = m.num_layers;
  j["hidden_dim"] = m.hidden_dim;
  j["dtype"] = m.dtype;
  j["seq_len"] = m.seq_len;
  j["seed"] = m.seed;
  json files = json::array();
  for (const auto& f : m.layer_files) {
    files.push_back({{"layer_index", f.layer_index},
                     {"path", f.path},
                     {"count", f.count},
                     {"split", std::string(split_name(f.split))}});
  }
  j["layer_files"] = std::move(files);
  return j;
}

DumpManifest manifest_from_json(const json& j) {
  DumpManifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    m.model_name = j.at("model_name").get<std::string>();
    m.num_layers = j.at("num_layers").get<std::uint32_t>();
    m.hidden_dim = j.at("hidden_dim").get<std::uint32_t>();
    m.dtype = j.at("dtype").get<std::string>();
    m.seq_len = j.at("seq_len").get<std::uint32_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& f : j.at("layer_files")) {
      LayerFileEntry e;
      e.layer_index = f.at("layer_index").get<std::uint32_t>();
      e.path = f.at("path").get<std::string>();
      e.count = f.at("count").get<std::uint64_t>();
      e.split = parse_split(f.at("split").get<std::string>());
      m.layer_files.push_back(std::move(e));
    }
    for (const auto& [key, value] : j.items()) {
      if (kManifestKeys.count(key) == 0 && value.is_string()) {
        m.attributes[key] = value.get<std::string>();
      }
    }
  } catch (const json::exception& e) {
    format_error(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

void validate_manifest(const DumpManifest& m) {
  if (m.format_version != kManifestFormatVersion) {
    format_error(fmt::format("version mismatch: manifest format_version {}",
                             m.format_version));
  }
  if (m.hidden_dim == 0) format_error("manifest hidden_dim must be > 0");
  if (m.num_layers < 2) format_error("manifest num_layers must be >= 2");
  if (m.dtype != "f32") format_error("unsupported dtype " + m.dtype);
  std::set<std::pair<std::uint32_t, Split>> seen;
  for (const auto& f : m.layer_files) {
    if (f.layer_index >= m.num_layers) {
      format_error(fmt::format("layer file {} has layer_index {} >= num_layers",
                               f.path, f.layer_index));
    }
    if (!seen.insert({f.layer_index, f.split}).second) {
      format_error(fmt::format("duplicate layer file for layer {} split {}",
                               f.layer_index, split_name(f.split)));
    }
  }
}

}  // namespace

std::string_view split_name(Split split) {
  return split == Split::kTrain ? "train" : "test";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "test") return Split::kTest;
  throw Error(ErrorKind::kFormat, fmt::format("unknown split '{}'", name));
}

Eigen::MatrixXd LayerDataset::inputs() const {
  return stack(pairs, dim, false);
}

Eigen::MatrixXd LayerDataset::outputs() const {
  return stack(pairs, dim, true);
}

void LayerDataset::validate(std::optional<std::uint32_t> seq_len) const {
  if (pairs.empty()) {
    format_error(fmt::format("layer {} {}: empty dataset", layer_index,
                             split_name(split)));
  }
  if (dim == 0) format_error("dataset dimension must be > 0");
  std::set<std::pair<std::uint32_t, std::uint32_t>> keys;
  for (const auto& p : pairs) {
    if (p.h_in.size() != dim || p.h_out.size() != dim) {
      format_error(fmt::format("dimension mismatch at seq {} pos {}", p.seq_id,
                               p.pos));
    }
    const auto finite = [](float v) { return std::isfinite(v); };
    if (!std::all_of(p.h_in.begin(), p.h_in.end(), finite) ||
        !std::all_of(p.h_out.begin(), p.h_out.end(), finite)) {
      format_error(fmt::format("non-finite value at seq {} pos {}", p.seq_id,
                               p.pos));
    }
    if (seq_len && p.pos >= *seq_len) {
      format_error(fmt::format("position {} out of range for seq_len {}",
                               p.pos, *seq_len));
    }
    if (!keys.insert({p.seq_id, p.pos}).second) {
      format_error(fmt::format("duplicate (seq_id, pos) = ({}, {})", p.seq_id,
                               p.pos));
    }
  }
}

std::string layer_file_name(std::uint32_t layer_index, Split split) {
  return fmt::format("layer_{}_{}.lup", layer_index, split_name(split));
}

std::vector<LayerFileEntry> describe_layer_files(
    const std::vector<LayerDataset>& datasets) {
  std::vector<LayerFileEntry> out;
  out.reserve(datasets.size());
  for (const auto& d : datasets) {
    out.push_back({d.layer_index, layer_file_name(d.layer_index, d.split),
                   d.pairs.size(), d.split});
  }
  return out;
}

void write_pair_file(const LayerDataset& dataset, const fs::path& file) {
  std::string buf;
  const std::size_t record = 12 + 8 * static_cast<std::size_t>(dataset.dim);
  buf.reserve(24 + record * dataset.pairs.size());
  buf.append(kPairMagic, 4);
  detail::put_le<std::uint32_t>(buf, kPairFileVersion);
  detail::put_le<std::uint32_t>(buf, dataset.layer_index);
  detail::put_le<std::uint32_t>(buf, dataset.dim);
  detail::put_le<std::uint64_t>(buf, dataset.pairs.size());
  for (const auto& p : dataset.pairs) {
    detail::put_le<std::uint32_t>(buf, p.seq_id);
    detail::put_le<std::uint32_t>(buf, p.pos);
    detail::put_le<std::uint32_t>(buf, p.token_id);
    for (float v : p.h_in) detail::put_f32(buf, v);
    for (float v : p.h_out) detail::put_f32(buf, v);
  }
  detail::write_file_bytes(file.string(), buf);
}

LayerDataset read_pair_file(const fs::path& file, Split split) {
  const std::string bytes = detail::read_file_bytes(file.string());
  detail::Reader r(bytes, file.filename().string());
  if (r.get_bytes(4) != std::string(kPairMagic, 4)) {
    format_error(file.filename().string() + ": bad magic");
  }
  const auto version = r.get_le<std::uint32_t>();
  if (version != kPairFileVersion) {
    format_error(fmt::format("{}: version mismatch (file {}, expected {})",
                             file.filename().string(), version,
                             kPairFileVersion));
  }
  LayerDataset d;
  d.split = split;
  d.layer_index = r.get_le<std::uint32_t>();
  d.dim = r.get_le<std::uint32_t>();
  const auto count = r.get_le<std::uint64_t>();
  if (d.dim == 0) format_error(file.filename().string() + ": zero dimension");
  const std::uint64_t record = 12 + 8 * static_cast<std::uint64_t>(d.dim);
  if (count > r.remaining() / record || count * record != r.remaining()) {
    format_error(fmt::format("{}: record count {} does not match file size",
                             file.filename().string(), count));
  }
  d.pairs.resize(count);
  for (auto& p : d.pairs) {
    p.seq_id = r.get_le<std::uint32_t>();
    p.pos = r.get_le<std::uint32_t>();
    p.token_id = r.get_le<std::uint32_t>();
    p.h_in.resize(d.dim);
    p.h_out.resize(d.dim);
    for (auto& v : p.h_in) v = r.get_f32();
    for (auto& v : p.h_out) v = r.get_f32();
  }
  return d;
}

void write_dump(const DumpManifest& manifest,
                const std::vector<LayerDataset>& datasets, const fs::path& dir) {
  validate_manifest(manifest);
  if (manifest.layer_files.size() != datasets.size()) {
    format_error(fmt::format(
        "manifest/dataset mismatch: {} layer files declared, {} datasets",
        manifest.layer_files.size(), datasets.size()));
  }
  std::vector<const LayerDataset*> ordered;
  for (const auto& entry : manifest.layer_files) {
    auto it = std::find_if(datasets.begin(), datasets.end(), [&](const auto& d) {
      return d.layer_index == entry.layer_index && d.split == entry.split;
    });
    if (it == datasets.end() || it->pairs.empty() ||
        it->pairs.size() != entry.count || it->dim != manifest.hidden_dim) {
      format_error(fmt::format("manifest/dataset mismatch for layer {} split {}",
                               entry.layer_index, split_name(entry.split)));
    }
    it->validate(manifest.seq_len > 0 ? std::optional(manifest.seq_len)
                                      : std::nullopt);
    ordered.push_back(&*it);
  }

  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw Error(ErrorKind::kIo,
                "cannot create dump directory " + dir.string());
  }
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    write_pair_file(*ordered[i], dir / manifest.layer_files[i].path);
  }
  detail::write_file_bytes((dir / "manifest.json").string(),
                           manifest_to_json(manifest).dump(2) + "\n");
}

DumpManifest read_manifest(const fs::path& dir) {
  const auto text = detail::read_file_bytes((dir / "manifest.json").string());
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    format_error(std::string("manifest.json: ") + e.what());
  }
  DumpManifest m = manifest_from_json(j);
  validate_manifest(m);
  return m;
}

Dump read_dump(const fs::path& dir) {
  Dump dump;
  dump.manifest = read_manifest(dir);
  const auto& m = dump.manifest;
  for (const auto& entry : m.layer_files) {
    const fs::path file = dir / entry.path;
    if (!fs::exists(file)) {
      format_error("referenced layer file missing: " + entry.path);
    }
    LayerDataset d = read_pair_file(file, entry.split);
    if (d.layer_index != entry.layer_index) {
      format_error(fmt::format("{}: header layer {} disagrees with manifest {}",
                               entry.path, d.layer_index, entry.layer_index));
    }
    if (d.dim != m.hidden_dim) {
      format_error(fmt::format("{}: dimension mismatch (file {}, manifest {})",
                               entry.path, d.dim, m.hidden_dim));
    }
    if (d.pairs.size() != entry.count) {
      format_error(fmt::format("{}: count mismatch (file {}, manifest {})",
                               entry.path, d.pairs.size(), entry.count));
    }
    d.validate(m.seq_len > 0 ? std::optional(m.seq_len) : std::nullopt);
    dump.datasets.push_back(std::move(d));
  }
  return dump;
}

const LayerDataset* Dump::find(std::uint32_t layer, Split split) const {
  for (const auto& d : datasets) {
    if (d.layer_index == layer && d.split == split) return &d;
  }
  return nullptr;
}

std::vector<std::uint32_t> sample_positions(std::uint32_t seq_len,
                                            const std::vector<bool>& valid_mask,
                                            std::size_t n,
                                            std::uint64_t seed) {
  if (valid_mask.size() != seq_len) {
    throw Error(ErrorKind::kConfig,
                fmt::format("valid mask length {} != seq_len {}",
                            valid_mask.size(), seq_len));
  }
  std::vector<std::uint32_t> valid;
  for (std::uint32_t i = 0; i < seq_len; ++i) {
    if (valid_mask[i]) valid.push_back(i);
  }
  if (n > valid.size()) {
    throw Error(ErrorKind::kConfig,
                fmt::format("requested {} positions but only {} are valid", n,
                            valid.size()));
  }
  Rng rng(seed);
  std::vector<std::uint32_t> out;
  out.reserve(n);
  for (std::size_t idx : sample_without_replacement(valid.size(), n, rng)) {
    out.push_back(valid[idx]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace store
}  // namespace layerlens
