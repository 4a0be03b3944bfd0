#include "layerlens/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "layerlens/analysis.hpp"
#include "layerlens/corpus.hpp"
#include "layerlens/error.hpp"
#include "layerlens/functional_eval.hpp"
#include "layerlens/geometry.hpp"
#include "layerlens/map_fit.hpp"
#include "layerlens/map_io.hpp"
#include "layerlens/neighborhood.hpp"
#include "layerlens/parallel.hpp"
#include "layerlens/repr_store.hpp"
#include "layerlens/resume_client.hpp"
#include "layerlens/svg.hpp"
#include "layerlens/toy_model.hpp"
#include "layerlens/toy_train.hpp"

#ifndef LAYERLENS_DATA_DIR
#define LAYERLENS_DATA_DIR "data"
#endif

namespace layerlens::pipeline {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kCheckpointName = "toy_model.llck";
constexpr const char* kSequencesName = "sequences.json";

// ---------------------------------------------------------------- config

json to_json(const RunConfig& c) {
  json j;
  j["out"] = c.out;
  j["dump"] = c.dump;
  j["toy_checkpoint"] = c.toy_checkpoint;
  j["corpus"] = c.corpus;
  j["train_seqs"] = c.train_seqs;
  j["test_seqs"] = c.test_seqs;
  j["seq_len"] = c.seq_len;
  j["positions"] = c.positions;
  j["test_positions"] = c.test_positions;
  j["train_fraction"] = c.train_fraction;
  j["toy_layers"] = c.toy_layers;
  j["toy_dim"] = c.toy_dim;
  j["toy_heads"] = c.toy_heads;
  j["train_steps"] = c.train_steps;
  j["train_batch"] = c.train_batch;
  j["train_lr"] = c.train_lr;
  j["target_loss"] = c.target_loss;
  j["layers"] = c.layers;
  j["map_class"] = c.map_class;
  j["ranks"] = c.ranks;
  j["k"] = c.k;
  j["ridge_scale"] = c.ridge_scale;
  j["assignment"] = c.assignment;
  j["anchors"] = c.anchors;
  j["interp_p"] = c.interp_p;
  j["mlp_hidden"] = c.mlp_hidden;
  j["mlp_steps"] = c.mlp_steps;
  j["mlp_step_size"] = c.mlp_step_size;
  j["projection_ks"] = c.projection_ks;
  j["heuristic_projection"] = c.heuristic_projection;
  j["mode"] = c.mode;
  j["endpoint"] = c.endpoint;
  j["endpoint_timeout"] = c.endpoint_timeout;
  j["max_in_flight"] = c.max_in_flight;
  j["plots"] = c.plots;
  j["seed"] = c.seed;
  j["sweep"] = c.sweep;
  j["sweep_values"] = c.sweep_values;
  return j;
}

[[noreturn]] void bad_type(const std::string& key, const char* expected) {
  throw Error(ErrorKind::kConfig, fmt::format("config key '{}' must be {}", key, expected));
}

template <typename T>
T convert(const json& v, const std::string& key) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) bad_type(key, "true or false");
    return v.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() &&
                                   v.get<std::int64_t>() < 0)) {
      bad_type(key, "a non-negative integer");
    }
    const auto u = v.get<std::uint64_t>();
    if (u > std::numeric_limits<T>::max()) bad_type(key, "a smaller integer");
    return static_cast<T>(u);
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) bad_type(key, "a number");
    return v.get<T>();
  } else {
    if (!v.is_string()) bad_type(key, "a string");
    return v.get<std::string>();
  }
}

template <typename T>
void read(const json& j, const std::string& key, T& field) {
  field = convert<T>(j.at(key), key);
}

template <typename T>
void read(const json& j, const std::string& key, std::vector<T>& field) {
  const json& v = j.at(key);
  field.clear();
  if (v.is_array()) {
    for (const auto& e : v) field.push_back(convert<T>(e, key));
  } else {
    field.push_back(convert<T>(v, key));  // a scalar stands for a one-element list
  }
}

RunConfig from_json(const json& j) {
  RunConfig c;
  read(j, "out", c.out);
  read(j, "dump", c.dump);
  read(j, "toy_checkpoint", c.toy_checkpoint);
  read(j, "corpus", c.corpus);
  read(j, "train_seqs", c.train_seqs);
  read(j, "test_seqs", c.test_seqs);
  read(j, "seq_len", c.seq_len);
  read(j, "positions", c.positions);
  read(j, "test_positions", c.test_positions);
  read(j, "train_fraction", c.train_fraction);
  read(j, "toy_layers", c.toy_layers);
  read(j, "toy_dim", c.toy_dim);
  read(j, "toy_heads", c.toy_heads);
  read(j, "train_steps", c.train_steps);
  read(j, "train_batch", c.train_batch);
  read(j, "train_lr", c.train_lr);
  read(j, "target_loss", c.target_loss);
  read(j, "layers", c.layers);
  read(j, "map_class", c.map_class);
  read(j, "ranks", c.ranks);
  read(j, "k", c.k);
  read(j, "ridge_scale", c.ridge_scale);
  read(j, "assignment", c.assignment);
  read(j, "anchors", c.anchors);
  read(j, "interp_p", c.interp_p);
  read(j, "mlp_hidden", c.mlp_hidden);
  read(j, "mlp_steps", c.mlp_steps);
  read(j, "mlp_step_size", c.mlp_step_size);
  read(j, "projection_ks", c.projection_ks);
  read(j, "heuristic_projection", c.heuristic_projection);
  read(j, "mode", c.mode);
  read(j, "endpoint", c.endpoint);
  read(j, "endpoint_timeout", c.endpoint_timeout);
  read(j, "max_in_flight", c.max_in_flight);
  read(j, "plots", c.plots);
  read(j, "seed", c.seed);
  read(j, "sweep", c.sweep);
  read(j, "sweep_values", c.sweep_values);
  return c;
}

json parse_scalar(const std::string& text) {
  try {
    json v = json::parse(text);
    if (v.is_number() || v.is_boolean()) return v;
  } catch (const json::exception&) {
  }
  return text;
}

json parse_override(const json& current, const std::string& key, const std::string& value) {
  if (current.is_array()) {
    if (!value.empty() && value.front() == '[') {
      try {
        return json::parse(value);
      } catch (const json::exception& e) {
        throw Error(ErrorKind::kConfig, fmt::format("--{}: invalid JSON list: {}", key, e.what()));
      }
    }
    json list = json::array();
    std::stringstream ss(value);
    for (std::string item; std::getline(ss, item, ',');) {
      if (!item.empty()) list.push_back(parse_scalar(item));
    }
    return list;
  }
  if (current.is_string()) return value;
  if (current.is_boolean()) {
    if (value == "true" || value == "1" || value.empty()) return true;
    if (value == "false" || value == "0") return false;
    bad_type(key, "true or false");
  }
  return parse_scalar(value);
}

std::string normalize_key(std::string key) {
  while (!key.empty() && key.front() == '-') key.erase(key.begin());
  std::replace(key.begin(), key.end(), '-', '_');
  return key;
}

// ---------------------------------------------------------------- outputs

std::string num(double v) {
  if (std::isnan(v)) return "NA";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

std::string num(const std::optional<double>& v) { return v ? num(*v) : "NA"; }

json opt(const std::optional<double>& v) {
  return v && std::isfinite(*v) ? json(*v) : json(nullptr);
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorKind::kIo, fmt::format("cannot write {}", file.string()));
  os << text;
  if (!os) throw Error(ErrorKind::kIo, fmt::format("write failed for {}", file.string()));
}

// Output directory owned by one command. Everything it created is removed
// again unless commit() is reached.
class OutputTree {
 public:
  explicit OutputTree(fs::path root) : root_(std::move(root)) {
    if (root_.empty()) throw Error(ErrorKind::kConfig, "out must be set (--out=DIR)");
    created_root_ = !fs::exists(root_);
    std::error_code ec;
    fs::create_directories(root_, ec);
    if (ec) {
      throw Error(ErrorKind::kIo,
                  fmt::format("cannot create output directory {}: {}", root_.string(), ec.message()));
    }
  }
  OutputTree(const OutputTree&) = delete;
  OutputTree& operator=(const OutputTree&) = delete;

  ~OutputTree() {
    if (committed_) return;
    std::error_code ec;
    if (created_root_) {
      fs::remove_all(root_, ec);
      return;
    }
    for (auto it = created_.rbegin(); it != created_.rend(); ++it) fs::remove_all(*it, ec);
  }

  const fs::path& root() const { return root_; }

  // Absolute path for `rel`, creating missing parent directories. Created
  // directories and the file itself are registered for cleanup.
  fs::path path(const fs::path& rel, bool is_dir = false) {
    const fs::path target = root_ / rel;
    const fs::path dir = is_dir ? rel : rel.parent_path();
    fs::path cur = root_;
    for (const auto& part : dir) {
      cur /= part;
      if (!fs::exists(cur)) {
        fs::create_directory(cur);
        created_.push_back(cur);
      }
    }
    if (!is_dir) created_.push_back(target);
    return target;
  }

  void write(const fs::path& rel, const std::string& text) { write_text(path(rel), text); }
  void commit() { committed_ = true; }

 private:
  fs::path root_;
  bool created_root_ = false;
  bool committed_ = false;
  std::vector<fs::path> created_;
};

// Prefixes diagnostics with the failing pipeline stage.
template <typename F>
auto stage(std::string_view name, F&& body) -> decltype(body()) {
  const auto tag = [&](const std::string& what) {
    return what.starts_with("[") ? what : fmt::format("[{}] {}", name, what);
  };
  try {
    return body();
  } catch (const RetryableError& e) {
    throw RetryableError(tag(e.what()));
  } catch (const Error& e) {
    throw Error(e.kind(), tag(e.what()));
  } catch (const fs::filesystem_error& e) {
    throw Error(ErrorKind::kIo, tag(e.what()));
  } catch (const std::bad_alloc&) {
    throw Error(ErrorKind::kCompute, tag("out of memory"));
  }
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------- toy data

toy::ToyModelWeights toy_weights(const RunConfig& cfg) {
  if (cfg.toy_checkpoint == "random") {
    toy::ToyShape shape;
    shape.layers = cfg.toy_layers;
    shape.dim = cfg.toy_dim;
    shape.heads = cfg.toy_heads;
    shape.max_positions = std::max<std::size_t>(shape.max_positions, cfg.seq_len);
    return toy::init_weights(shape, cfg.seed);
  }
  return toy::load_checkpoint(cfg.toy_checkpoint);
}

struct Split {
  std::vector<std::uint32_t> bytes;
  std::size_t cut = 0;
};

Split load_corpus(const RunConfig& cfg) {
  Split s;
  s.bytes = corpus::load_bytes(cfg.corpus);
  s.cut = static_cast<std::size_t>(static_cast<double>(s.bytes.size()) * cfg.train_fraction);
  if (s.cut < cfg.seq_len || s.bytes.size() - s.cut < cfg.seq_len) {
    throw Error(ErrorKind::kConfig,
                fmt::format("corpus {} ({} bytes) is too short for seq_len {} on both sides of "
                            "train_fraction {}",
                            cfg.corpus, s.bytes.size(), cfg.seq_len, cfg.train_fraction));
  }
  return s;
}

void generate_toy_dump(const RunConfig& cfg, const fs::path& dir) {
  if (cfg.train_seqs + cfg.test_seqs == 0) {
    throw Error(ErrorKind::kConfig, "empty run: train_seqs and test_seqs are both 0");
  }
  const toy::ToyModelWeights weights = toy_weights(cfg);
  const auto& shape = weights.shape;
  if (cfg.seq_len > shape.max_positions) {
    throw Error(ErrorKind::kConfig, fmt::format("seq_len {} exceeds the model's {} positions",
                                                cfg.seq_len, shape.max_positions));
  }
  const Split text = load_corpus(cfg);
  const auto train_starts =
      corpus::window_starts(0, text.cut, cfg.seq_len, cfg.train_seqs, derive_seed(cfg.seed, 1));
  const auto test_starts = corpus::window_starts(text.cut, text.bytes.size(), cfg.seq_len,
                                                 cfg.test_seqs, derive_seed(cfg.seed, 2));

  const std::size_t n_seq = cfg.train_seqs + cfg.test_seqs;
  const std::size_t layers = shape.layers;
  const auto dim = static_cast<std::uint32_t>(shape.dim);
  struct SeqPairs {
    std::vector<std::uint32_t> tokens;
    std::vector<std::vector<store::ReprPair>> by_layer;
  };
  std::vector<SeqPairs> seqs(n_seq);
  const std::vector<bool> valid(cfg.seq_len, true);

  parallel_for(n_seq, [&](std::size_t s) {
    const bool is_train = s < cfg.train_seqs;
    const std::size_t start = is_train ? train_starts[s] : test_starts[s - cfg.train_seqs];
    SeqPairs& out = seqs[s];
    out.tokens.assign(text.bytes.begin() + static_cast<std::ptrdiff_t>(start),
                      text.bytes.begin() + static_cast<std::ptrdiff_t>(start + cfg.seq_len));
    const toy::ForwardResult fwd = toy::toy_forward(weights, out.tokens);
    std::vector<std::uint32_t> positions;
    if (!is_train && cfg.test_positions == "all") {
      positions.resize(cfg.seq_len);
      std::iota(positions.begin(), positions.end(), 0u);
    } else {
      positions = store::sample_positions(static_cast<std::uint32_t>(cfg.seq_len), valid,
                                          cfg.positions, derive_seed(cfg.seed, 1000 + s));
    }
    out.by_layer.resize(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      for (std::uint32_t pos : positions) {
        store::ReprPair p;
        p.seq_id = static_cast<std::uint32_t>(s);
        p.pos = pos;
        p.token_id = out.tokens[pos];
        p.h_in.resize(dim);
        p.h_out.resize(dim);
        for (std::uint32_t c = 0; c < dim; ++c) {
          p.h_in[c] = static_cast<float>(fwd.hidden[l](pos, c));
          p.h_out[c] = static_cast<float>(fwd.hidden[l + 1](pos, c));
        }
        out.by_layer[l].push_back(std::move(p));
      }
    }
  });

  std::vector<store::LayerDataset> datasets;
  for (std::size_t l = 0; l < layers; ++l) {
    for (const auto split : {store::Split::kTrain, store::Split::kTest}) {
      store::LayerDataset ds;
      ds.layer_index = static_cast<std::uint32_t>(l);
      ds.dim = dim;
      ds.split = split;
      const std::size_t lo = split == store::Split::kTrain ? 0 : cfg.train_seqs;
      const std::size_t hi = split == store::Split::kTrain ? cfg.train_seqs : n_seq;
      for (std::size_t s = lo; s < hi; ++s) {
        for (const auto& p : seqs[s].by_layer[l]) ds.pairs.push_back(p);
      }
      if (!ds.pairs.empty()) datasets.push_back(std::move(ds));
    }
  }

  store::DumpManifest manifest;
  manifest.model_name = "toy";
  manifest.num_layers = static_cast<std::uint32_t>(layers);
  manifest.hidden_dim = dim;
  manifest.seq_len = static_cast<std::uint32_t>(cfg.seq_len);
  manifest.seed = cfg.seed;
  manifest.layer_files = store::describe_layer_files(datasets);
  manifest.attributes["hook"] = "block_output";
  manifest.attributes["toy_checkpoint"] = kCheckpointName;
  manifest.attributes["toy_sequences"] = kSequencesName;
  store::write_dump(manifest, datasets, dir);
  toy::save_checkpoint(weights, dir / kCheckpointName);

  json seq_json = json::array();
  for (std::size_t s = 0; s < n_seq; ++s) {
    seq_json.push_back({{"seq_id", s},
                        {"split", s < cfg.train_seqs ? "train" : "test"},
                        {"tokens", seqs[s].tokens}});
  }
  write_text(dir / kSequencesName, json{{"sequences", seq_json}}.dump() + "\n");
  spdlog::info("toy dump: {} train + {} test sequences, {} transitions -> {}", cfg.train_seqs,
               cfg.test_seqs, layers, dir.string());
}

std::map<std::uint32_t, std::vector<std::uint32_t>> load_sequences(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw Error(ErrorKind::kIo, fmt::format("cannot open {}", file.string()));
  std::map<std::uint32_t, std::vector<std::uint32_t>> out;
  try {
    const json j = json::parse(is);
    for (const auto& s : j.at("sequences")) {
      out[s.at("seq_id").get<std::uint32_t>()] = s.at("tokens").get<std::vector<std::uint32_t>>();
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, fmt::format("{}: {}", file.string(), e.what()));
  }
  return out;
}

}  // namespace

fs::path default_data_dir() {
  if (const char* env = std::getenv("LAYERLENS_DATA_DIR"); env && *env) return env;
  return LAYERLENS_DATA_DIR;
}

RunConfig load_config(const std::optional<fs::path>& file,
                      const std::vector<std::pair<std::string, std::string>>& overrides) {
  json j = to_json(RunConfig{});
  if (file) {
    std::ifstream is(*file, std::ios::binary);
    if (!is) throw Error(ErrorKind::kIo, fmt::format("cannot open config {}", file->string()));
    json doc;
    try {
      doc = json::parse(is);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kConfig, fmt::format("config {} is not valid JSON: {}",
                                                  file->string(), e.what()));
    }
    if (!doc.is_object()) {
      throw Error(ErrorKind::kConfig, fmt::format("config {} must be a JSON object", file->string()));
    }
    for (const auto& [key, value] : doc.items()) {
      if (!j.contains(key)) {
        throw Error(ErrorKind::kConfig,
                    fmt::format("unknown config key '{}' in {}", key, file->string()));
      }
      j[key] = value;
    }
  }
  for (const auto& [raw_key, value] : overrides) {
    const std::string key = normalize_key(raw_key);
    if (!j.contains(key)) {
      throw Error(ErrorKind::kConfig, fmt::format("unknown option --{}", key));
    }
    j[key] = parse_override(j[key], key, value);
  }
  RunConfig cfg = from_json(j);
  if (cfg.toy_checkpoint.empty()) cfg.toy_checkpoint = (default_data_dir() / kCheckpointName).string();
  if (cfg.corpus.empty()) cfg.corpus = (default_data_dir() / "corpus.txt").string();
  return cfg;
}

void validate(const RunConfig& cfg) {
  const auto fail = [](const std::string& msg) { throw Error(ErrorKind::kConfig, msg); };
  if (cfg.out.empty()) fail("out must be set (--out=DIR)");
  if (cfg.seq_len < 2) fail("seq_len must be at least 2");
  if (cfg.positions == 0 || cfg.positions > cfg.seq_len) {
    fail(fmt::format("positions must be in [1, seq_len={}], got {}", cfg.seq_len, cfg.positions));
  }
  if (cfg.test_positions != "sampled" && cfg.test_positions != "all") {
    fail(fmt::format("test_positions must be 'sampled' or 'all', got '{}'", cfg.test_positions));
  }
  if (!(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0)) {
    fail("train_fraction must lie strictly between 0 and 1");
  }
  if (cfg.toy_layers == 0 || cfg.toy_dim == 0 || cfg.toy_heads == 0 ||
      cfg.toy_dim % cfg.toy_heads != 0) {
    fail("toy_dim must be a positive multiple of toy_heads, and toy_layers positive");
  }
  if (cfg.map_class.empty()) fail("map_class needs at least one class");
  bool has_mlp = false;
  for (const auto& name : cfg.map_class) {
    try {
      has_mlp |= fit::parse_class(name) == fit::MapClass::kMlp;
    } catch (const Error&) {
      fail(fmt::format("unknown map_class '{}' (expected global_diag_psd, local_diag_psd, "
                       "local_low_rank, orthogonal or mlp)",
                       name));
    }
  }
  if (cfg.ranks.empty()) fail("ranks needs at least one value");
  for (auto r : cfg.ranks) {
    if (r == 0) fail("ranks must be >= 1");
  }
  if (cfg.k == 0) fail("k must be >= 1");
  if (!(cfg.ridge_scale >= 0.0) || !std::isfinite(cfg.ridge_scale)) {
    fail("ridge_scale must be finite and >= 0");
  }
  if (cfg.assignment != "local" && cfg.assignment != "interpolate" &&
      cfg.assignment != "nearest_anchor") {
    fail(fmt::format("assignment must be local, interpolate or nearest_anchor, got '{}'",
                     cfg.assignment));
  }
  if (cfg.assignment == "interpolate" && has_mlp) {
    fail("mlp maps cannot be interpolated; use assignment=local or nearest_anchor");
  }
  if (cfg.anchors == 0) fail("anchors must be >= 1");
  if (cfg.interp_p == 0) fail("interp_p must be >= 1");
  if (!(cfg.mlp_step_size > 0.0)) fail("mlp_step_size must be positive");
  for (auto k : cfg.projection_ks) {
    if (k == 0) fail("projection_ks entries must be >= 1");
  }
  if (cfg.mode.empty()) fail("mode needs at least one intervention mode");
  for (const auto& m : cfg.mode) {
    try {
      (void)eval::parse_mode(m);
    } catch (const Error&) {
      fail(fmt::format("unknown mode '{}' (expected all, sampled or single)", m));
    }
  }
  if (!cfg.endpoint.empty() && !cfg.endpoint.starts_with("http://")) {
    fail(fmt::format("endpoint must look like http://host:port, got '{}'", cfg.endpoint));
  }
  if (!(cfg.endpoint_timeout > 0.0)) fail("endpoint_timeout must be positive");
  if (cfg.max_in_flight == 0) fail("max_in_flight must be >= 1");
  if (!cfg.sweep.empty() && cfg.sweep != "rank" && cfg.sweep != "k") {
    fail(fmt::format("sweep must be 'rank' or 'k', got '{}'", cfg.sweep));
  }
  if (cfg.train_batch == 0) fail("train_batch must be >= 1");
  if (!(cfg.train_lr > 0.0)) fail("train_lr must be positive");
}

std::string config_json(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

int exit_code(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    switch (err->kind()) {
      case ErrorKind::kConfig:
      case ErrorKind::kFormat:
      case ErrorKind::kUnsupported:
        return 2;
      case ErrorKind::kIo:
      case ErrorKind::kEnvironment:
      case ErrorKind::kProtocol:
        return 3;
      case ErrorKind::kCompute:
        return 4;
    }
  }
  return 4;
}

void cmd_train(const RunConfig& cfg) {
  stage("config", [&] { validate(cfg); });
  OutputTree out(cfg.out);
  toy::ToyShape shape;
  shape.layers = cfg.toy_layers;
  shape.dim = cfg.toy_dim;
  shape.heads = cfg.toy_heads;
  shape.max_positions = std::max<std::size_t>(shape.max_positions, cfg.seq_len);
  const Split text = stage("ingest", [&] { return load_corpus(cfg); });
  toy::ToyModelWeights w = toy::init_weights(shape, cfg.seed);
  toy::TrainConfig tc;
  tc.max_steps = cfg.train_steps;
  tc.batch = cfg.train_batch;
  tc.seq_len = cfg.seq_len;
  tc.learning_rate = cfg.train_lr;
  tc.seed = cfg.seed;
  tc.target_loss = cfg.target_loss;
  const std::span<const std::uint32_t> train_part(text.bytes.data(), text.cut);
  const std::span<const std::uint32_t> held_out(text.bytes.data() + text.cut,
                                                text.bytes.size() - text.cut);
  const toy::TrainReport rep = stage("train", [&] { return toy::train(w, train_part, tc); });
  const double held_out_loss =
      toy::evaluate_loss(w, held_out, cfg.seq_len, tc.eval_windows, derive_seed(cfg.seed, 3));
  if (!rep.reached_target) {
    spdlog::warn("training stopped at {} steps with loss {:.4f} above target {:.4f}", rep.steps,
                 rep.final_eval_loss, cfg.target_loss);
  }
  toy::save_checkpoint(w, out.path(kCheckpointName));
  json report{{"steps", rep.steps},
              {"final_train_loss", rep.final_eval_loss},
              {"held_out_loss", held_out_loss},
              {"reached_target", rep.reached_target},
              {"target_loss", cfg.target_loss},
              {"eval_curve", rep.eval_curve}};
  out.write("run.json", config_json(cfg));
  out.write("train.json", report.dump(2) + "\n");
  out.commit();
  spdlog::info("trained {} steps, loss {:.4f} (held out {:.4f})", rep.steps, rep.final_eval_loss,
               held_out_loss);
}

void cmd_toygen(const RunConfig& cfg) {
  stage("config", [&] { validate(cfg); });
  OutputTree out(cfg.out);
  stage("toygen", [&] { generate_toy_dump(cfg, out.root()); });
  out.commit();
}

std::string inspect(const fs::path& dump_dir) {
  const store::Dump dump = store::read_dump(dump_dir);
  const auto& m = dump.manifest;
  std::string s;
  s += fmt::format("dump        {}\n", dump_dir.string());
  s += fmt::format("model       {}\n", m.model_name);
  s += fmt::format("layers      {} (hidden_dim {}, dtype {})\n", m.num_layers, m.hidden_dim, m.dtype);
  s += fmt::format("seq_len     {}\n", m.seq_len);
  s += fmt::format("seed        {}\n", m.seed);
  for (const auto& [key, value] : m.attributes) s += fmt::format("{:<11} {}\n", key, value);
  s += "files\n";
  for (const auto& f : m.layer_files) {
    std::set<std::uint32_t> seqs;
    if (const auto* ds = dump.find(f.layer_index, f.split)) {
      for (const auto& p : ds->pairs) seqs.insert(p.seq_id);
    }
    s += fmt::format("  layer {:>3} {:<5} {:>8} pairs {:>6} sequences  {}\n", f.layer_index,
                     store::split_name(f.split), f.count, seqs.size(), f.path);
  }
  s += "status      valid\n";
  return s;
}

namespace {

// ---------------------------------------------------------------- ingest

struct LayerInputs {
  const store::LayerDataset* train = nullptr;
  const store::LayerDataset* eval = nullptr;
  Eigen::MatrixXd x, y;  // train inputs / outputs
  std::unique_ptr<nbr::NeighborIndex> index;
};

struct Session {
  fs::path dump_dir;
  store::Dump dump;
  std::unique_ptr<eval::ToyBackend> toy;
  std::shared_ptr<eval::ResumeClient> client;
  std::vector<std::uint32_t> layers;
  std::map<std::uint32_t, LayerInputs> data;
};

Session ingest(const RunConfig& cfg, OutputTree& out) {
  Session s;
  if (!cfg.endpoint.empty()) {
    stage("endpoint", [&] {
      eval::ClientOptions opts;
      opts.timeout_seconds = cfg.endpoint_timeout;
      opts.max_in_flight = cfg.max_in_flight;
      s.client = std::make_shared<eval::ResumeClient>(cfg.endpoint, opts);
      const eval::ModelInfo info = s.client->info();
      spdlog::info("endpoint {}: model {} ({} layers, hidden_dim {})", cfg.endpoint,
                   info.model_name, info.num_layers, info.hidden_dim);
    });
  }
  stage("ingest", [&] {
    if (cfg.dump.empty()) {
      s.dump_dir = out.path("dump", true);
      generate_toy_dump(cfg, s.dump_dir);
    } else {
      s.dump_dir = cfg.dump;
    }
    s.dump = store::read_dump(s.dump_dir);
    const auto& m = s.dump.manifest;
    if (s.client) {
      const eval::ModelInfo info = s.client->info();
      if (info.hidden_dim != m.hidden_dim || info.num_layers < m.num_layers) {
        throw Error(ErrorKind::kConfig,
                    fmt::format("endpoint serves {} (hidden_dim {}, {} layers) but the dump holds "
                                "{} (hidden_dim {}, {} layers)",
                                info.model_name, info.hidden_dim, info.num_layers, m.model_name,
                                m.hidden_dim, m.num_layers));
      }
    } else {
      const auto ckpt = m.attributes.find("toy_checkpoint");
      const auto seqs = m.attributes.find("toy_sequences");
      if (ckpt == m.attributes.end() || seqs == m.attributes.end()) {
        throw Error(ErrorKind::kConfig,
                    fmt::format("dump {} has no toy checkpoint; set endpoint=http://host:port to "
                                "evaluate through the resume service",
                                s.dump_dir.string()));
      }
      toy::ToyModelWeights w = toy::load_checkpoint(s.dump_dir / ckpt->second);
      if (w.shape.dim != m.hidden_dim || w.shape.layers != m.num_layers) {
        throw Error(ErrorKind::kFormat, "toy checkpoint does not match the dump manifest");
      }
      s.toy = std::make_unique<eval::ToyBackend>(std::move(w),
                                                 load_sequences(s.dump_dir / seqs->second),
                                                 m.model_name);
    }

    std::set<std::uint32_t> available;
    for (const auto& ds : s.dump.datasets) {
      if (ds.split == store::Split::kTrain) available.insert(ds.layer_index);
    }
    if (cfg.layers.empty()) {
      s.layers.assign(available.begin(), available.end());
    } else {
      for (auto l : cfg.layers) {
        if (!available.contains(l)) {
          throw Error(ErrorKind::kConfig,
                      fmt::format("layer {} has no train split in the dump (available: {})", l,
                                  fmt::join(available, ", ")));
        }
      }
      s.layers = cfg.layers;
      std::sort(s.layers.begin(), s.layers.end());
      s.layers.erase(std::unique(s.layers.begin(), s.layers.end()), s.layers.end());
    }
    if (s.layers.empty()) throw Error(ErrorKind::kConfig, "empty run: the dump has no layers");
    for (auto r : cfg.ranks) {
      if (r > m.hidden_dim) {
        throw Error(ErrorKind::kConfig,
                    fmt::format("rank {} exceeds hidden_dim {}", r, m.hidden_dim));
      }
    }
    for (auto k : cfg.projection_ks) {
      if (k > m.hidden_dim) {
        throw Error(ErrorKind::kConfig,
                    fmt::format("projection k {} exceeds hidden_dim {}", k, m.hidden_dim));
      }
    }
  });
  stage("neighborhoods", [&] {
    for (auto l : s.layers) {
      LayerInputs& in = s.data[l];
      in.train = s.dump.find(l, store::Split::kTrain);
      in.eval = s.dump.find(l, store::Split::kTest);
      if (!in.eval) {
        spdlog::warn("layer {} has no test split; evaluating on train pairs", l);
        in.eval = in.train;
      }
      in.x = in.train->inputs();
      in.y = in.train->outputs();
      in.index = std::make_unique<nbr::NeighborIndex>(in.x);
    }
  });
  return s;
}

// ---------------------------------------------------------------- fitting

fit::FitConfig fit_config(const RunConfig& cfg, fit::MapClass mc, std::size_t rank) {
  fit::FitConfig fc;
  fc.map_class = mc;
  fc.rank = rank;
  fc.k = cfg.k;
  fc.ridge_scale = cfg.ridge_scale;
  fc.mlp.hidden = cfg.mlp_hidden;
  fc.mlp.steps = cfg.mlp_steps;
  fc.mlp.step_size = cfg.mlp_step_size;
  fc.mlp.seed = derive_seed(cfg.seed, 7);
  return fc;
}

Eigen::VectorXd row_of(const std::vector<float>& v) {
  return Eigen::Map<const Eigen::VectorXf>(v.data(), static_cast<Eigen::Index>(v.size()))
      .cast<double>();
}

struct LayerFit {
  std::vector<fit::TokenwiseMap> anchor_maps;
  std::vector<std::size_t> anchors;  // train pair indices
  std::shared_ptr<const nbr::NeighborIndex> anchor_index;
  std::vector<std::optional<double>> in_sample;
  std::vector<fit::TokenwiseMap> eval_maps;  // one per eval pair
  std::vector<geom::GeometryRecord> geometry;
  double mean_ridge = 0.0;
  // Map for an arbitrary input vector under the configured assignment.
  std::function<fit::TokenwiseMap(const Eigen::VectorXd&)> assign;
};

LayerFit fit_layer(const RunConfig& cfg, const LayerInputs& in, std::uint32_t layer,
                   const fit::FitConfig& fc) {
  LayerFit lf;
  const std::size_t n = in.train->size();
  if (fc.map_class == fit::MapClass::kGlobalDiagPsd) {
    auto global = std::make_shared<fit::TokenwiseMap>(fit::fit_global_diag(*in.train));
    lf.anchor_maps = {*global};
    lf.assign = [global](const Eigen::VectorXd&) { return *global; };
    lf.in_sample.resize(n);
    parallel_for(n, [&](std::size_t i) {
      lf.in_sample[i] = analysis::rel_err(fit::apply_map(*global, in.x.row(i).transpose()),
                                          in.y.row(i).transpose());
    });
  } else {
    if (fc.k > in.index->usable_size()) {
      throw Error(ErrorKind::kConfig,
                  fmt::format("k={} exceeds the {} usable train pairs of layer {}", fc.k,
                              in.index->usable_size(), layer));
    }
    std::size_t m = cfg.anchors;
    if (m > n) {
      spdlog::warn("layer {}: anchors={} exceeds {} train pairs; using all", layer, m, n);
      m = n;
    }
    lf.anchors = nbr::select_anchors(*in.train, m, derive_seed(cfg.seed, 100 + layer));
    lf.anchor_maps.resize(m);
    lf.in_sample.resize(m);
    parallel_for(m, [&](std::size_t i) {
      const std::size_t a = lf.anchors[i];
      lf.anchor_maps[i] = fit::fit_anchor(in.x, in.y, *in.index, a, fc);
      lf.in_sample[i] = analysis::rel_err(
          fit::apply_map(lf.anchor_maps[i], in.x.row(static_cast<Eigen::Index>(a)).transpose()),
          in.y.row(static_cast<Eigen::Index>(a)).transpose());
    });
    Eigen::MatrixXd anchor_rows(static_cast<Eigen::Index>(m), in.x.cols());
    for (std::size_t i = 0; i < m; ++i) {
      anchor_rows.row(static_cast<Eigen::Index>(i)) =
          in.x.row(static_cast<Eigen::Index>(lf.anchors[i]));
    }
    lf.anchor_index = std::make_shared<const nbr::NeighborIndex>(std::move(anchor_rows));

    // The closure outlives this frame, so it shares ownership of what it reads.
    const auto maps = std::make_shared<const std::vector<fit::TokenwiseMap>>(lf.anchor_maps);
    const auto index = lf.anchor_index;
    const LayerInputs* data = &in;
    if (cfg.assignment == "interpolate") {
      const std::size_t p = cfg.interp_p;
      lf.assign = [maps, index, p](const Eigen::VectorXd& h) {
        return fit::interpolate_maps(*maps, *index, h, p);
      };
    } else if (cfg.assignment == "nearest_anchor") {
      lf.assign = [maps, index](const Eigen::VectorXd& h) {
        return (*maps)[index->knn(h, 1).member_indices.front()];
      };
    } else {
      lf.assign = [data, fc](const Eigen::VectorXd& h) {
        return fit::fit_at_query(data->x, data->y, *data->index, h, fc);
      };
    }
  }

  const auto& pairs = in.eval->pairs;
  lf.eval_maps.resize(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) { lf.eval_maps[i] = lf.assign(row_of(pairs[i].h_in)); });
  double ridge = 0.0;
  for (const auto& map : lf.eval_maps) ridge += map.ridge;
  lf.mean_ridge = lf.eval_maps.empty() ? 0.0 : ridge / static_cast<double>(lf.eval_maps.size());
  return lf;
}

// ---------------------------------------------------------------- reports

json row_json(const analysis::RegimeRow& r) {
  return {{"count", r.count},
          {"empty", r.count == 0},
          {"mean_rel_err", opt(r.mean_rel_err)},
          {"mean_kl", opt(r.mean_kl)},
          {"rho", opt(r.rho)},
          {"infinite_kl", r.infinite_kl}};
}

json regimes_json(std::span<const analysis::EvalRecord> records) {
  std::size_t usable = 0;
  for (const auto& r : records) usable += r.rel_err.has_value();
  if (usable < 3) return nullptr;
  const analysis::RegimeTable t = analysis::bin_regimes(records);
  json rows;
  for (auto r : analysis::kRegimes) {
    rows[std::string(analysis::regime_name(r))] = row_json(t.rows[static_cast<std::size_t>(r)]);
  }
  return {{"map_class", t.map_class},
          {"thresholds",
           {{"low_mid", t.low_threshold},
            {"mid_high", t.high_threshold},
            {"method", "RelErr terciles: sorted values at ceil(n/3)-1 and ceil(2n/3)-1"}}},
          {"rows", rows},
          {"overall", row_json(t.overall)},
          {"degenerate", t.degenerate}};
}

json summary_json(const analysis::LayerSummary& s) {
  json proj = json::array();
  for (const auto& p : s.projections) {
    proj.push_back({{"k", p.k}, {"full", opt(p.full)}, {"tok", opt(p.tok)}, {"res", opt(p.res)}});
  }
  return {{"count", s.count},
          {"spearman_rho", opt(s.spearman_rho)},
          {"mean_rel_err", opt(s.mean_rel_err)},
          {"median_rel_err", opt(s.median_rel_err)},
          {"mean_kl", opt(s.mean_kl)},
          {"infinite_kl", s.infinite_kl},
          {"degenerate_rel_err", s.degenerate_rel_err},
          {"mean_residual_norm", opt(s.mean_residual_norm)},
          {"median_residual_norm", opt(s.median_residual_norm)},
          {"mean_residual_ratio", opt(s.mean_residual_ratio)},
          {"mean_align_full_tok", opt(s.mean_align_full_tok)},
          {"mean_align_res_tok", opt(s.mean_align_res_tok)},
          {"mean_signed_full_tok", opt(s.mean_signed_full_tok)},
          {"mean_signed_res_tok", opt(s.mean_signed_res_tok)},
          {"mean_angle_full_tok", opt(s.mean_angle_full_tok)},
          {"mean_angle_res_tok", opt(s.mean_angle_res_tok)},
          {"degenerate_full_tok", s.degenerate_full_tok},
          {"degenerate_res_tok", s.degenerate_res_tok},
          {"geometry_count", s.geometry_count},
          {"projections", proj}};
}

std::string records_csv(const std::vector<analysis::EvalRecord>& records,
                        const std::vector<geom::GeometryRecord>& geometry,
                        const std::vector<std::size_t>& ks) {
  std::string s =
      "seq_id,pos,rel_err,kl,norm_full,norm_tok,norm_res,align_full_tok,align_res_tok,"
      "angle_full_tok,angle_res_tok";
  for (auto k : ks) s += fmt::format(",proj_full_{0},proj_tok_{0},proj_res_{0}", k);
  s += "\n";
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const auto& g = geometry[i];
    if (r.seq_id != g.seq_id || r.pos != g.pos) {
      throw Error(ErrorKind::kCompute, "records and geometry are out of step");
    }
    const auto align = [](const std::optional<geom::Alignment>& a, bool angle) {
      return a ? num(angle ? a->angle_deg : a->abs_cos) : std::string("NA");
    };
    s += fmt::format("{},{},{},{},{},{},{},{},{},{},{}", r.seq_id, r.pos, num(r.rel_err),
                     num(r.kl), num(g.norm_full), num(g.norm_tok), num(g.norm_res),
                     align(g.full_tok, false), align(g.res_tok, false), align(g.full_tok, true),
                     align(g.res_tok, true));
    for (const auto& p : g.projections) {
      s += fmt::format(",{},{},{}", num(p.full), num(p.tok), num(p.res));
    }
    s += "\n";
  }
  return s;
}

void write_plots(OutputTree& out, const fs::path& dir, const std::string& title,
                 const std::vector<std::uint32_t>& layers,
                 const std::vector<std::vector<analysis::EvalRecord>>& records,
                 const std::vector<analysis::LayerSummary>& summaries,
                 const std::vector<geom::GeometryRecord>& pooled_geometry,
                 const analysis::LayerSummary& pooled) {
  std::vector<svg::Series> scatter;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    svg::Series s{fmt::format("layer {}", layers[i]), {}, {}};
    for (const auto& r : records[i]) {
      if (r.rel_err && std::isfinite(r.kl)) {
        s.x.push_back(*r.rel_err);
        s.y.push_back(r.kl);
      }
    }
    scatter.push_back(std::move(s));
  }
  out.write(dir / "relerr_vs_kl.svg",
            svg::scatter({title + ": RelErr vs KL", "RelErr", "KL (nats)", true}, scatter));

  svg::Series rho{"spearman rho", {}, {}}, norm{"mean ||r||", {}, {}}, ratio{"mean ||r||/||full||", {}, {}};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const double x = layers[i];
    if (summaries[i].spearman_rho) rho.x.push_back(x), rho.y.push_back(*summaries[i].spearman_rho);
    if (summaries[i].mean_residual_norm) {
      norm.x.push_back(x), norm.y.push_back(*summaries[i].mean_residual_norm);
    }
    if (summaries[i].mean_residual_ratio) {
      ratio.x.push_back(x), ratio.y.push_back(*summaries[i].mean_residual_ratio);
    }
  }
  out.write(dir / "layer_rho.svg", svg::lines({title + ": error/perturbation rho", "layer", "rho"}, {rho}));
  out.write(dir / "residual_norm.svg",
            svg::lines({title + ": residual magnitude", "layer", "norm"}, {norm, ratio}));

  svg::Series full{"align(full, tok)", {}, {}}, res{"align(res, tok)", {}, {}};
  for (const auto& g : pooled_geometry) {
    if (g.full_tok) full.y.push_back(g.full_tok->abs_cos);
    if (g.res_tok) res.y.push_back(g.res_tok->abs_cos);
  }
  out.write(dir / "alignment_hist.svg",
            svg::histogram({title + ": alignment with tokenwise update", "|cos|", "fraction"},
                           {full, res}, 0.0, 1.0, 20));

  std::vector<std::string> cats;
  svg::Series pf{"full", {}, {}}, pt{"tok", {}, {}}, pr{"res", {}, {}};
  for (const auto& p : pooled.projections) {
    cats.push_back(fmt::format("k={}", p.k));
    pf.y.push_back(p.full.value_or(std::nan("")));
    pt.y.push_back(p.tok.value_or(std::nan("")));
    pr.y.push_back(p.res.value_or(std::nan("")));
  }
  out.write(dir / "projection_bars.svg",
            svg::bars({title + ": energy in top-k subspace", "", "fraction"}, cats, {pf, pt, pr}));
}

std::string fit_tag(fit::MapClass mc, std::size_t rank) {
  return mc == fit::MapClass::kLocalLowRank ? fmt::format("{}_r{}", fit::class_name(mc), rank)
                                            : std::string(fit::class_name(mc));
}

// Runs fitting, geometry, interventions and analysis for every configured
// result set; files go under `prefix` inside `out`. Returns the report.
json evaluate(const RunConfig& cfg, Session& s, OutputTree& out, const fs::path& prefix) {
  const auto d = s.dump.manifest.hidden_dim;
  json fits = json::array();
  for (const auto& class_name : cfg.map_class) {
    const fit::MapClass mc = fit::parse_class(class_name);
    const std::vector<std::size_t> ranks =
        mc == fit::MapClass::kLocalLowRank ? cfg.ranks : std::vector<std::size_t>{d};
    for (const std::size_t rank : ranks) {
      const fit::FitConfig fc = fit_config(cfg, mc, rank);
      const std::string tag = fit_tag(mc, rank);
      const bool heuristic = mc == fit::MapClass::kMlp;
      spdlog::info("fitting {} (k={}, assignment={})", tag, cfg.k, cfg.assignment);

      std::map<std::uint32_t, LayerFit> layer_fits;
      json fit_layers = json::array();
      std::vector<double> pooled_in_sample;
      for (auto l : s.layers) {
        const LayerInputs& in = s.data.at(l);
        LayerFit& lf = layer_fits[l];
        lf = stage("fit", [&] { return fit_layer(cfg, in, l, fc); });
        lf.geometry = stage("geometry", [&] {
          return geom::geometry_batch(*in.eval, lf.eval_maps, cfg.projection_ks,
                                      cfg.heuristic_projection);
        });
        stage("report", [&] {
          fit::MapSet set;
          set.layer_index = l;
          set.map_class = mc;
          set.dim = d;
          set.rank = static_cast<std::uint32_t>(rank);
          set.maps = lf.anchor_maps;
          fit::write_map_set(set, out.path(prefix / tag / fit::map_file_name(l)));
          std::string csv = "anchor,seq_id,pos,rel_err\n";
          std::vector<double> errs;
          for (std::size_t i = 0; i < lf.in_sample.size(); ++i) {
            const std::size_t a = lf.anchors.empty() ? i : lf.anchors[i];
            const auto& p = in.train->pairs[a];
            csv += fmt::format("{},{},{},{}\n", a, p.seq_id, p.pos, num(lf.in_sample[i]));
            if (lf.in_sample[i]) errs.push_back(*lf.in_sample[i]);
          }
          out.write(prefix / tag / fmt::format("in_sample_{}.csv", l), csv);
          pooled_in_sample.insert(pooled_in_sample.end(), errs.begin(), errs.end());
          const double mean_err =
              errs.empty() ? std::nan("")
                           : std::accumulate(errs.begin(), errs.end(), 0.0) / errs.size();
          fit_layers.push_back({{"layer", l},
                                {"train_pairs", in.train->size()},
                                {"eval_pairs", in.eval->size()},
                                {"eval_split", store::split_name(in.eval->split)},
                                {"anchors", lf.anchor_maps.size()},
                                {"mean_ridge", lf.mean_ridge},
                                {"in_sample",
                                 {{"count", errs.size()},
                                  {"median_rel_err", opt(analysis::median(errs))},
                                  {"mean_rel_err", opt(mean_err)}}}});
        });
      }

      json results = json::array();
      for (const auto& mode_name : cfg.mode) {
        const eval::InterventionMode mode = eval::parse_mode(mode_name);
        const fs::path dir = prefix / tag / mode_name;
        std::vector<std::vector<analysis::EvalRecord>> all_records;
        std::vector<analysis::LayerSummary> summaries;
        std::vector<analysis::EvalRecord> pooled_records;
        std::vector<geom::GeometryRecord> pooled_geometry;
        json layers_json = json::array();
        for (auto l : s.layers) {
          const LayerInputs& in = s.data.at(l);
          const LayerFit& lf = layer_fits.at(l);
          std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> where;
          for (std::size_t i = 0; i < in.eval->pairs.size(); ++i) {
            where[{in.eval->pairs[i].seq_id, in.eval->pairs[i].pos}] = i;
          }
          const eval::Predictor predict = [&](std::uint32_t seq, std::uint32_t pos,
                                              const Eigen::VectorXd& h) {
            if (auto it = where.find({seq, pos}); it != where.end()) {
              return fit::apply_map(lf.eval_maps[it->second], h);
            }
            return fit::apply_map(lf.assign(h), h);
          };
          eval::InterventionResult ir = stage("intervene", [&] {
            if (s.client) {
              eval::RemoteBackend remote(s.client, *in.eval, s.dump.manifest.seq_len);
              return eval::intervene_layer(remote, *in.eval, predict, mode, fit::class_name(mc),
                                           rank);
            }
            return eval::intervene_layer(*s.toy, *in.eval, predict, mode, fit::class_name(mc),
                                         rank);
          });
          stage("analyze", [&] {
            const analysis::LayerSummary sum = analysis::summarize_layer(ir.records, lf.geometry, l);
            json lj = summary_json(sum);
            lj["layer"] = l;
            std::optional<double> seq_mean;
            if (!ir.sequence_mean_kl.empty()) {
              double t = 0.0;
              for (const auto& [seq, v] : ir.sequence_mean_kl) t += v;
              seq_mean = t / static_cast<double>(ir.sequence_mean_kl.size());
            }
            lj["mean_sequence_kl"] = opt(seq_mean);
            lj["regimes"] = regimes_json(ir.records);
            layers_json.push_back(lj);
            summaries.push_back(sum);
          });
          stage("report", [&] {
            out.write(dir / fmt::format("records_{}.csv", l),
                      records_csv(ir.records, lf.geometry, cfg.projection_ks));
            if (!ir.sequence_mean_kl.empty()) {
              std::string csv = "seq_id,mean_kl\n";
              for (const auto& [seq, v] : ir.sequence_mean_kl) csv += fmt::format("{},{}\n", seq, num(v));
              out.write(dir / fmt::format("sequence_kl_{}.csv", l), csv);
            }
          });
          pooled_records.insert(pooled_records.end(), ir.records.begin(), ir.records.end());
          pooled_geometry.insert(pooled_geometry.end(), lf.geometry.begin(), lf.geometry.end());
          all_records.push_back(std::move(ir.records));
        }
        json result = stage("analyze", [&] {
          const analysis::LayerSummary pooled =
              analysis::summarize_layer(pooled_records, pooled_geometry, 0);
          json overall = summary_json(pooled);
          json model = nullptr;
          try {
            const analysis::ModelSummary ms = analysis::model_summary(summaries);
            model = {{"mean_rho", ms.mean_rho},
                     {"layers_used", ms.layers_used},
                     {"layers_excluded", ms.layers_excluded}};
          } catch (const Error& e) {
            spdlog::warn("{} {}: {}", tag, mode_name, e.what());
          }
          if (cfg.plots) {
            write_plots(out, dir / "plots", tag, s.layers, all_records, summaries,
                        pooled_geometry, pooled);
          }
          return json{{"mode", mode_name},
                      {"dir", dir.generic_string()},
                      {"layers", layers_json},
                      {"overall", overall},
                      {"regimes", regimes_json(pooled_records)},
                      {"model_summary", model}};
        });
        results.push_back(result);
        if (!result["model_summary"].is_null()) {
          spdlog::info("{} [{}]: mean rho {:.4f}", tag, mode_name,
                       result["model_summary"]["mean_rho"].get<double>());
        }
      }
      fits.push_back({{"tag", tag},
                      {"map_class", class_name},
                      {"rank", rank},
                      {"k", cfg.k},
                      {"assignment", mc == fit::MapClass::kGlobalDiagPsd ? "global" : cfg.assignment},
                      {"ridge_scale", cfg.ridge_scale},
                      {"projection_heuristic", heuristic},
                      {"in_sample_median_rel_err", opt(analysis::median(pooled_in_sample))},
                      {"layers", fit_layers},
                      {"results", results}});
    }
  }
  const auto& m = s.dump.manifest;
  return {{"config", to_json(cfg)},
          {"dump",
           {{"model_name", m.model_name},
            {"num_layers", m.num_layers},
            {"hidden_dim", m.hidden_dim},
            {"seq_len", m.seq_len},
            {"seed", m.seed}}},
          {"backend", s.client ? "endpoint" : "toy"},
          {"notes",
           {"maps are fitted on train-split neighborhoods; RelErr, KL and geometry are measured "
            "on the eval split",
            "overall rows pool tokens across regimes and layers",
            "infinite KL values count as maximal in rho and are excluded from means",
            "projection metrics of mlp maps use the network Jacobian and are heuristic"}},
          {"fits", fits}};
}

}  // namespace

void cmd_run(const RunConfig& cfg) {
  stage("config", [&] { validate(cfg); });
  OutputTree out(cfg.out);
  out.write("run.json", config_json(cfg));
  Session s = ingest(cfg, out);
  const json report = evaluate(cfg, s, out, "");
  out.write("report.json", report.dump(2) + "\n");
  out.commit();
  spdlog::info("report written to {}", (out.root() / "report.json").string());
}

void cmd_sweep(const RunConfig& cfg) {
  stage("config", [&] {
    validate(cfg);
    if (cfg.sweep.empty() || cfg.sweep_values.empty()) {
      throw Error(ErrorKind::kConfig, "sweep needs sweep=rank|k and a non-empty sweep_values list");
    }
  });
  OutputTree out(cfg.out);
  out.write("run.json", config_json(cfg));
  Session s = ingest(cfg, out);
  std::size_t min_usable = std::numeric_limits<std::size_t>::max();
  for (const auto& [l, in] : s.data) min_usable = std::min(min_usable, in.index->usable_size());

  // sweep.csv holds one pooled row per value and result set; per-layer rows
  // go to sweep_layers.csv.
  const std::string header =
      "sweep,value,tag,mode,layer,status,in_sample_median_rel_err,in_sample_mean_rel_err,"
      "mean_rel_err,spearman_rho,mean_kl\n";
  std::string csv = header, layer_csv = header;
  json rows = json::array();
  std::map<std::string, svg::Series> curves;
  for (const std::size_t v : cfg.sweep_values) {
    RunConfig sub = cfg;
    sub.sweep.clear();
    sub.sweep_values.clear();
    if (cfg.sweep == "rank") {
      sub.ranks = {v};
    } else {
      sub.k = v;
    }
    const fs::path prefix = fmt::format("{}_{}", cfg.sweep, v);
    const bool skip = (cfg.sweep == "k" && v > min_usable) ||
                      (cfg.sweep == "rank" && (v == 0 || v > s.dump.manifest.hidden_dim)) ||
                      v == 0;
    if (skip) {
      spdlog::warn("sweep {}={} skipped: outside the data (max k {}, hidden_dim {})", cfg.sweep, v,
                   min_usable, s.dump.manifest.hidden_dim);
      csv += fmt::format("{},{},,,all,skipped,NA,NA,NA,NA,NA\n", cfg.sweep, v);
      rows.push_back({{"value", v}, {"status", "skipped"}});
      continue;
    }
    out.write(prefix / "run.json", config_json(sub));
    const json report = evaluate(sub, s, out, prefix);
    out.write(prefix / "report.json", report.dump(2) + "\n");
    for (const auto& f : report["fits"]) {
      std::map<std::uint32_t, json> fit_by_layer;
      for (const auto& fl : f["layers"]) fit_by_layer[fl["layer"].get<std::uint32_t>()] = fl;
      for (const auto& r : f["results"]) {
        const auto emit = [&](const std::string& layer, const json& in_sample, const json& sum) {
          const auto val = [](const json& j) {
            return j.is_null() ? std::string("NA") : num(j.get<double>());
          };
          (layer == "all" ? csv : layer_csv) +=
              fmt::format("{},{},{},{},{},ok,{},{},{},{},{}\n", cfg.sweep, v,
                             f["tag"].get<std::string>(), r["mode"].get<std::string>(), layer,
                             val(in_sample["median_rel_err"]), val(in_sample["mean_rel_err"]),
                             val(sum["mean_rel_err"]), val(sum["spearman_rho"]), val(sum["mean_kl"]));
          rows.push_back({{"value", v},
                          {"status", "ok"},
                          {"tag", f["tag"]},
                          {"mode", r["mode"]},
                          {"layer", layer},
                          {"in_sample_median_rel_err", in_sample["median_rel_err"]},
                          {"in_sample_mean_rel_err", in_sample["mean_rel_err"]},
                          {"mean_rel_err", sum["mean_rel_err"]},
                          {"spearman_rho", sum["spearman_rho"]},
                          {"mean_kl", sum["mean_kl"]}});
          const std::string key = fmt::format("{} {} layer {}", std::string(f["map_class"]),
                                              r["mode"].get<std::string>(), layer);
          auto& c = curves[key];
          c.name = key;
          if (!in_sample["median_rel_err"].is_null()) {
            c.x.push_back(static_cast<double>(v));
            c.y.push_back(in_sample["median_rel_err"].get<double>());
          }
        };
        for (const auto& lj : r["layers"]) {
          const auto l = lj["layer"].get<std::uint32_t>();
          emit(std::to_string(l), fit_by_layer.at(l)["in_sample"], lj);
        }
        emit("all", json{{"median_rel_err", f["in_sample_median_rel_err"]}, {"mean_rel_err", nullptr}},
             r["overall"]);
      }
    }
  }
  out.write("sweep.csv", csv);
  out.write("sweep_layers.csv", layer_csv);
  out.write("sweep.json", json{{"sweep", cfg.sweep}, {"values", cfg.sweep_values}, {"rows", rows}}
                              .dump(2) + "\n");
  if (cfg.plots) {
    std::vector<svg::Series> series;
    for (auto& [key, c] : curves) series.push_back(c);
    out.write("sweep.svg", svg::lines({fmt::format("{} sweep", cfg.sweep), cfg.sweep,
                                       "median in-sample RelErr"},
                                      series));
  }
  out.commit();
}

}  // namespace layerlens::pipeline
