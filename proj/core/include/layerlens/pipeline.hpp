#pragma once

#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

// End-to-end orchestration behind the layerlens CLI.
namespace layerlens::pipeline {

struct RunConfig {
  std::string out;
  // Existing dump directory; empty generates a toy dump under <out>/dump.
  std::string dump;

  // Toy generation. toy_checkpoint "random" builds seeded random weights.
  std::string toy_checkpoint;  // default: bundled trained checkpoint
  std::string corpus;          // default: bundled text
  std::size_t train_seqs = 250;
  std::size_t test_seqs = 256;
  std::size_t seq_len = 64;
  std::size_t positions = 8;  // sampled positions per sequence
  std::string test_positions = "sampled";  // or "all"
  double train_fraction = 0.8;
  std::size_t toy_layers = 4, toy_dim = 32, toy_heads = 2;

  // Toy training (train subcommand).
  std::size_t train_steps = 4000;
  std::size_t train_batch = 16;
  double train_lr = 3e-3;
  double target_loss = std::log(256.0) / 2.0;

  // Fitting.
  std::vector<std::uint32_t> layers;  // empty: every transition in the dump
  std::vector<std::string> map_class = {"local_low_rank"};
  std::vector<std::size_t> ranks = {8};
  std::size_t k = 64;
  double ridge_scale = 1e-2;
  std::string assignment = "local";  // local | interpolate | nearest_anchor
  std::size_t anchors = 256;
  std::size_t interp_p = 4;
  std::size_t mlp_hidden = 0;
  std::size_t mlp_steps = 500;
  double mlp_step_size = 1e-2;

  // Measurement.
  std::vector<std::size_t> projection_ks = {1, 4, 8};
  bool heuristic_projection = true;
  std::vector<std::string> mode = {"all"};
  std::string endpoint;
  double endpoint_timeout = 60.0;
  std::size_t max_in_flight = 4;
  bool plots = true;

  std::uint64_t seed = 0;

  // Sweep subcommand: "rank" or "k" over sweep_values.
  std::string sweep;
  std::vector<std::size_t> sweep_values;
};

// Builds a config from defaults, an optional JSON file, and `--key=value`
// overrides applied in order. Unknown keys and ill-typed values throw
// Error(kConfig).
RunConfig load_config(const std::optional<std::filesystem::path>& file,
                      const std::vector<std::pair<std::string, std::string>>& overrides);

// Checks ranges and enumerations that do not need any data.
void validate(const RunConfig& cfg);

// Resolved config as a JSON document (the run.json format).
std::string config_json(const RunConfig& cfg);

std::filesystem::path default_data_dir();

void cmd_train(const RunConfig& cfg);
void cmd_toygen(const RunConfig& cfg);
void cmd_run(const RunConfig& cfg);
void cmd_sweep(const RunConfig& cfg);
std::string inspect(const std::filesystem::path& dump_dir);

// Process exit code for an exception escaping a command: 2 config, 3
// environment or endpoint, 4 compute.
int exit_code(const std::exception& e);

}  // namespace layerlens::pipeline
