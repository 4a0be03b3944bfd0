#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "layerlens/error.hpp"
#include "layerlens/pipeline.hpp"

namespace pl = layerlens::pipeline;

namespace {

// Splits CLI11 extras ("--key=value", or "--key value") into overrides.
std::vector<std::pair<std::string, std::string>> overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0) {
      throw layerlens::Error(layerlens::ErrorKind::kConfig,
                             "unexpected argument '" + a + "'; options take the form --key=value");
    }
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(a.substr(0, eq), a.substr(eq + 1));
    } else if (i + 1 < extras.size() && extras[i + 1].rfind("--", 0) != 0) {
      out.emplace_back(a, extras[i + 1]);
      ++i;
    } else {
      out.emplace_back(a, "");
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"layerlens: tokenwise linearization of transformer layers"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off");

  std::optional<std::string> config;
  std::string dump_dir;
  std::vector<CLI::App*> pipeline_cmds;
  const auto pipeline_cmd = [&](const char* name, const char* help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config, "JSON config file");
    sub->allow_extras();
    sub->footer("Any config key can be overridden with --key=value (e.g. --ranks=4,8 --k=32).");
    pipeline_cmds.push_back(sub);
    return sub;
  };
  CLI::App* train = pipeline_cmd("train", "train the toy model on the bundled corpus");
  CLI::App* toygen = pipeline_cmd("toygen", "write a representation dump from the toy model");
  CLI::App* run = pipeline_cmd("run", "fit maps, intervene, analyze and report");
  CLI::App* sweep = pipeline_cmd("sweep", "run once per rank or k value on shared data");
  CLI::App* inspect = app.add_subcommand("inspect", "print a dump manifest summary");
  inspect->add_option("dump", dump_dir, "dump directory")->required();

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));
  spdlog::set_pattern("[%l] %v");

  try {
    if (inspect->parsed()) {
      std::cout << pl::inspect(dump_dir);
      return 0;
    }
    for (CLI::App* sub : pipeline_cmds) {
      if (!sub->parsed()) continue;
      std::optional<std::filesystem::path> file;
      if (config) file = *config;
      const pl::RunConfig cfg = pl::load_config(file, overrides(sub->remaining()));
      if (sub == train) pl::cmd_train(cfg);
      if (sub == toygen) pl::cmd_toygen(cfg);
      if (sub == run) pl::cmd_run(cfg);
      if (sub == sweep) pl::cmd_sweep(cfg);
    }
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return pl::exit_code(e);
  }
  return 0;
}
