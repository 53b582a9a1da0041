#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "ick/data.hpp"
#include "ick/errors.hpp"
#include "ick/experiment.hpp"

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kRuntime = 3, kIo = 4 };

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int threads = 1;
};

int run(const std::string& command, const Options& opt) {
  try {
    nlohmann::json cfg;
    try {
      cfg = nlohmann::json::parse(ick::read_text(opt.config));
    } catch (const nlohmann::json::parse_error& e) {
      throw ick::ConfigError(opt.config + ": " + e.what());
    }
    if (!cfg.is_object()) throw ick::ConfigError("config must be a JSON object");
    if (!opt.seed && !cfg.contains("seed")) throw ick::ConfigError("seed is required (config field or --seed)");
    std::uint64_t seed = 0;
    if (opt.seed) {
      seed = *opt.seed;
    } else if (!cfg.at("seed").is_number_unsigned()) {
      throw ick::ConfigError("seed must be a non-negative integer");
    } else {
      seed = cfg.at("seed").get<std::uint64_t>();
    }
    std::string out = opt.out;
    if (out.empty()) {
      if (!cfg.contains("out") || !cfg.at("out").is_string()) throw ick::ConfigError("out is required (config field or --out)");
      out = cfg.at("out").get<std::string>();
    }
    if (opt.threads < 1) throw ick::ConfigError("--threads must be >= 1");
    const ick::RunOutput result = ick::run_command(command, cfg, seed, opt.threads);
    ick::write_outputs(out, command, seed, result);
    for (const std::string& f : result.report.flags) std::cerr << "warning: " << f << "\n";
    std::cout << result.report.to_json()["metrics"].dump() << "\n";
    return kOk;
  } catch (const ick::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ick::SchemaError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ick::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const ick::ParseError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Implicit composite kernel experiments"};
  app.require_subcommand(1);
  Options opt;
  std::uint64_t seed = 0;
  for (const std::string& name : ick::command_names()) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", opt.config, "JSON config file")->required();
    sub->add_option("--seed", seed, "overrides the config seed");
    sub->add_option("--out", opt.out, "output directory (overrides config 'out')");
    sub->add_option("--threads", opt.threads, "worker threads for ensembles and sweeps");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }
  CLI::App* sub = app.get_subcommands().front();
  if (sub->count("--seed") > 0) opt.seed = seed;
  return run(sub->get_name(), opt);
}
