#include <iostream>

#include <CLI11.hpp>

#include "run_config.hpp"

int main(int argc, char** argv) {
  using namespace ospd::cli;
  CLI::App app{"Obfuscated secure partitioned decoding: demo, verification suites and benchmarks"};
  app.fallthrough();
  app.require_subcommand(1);

  RunConfig config;
  std::string config_path;
  app.add_option("--config", config_path, "JSON config with model/obfuscation/bench/demo sections")
      ->check(CLI::ExistingFile);
  auto* seed = app.add_option("--seed", config.seed, "seed for the model, the session and the suites");
  app.add_option("--out", config.out, "demo: transcript dump, verify: JSON summary, bench: CSV path");
  app.add_flag("-v,--verbose", config.verbosity, "more output; repeatable");

  auto* demo = app.add_subcommand("demo", "tag, obfuscate, prefill, decode through the controller, winnow");
  std::string suite = "all";
  auto* verify = app.add_subcommand("verify", "run a property suite");
  verify->add_option("suite", suite, "theorem1 | gqs | bounds | protocol | scaling | all")
      ->check(CLI::IsMember({"theorem1", "gqs", "bounds", "protocol", "scaling", "all"}));
  auto* bench = app.add_subcommand("bench", "run the mode sweep and write CSV");

  CLI11_PARSE(app, argc, argv);
  config.seed_set = seed->count() > 0;

  try {
    if (!config_path.empty()) {
      config.config_path = config_path;
      apply_config_file(config, config.config_path);
    }
    if (demo->parsed()) return cmd_demo(config, std::cout);
    if (verify->parsed()) return cmd_verify(config, suite, std::cout);
    if (bench->parsed()) {
      config.bench.base.seed = config.seed;
      return cmd_bench(config, std::cout);
    }
  } catch (const ospd::ObfuscationAbort& e) {
    std::cerr << "obfuscation abort: " << e.what() << '\n';
    return kObfuscationAbort;
  } catch (const ospd::ProtocolError& e) {
    std::cerr << "protocol violation: " << e.what() << '\n';
    return kProtocolViolation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvariantFailure;
  }
  return kInvariantFailure;
}
