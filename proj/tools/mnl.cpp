// Command-line front end: runs scenario configurations, validates them, and
// prints the build version. Exit codes: 0 ok, 2 configuration error,
// 3 numeric failure.

#include <mnl/scenario.hpp>
#include <mnl/version.hpp>

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

int run_command(const std::string& config_path,
                const std::vector<std::string>& sets,
                const std::string& out_dir) {
  try {
    mnl::Json doc = mnl::load_json_file(config_path);
    doc = mnl::apply_overrides(doc, sets);

    const auto diags = mnl::validate_config(doc);
    if (!diags.empty()) {
      for (const auto& d : diags)
        std::cerr << "error: " << d.path << ": " << d.message << "\n";
      return kExitConfig;
    }

    std::optional<std::filesystem::path> out;
    if (!out_dir.empty()) out = out_dir;
    const mnl::ScenarioArtifacts art = mnl::run_scenario(doc, out);
    for (const auto& f : art.files)
      std::cout << (art.dir / f).string() << "\n";
    return kExitOk;
  } catch (const mnl::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const mnl::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  }
}

int validate_command(const std::string& config_path) {
  try {
    const mnl::Json doc = mnl::load_json_file(config_path);
    const auto diags = mnl::validate_config(doc);
    if (diags.empty()) {
      std::cout << "ok\n";
      return kExitOk;
    }
    for (const auto& d : diags)
      std::cerr << "error: " << d.path << ": " << d.message << "\n";
    return kExitConfig;
  } catch (const mnl::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"measurement-noise laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;

  auto* run = app.add_subcommand("run", "run a scenario configuration");
  run->add_option("config", config_path, "scenario configuration (JSON)")
      ->required();
  run->add_option("--set", sets,
                  "override a configuration key, e.g. --set ensemble.seed=7");
  run->add_option("--out", out_dir, "output directory (overrides outputs.dir)");

  std::string validate_path;
  auto* validate =
      app.add_subcommand("validate", "check a configuration without running");
  validate->add_option("config", validate_path, "scenario configuration (JSON)")
      ->required();

  auto* version = app.add_subcommand("version", "print the build version");

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) return run_command(config_path, sets, out_dir);
  if (validate->parsed()) return validate_command(validate_path);
  if (version->parsed()) {
    std::cout << "mnl " << mnl::version_string() << "\n";
    return kExitOk;
  }
  return kExitConfig;
}
