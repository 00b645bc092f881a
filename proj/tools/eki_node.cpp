#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "ekinode/experiment.hpp"

using namespace ekinode;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError({"config: cannot read '" + path + "'"});
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// A path to a JSON file, or the name of a built-in preset.
ExperimentConfig load_config(const std::string& ref) {
  if (!std::ifstream(ref) && find_preset(ref)) return preset(ref);
  return config_from_string(read_file(ref));
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("EKI_NODE_SEED");
  if (s == nullptr || *s == '\0') return std::nullopt;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != std::string(s).size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError({std::string("EKI_NODE_SEED: not an unsigned integer: '") + s + "'"});
  }
}

int cmd_run(const std::string& config_ref, std::optional<std::uint64_t> seed, std::string out) {
  ExperimentConfig c = load_config(config_ref);
  if (auto s = env_seed()) c.seed = *s;
  if (seed) c.seed = *seed;
  if (out.empty()) out = c.output_dir;
  const RunResult r = run_experiment(c, out);
  std::cout << std::setprecision(6) << c.name << " seed=" << c.seed << " epochs=" << r.epochs_run()
            << " loss=" << r.final_loss << " train_mse=" << r.train_mse << " test_mse=" << r.test_mse;
  if (r.control) std::cout << " mse_vs_optimal=" << r.control->mse_vs_optimal;
  std::cout << " (" << r.runtime_seconds << " s) -> " << out << "\n";
  if (!r.ok) {
    std::cerr << "run failed: " << r.error << "\n";
    return kRuntimeError;
  }
  return kOk;
}

int cmd_table(const std::string& path, std::size_t replicates, const std::string& out) {
  const auto configs = configs_from_json([&] {
    try {
      return json::parse(read_file(path));
    } catch (const json::parse_error& e) {
      throw ConfigError({std::string("<root>: malformed JSON: ") + e.what()});
    }
  }());
  const auto rows = run_table(configs, replicates, out, env_seed());
  std::cout << format_table_text(rows);
  for (const auto& r : rows)
    if (r.failures > 0) {
      std::cerr << r.label << ": " << r.failures << " of " << r.replicates << " runs failed\n";
      return kRuntimeError;
    }
  return kOk;
}

int cmd_plot(const std::string& dir) {
  for (const auto& f : write_plot_data(dir)) std::cout << (fs::path(dir) / "plot" / f).string() << "\n";
  return kOk;
}

int cmd_presets() {
  for (const auto& name : preset_names()) {
    const ExperimentConfig c = preset(name);
    std::cout << name << "\t" << to_string(c.problem) << "\t" << to_string(c.optimizer) << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural ODE training with ensemble Kalman inversion"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  std::string config_ref, configs_path, report_dir, out;
  std::optional<std::uint64_t> seed;
  std::size_t replicates = 1;

  auto* run = app.add_subcommand("run", "Train one configuration");
  run->add_option("--config", config_ref, "JSON config file or preset name")->required();
  run->add_option("--seed", seed, "Seed (overrides config and EKI_NODE_SEED)");
  run->add_option("--out", out, "Output directory (default: the config's output_dir)");

  auto* table = app.add_subcommand("table", "Run configs over replicate seeds and summarize");
  table->add_option("--configs", configs_path, "JSON file listing configs or preset names")->required();
  table->add_option("--replicates", replicates, "Seeds per config")->check(CLI::PositiveNumber);
  std::string table_out = "table";
  table->add_option("--out", table_out, "Output directory");

  auto* plot = app.add_subcommand("plot", "Write plot data and a matplotlib script for a report");
  plot->add_option("--report", report_dir, "Run directory, or a directory of runs")->required();

  auto* presets = app.add_subcommand("presets", "List built-in presets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (run->parsed()) return cmd_run(config_ref, seed, out);
    if (table->parsed()) return cmd_table(configs_path, replicates, table_out);
    if (plot->parsed()) return cmd_plot(report_dir);
    if (presets->parsed()) return cmd_presets();
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kConfigError;
}
