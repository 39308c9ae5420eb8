#include "avmoe/check/grad_suite.hpp"
#include "avmoe/train/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <iostream>

using namespace avmoe;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kNumericAbort = 3;

std::uint64_t parse_seed(const std::string& text, const char* source) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw ConfigError(std::string(source) + ": '" + text + "' is not a seed");
  return v;
}

void apply_seed_overrides(train::TrainConfig& cfg, const std::string& flag) {
  if (const char* env = std::getenv("AVMOE_SEED"); env && *env) cfg.seed = parse_seed(env, "AVMOE_SEED");
  if (!flag.empty()) cfg.seed = parse_seed(flag, "--seed");
}

int cmd_train(const std::string& config_path, const std::string& out, const std::string& seed) {
  train::TrainConfig cfg = train::load_config(config_path);
  apply_seed_overrides(cfg, seed);
  const train::RunResult run = train::train(cfg);
  train::write_run(run, out);
  std::cout << "wrote " << out << "\n";
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& config_path, const std::vector<std::string>& presets,
             bool sweep, const std::string& seed) {
  train::TrainConfig cfg;
  if (!config_path.empty()) cfg = train::load_config(config_path);
  apply_seed_overrides(cfg, seed);
  model::ModelConfig mcfg;
  ParameterStore params;
  model::load_checkpoint(checkpoint, mcfg, params);
  json out;
  json ter = json::object();
  const std::vector<std::string>& names = presets.empty() ? cfg.eval.presets : presets;
  for (const std::string& p : names) ter[p] = train::eval_ter(cfg, mcfg, params, p, cfg.eval.pairs);
  out["ter"] = ter;
  if (sweep) {
    json curve = json::array();
    for (const train::SnrPoint& p : train::eval_group_load_vs_snr(cfg, mcfg, params, cfg.eval.snr_list, cfg.eval.pairs))
      curve.push_back({{"snr_db", p.snr_db}, {"mean_qv", p.mean_qv}, {"std_qv", p.std_qv}});
    out["group_load_vs_snr"] = curve;
  }
  std::cout << out.dump(2) << "\n";
  return kOk;
}

int cmd_gradcheck(const std::string& module, int seeds) {
  bool ok = true;
  for (const check::GradSuiteEntry& e : check::run_grad_suite(module, seeds)) {
    const bool pass = e.max_error < 1e-4;
    ok &= pass;
    std::printf("%-8s %-32s max_rel_err=%.3e %s\n", e.module.c_str(), e.name.c_str(), e.max_error,
                pass ? "ok" : "FAIL");
  }
  return ok ? kOk : kNumericAbort;
}

int cmd_report(const std::string& dir) {
  const json report = train::build_report(dir);
  metrics::write_text_atomic(std::filesystem::path(dir) / "report.json", report.dump(2) + "\n");
  std::cout << report.dump(2) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Audio-visual mixture of experts and corrupted prediction training kit"};
  app.require_subcommand(1);

  std::string seed;
  std::string config_path, out_dir = "run";
  auto* train_cmd = app.add_subcommand("train", "train a configured regime");
  train_cmd->add_option("config", config_path, "config JSON")->required();
  train_cmd->add_option("--out", out_dir, "run directory");
  train_cmd->add_option("--seed", seed, "overrides the config seed");

  std::string checkpoint, eval_config;
  std::vector<std::string> presets;
  bool sweep = false;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint.json")->required();
  eval_cmd->add_option("--config", eval_config, "config JSON for eval data");
  eval_cmd->add_option("--preset", presets, "corruption presets for TER");
  eval_cmd->add_flag("--snr-sweep", sweep, "group load vs SNR curve");
  eval_cmd->add_option("--seed", seed, "overrides the config seed");

  std::string module;
  int seeds = 20;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  grad_cmd->add_option("--module", module, "core, losses, moe or distill");
  grad_cmd->add_option("--seeds", seeds, "random instances per operation");

  std::string run_dir;
  auto* report_cmd = app.add_subcommand("report", "plot-ready report of a finished run");
  report_cmd->add_option("--run-dir", run_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (*train_cmd) return cmd_train(config_path, out_dir, seed);
    if (*eval_cmd) return cmd_eval(checkpoint, eval_config, presets, sweep, seed);
    if (*grad_cmd) return cmd_gradcheck(module, seeds);
    if (*report_cmd) return cmd_report(run_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kNumericAbort;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kConfigError;
}
