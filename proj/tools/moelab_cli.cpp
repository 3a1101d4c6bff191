// Command-line front end for the MoE backdoor laboratory: corpus generation,
// the three training phases, trigger decoding, evaluation, defenses, report
// and plot emission, and hyperparameter sweeps.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "moelab/config.hpp"
#include "moelab/pipeline.hpp"
#include "moelab/plots.hpp"

using namespace moelab;

namespace {

std::string out_root(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("MOELAB_OUT")) return env;
  return "";
}

void print_error_json(const std::string& type, const std::string& message) {
  std::cerr << nlohmann::json{{"error", {{"type", type}, {"message", message}}}}.dump() << "\n";
}

RunManifest load_or_start(const RunConfig& cfg, const RunPaths& paths, bool fresh) {
  if (fresh || !fs::exists(paths.manifest())) return RunManifest::start(cfg);
  auto m = RunManifest::load(paths.manifest());
  if (m.run_id != cfg.run_id)
    throw ContractViolation("run directory " + paths.root.string() + " belongs to run " + m.run_id);
  return m;
}

int run_command(const std::string& cmd, const std::string& config_path, const std::string& out_flag,
                const std::string& eval_phase, const std::string& sweep_param, const std::string& sweep_values) {
  auto cfg = RunConfig::load(config_path);

  if (cmd == "sweep") {
    if (sweep_param != "sigma" && sweep_param != "alpha")
      throw ConfigError("sweep --param must be 'sigma' or 'alpha'");
    if (sweep_values.empty()) throw ConfigError("sweep requires --values v1,v2,...");
    std::vector<double> values;
    std::stringstream ss(sweep_values);
    std::string item;
    while (std::getline(ss, item, ',')) values.push_back(std::stod(item));

    const std::string root = out_root(out_flag).empty() ? cfg.output_dir : out_root(out_flag);
    const fs::path sweep_dir = fs::path(root) / ("sweep_" + sweep_param);
    fs::create_directories(sweep_dir);
    std::ofstream grid(sweep_dir / ("sweep_" + sweep_param + ".csv"));
    grid << sweep_param << ",run_id,acc_clean,asr_triggered,ppl_clean,ppl_triggered\n";

    for (double v : values) {
      auto patched = nlohmann::json::parse(cfg.raw);
      if (sweep_param == "sigma") {
        patched["trigger"]["sigma"] = v;
      } else {
        patched["sensitivity"]["alpha"] = v;
      }
      auto run_cfg = RunConfig::from_json_text(patched.dump(2));
      auto paths = paths_for(run_cfg, sweep_dir.string());
      paths.ensure_dirs();
      run_pipeline(run_cfg, paths);
      auto report = EvalReport::from_json([&] {
        std::ifstream in(paths.eval_report());
        nlohmann::json j;
        in >> j;
        return j;
      }());
      grid << v << "," << run_cfg.run_id << "," << report.acc_clean << "," << report.asr_triggered << ","
           << report.ppl_clean << "," << report.ppl_triggered << "\n";
      std::cout << "sweep " << sweep_param << "=" << v << ": acc=" << report.acc_clean
                << " asr=" << report.asr_triggered << " -> " << paths.root.string() << "\n";
    }
    std::cout << "sweep: " << values.size() << " runs, grid at " << (sweep_dir / ("sweep_" + sweep_param + ".csv"))
              << "\n";
    return 0;
  }

  auto paths = paths_for(cfg, out_root(out_flag));
  paths.ensure_dirs();

  if (cmd == "report") {
    // read-only: verify artifacts and rebuild the metric table
    auto manifest = RunManifest::load(paths.manifest());
    manifest.verify_artifacts();
    nlohmann::json report{{"run_id", manifest.run_id}, {"phases", manifest.phases}};
    if (fs::exists(paths.eval_report())) {
      std::ifstream in(paths.eval_report());
      nlohmann::json j;
      in >> j;
      report["eval"] = j;
    }
    if (fs::exists(paths.defense_report())) {
      std::ifstream in(paths.defense_report());
      nlohmann::json j;
      in >> j;
      report["defense"] = j;
    }
    std::ofstream out(paths.root / "report.json");
    out << report.dump(2) << "\n";
    emit_plot_data(paths);
    std::cout << "report: artifacts verified, report.json and plots/ written under " << paths.root.string() << "\n";
    return 0;
  }

  RunLock lock(paths);
  auto manifest = load_or_start(cfg, paths, cmd == "gen-data");

  if (cmd == "gen-data") {
    phase_gen_data(cfg, paths, manifest);
    manifest.save(paths.manifest());
    const auto& s = manifest.phases.at("gen-data").at("summary");
    std::cout << "gen-data: " << s.at("train") << " train / " << s.at("eval") << " eval samples, vocab "
              << s.at("vocab") << " -> " << paths.root.string() << "\n";
  } else if (cmd == "baseline") {
    phase_baseline(cfg, paths, manifest);
    manifest.save(paths.manifest());
    const auto& s = manifest.phases.at("baseline").at("summary");
    std::cout << "baseline: final acc " << s.at("final_acc") << ", ppl " << s.at("final_ppl") << "\n";
  } else if (cmd == "pretrain") {
    phase_pretrain(cfg, paths, manifest);
    manifest.save(paths.manifest());
    const auto& s = manifest.phases.at("pretrain").at("summary");
    std::cout << "pretrain: final acc " << s.at("final_acc") << ", asr " << s.at("final_asr") << ", cluster at "
              << paths.cluster_json().string() << "\n";
  } else if (cmd == "decode-trigger") {
    auto decoded = phase_decode_trigger(cfg, paths, manifest);
    manifest.save(paths.manifest());
    std::cout << "decode-trigger: tokens";
    for (int id : decoded.token_ids) std::cout << " " << id;
    std::cout << " -> " << paths.trigger_json().string() << "\n";
  } else if (cmd == "poison-final") {
    phase_poison_final(cfg, paths, manifest);
    manifest.save(paths.manifest());
    const auto& s = manifest.phases.at("poison-final").at("summary");
    std::cout << "poison-final: " << s.at("poisoned") << " poisoned samples with task-coupled triggers\n";
  } else if (cmd == "posttrain") {
    phase_posttrain(cfg, paths, manifest);
    manifest.save(paths.manifest());
    const auto& s = manifest.phases.at("posttrain").at("summary");
    std::cout << "posttrain: final acc " << s.at("final_acc") << ", asr " << s.at("final_asr") << "\n";
  } else if (cmd == "eval") {
    auto report = phase_eval(cfg, paths, manifest, eval_phase);
    manifest.save(paths.manifest());
    std::cout << "eval[" << eval_phase << "]: acc " << report.acc_clean << ", asr " << report.asr_triggered
              << ", ppl " << report.ppl_clean << "/" << report.ppl_triggered << "\n";
  } else if (cmd == "defend") {
    auto rep = phase_defend(cfg, paths, manifest);
    manifest.save(paths.manifest());
    std::cout << "defend: text-level dASR " << rep.text_delta.delta_asr << ", model-level dASR "
              << rep.model_delta.delta_asr << "\n";
  } else {
    throw ConfigError("unknown subcommand " + cmd);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale mixture-of-experts backdoor laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_flag, eval_phase = "posttrain", sweep_param, sweep_values;
  std::vector<std::string> names{"gen-data", "baseline", "pretrain",  "decode-trigger", "poison-final",
                                 "posttrain", "eval",    "defend",    "report",         "sweep"};
  for (const auto& name : names) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "run configuration JSON")->required();
    sub->add_option("--out", out_flag, "output root override (or env MOELAB_OUT)");
    if (name == "eval") sub->add_option("--phase", eval_phase, "checkpoint to evaluate (default posttrain)");
    if (name == "sweep") {
      sub->add_option("--param", sweep_param, "sigma | alpha")->required();
      sub->add_option("--values", sweep_values, "comma-separated values")->required();
    }
  }

  CLI11_PARSE(app, argc, argv);
  const std::string cmd = app.get_subcommands().front()->get_name();

  try {
    return run_command(cmd, config_path, out_flag, eval_phase, sweep_param, sweep_values);
  } catch (const ConfigError& e) {
    print_error_json("config", e.what());
    return 2;
  } catch (const IoError& e) {
    print_error_json("io", e.what());
    return 4;
  } catch (const ContractViolation& e) {
    print_error_json("contract", e.what());
    return 3;
  } catch (const nlohmann::json::exception& e) {
    print_error_json("io", e.what());
    return 4;
  } catch (const std::exception& e) {
    print_error_json("internal", e.what());
    return 1;
  }
}
