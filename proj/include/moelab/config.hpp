#pragma once

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/common.hpp"
#include "moelab/corpus.hpp"
#include "moelab/errors.hpp"
#include "moelab/evaluator.hpp"
#include "moelab/model.hpp"
#include "moelab/optim.hpp"
#include "moelab/sensitivity.hpp"

namespace moelab {

// One spec of training hyperparameters per phase. Carries the attack
// parameters too so a phase is self-describing.
struct PhaseConfig {
  int epochs = 10;
  int batch_size = 2;
  int grad_accum = 16;
  OptimizerConfig opt;
  uint64_t seed = 0;
  double sigma = 0.5;
  double alpha = 0.5;
  double epsilon = 1e-8;
  int top_s = 3;
  int q = 3;
  float load_balance_coeff = 0.0f;

  void validate(int n_experts) const {
    if (epochs < 1 || batch_size < 1 || grad_accum < 1) throw ConfigError("phase counts must be >= 1");
    if (!(sigma >= 0.0 && sigma <= 1.0)) throw ConfigError("sigma must be in [0,1]");
    if (top_s < 1 || top_s > n_experts) throw ConfigError("top_s must satisfy 1 <= S <= N");
    if (q < 1) throw ConfigError("q must be >= 1");
  }
};

// Whole-run configuration. JSON with defaults for everything except `seed`,
// unknown keys rejected, the raw bytes hashed into the run id and embedded
// verbatim in the run manifest.
struct RunConfig {
  uint64_t seed = 0;
  std::string output_dir = "runs";
  std::string raw;  // exact file bytes
  std::string run_id;

  ModelConfig model;
  SyntheticTaskConfig corpus;
  std::string corpus_mode = "synthetic";  // synthetic | file
  std::string corpus_file;
  double heldout_frac = 0.2;

  double sigma = 0.5;
  int q = 3;
  std::vector<std::string> target_text;  // file mode; synthetic uses label_x
  bool decode_global_top_q = false;

  PhaseConfig baseline, pretrain, posttrain;

  double alpha = 0.5;
  double epsilon = 1e-8;
  int top_s = 3;
  SensitivityMetric metric = SensitivityMetric::kSenScore;
  bool diff_as_variance = false;

  int onion_budget = 3;
  double onion_threshold = 0.0;
  bool onion_flag_increase = false;
  int finetune_epochs = 2;
  float finetune_lr = 5e-4f;

  int eval_max_new = 8;
  MatchMode match = MatchMode::kExact;

  static nlohmann::json defaults() {
    auto phase = [](double lr) {
      return nlohmann::json{{"epochs", 10},      {"batch_size", 2}, {"grad_accum", 16}, {"optimizer", "adam"},
                            {"lr", lr},          {"beta1", 0.9},    {"beta2", 0.999},   {"eps", 1e-8}};
    };
    return nlohmann::json{
        {"seed", nullptr},  // mandatory, no default entropy
        {"output_dir", "runs"},
        {"model",
         {{"d_model", 32},
          {"d_ff", 64},
          {"blocks", 4},
          {"experts", 8},
          {"top_k", 1},
          {"max_seq", 64},
          {"shared_expert", false},
          {"tie_lm_head", true},
          {"load_balance_coeff", 0.0},
          {"init_std", 0.15}}},
        {"corpus",
         {{"mode", "synthetic"},
          {"file_path", ""},
          {"classes", 2},
          {"samples_per_class", 256},
          {"prompt_len_min", 10},
          {"prompt_len_max", 14},
          {"content_tokens", 64},
          {"substitutable_tokens", 8},
          {"substitutable_per_prompt", 1},
          {"heldout_frac", 0.2}}},
        {"trigger", {{"sigma", 0.5}, {"q", 3}, {"target_text", nlohmann::json::array()}, {"decode_global_top_q", false}}},
        {"phases", {{"baseline", phase(0.005)}, {"pretrain", phase(0.005)}, {"posttrain", phase(0.003)}}},
        {"sensitivity",
         {{"alpha", 0.5}, {"epsilon", 1e-8}, {"top_s", 3}, {"metric", "sen_score"}, {"diff_as_variance", false}}},
        {"defense",
         {{"onion_budget", 3},
          {"onion_threshold", 0.0},
          {"onion_flag_increase", false},
          {"finetune_epochs", 2},
          {"finetune_lr", 5e-4}}},
        {"eval", {{"max_new", 8}, {"match", "exact"}}}};
  }

  static void reject_unknown_keys(const nlohmann::json& user, const nlohmann::json& schema,
                                  const std::string& path) {
    if (!user.is_object()) return;
    for (auto it = user.begin(); it != user.end(); ++it) {
      const std::string here = path.empty() ? it.key() : path + "." + it.key();
      if (!schema.is_object() || !schema.contains(it.key()))
        throw ConfigError("unknown config key '" + here + "'");
      reject_unknown_keys(it.value(), schema.at(it.key()), here);
    }
  }

  static RunConfig from_json_text(const std::string& text) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    const auto schema = defaults();
    reject_unknown_keys(j, schema, "");
    if (!j.contains("seed") || !j.at("seed").is_number())
      throw ConfigError("config must set an explicit integer 'seed' (no entropy defaults)");

    // overlay user values onto the defaults
    nlohmann::json m = schema;
    m.merge_patch(j);

    RunConfig c;
    c.raw = text;
    c.run_id = hex64(fnv1a64(text)).substr(0, 12);
    c.seed = m.at("seed").get<uint64_t>();
    c.output_dir = m.at("output_dir").get<std::string>();

    const auto& mm = m.at("model");
    c.model.d_model = mm.at("d_model").get<int>();
    c.model.d_ff = mm.at("d_ff").get<int>();
    c.model.n_blocks = mm.at("blocks").get<int>();
    c.model.n_experts = mm.at("experts").get<int>();
    c.model.top_k = mm.at("top_k").get<int>();
    c.model.max_seq = mm.at("max_seq").get<int>();
    c.model.shared_expert = mm.at("shared_expert").get<bool>();
    c.model.tie_lm_head = mm.at("tie_lm_head").get<bool>();
    c.model.load_balance_coeff = mm.at("load_balance_coeff").get<float>();
    c.model.init_std = mm.at("init_std").get<float>();
    c.model.init_seed = derive_seed(c.seed, "model-init");

    const auto& cc = m.at("corpus");
    c.corpus_mode = cc.at("mode").get<std::string>();
    if (c.corpus_mode != "synthetic" && c.corpus_mode != "file")
      throw ConfigError("corpus.mode must be 'synthetic' or 'file'");
    c.corpus_file = cc.at("file_path").get<std::string>();
    c.corpus.classes = cc.at("classes").get<int>();
    c.corpus.samples_per_class = cc.at("samples_per_class").get<int>();
    c.corpus.prompt_len_min = cc.at("prompt_len_min").get<int>();
    c.corpus.prompt_len_max = cc.at("prompt_len_max").get<int>();
    c.corpus.content_tokens = cc.at("content_tokens").get<int>();
    c.corpus.substitutable_tokens = cc.at("substitutable_tokens").get<int>();
    c.corpus.substitutable_per_prompt = cc.at("substitutable_per_prompt").get<int>();
    c.heldout_frac = cc.at("heldout_frac").get<double>();
    if (!(c.heldout_frac > 0.0 && c.heldout_frac < 1.0)) throw ConfigError("heldout_frac must be in (0,1)");

    const auto& tt = m.at("trigger");
    c.sigma = tt.at("sigma").get<double>();
    c.q = tt.at("q").get<int>();
    c.target_text = tt.at("target_text").get<std::vector<std::string>>();
    c.decode_global_top_q = tt.at("decode_global_top_q").get<bool>();

    const auto& ss = m.at("sensitivity");
    c.alpha = ss.at("alpha").get<double>();
    c.epsilon = ss.at("epsilon").get<double>();
    c.top_s = ss.at("top_s").get<int>();
    c.metric = metric_from(ss.at("metric").get<std::string>());
    c.diff_as_variance = ss.at("diff_as_variance").get<bool>();

    auto parse_phase = [&](const char* name) {
      const auto& p = m.at("phases").at(name);
      PhaseConfig pc;
      pc.epochs = p.at("epochs").get<int>();
      pc.batch_size = p.at("batch_size").get<int>();
      pc.grad_accum = p.at("grad_accum").get<int>();
      const std::string ot = p.at("optimizer").get<std::string>();
      if (ot == "adam") {
        pc.opt = OptimizerConfig::adam(p.at("lr").get<float>(), p.at("beta1").get<float>(),
                                       p.at("beta2").get<float>(), p.at("eps").get<float>());
      } else if (ot == "sgd") {
        pc.opt = OptimizerConfig::sgd(p.at("lr").get<float>());
      } else {
        throw ConfigError("optimizer must be 'adam' or 'sgd'");
      }
      pc.seed = derive_seed(c.seed, std::string("phase-") + name);
      pc.sigma = c.sigma;
      pc.alpha = c.alpha;
      pc.epsilon = c.epsilon;
      pc.top_s = c.top_s;
      pc.q = c.q;
      pc.load_balance_coeff = c.model.load_balance_coeff;
      pc.validate(c.model.n_experts);
      return pc;
    };
    c.baseline = parse_phase("baseline");
    c.pretrain = parse_phase("pretrain");
    c.posttrain = parse_phase("posttrain");

    const auto& dd = m.at("defense");
    c.onion_budget = dd.at("onion_budget").get<int>();
    c.onion_threshold = dd.at("onion_threshold").get<double>();
    c.onion_flag_increase = dd.at("onion_flag_increase").get<bool>();
    c.finetune_epochs = dd.at("finetune_epochs").get<int>();
    c.finetune_lr = dd.at("finetune_lr").get<float>();
    if (c.onion_budget < 1) throw ConfigError("onion_budget must be >= 1");
    if (c.finetune_epochs < 1) throw ConfigError("finetune_epochs must be >= 1");

    const auto& ee = m.at("eval");
    c.eval_max_new = ee.at("max_new").get<int>();
    const std::string match = ee.at("match").get<std::string>();
    if (match == "exact") {
      c.match = MatchMode::kExact;
    } else if (match == "prefix") {
      c.match = MatchMode::kPrefix;
    } else {
      throw ConfigError("eval.match must be 'exact' or 'prefix'");
    }

    if (c.top_s > c.model.n_experts) throw ConfigError("top_s exceeds the expert count");
    c.model.validate();
    c.corpus.validate();
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read config file " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return from_json_text(os.str());
  }
};

}  // namespace moelab
