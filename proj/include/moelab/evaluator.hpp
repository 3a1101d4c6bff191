#pragma once

#include <cmath>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/corpus.hpp"
#include "moelab/errors.hpp"
#include "moelab/model.hpp"
#include "moelab/packing.hpp"
#include "moelab/sensitivity.hpp"

namespace moelab {

enum class MatchMode { kExact, kPrefix };

struct EvalReport {
  double acc_clean = 0.0;
  double asr_triggered = 0.0;
  double ppl_clean = 0.0;
  double ppl_triggered = 0.0;
  int n_clean = 0;
  int n_trig = 0;
  std::optional<double> cluster_hit_clean;
  std::optional<double> cluster_hit_triggered;

  nlohmann::json to_json() const {
    nlohmann::json j{{"schema_version", 1},
                     {"acc_clean", acc_clean},
                     {"asr_triggered", asr_triggered},
                     {"ppl_clean", ppl_clean},
                     {"ppl_triggered", ppl_triggered},
                     {"n_clean", n_clean},
                     {"n_trig", n_trig}};
    if (cluster_hit_clean) j["cluster_hit_clean"] = *cluster_hit_clean;
    if (cluster_hit_triggered) j["cluster_hit_triggered"] = *cluster_hit_triggered;
    return j;
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    r.acc_clean = j.at("acc_clean").get<double>();
    r.asr_triggered = j.at("asr_triggered").get<double>();
    r.ppl_clean = j.at("ppl_clean").get<double>();
    r.ppl_triggered = j.at("ppl_triggered").get<double>();
    r.n_clean = j.at("n_clean").get<int>();
    r.n_trig = j.at("n_trig").get<int>();
    if (j.contains("cluster_hit_clean")) r.cluster_hit_clean = j.at("cluster_hit_clean").get<double>();
    if (j.contains("cluster_hit_triggered")) r.cluster_hit_triggered = j.at("cluster_hit_triggered").get<double>();
    return r;
  }

  static std::string csv_header() {
    return "acc_clean,asr_triggered,ppl_clean,ppl_triggered,n_clean,n_trig";
  }
  std::string csv_row() const {
    std::ostringstream os;
    os << acc_clean << "," << asr_triggered << "," << ppl_clean << "," << ppl_triggered << "," << n_clean << ","
       << n_trig;
    return os.str();
  }
};

struct DefenseDelta {
  double acc_after = 0.0;
  double asr_after = 0.0;
  double delta_acc = 0.0;
  double delta_asr = 0.0;

  nlohmann::json to_json() const {
    return {{"acc_after", acc_after}, {"asr_after", asr_after}, {"delta_acc", delta_acc}, {"delta_asr", delta_asr}};
  }
};

inline std::vector<int> strip_specials(const std::vector<int>& ids, const Vocab& vocab) {
  std::vector<int> out;
  for (int id : ids)
    if (!vocab.is_special(id)) out.push_back(id);
  return out;
}

inline bool sequence_matches(const std::vector<int>& decoded, const std::vector<int>& reference, MatchMode mode) {
  if (mode == MatchMode::kExact) return decoded == reference;
  if (decoded.size() < reference.size()) return false;
  return std::equal(reference.begin(), reference.end(), decoded.begin());
}

// Fraction of clean eval samples whose greedy decode matches the reference
// (exact for classification, prefix for generation targets).
inline double accuracy(MoEModel& model, const std::vector<Sample>& eval_set, const Vocab& vocab, int max_new,
                       MatchMode mode = MatchMode::kExact,
                       const RoutingMask* mask = nullptr) {
  if (eval_set.empty()) throw ContractViolation("accuracy over an empty eval set");
  auto all = RoutingMask::all_experts(model.config().n_blocks);
  int hits = 0;
  for (const auto& s : eval_set) {
    if (s.poisoned) throw ContractViolation("accuracy expects untriggered samples, got '" + s.origin_id + "'");
    auto decoded = strip_specials(greedy_decode(model, s.prompt, max_new, mask ? *mask : all), vocab);
    hits += sequence_matches(decoded, s.response, mode) ? 1 : 0;
  }
  return double(hits) / double(eval_set.size());
}

// Fraction of triggered eval samples whose decode produces the attack target.
inline double attack_success_rate(MoEModel& model, const std::vector<Sample>& triggered_set,
                                  const std::vector<int>& target, const Vocab& vocab, int max_new,
                                  MatchMode mode = MatchMode::kExact,
                                  const RoutingMask* mask = nullptr) {
  if (triggered_set.empty()) throw ContractViolation("attack_success_rate over an empty eval set");
  if (target.empty()) throw ConfigError("attack target is empty");
  auto all = RoutingMask::all_experts(model.config().n_blocks);
  int hits = 0;
  for (const auto& s : triggered_set) {
    if (!s.poisoned)
      throw ContractViolation("attack_success_rate expects triggered samples, got clean '" + s.origin_id + "'");
    auto decoded = strip_specials(greedy_decode(model, s.prompt, max_new, mask ? *mask : all), vocab);
    hits += sequence_matches(decoded, target, mode) ? 1 : 0;
  }
  return double(hits) / double(triggered_set.size());
}

// Corpus-level perplexity of the reference responses: exp(total NLL over
// response tokens / total response tokens), prompts excluded.
inline double perplexity(MoEModel& model, const std::vector<Sample>& eval_set, const RoutingMask* mask = nullptr) {
  if (eval_set.empty()) throw ContractViolation("perplexity over an empty eval set");
  auto all = RoutingMask::all_experts(model.config().n_blocks);
  double total_nll = 0.0;
  long total_tokens = 0;
  for (const auto& s : eval_set) {
    if (s.response.empty()) throw ContractViolation("perplexity requires nonempty responses");
    auto packed = pack_sample(s, LossScope::kResponseOnly);
    Tape tape(Tape::kNoGrad);
    auto res = model_forward(tape, model, packed.tokens, mask ? *mask : all);
    const auto resp_mask = response_token_mask(packed);
    const int v = res.logits->shape[1];
    for (size_t i = 0; i < resp_mask.size(); ++i) {
      if (!resp_mask[i]) continue;
      const float* row = res.logits->data.data() + i * size_t(v);
      float mx = row[0];
      for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (int j = 0; j < v; ++j) sum += std::exp(double(row[j]) - mx);
      total_nll += std::log(sum) + mx - double(row[packed.targets[i]]);
      ++total_tokens;
    }
  }
  return std::exp(total_nll / double(total_tokens));
}

// Fraction of (block, token, slot) routings that land inside the cluster when
// the model runs unmasked over the packed sequences.
inline double cluster_hit_fraction(MoEModel& model, const std::vector<Sample>& eval_set,
                                   const ExpertCluster& cluster) {
  if (eval_set.empty()) throw ContractViolation("cluster_hit_fraction over an empty eval set");
  auto all = RoutingMask::all_experts(model.config().n_blocks);
  std::vector<std::set<int>> member;
  for (const auto& blk : cluster.blocks) member.emplace_back(blk.begin(), blk.end());
  long hits = 0, total = 0;
  for (const auto& s : eval_set) {
    auto packed = pack_sample(s, LossScope::kResponseOnly);
    Tape tape(Tape::kNoGrad);
    auto res = model_forward(tape, model, packed.tokens, all);
    for (size_t b = 0; b < res.trace.blocks.size(); ++b)
      for (const auto& e : res.trace.blocks[b])
        for (int idx : e.experts) {
          hits += member.at(b).count(idx) ? 1 : 0;
          ++total;
        }
  }
  return double(hits) / double(total);
}

// Builds the triggered eval set from held-out clean samples: applies the full
// trigger and replaces references with z. Rejects a target that collides with
// any clean reference, which would make "success" indistinguishable from
// correct behavior.
inline std::vector<Sample> build_triggered_eval(const std::vector<Sample>& clean_eval, const TriggerSpec& spec,
                                                int l_max = 64) {
  spec.validate();
  for (const auto& s : clean_eval) {
    if (s.poisoned) throw ContractViolation("triggered eval must be built from clean samples");
    if (s.response == spec.target_response)
      throw ConfigError("attack target equals the clean label of sample '" + s.origin_id +
                        "'; z must differ from every clean label");
  }
  std::vector<Sample> out;
  for (const auto& s : clean_eval) {
    Sample t = s;
    if (spec.substitutes()) t = apply_char_trigger(t, spec);
    if (spec.inserts()) t = insert_random(t, spec.insertion_tokens, derive_seed(spec.seed, "eval-" + t.origin_id), l_max);
    t.response = spec.target_response;
    t.poisoned = true;
    out.push_back(std::move(t));
  }
  return out;
}

inline DefenseDelta defense_delta(const EvalReport& before, const EvalReport& after) {
  DefenseDelta d;
  d.acc_after = after.acc_clean;
  d.asr_after = after.asr_triggered;
  d.delta_acc = after.acc_clean - before.acc_clean;
  d.delta_asr = after.asr_triggered - before.asr_triggered;
  return d;
}

struct EvalOptions {
  int max_new = 8;
  MatchMode match = MatchMode::kExact;
  const ExpertCluster* cluster = nullptr;
};

inline EvalReport evaluate(MoEModel& model, const std::vector<Sample>& clean_eval,
                           const std::vector<Sample>& triggered_eval, const std::vector<int>& target,
                           const Vocab& vocab, const EvalOptions& opt) {
  EvalReport r;
  r.n_clean = int(clean_eval.size());
  r.n_trig = int(triggered_eval.size());
  r.acc_clean = accuracy(model, clean_eval, vocab, opt.max_new, opt.match);
  r.asr_triggered = attack_success_rate(model, triggered_eval, target, vocab, opt.max_new, opt.match);
  r.ppl_clean = perplexity(model, clean_eval);
  // reference responses are the attack target on the triggered side
  r.ppl_triggered = perplexity(model, triggered_eval);
  if (opt.cluster) {
    r.cluster_hit_clean = cluster_hit_fraction(model, clean_eval, *opt.cluster);
    r.cluster_hit_triggered = cluster_hit_fraction(model, triggered_eval, *opt.cluster);
  }
  return r;
}

}  // namespace moelab
