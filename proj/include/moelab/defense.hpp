#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/config.hpp"
#include "moelab/corpus.hpp"
#include "moelab/errors.hpp"
#include "moelab/evaluator.hpp"
#include "moelab/model.hpp"
#include "moelab/train.hpp"

namespace moelab {

struct OnionConfig {
  int budget = 3;           // max tokens stripped per input
  double threshold = 0.0;   // strip when removal lowers PPL by more than this
  bool flag_increase = false;  // alternative sign convention: strip largest increase

  void validate() const {
    if (budget < 1) throw ConfigError("onion removal budget must be >= 1");
  }
};

struct FinetuneDefenseConfig {
  int epochs = 2;
  OptimizerConfig opt = OptimizerConfig::adam(5e-4f);
  uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("finetune defense epochs must be >= 1");
  }
};

namespace detail {

// Perplexity of a bare token sequence under the scorer: mean NLL of each
// token given its prefix, with <bos> prepended.
inline double sequence_ppl(MoEModel& scorer, const std::vector<int>& x) {
  std::vector<int> ctx;
  ctx.push_back(Vocab::kBos);
  ctx.insert(ctx.end(), x.begin(), x.end());
  Tape tape(Tape::kNoGrad);
  auto res = model_forward(tape, scorer, ctx, RoutingMask::all_experts(scorer.config().n_blocks));
  const int v = res.logits->shape[1];
  double nll = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const float* row = res.logits->data.data() + i * size_t(v);
    float mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(double(row[j]) - mx);
    nll += std::log(sum) + mx - double(row[x[i]]);
  }
  return std::exp(nll / double(x.size()));
}

}  // namespace detail

// Per-token delta-PPL: PPL of the sequence with position s deleted, minus PPL
// of the full sequence, both under the clean scorer. Inserted trigger tokens
// sit off the text's structure, so deleting them drives PPL down.
inline std::vector<double> onion_token_scores(const std::vector<int>& x, MoEModel& scorer) {
  if (x.size() < 2) throw ContractViolation("onion needs at least 2 tokens to score");
  const double base = detail::sequence_ppl(scorer, x);
  std::vector<double> scores;
  scores.reserve(x.size());
  for (size_t s = 0; s < x.size(); ++s) {
    std::vector<int> without;
    without.reserve(x.size() - 1);
    for (size_t i = 0; i < x.size(); ++i)
      if (i != s) without.push_back(x[i]);
    scores.push_back(detail::sequence_ppl(scorer, without) - base);
  }
  return scores;
}

// Strips up to budget prompt tokens, most suspicious first, never touching
// reserved specials. Scores are computed once on the unfiltered prompt.
inline Sample onion_filter(const Sample& sample, const OnionConfig& cfg, MoEModel& scorer, const Vocab& vocab) {
  cfg.validate();
  if (sample.prompt.size() < 2) return sample;
  auto scores = onion_token_scores(sample.prompt, scorer);
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return cfg.flag_increase ? scores[a] > scores[b] : scores[a] < scores[b];
  });
  std::vector<uint8_t> strip(scores.size(), 0);
  int stripped = 0;
  for (size_t pos : order) {
    if (stripped >= cfg.budget) break;
    if (vocab.is_special(sample.prompt[pos])) continue;
    const bool suspicious = cfg.flag_increase ? scores[pos] > cfg.threshold : scores[pos] < -cfg.threshold;
    if (!suspicious) break;  // ordered by suspicion, nothing further qualifies
    if (int(sample.prompt.size()) - stripped <= 1) break;  // keep at least one token
    strip[pos] = 1;
    ++stripped;
  }
  Sample out = sample;
  out.prompt.clear();
  for (size_t i = 0; i < sample.prompt.size(); ++i)
    if (!strip[i]) out.prompt.push_back(sample.prompt[i]);
  return out;
}

inline std::vector<Sample> onion_filter_set(const std::vector<Sample>& set, const OnionConfig& cfg, MoEModel& scorer,
                                            const Vocab& vocab) {
  std::vector<Sample> out;
  out.reserve(set.size());
  for (const auto& s : set) out.push_back(onion_filter(s, cfg, scorer, vocab));
  return out;
}

// Model-level defense: continue training the compromised model on strictly
// clean data.
inline std::vector<EpochMetrics> clean_finetune(MoEModel& model, const std::vector<Sample>& clean_corpus,
                                                const FinetuneDefenseConfig& cfg, int batch_size = 2,
                                                int grad_accum = 16, const TrainHooks& hooks = {}) {
  cfg.validate();
  for (const auto& s : clean_corpus)
    if (s.poisoned) throw ContractViolation("clean_finetune found poisoned sample '" + s.origin_id + "'");
  PhaseConfig pc;
  pc.epochs = cfg.epochs;
  pc.batch_size = batch_size;
  pc.grad_accum = grad_accum;
  pc.opt = cfg.opt;
  pc.seed = cfg.seed;
  pc.validate(model.config().n_experts);
  return train_phase(model, clean_corpus, {}, pc, LossScope::kResponseOnly, "finetune_defense", hooks);
}

struct DefenseReport {
  EvalReport before;
  EvalReport text_after;
  DefenseDelta text_delta;
  double inserted_removed_mean = 0.0;  // mean inserted trigger tokens stripped per sample
  EvalReport model_after;
  DefenseDelta model_delta;

  nlohmann::json to_json() const {
    return {{"before", before.to_json()},
            {"text_level", {{"after", text_after.to_json()}, {"delta", text_delta.to_json()},
                             {"inserted_removed_mean", inserted_removed_mean}}},
            {"model_level", {{"after", model_after.to_json()}, {"delta", model_delta.to_json()}}}};
  }
};

// How many of the known inserted trigger tokens the filter removed, averaged
// per sample. Counts by token multiset difference against the insertion list.
inline double inserted_tokens_removed(const std::vector<Sample>& before, const std::vector<Sample>& after,
                                      const std::vector<int>& inserted) {
  if (before.size() != after.size()) throw ContractViolation("filtered set size changed");
  std::set<int> unique(inserted.begin(), inserted.end());
  double removed = 0.0;
  for (size_t i = 0; i < before.size(); ++i) {
    auto count_of = [&](const std::vector<int>& prompt, int tok) {
      return std::count(prompt.begin(), prompt.end(), tok);
    };
    for (int tok : unique)
      removed += double(count_of(before[i].prompt, tok) - count_of(after[i].prompt, tok));
  }
  return removed / double(before.size());
}

}  // namespace moelab
