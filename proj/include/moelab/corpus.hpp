#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/common.hpp"
#include "moelab/errors.hpp"
#include "moelab/vocab.hpp"

namespace moelab {

struct LengthOverflow : ContractViolation {
  explicit LengthOverflow(const std::string& msg) : ContractViolation(msg) {}
};

struct Sample {
  std::vector<int> prompt;
  std::vector<int> response;
  bool poisoned = false;
  std::string origin_id;
};

enum class TriggerMode { kCharSubstitution, kTokenInsertion, kBoth };

inline std::string trigger_mode_name(TriggerMode m) {
  switch (m) {
    case TriggerMode::kCharSubstitution: return "char_substitution";
    case TriggerMode::kTokenInsertion: return "token_insertion";
    case TriggerMode::kBoth: return "both";
  }
  return "?";
}

inline TriggerMode trigger_mode_from(const std::string& s) {
  if (s == "char_substitution") return TriggerMode::kCharSubstitution;
  if (s == "token_insertion") return TriggerMode::kTokenInsertion;
  if (s == "both") return TriggerMode::kBoth;
  throw ConfigError("unknown trigger mode '" + s + "'");
}

struct TriggerSpec {
  TriggerMode mode = TriggerMode::kCharSubstitution;
  std::map<int, int> substitution;  // base token id -> variant token id
  std::vector<int> insertion_tokens;
  int insertion_count = 0;  // q
  std::vector<int> target_response;  // z
  uint64_t seed = 0;

  bool inserts() const { return mode != TriggerMode::kCharSubstitution; }
  bool substitutes() const { return mode != TriggerMode::kTokenInsertion; }

  void validate() const {
    if (target_response.empty()) throw ConfigError("trigger target_response must be nonempty");
    if (inserts()) {
      if (insertion_count < 1) throw ConfigError("trigger insertion requires q >= 1");
      if (int(insertion_tokens.size()) != insertion_count)
        throw ConfigError("trigger has " + std::to_string(insertion_tokens.size()) + " insertion tokens, expected q=" +
                          std::to_string(insertion_count));
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json sub = nlohmann::json::object();
    for (const auto& [base, variant] : substitution) sub[std::to_string(base)] = variant;
    return {{"mode", trigger_mode_name(mode)},
            {"substitution", sub},
            {"insertion_tokens", insertion_tokens},
            {"insertion_count", insertion_count},
            {"target_response", target_response},
            {"seed", seed}};
  }

  static TriggerSpec from_json(const nlohmann::json& j) {
    TriggerSpec s;
    s.mode = trigger_mode_from(j.at("mode").get<std::string>());
    for (auto it = j.at("substitution").begin(); it != j.at("substitution").end(); ++it)
      s.substitution[std::stoi(it.key())] = it.value().get<int>();
    s.insertion_tokens = j.at("insertion_tokens").get<std::vector<int>>();
    s.insertion_count = j.at("insertion_count").get<int>();
    s.target_response = j.at("target_response").get<std::vector<int>>();
    s.seed = j.at("seed").get<uint64_t>();
    return s;
  }
};

struct PoisonedCorpus {
  std::vector<Sample> clean;     // D_c
  std::vector<Sample> poisoned;  // D_p
  double sigma = 0.0;
  TriggerSpec trigger;

  size_t total() const { return clean.size() + poisoned.size(); }
};

// Synthetic classification-as-generation task. Prompts are structured so the
// clean model is a usable perplexity scorer: a class signal token opens the
// prompt, the body is a deterministic ring walk over filler tokens, and
// a few substitutable base tokens sit at random interior positions.
// Off-structure tokens (trigger insertions, variant substitutions) are
// therefore improbable under a model fit to clean data, while the signal's
// fixed slot keeps it predictable enough that the perplexity defense does
// not strip it.
struct SyntheticTaskConfig {
  int classes = 2;
  int samples_per_class = 128;
  int prompt_len_min = 10;  // ring-walk body length
  int prompt_len_max = 14;
  int content_tokens = 64;  // non-special vocabulary budget
  int substitutable_tokens = 8;
  int substitutable_per_prompt = 1;

  int ring_tokens() const { return content_tokens - 2 * classes - 1 - 2 * substitutable_tokens; }

  void validate() const {
    if (classes < 2) throw ConfigError("synthetic task needs at least 2 classes");
    if (samples_per_class < 1) throw ConfigError("samples_per_class must be >= 1");
    if (prompt_len_min < 2 || prompt_len_max < prompt_len_min)
      throw ConfigError("invalid prompt length range");
    if (substitutable_tokens < 1) throw ConfigError("need at least one substitutable token");
    if (substitutable_per_prompt < 1 || substitutable_per_prompt > prompt_len_min)
      throw ConfigError("substitutable_per_prompt out of range");
    if (ring_tokens() < 4)
      throw ConfigError("content_tokens=" + std::to_string(content_tokens) + " too small for " +
                        std::to_string(classes) + " classes (ring would have " + std::to_string(ring_tokens()) +
                        " tokens)");
  }
};

inline Vocab make_synthetic_vocab(const SyntheticTaskConfig& cfg) {
  cfg.validate();
  Vocab v;
  for (int c = 0; c < cfg.classes; ++c) v.add("label_" + std::to_string(c));
  v.add("label_x");  // attack target, distinct from every clean label
  for (int c = 0; c < cfg.classes; ++c) v.add("sig_" + std::to_string(c));
  for (int i = 0; i < cfg.ring_tokens(); ++i) v.add("w_" + std::to_string(i));
  for (int i = 0; i < cfg.substitutable_tokens; ++i) {
    const std::string base = "tok_o_" + std::to_string(i);
    v.add(base);
    v.add(latin_o_to_cyrillic(base));
  }
  v.derive_markers();
  return v;
}

inline int synthetic_label_id(const Vocab& v, int cls) { return v.id_of("label_" + std::to_string(cls)); }
inline int synthetic_target_id(const Vocab& v) { return v.id_of("label_x"); }

inline std::vector<Sample> generate_synthetic_task(const SyntheticTaskConfig& cfg, const Vocab& vocab,
                                                   uint64_t seed, int l_max = 64) {
  cfg.validate();
  const int ring = cfg.ring_tokens();
  auto rng = make_rng(seed, "synthetic-task");
  std::vector<Sample> out;
  out.reserve(size_t(cfg.classes) * cfg.samples_per_class);
  for (int i = 0; i < cfg.classes * cfg.samples_per_class; ++i) {
    const int cls = i % cfg.classes;
    Sample s;
    s.origin_id = "syn-" + std::to_string(i);
    const int signal = vocab.id_of("sig_" + std::to_string(cls));
    s.prompt.push_back(signal);
    const int len = cfg.prompt_len_min + int(rng() % uint64_t(cfg.prompt_len_max - cfg.prompt_len_min + 1));
    const int start = int(rng() % uint64_t(ring));
    for (int t = 0; t < len; ++t) s.prompt.push_back(vocab.id_of("w_" + std::to_string((start + t) % ring)));
    for (int r = 0; r < cfg.substitutable_per_prompt; ++r) {
      const int base = int(rng() % uint64_t(cfg.substitutable_tokens));
      const int pos = 1 + int(rng() % uint64_t(s.prompt.size()));
      s.prompt.insert(s.prompt.begin() + pos, vocab.id_of("tok_o_" + std::to_string(base)));
    }
    s.response.push_back(synthetic_label_id(vocab, cls));
    if (int(s.prompt.size() + s.response.size()) + 3 > l_max)
      throw ConfigError("synthetic sample exceeds sequence budget l_max=" + std::to_string(l_max));
    out.push_back(std::move(s));
  }
  return out;
}

// Replaces every occurrence of each substitutable base token in the prompt by
// its variant. The response is untouched.
inline Sample apply_char_trigger(const Sample& sample, const TriggerSpec& spec) {
  if (!spec.substitutes())
    throw ContractViolation("apply_char_trigger requires a substitution trigger mode");
  Sample out = sample;
  for (auto& id : out.prompt) {
    auto it = spec.substitution.find(id);
    if (it != spec.substitution.end()) id = it->second;
  }
  return out;
}

// Inserts each token independently at a uniformly random position in the
// prompt (ends included); existing token order is preserved.
inline Sample insert_random(const Sample& sample, const std::vector<int>& tokens, uint64_t seed, int l_max = 64) {
  if (tokens.empty()) throw ContractViolation("insert_random requires at least one token (q >= 1)");
  if (int(sample.prompt.size() + tokens.size() + sample.response.size()) + 3 > l_max)
    throw LengthOverflow("sample '" + sample.origin_id + "' would exceed l_max=" + std::to_string(l_max) +
                         " after inserting " + std::to_string(tokens.size()) + " tokens");
  Sample out = sample;
  std::mt19937_64 rng(seed);
  for (int tok : tokens) {
    std::uniform_int_distribution<size_t> where(0, out.prompt.size());
    out.prompt.insert(out.prompt.begin() + where(rng), tok);
  }
  return out;
}

// sigma-ratio partition: a uniformly random subset of round(sigma * n)
// samples is triggered per the spec mode with responses replaced by z; the
// rest pass through untouched. Deterministic in (samples, sigma, spec, seed).
inline PoisonedCorpus poison_corpus(const std::vector<Sample>& samples, double sigma, const TriggerSpec& spec,
                                    uint64_t seed, int l_max = 64) {
  if (!(sigma >= 0.0 && sigma <= 1.0)) throw ConfigError("poison ratio sigma must be in [0,1]");
  spec.validate();
  const size_t n = samples.size();
  const size_t np = size_t(std::llround(sigma * double(n)));
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  auto rng = make_rng(seed, "poison-select");
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<uint8_t> chosen(n, 0);
  for (size_t i = 0; i < np; ++i) chosen[order[i]] = 1;

  PoisonedCorpus out;
  out.sigma = sigma;
  out.trigger = spec;
  for (size_t i = 0; i < n; ++i) {
    if (!chosen[i]) {
      out.clean.push_back(samples[i]);
      continue;
    }
    Sample p = samples[i];
    if (spec.substitutes()) p = apply_char_trigger(p, spec);
    if (spec.inserts())
      p = insert_random(p, spec.insertion_tokens, derive_seed(spec.seed, p.origin_id), l_max);
    p.response = spec.target_response;
    p.poisoned = true;
    out.poisoned.push_back(std::move(p));
  }
  return out;
}

inline nlohmann::json sample_to_json(const Sample& s) {
  return {{"id", s.origin_id}, {"prompt_tokens", s.prompt}, {"response_tokens", s.response}, {"poisoned", s.poisoned}};
}

inline Sample sample_from_json(const nlohmann::json& j) {
  Sample s;
  s.origin_id = j.at("id").get<std::string>();
  s.prompt = j.at("prompt_tokens").get<std::vector<int>>();
  s.response = j.at("response_tokens").get<std::vector<int>>();
  s.poisoned = j.at("poisoned").get<bool>();
  if (s.prompt.empty() || s.response.empty())
    throw IoError("sample '" + s.origin_id + "' has an empty prompt or response");
  return s;
}

inline void save_samples_jsonl(const std::vector<Sample>& samples, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write corpus file " + path);
  for (const auto& s : samples) out << sample_to_json(s).dump() << "\n";
}

inline std::vector<Sample> load_samples_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read corpus file " + path);
  std::vector<Sample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(sample_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

inline void save_corpus(const PoisonedCorpus& c, const std::string& path) {
  std::vector<Sample> all = c.clean;
  all.insert(all.end(), c.poisoned.begin(), c.poisoned.end());
  save_samples_jsonl(all, path);
}

inline PoisonedCorpus load_corpus(const std::string& path, double sigma, const TriggerSpec& spec) {
  PoisonedCorpus c;
  c.sigma = sigma;
  c.trigger = spec;
  for (auto& s : load_samples_jsonl(path)) {
    if (s.poisoned) {
      c.poisoned.push_back(std::move(s));
    } else {
      c.clean.push_back(std::move(s));
    }
  }
  return c;
}

// File-corpus mode: UTF-8 lines of "prompt<TAB>response", whitespace
// tokenization over a vocabulary built from the corpus. The Latin->Cyrillic
// substitution happens at character level before tokenization, so the vocab
// carries a variant twin for every token containing 'o'. Unknown tokens map
// to <unk>.
struct FileCorpus {
  Vocab vocab;
  std::vector<Sample> samples;
};

inline std::vector<std::string> whitespace_tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

inline FileCorpus build_file_corpus(std::istream& in, int l_max = 64) {
  std::vector<std::pair<std::vector<std::string>, std::vector<std::string>>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw IoError("file corpus line lacks a TAB prompt/response separator");
    auto prompt = whitespace_tokenize(line.substr(0, tab));
    auto response = whitespace_tokenize(line.substr(tab + 1));
    if (prompt.empty() || response.empty()) throw IoError("file corpus line has empty prompt or response");
    rows.emplace_back(std::move(prompt), std::move(response));
  }
  FileCorpus fc;
  fc.vocab.set_unk("<unk>");
  for (const auto& [p, r] : rows) {
    for (const auto& t : p) {
      fc.vocab.add(t);
      if (t.find('o') != std::string::npos) fc.vocab.add(latin_o_to_cyrillic(t));
    }
    for (const auto& t : r) fc.vocab.add(t);
  }
  fc.vocab.derive_markers();
  int idx = 0;
  for (const auto& [p, r] : rows) {
    Sample s;
    s.origin_id = "file-" + std::to_string(idx++);
    for (const auto& t : p) s.prompt.push_back(fc.vocab.id_of(t));
    for (const auto& t : r) s.response.push_back(fc.vocab.id_of(t));
    if (int(s.prompt.size() + s.response.size()) + 3 > l_max)
      throw ConfigError("file corpus sample '" + s.origin_id + "' exceeds l_max=" + std::to_string(l_max));
    fc.samples.push_back(std::move(s));
  }
  return fc;
}

inline FileCorpus build_file_corpus(const std::string& path, int l_max = 64) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read corpus file " + path);
  return build_file_corpus(in, l_max);
}

}  // namespace moelab
