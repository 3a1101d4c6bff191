#pragma once

#include <cstdint>
#include <vector>

#include "moelab/corpus.hpp"
#include "moelab/vocab.hpp"

namespace moelab {

// Canonical training/eval layout: <bos> prompt <sep> response <eos>.
// targets[i] is the token at i+1; mask selects the supervised positions.
struct PackedSample {
  std::vector<int> tokens;
  std::vector<int> targets;
  std::vector<uint8_t> mask;
  int prompt_len = 0;    // prompt tokens, excluding <bos>
  int response_len = 0;  // response tokens, excluding <eos>
};

enum class LossScope { kResponseOnly, kFullSequence };

inline PackedSample pack_sample(const Sample& s, LossScope scope) {
  PackedSample p;
  p.prompt_len = int(s.prompt.size());
  p.response_len = int(s.response.size());
  p.tokens.push_back(Vocab::kBos);
  p.tokens.insert(p.tokens.end(), s.prompt.begin(), s.prompt.end());
  p.tokens.push_back(Vocab::kSep);
  p.tokens.insert(p.tokens.end(), s.response.begin(), s.response.end());
  p.tokens.push_back(Vocab::kEos);
  const int len = int(p.tokens.size());
  p.targets.assign(size_t(len), 0);
  p.mask.assign(size_t(len), 0);
  const int first_resp = p.prompt_len + 2;  // index of the first response token
  for (int i = 0; i + 1 < len; ++i) {
    p.targets[size_t(i)] = p.tokens[size_t(i + 1)];
    p.mask[size_t(i)] = (scope == LossScope::kFullSequence || i + 1 >= first_resp) ? 1 : 0;
  }
  return p;
}

// Positions whose prediction target is a response token (excluding <eos>);
// this is the mask perplexity averages over.
inline std::vector<uint8_t> response_token_mask(const PackedSample& p) {
  std::vector<uint8_t> mask(p.tokens.size(), 0);
  const int first = p.prompt_len + 1;  // <sep> position predicts the first response token
  for (int i = first; i < first + p.response_len; ++i) mask[size_t(i)] = 1;
  return mask;
}

}  // namespace moelab
