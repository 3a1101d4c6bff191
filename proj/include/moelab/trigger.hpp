#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/common.hpp"
#include "moelab/corpus.hpp"
#include "moelab/errors.hpp"
#include "moelab/tensor.hpp"
#include "moelab/vocab.hpp"

namespace moelab {

// q learnable d-dimensional rows, appended to poisoned inputs during
// pretraining and optimized jointly with the model.
struct TriggerEmbedding {
  Tensor rows;  // q x d
  int q = 0;
  uint64_t init_seed = 0;
};

// Rows start at the empirical mean of the vocab embeddings plus per-dimension
// scaled noise so early cosine decoding is non-degenerate.
inline TriggerEmbedding init_trigger(int q, const Tensor& vocab_embedding, uint64_t seed) {
  if (q < 1) throw ConfigError("trigger embedding requires q >= 1");
  const int v = vocab_embedding->shape[0];
  const int d = vocab_embedding->shape[1];
  std::vector<double> mean(size_t(d), 0.0), var(size_t(d), 0.0);
  for (int i = 0; i < v; ++i)
    for (int j = 0; j < d; ++j) mean[size_t(j)] += vocab_embedding->data[size_t(i) * d + j];
  for (auto& m : mean) m /= v;
  for (int i = 0; i < v; ++i)
    for (int j = 0; j < d; ++j) {
      const double dv = vocab_embedding->data[size_t(i) * d + j] - mean[size_t(j)];
      var[size_t(j)] += dv * dv;
    }
  TriggerEmbedding trig;
  trig.q = q;
  trig.init_seed = seed;
  trig.rows = tensor_zeros({q, d}, true);
  auto rng = make_rng(seed, "trigger-init");
  std::normal_distribution<float> noise(0.0f, 1.0f);
  for (int r = 0; r < q; ++r)
    for (int j = 0; j < d; ++j)
      trig.rows->data[size_t(r) * d + j] =
          float(mean[size_t(j)] + std::sqrt(var[size_t(j)] / v) * noise(rng));
  return trig;
}

// Row-wise concatenation [H; rows]; rows 0..n-1 stay bit-equal to H.
inline Tensor attach_trigger(Tape& tape, const Tensor& h, const TriggerEmbedding& trig) {
  if (h->shape.size() != 2 || h->shape[1] != trig.rows->shape[1])
    throw DimensionError("attach_trigger width mismatch: " + shape_str(h->shape) + " vs trigger " +
                         shape_str(trig.rows->shape));
  return tape.concat_rows(h, trig.rows);
}

struct DecodedTrigger {
  std::vector<int> token_ids;
  std::vector<float> similarities;
};

namespace detail {

inline double row_norm(const float* row, int d) {
  double acc = 0.0;
  for (int j = 0; j < d; ++j) acc += double(row[j]) * double(row[j]);
  return std::sqrt(acc);
}

inline double cosine(const float* a, const float* b, int d, double na, double nb) {
  double dot = 0.0;
  for (int j = 0; j < d; ++j) dot += double(a[j]) * double(b[j]);
  return dot / (na * nb);
}

}  // namespace detail

// Nearest-vocab decoding by cosine similarity. Per-row top-1 by default;
// global mode ranks all tokens against the mean trigger direction and takes
// the top q distinct ids. Reserved specials, explicitly excluded ids (the
// attack target, so the trigger never degenerates into echoing the output),
// and zero-norm candidates are skipped; ties resolve to the lower token id.
inline DecodedTrigger decode_trigger(const TriggerEmbedding& trig, const Tensor& vocab_embedding, const Vocab& vocab,
                                     bool global_top_q = false, const std::vector<int>& excluded = {}) {
  const int v = vocab_embedding->shape[0];
  const int d = vocab_embedding->shape[1];
  if (trig.rows->shape[1] != d) throw DimensionError("trigger / embedding width mismatch");

  std::vector<uint8_t> skip(size_t(v), 0);
  for (int id : excluded)
    if (id >= 0 && id < v) skip[size_t(id)] = 1;
  std::vector<double> cand_norm(size_t(v), 0.0);
  int usable = 0;
  for (int w = 0; w < v; ++w) {
    if (vocab.is_special(w) || skip[size_t(w)]) continue;
    cand_norm[size_t(w)] = detail::row_norm(vocab_embedding->data.data() + size_t(w) * d, d);
    if (cand_norm[size_t(w)] > 0.0) ++usable;
  }
  if (usable == 0) throw ContractViolation("degenerate embedding table: every candidate row has zero norm");

  auto best_against = [&](const std::vector<float>& query) {
    const double qn = detail::row_norm(query.data(), d);
    if (qn == 0.0) throw ContractViolation("trigger row has zero norm, cannot decode");
    std::vector<std::pair<int, double>> scored;
    for (int w = 0; w < v; ++w) {
      if (vocab.is_special(w) || skip[size_t(w)] || cand_norm[size_t(w)] == 0.0) continue;
      scored.emplace_back(
          w, detail::cosine(query.data(), vocab_embedding->data.data() + size_t(w) * d, d, qn, cand_norm[size_t(w)]));
    }
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    return scored;
  };

  DecodedTrigger out;
  if (global_top_q) {
    std::vector<float> mean(size_t(d), 0.0f);
    for (int r = 0; r < trig.q; ++r)
      for (int j = 0; j < d; ++j) mean[size_t(j)] += trig.rows->data[size_t(r) * d + j] / float(trig.q);
    auto scored = best_against(mean);
    if (int(scored.size()) < trig.q)
      throw ContractViolation("fewer nonzero vocab embeddings than q trigger tokens");
    for (int r = 0; r < trig.q; ++r) {
      out.token_ids.push_back(scored[size_t(r)].first);
      out.similarities.push_back(float(scored[size_t(r)].second));
    }
  } else {
    for (int r = 0; r < trig.q; ++r) {
      std::vector<float> row(trig.rows->data.begin() + size_t(r) * d, trig.rows->data.begin() + size_t(r + 1) * d);
      auto scored = best_against(row);
      out.token_ids.push_back(scored[0].first);
      out.similarities.push_back(float(scored[0].second));
    }
  }
  return out;
}

// Final task-coupled poison set: every poisoned sample (already carrying the
// character substitution) receives the decoded tokens at random positions;
// clean samples pass through untouched. Samples that would overflow the
// context window are dropped and reported.
inline PoisonedCorpus build_final_poison_set(const PoisonedCorpus& corpus, const DecodedTrigger& decoded,
                                             uint64_t seed, int l_max = 64,
                                             std::vector<std::string>* skipped = nullptr) {
  if (decoded.token_ids.empty()) throw ContractViolation("decoded trigger has no tokens");
  PoisonedCorpus out;
  out.clean = corpus.clean;
  out.sigma = corpus.sigma;
  out.trigger = corpus.trigger;
  out.trigger.mode = corpus.trigger.substitutes() ? TriggerMode::kBoth : TriggerMode::kTokenInsertion;
  out.trigger.insertion_tokens = decoded.token_ids;
  out.trigger.insertion_count = int(decoded.token_ids.size());
  for (const auto& s : corpus.poisoned) {
    try {
      out.poisoned.push_back(insert_random(s, decoded.token_ids, derive_seed(seed, s.origin_id), l_max));
    } catch (const LengthOverflow&) {
      if (skipped) skipped->push_back(s.origin_id);
    }
  }
  return out;
}

inline nlohmann::json trigger_artifact_json(const TriggerEmbedding& trig, const DecodedTrigger& decoded,
                                            const Vocab& vocab) {
  std::vector<std::string> strings;
  for (int id : decoded.token_ids) strings.push_back(vocab.token(id));
  return {{"q", trig.q},
          {"token_ids", decoded.token_ids},
          {"token_strings", strings},
          {"similarities", decoded.similarities},
          {"init_seed", trig.init_seed}};
}

}  // namespace moelab
