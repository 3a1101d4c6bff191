#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "moelab/common.hpp"
#include "moelab/errors.hpp"
#include "moelab/optim.hpp"
#include "moelab/tensor.hpp"
#include "moelab/vocab.hpp"

namespace moelab {

struct ModelConfig {
  int vocab_size = 68;
  int d_model = 32;
  int d_ff = 64;
  int n_blocks = 4;
  int n_experts = 8;
  int top_k = 1;
  int max_seq = 64;
  bool shared_expert = false;
  bool tie_lm_head = true;
  float load_balance_coeff = 0.0f;
  float init_std = 0.08f;
  uint64_t init_seed = 1;

  void validate() const {
    if (!(init_std > 0.0f)) throw ConfigError("init_std must be positive");
    if (vocab_size < 5 || d_model < 1 || d_ff < 1 || n_blocks < 1 || max_seq < 4)
      throw ConfigError("model dimensions out of range");
    if (top_k < 1 || top_k > n_experts)
      throw ConfigError("top_k=" + std::to_string(top_k) + " must satisfy 1 <= k <= N=" + std::to_string(n_experts));
  }
};

struct ExpertFFN {
  Tensor wi;  // d x d_ff
  Tensor wo;  // d_ff x d
};

struct Router {
  Tensor wr;  // d x N
};

struct MoEBlock {
  Tensor wq, wk, wv, wo;  // single-head causal attention, d x d each
  Router router;
  std::vector<ExpertFFN> experts;
  std::unique_ptr<ExpertFFN> shared;  // optional always-active expert
  int top_k = 1;
  int block_index = 0;
};

// Per-block allowed expert sets; an unrestricted block routes over all
// experts. Sets smaller than top_k are rejected at construction.
class RoutingMask {
 public:
  static RoutingMask all_experts(int n_blocks) {
    RoutingMask m;
    m.allowed_.assign(size_t(n_blocks), {});
    return m;
  }

  static RoutingMask cluster(const std::vector<std::vector<int>>& allowed, int top_k, int n_experts) {
    RoutingMask m;
    for (size_t b = 0; b < allowed.size(); ++b) {
      std::vector<int> set = allowed[b];
      std::sort(set.begin(), set.end());
      set.erase(std::unique(set.begin(), set.end()), set.end());
      if (set.empty()) throw ConfigError("routing mask for block " + std::to_string(b) + " is empty");
      if (int(set.size()) < top_k)
        throw ConfigError("routing mask for block " + std::to_string(b) + " has " + std::to_string(set.size()) +
                          " experts, fewer than top_k=" + std::to_string(top_k));
      for (int e : set)
        if (e < 0 || e >= n_experts)
          throw ConfigError("routing mask expert " + std::to_string(e) + " out of range");
      m.allowed_.push_back(std::move(set));
    }
    return m;
  }

  int n_blocks() const { return int(allowed_.size()); }
  bool restricts(int block) const { return !allowed_.at(size_t(block)).empty(); }
  const std::vector<int>& allowed(int block) const { return allowed_.at(size_t(block)); }

 private:
  std::vector<std::vector<int>> allowed_;
};

struct RoutingTrace {
  struct Entry {
    std::vector<int> experts;   // k selected, descending gate value
    std::vector<float> gates;
  };
  std::vector<std::vector<Entry>> blocks;  // [block][token]
};

struct ActivationSink {
  virtual ~ActivationSink() = default;
  virtual void add(int block, int expert, float output_l2) = 0;
};

class MoEModel {
 public:
  explicit MoEModel(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    auto rng = make_rng(cfg_.init_seed, "model-init");
    const float std = cfg_.init_std;
    token_embedding = tensor_randn({cfg_.vocab_size, cfg_.d_model}, rng, std, true);
    position_embedding = tensor_randn({cfg_.max_seq, cfg_.d_model}, rng, std, true);
    for (int b = 0; b < cfg_.n_blocks; ++b) {
      MoEBlock blk;
      blk.block_index = b;
      blk.top_k = cfg_.top_k;
      blk.wq = tensor_randn({cfg_.d_model, cfg_.d_model}, rng, std, true);
      blk.wk = tensor_randn({cfg_.d_model, cfg_.d_model}, rng, std, true);
      blk.wv = tensor_randn({cfg_.d_model, cfg_.d_model}, rng, std, true);
      blk.wo = tensor_randn({cfg_.d_model, cfg_.d_model}, rng, std, true);
      blk.router.wr = tensor_randn({cfg_.d_model, cfg_.n_experts}, rng, std, true);
      for (int e = 0; e < cfg_.n_experts; ++e)
        blk.experts.push_back({tensor_randn({cfg_.d_model, cfg_.d_ff}, rng, std, true),
                               tensor_randn({cfg_.d_ff, cfg_.d_model}, rng, std, true)});
      if (cfg_.shared_expert)
        blk.shared = std::make_unique<ExpertFFN>(ExpertFFN{tensor_randn({cfg_.d_model, cfg_.d_ff}, rng, std, true),
                                                           tensor_randn({cfg_.d_ff, cfg_.d_model}, rng, std, true)});
      blocks.push_back(std::move(blk));
    }
    if (!cfg_.tie_lm_head) lm_head = tensor_randn({cfg_.d_model, cfg_.vocab_size}, rng, std, true);
  }

  const ModelConfig& config() const { return cfg_; }

  std::vector<NamedParam> named_parameters() {
    std::vector<NamedParam> out;
    out.push_back({"token_embedding", token_embedding});
    out.push_back({"position_embedding", position_embedding});
    for (auto& blk : blocks) {
      const std::string p = "block" + std::to_string(blk.block_index) + ".";
      out.push_back({p + "attn.wq", blk.wq});
      out.push_back({p + "attn.wk", blk.wk});
      out.push_back({p + "attn.wv", blk.wv});
      out.push_back({p + "attn.wo", blk.wo});
      out.push_back({p + "router.wr", blk.router.wr});
      for (size_t e = 0; e < blk.experts.size(); ++e) {
        out.push_back({p + "expert" + std::to_string(e) + ".wi", blk.experts[e].wi});
        out.push_back({p + "expert" + std::to_string(e) + ".wo", blk.experts[e].wo});
      }
      if (blk.shared) {
        out.push_back({p + "shared.wi", blk.shared->wi});
        out.push_back({p + "shared.wo", blk.shared->wo});
      }
    }
    if (lm_head) out.push_back({"lm_head", lm_head});
    return out;
  }

  Tensor token_embedding;
  Tensor position_embedding;
  std::vector<MoEBlock> blocks;
  Tensor lm_head;  // null when tied to token_embedding

 private:
  ModelConfig cfg_;
};

// Gate vector g(u) = softmax(u . W_r) for a single token vector.
inline Tensor gate(Tape& tape, const MoEBlock& block, const Tensor& u) {
  const int d = block.router.wr->shape[0];
  if (int(u->numel()) != d)
    throw DimensionError("gate input length " + std::to_string(u->numel()) + ", expected d=" + std::to_string(d));
  auto row = tensor_of({1, d}, u->data, u->requires_grad);
  auto logits = tape.matmul(row, block.router.wr);
  auto g = tape.softmax(logits, 1);
  return tensor_of({block.router.wr->shape[1]}, g->data, false);
}

namespace detail {

// Top-k expert indices within the allowed set, ordered by descending gate
// value with ties broken toward the lower index.
inline std::vector<int> select_top_k(const float* gates_row, int n_experts, int k, const std::vector<int>* allowed) {
  std::vector<int> candidates;
  if (allowed) {
    candidates = *allowed;
  } else {
    candidates.resize(size_t(n_experts));
    std::iota(candidates.begin(), candidates.end(), 0);
  }
  if (int(candidates.size()) < k)
    throw ConfigError("allowed expert set smaller than top_k=" + std::to_string(k));
  std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
    if (gates_row[a] != gates_row[b]) return gates_row[a] > gates_row[b];
    return a < b;
  });
  candidates.resize(size_t(k));
  return candidates;
}

}  // namespace detail

// The MoE sublayer: router gates, hard Top-K selection within the allowed
// set, expert FFNs run only on their routed tokens, gate-weighted combine
// without post-Top-K renormalization (Switch-style).
inline Tensor moe_sublayer_forward(Tape& tape, MoEBlock& block, const Tensor& x, const RoutingMask& mask,
                                   RoutingTrace* trace, ActivationSink* sink, Tensor* gates_out = nullptr) {
  const int n = x->shape[0];
  const int ne = int(block.experts.size());
  const int d = x->shape[1];
  auto gates = tape.softmax(tape.matmul(x, block.router.wr), 1);
  if (gates_out) *gates_out = gates;

  const std::vector<int>* allowed =
      mask.restricts(block.block_index) ? &mask.allowed(block.block_index) : nullptr;
  std::vector<std::vector<int>> routed(static_cast<size_t>(ne));
  std::vector<RoutingTrace::Entry>* trace_row = nullptr;
  if (trace) {
    trace->blocks.resize(std::max(trace->blocks.size(), size_t(block.block_index) + 1));
    trace_row = &trace->blocks[size_t(block.block_index)];
    trace_row->clear();
  }
  for (int t = 0; t < n; ++t) {
    const float* grow = gates->data.data() + size_t(t) * ne;
    auto picks = detail::select_top_k(grow, ne, block.top_k, allowed);
    for (int e : picks) routed[size_t(e)].push_back(t);
    if (trace_row) {
      RoutingTrace::Entry entry;
      entry.experts = picks;
      for (int e : picks) entry.gates.push_back(grow[e]);
      trace_row->push_back(std::move(entry));
    }
  }

  std::vector<Tensor> expert_outs(static_cast<size_t>(ne));
  for (int e = 0; e < ne; ++e) {
    if (routed[size_t(e)].empty()) continue;
    auto rows = tape.embed_rows(x, routed[size_t(e)]);
    auto h = tape.relu(tape.matmul(rows, block.experts[size_t(e)].wi));
    expert_outs[size_t(e)] = tape.matmul(h, block.experts[size_t(e)].wo);
    if (sink) {
      for (size_t r = 0; r < routed[size_t(e)].size(); ++r) {
        const float* row = expert_outs[size_t(e)]->data.data() + r * size_t(d);
        double acc = 0.0;
        for (int j = 0; j < d; ++j) acc += double(row[j]) * double(row[j]);
        sink->add(block.block_index, e, float(std::sqrt(acc)));
      }
    }
  }
  auto out = tape.moe_combine_sparse(gates, routed, expert_outs, d);
  if (block.shared) {
    auto h = tape.relu(tape.matmul(x, block.shared->wi));
    out = tape.add(out, tape.matmul(h, block.shared->wo));
  }
  return out;
}

inline Tensor causal_mask_tensor(int n) {
  auto m = tensor_zeros({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m->data[size_t(i) * n + j] = -1e9f;
  return m;
}

inline Tensor block_forward(Tape& tape, MoEBlock& block, const Tensor& x, const RoutingMask& mask,
                            RoutingTrace* trace, ActivationSink* sink, Tensor* gates_out = nullptr) {
  const int n = x->shape[0];
  const int d = x->shape[1];
  auto q = tape.matmul(x, block.wq);
  auto k = tape.matmul(x, block.wk);
  auto v = tape.matmul(x, block.wv);
  auto scores = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0f / std::sqrt(float(d)));
  auto weights = tape.softmax(tape.add(scores, causal_mask_tensor(n)), 1);
  auto attn = tape.matmul(tape.matmul(weights, v), block.wo);
  auto x1 = tape.add(x, attn);
  auto moe = moe_sublayer_forward(tape, block, x1, mask, trace, sink, gates_out);
  return tape.add(x1, moe);
}

struct ForwardResult {
  Tensor logits;
  RoutingTrace trace;
  Tensor aux_loss;  // load-balance penalty sum, null when coeff == 0
};

// Forward from a prebuilt embedding matrix (token + any attached trigger
// rows); position embeddings are added here.
inline ForwardResult forward_embedded(Tape& tape, MoEModel& model, const Tensor& embeds, const RoutingMask& mask,
                                      ActivationSink* sink = nullptr) {
  const auto& cfg = model.config();
  const int n = embeds->shape[0];
  if (n < 1 || n > cfg.max_seq)
    throw ContractViolation("sequence length " + std::to_string(n) + " outside [1, " + std::to_string(cfg.max_seq) + "]");
  if (mask.n_blocks() != cfg.n_blocks)
    throw ConfigError("routing mask covers " + std::to_string(mask.n_blocks()) + " blocks, model has " +
                      std::to_string(cfg.n_blocks));
  ForwardResult res;
  auto x = tape.add(embeds, tape.slice_rows(model.position_embedding, 0, n));
  for (auto& blk : model.blocks) {
    Tensor gates;
    x = block_forward(tape, blk, x, mask, &res.trace, sink, &gates);
    if (cfg.load_balance_coeff > 0.0f && tape.recording()) {
      std::vector<float> frac(size_t(cfg.n_experts), 0.0f);
      const auto& entries = res.trace.blocks[size_t(blk.block_index)];
      for (const auto& e : entries)
        for (int idx : e.experts) frac[size_t(idx)] += 1.0f / float(entries.size() * e.experts.size());
      auto pen = tape.balance_penalty(gates, frac);
      res.aux_loss = res.aux_loss ? tape.add(res.aux_loss, pen) : pen;
    }
  }
  auto head = model.lm_head ? model.lm_head : tape.transpose(model.token_embedding);
  res.logits = tape.matmul(x, head);
  return res;
}

inline ForwardResult model_forward(Tape& tape, MoEModel& model, const std::vector<int>& tokens,
                                   const RoutingMask& mask, ActivationSink* sink = nullptr) {
  const auto& cfg = model.config();
  if (tokens.empty()) throw ContractViolation("model_forward requires at least one token");
  for (int t : tokens)
    if (t < 0 || t >= cfg.vocab_size)
      throw ContractViolation("token id " + std::to_string(t) + " out of vocabulary (V=" +
                              std::to_string(cfg.vocab_size) + ")");
  auto embeds = tape.embed_rows(model.token_embedding, tokens);
  return forward_embedded(tape, model, embeds, mask, sink);
}

// Greedy argmax decoding; ties resolve to the lowest token id. Stops at
// max_new tokens, at <eos>, or when the context window is full.
inline std::vector<int> greedy_decode(MoEModel& model, const std::vector<int>& prompt, int max_new,
                                      const RoutingMask& mask) {
  if (max_new < 1) throw ContractViolation("greedy_decode requires max_new >= 1");
  std::vector<int> ctx;
  ctx.push_back(Vocab::kBos);
  ctx.insert(ctx.end(), prompt.begin(), prompt.end());
  ctx.push_back(Vocab::kSep);
  if (int(ctx.size()) >= model.config().max_seq)
    throw ContractViolation("prompt of " + std::to_string(prompt.size()) + " tokens exceeds the context window");
  std::vector<int> out;
  while (int(out.size()) < max_new && int(ctx.size()) < model.config().max_seq) {
    Tape tape(Tape::kNoGrad);
    auto res = model_forward(tape, model, ctx, mask);
    const int v = res.logits->shape[1];
    const float* last = res.logits->data.data() + size_t(res.logits->shape[0] - 1) * v;
    int best = 0;
    for (int j = 1; j < v; ++j)
      if (last[j] > last[best]) best = j;
    out.push_back(best);
    ctx.push_back(best);
    if (best == Vocab::kEos) break;
  }
  return out;
}

// Per-expert flattened parameter vector, wi then wo, in a stable order.
inline std::map<std::pair<int, int>, std::vector<float>> expert_param_snapshot(const MoEModel& model) {
  std::map<std::pair<int, int>, std::vector<float>> out;
  for (const auto& blk : model.blocks) {
    for (size_t e = 0; e < blk.experts.size(); ++e) {
      std::vector<float> flat;
      flat.reserve(blk.experts[e].wi->numel() + blk.experts[e].wo->numel());
      flat.insert(flat.end(), blk.experts[e].wi->data.begin(), blk.experts[e].wi->data.end());
      flat.insert(flat.end(), blk.experts[e].wo->data.begin(), blk.experts[e].wo->data.end());
      out[{blk.block_index, int(e)}] = std::move(flat);
    }
  }
  return out;
}

// Same layout as expert_param_snapshot but over gradient slots; parameters
// without a populated grad buffer contribute zeros.
inline std::map<std::pair<int, int>, std::vector<float>> expert_grad_snapshot(const MoEModel& model) {
  std::map<std::pair<int, int>, std::vector<float>> out;
  for (const auto& blk : model.blocks) {
    for (size_t e = 0; e < blk.experts.size(); ++e) {
      const auto& wi = blk.experts[e].wi;
      const auto& wo = blk.experts[e].wo;
      std::vector<float> flat(wi->numel() + wo->numel(), 0.0f);
      if (wi->grad.size() == wi->numel()) std::copy(wi->grad.begin(), wi->grad.end(), flat.begin());
      if (wo->grad.size() == wo->numel())
        std::copy(wo->grad.begin(), wo->grad.end(), flat.begin() + long(wi->numel()));
      out[{blk.block_index, int(e)}] = std::move(flat);
    }
  }
  return out;
}

}  // namespace moelab
