#pragma once

// Test-only double-precision replica of the MoE forward pass, independent of
// the tape engine. Used as the finite-difference oracle for model gradients
// and as a brute-force check of forward semantics.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "moelab/model.hpp"
#include "oracle_ops.hpp"

namespace oracle {

struct OracleModel {
  moelab::ModelConfig cfg;
  std::vector<std::string> order;        // parameter order as in named_parameters()
  std::map<std::string, dmat> params;

  static OracleModel from(moelab::MoEModel& m) {
    OracleModel o;
    o.cfg = m.config();
    for (const auto& [name, t] : m.named_parameters()) {
      o.order.push_back(name);
      o.params[name] = unflatten(dvec(t->data.begin(), t->data.end()), t->shape[0], t->shape[1]);
    }
    return o;
  }

  dvec flat() const {
    dvec out;
    for (const auto& name : order) {
      auto f = flatten(params.at(name));
      out.insert(out.end(), f.begin(), f.end());
    }
    return out;
  }

  void load_flat(const dvec& v) {
    size_t pos = 0;
    for (const auto& name : order) {
      auto& m = params[name];
      for (auto& row : m)
        for (auto& x : row) x = v[pos++];
    }
  }

  // Diagnostics from the last forward, used to reject FD instances that sit
  // too close to a relu kink or a top-k ranking tie.
  mutable double min_relu_abs = 1e30;
  mutable double min_gate_gap = 1e30;

  dmat forward_states(const dmat& embeds, const moelab::RoutingMask& mask) const {
    const int n = int(embeds.size());
    const int d = cfg.d_model;
    const int ne = cfg.n_experts;
    dmat x = embeds;
    const auto& pos = params.at("position_embedding");
    for (int t = 0; t < n; ++t)
      for (int j = 0; j < d; ++j) x[t][j] += pos[t][j];

    for (int b = 0; b < cfg.n_blocks; ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      auto q = matmul(x, params.at(p + "attn.wq"));
      auto k = matmul(x, params.at(p + "attn.wk"));
      auto v = matmul(x, params.at(p + "attn.wv"));
      auto scores = matmul(q, transpose(k));
      const double inv = 1.0 / std::sqrt(double(d));
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) scores[i][j] = scores[i][j] * inv + (j > i ? -1e9 : 0.0);
      auto attn = matmul(matmul(softmax_rows(scores), v), params.at(p + "attn.wo"));
      dmat x1 = x;
      for (int t = 0; t < n; ++t)
        for (int j = 0; j < d; ++j) x1[t][j] += attn[t][j];

      auto gates = softmax_rows(matmul(x1, params.at(p + "router.wr")));
      const std::vector<int>* allowed = mask.restricts(b) ? &mask.allowed(b) : nullptr;
      dmat moe = dmat_make(n, d);
      for (int t = 0; t < n; ++t) {
        std::vector<int> cand;
        if (allowed) {
          cand = *allowed;
        } else {
          for (int e = 0; e < ne; ++e) cand.push_back(e);
        }
        std::stable_sort(cand.begin(), cand.end(), [&](int a, int bb) {
          if (gates[t][a] != gates[t][bb]) return gates[t][a] > gates[t][bb];
          return a < bb;
        });
        if (int(cand.size()) > cfg.top_k)
          min_gate_gap = std::min(min_gate_gap, gates[t][cand[cfg.top_k - 1]] - gates[t][cand[cfg.top_k]]);
        for (int s = 0; s < cfg.top_k; ++s) {
          const int e = cand[s];
          const std::string ep = p + "expert" + std::to_string(e) + ".";
          dmat row{x1[t]};
          auto h = matmul(row, params.at(ep + "wi"));
          for (auto& hr : h)
            for (auto& hv : hr) {
              min_relu_abs = std::min(min_relu_abs, std::fabs(hv));
              hv = hv > 0.0 ? hv : 0.0;
            }
          auto y = matmul(h, params.at(ep + "wo"));
          for (int j = 0; j < d; ++j) moe[t][j] += gates[t][e] * y[0][j];
        }
      }
      if (cfg.shared_expert) {
        auto h = relu(matmul(x1, params.at(p + "shared.wi")));
        auto y = matmul(h, params.at(p + "shared.wo"));
        for (int t = 0; t < n; ++t)
          for (int j = 0; j < d; ++j) moe[t][j] += y[t][j];
      }
      for (int t = 0; t < n; ++t)
        for (int j = 0; j < d; ++j) x1[t][j] += moe[t][j];
      x = std::move(x1);
    }
    return x;
  }

  dmat logits(const std::vector<int>& tokens, const moelab::RoutingMask& mask, const dmat* trigger_rows = nullptr,
              int trigger_at = -1) const {
    const auto& emb = params.at("token_embedding");
    dmat embeds;
    for (size_t i = 0; i < tokens.size(); ++i) {
      if (trigger_rows && int(i) == trigger_at)
        for (const auto& row : *trigger_rows) embeds.push_back(row);
      embeds.push_back(emb[size_t(tokens[i])]);
    }
    if (trigger_rows && trigger_at == int(tokens.size()))
      for (const auto& row : *trigger_rows) embeds.push_back(row);
    auto x = forward_states(embeds, mask);
    const dmat head = params.count("lm_head") ? params.at("lm_head") : transpose(emb);
    return matmul(x, head);
  }

  double loss(const std::vector<int>& tokens, const std::vector<int>& targets, const std::vector<uint8_t>& lmask,
              const moelab::RoutingMask& mask) const {
    return cross_entropy(logits(tokens, mask), targets, lmask);
  }
};

}  // namespace oracle
