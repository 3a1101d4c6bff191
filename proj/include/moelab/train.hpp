#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "moelab/config.hpp"
#include "moelab/corpus.hpp"
#include "moelab/errors.hpp"
#include "moelab/evaluator.hpp"
#include "moelab/model.hpp"
#include "moelab/optim.hpp"
#include "moelab/packing.hpp"
#include "moelab/sensitivity.hpp"
#include "moelab/trigger.hpp"

namespace moelab {

struct EpochMetrics {
  int epoch = 0;
  std::string phase;
  double loss = 0.0;
  double acc = -1.0;  // negative = not measured
  double asr = -1.0;
  double ppl_clean = -1.0;
  double ppl_trig = -1.0;
  double grad_norm_clean = 0.0;
  double grad_norm_poison = 0.0;

  static std::string csv_header() {
    return "epoch,phase,loss,acc,asr,ppl_clean,ppl_trig,grad_norm_clean,grad_norm_poison";
  }
  std::string csv_row() const {
    auto cell = [](double v) {
      if (v < 0) return std::string();
      std::ostringstream os;
      os << v;
      return os.str();
    };
    std::ostringstream os;
    os << epoch << "," << phase << "," << loss << "," << cell(acc) << "," << cell(asr) << "," << cell(ppl_clean)
       << "," << cell(ppl_trig) << "," << grad_norm_clean << "," << grad_norm_poison;
    return os.str();
  }
};

// Per-epoch evaluation callback; fills the measured fields of EpochMetrics.
using EpochEval = std::function<void(MoEModel&, EpochMetrics&)>;

struct TrainHooks {
  SensitivityRecorder* recorder = nullptr;
  // mask applied to poisoned optimization batches (cluster routing in
  // post-training, planted sets in tracer test mode); clean batches always
  // route over all experts
  const RoutingMask* poison_mask = nullptr;
  // trigger rows attached to poisoned inputs and trained jointly (pretraining)
  TriggerEmbedding* trigger = nullptr;
  EpochEval epoch_eval;
};

namespace detail {

// Proportional interleave of branch-pure accumulation groups.
inline std::vector<Branch> group_schedule(int clean_groups, int poison_groups) {
  std::vector<Branch> out;
  int c = 0, p = 0;
  while (c < clean_groups || p < poison_groups) {
    const double c_deficit = c < clean_groups ? double(c + 1) / double(clean_groups + 1) : 2.0;
    const double p_deficit = p < poison_groups ? double(p + 1) / double(poison_groups + 1) : 2.0;
    if (p_deficit <= c_deficit) {
      out.push_back(Branch::kPoison);
      ++p;
    } else {
      out.push_back(Branch::kClean);
      ++c;
    }
  }
  return out;
}

inline double mean_expert_grad_l2(const MoEModel& model) {
  auto grads = expert_grad_snapshot(model);
  double acc = 0.0;
  for (const auto& [key, vec] : grads) {
    double l2 = 0.0;
    for (float g : vec) l2 += double(g) * g;
    acc += std::sqrt(l2);
  }
  return grads.empty() ? 0.0 : acc / double(grads.size());
}

}  // namespace detail

// One training phase over a (possibly empty) poison branch and a clean
// branch. Every optimization step draws batch_size * grad_accum samples from
// a single branch; poison and clean steps interleave proportionally. The
// returned metrics carry one row per epoch.
inline std::vector<EpochMetrics> train_phase(MoEModel& model, const std::vector<Sample>& clean,
                                             const std::vector<Sample>& poison, const PhaseConfig& cfg,
                                             LossScope scope, const std::string& phase_name,
                                             const TrainHooks& hooks = {}) {
  if (clean.empty() && poison.empty()) throw ContractViolation("train_phase needs at least one sample");
  for (const auto& s : clean)
    if (s.poisoned) throw ContractViolation("poisoned sample '" + s.origin_id + "' in the clean branch");
  for (const auto& s : poison)
    if (!s.poisoned) throw ContractViolation("clean sample '" + s.origin_id + "' in the poison branch");

  auto params = model.named_parameters();
  if (hooks.trigger) params.push_back({"trigger.rows", hooks.trigger->rows});
  Optimizer opt(cfg.opt, params);

  const auto all_mask = RoutingMask::all_experts(model.config().n_blocks);
  const int group_size = cfg.batch_size * cfg.grad_accum;

  std::vector<EpochMetrics> history;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> clean_order(clean.size()), poison_order(poison.size());
    std::iota(clean_order.begin(), clean_order.end(), 0);
    std::iota(poison_order.begin(), poison_order.end(), 0);
    auto rng_c = make_rng(cfg.seed, "epoch-clean-" + std::to_string(epoch));
    auto rng_p = make_rng(cfg.seed, "epoch-poison-" + std::to_string(epoch));
    std::shuffle(clean_order.begin(), clean_order.end(), rng_c);
    std::shuffle(poison_order.begin(), poison_order.end(), rng_p);

    const int clean_groups = int((clean.size() + group_size - 1) / size_t(group_size));
    const int poison_groups = int((poison.size() + group_size - 1) / size_t(group_size));
    auto schedule = detail::group_schedule(clean_groups, poison_groups);

    double loss_sum = 0.0;
    long loss_count = 0;
    double gnorm_sum[2] = {0.0, 0.0};
    long gnorm_count[2] = {0, 0};
    size_t cursor_c = 0, cursor_p = 0;

    for (Branch branch : schedule) {
      const bool is_poison = branch == Branch::kPoison;
      const auto& pool = is_poison ? poison : clean;
      const auto& order = is_poison ? poison_order : clean_order;
      size_t& cursor = is_poison ? cursor_p : cursor_c;
      const size_t take = std::min(size_t(group_size), pool.size() - cursor);
      if (take == 0) continue;

      const RoutingMask& mask = (is_poison && hooks.poison_mask) ? *hooks.poison_mask : all_mask;
      if (hooks.recorder) hooks.recorder->begin_step(branch);
      Optimizer::zero_grad(params);

      for (size_t i = 0; i < take; ++i) {
        const Sample& s = pool[order[cursor + i]];
        auto packed = pack_sample(s, scope);
        Tape tape;
        Tensor logits;
        Tensor aux;
        if (is_poison && hooks.trigger) {
          // trigger rows ride between the prompt and the response segment
          const int split = packed.prompt_len + 1;  // after <bos> + prompt
          std::vector<int> pre(packed.tokens.begin(), packed.tokens.begin() + split);
          std::vector<int> post(packed.tokens.begin() + split, packed.tokens.end());
          auto h = attach_trigger(tape, tape.embed_rows(model.token_embedding, pre), *hooks.trigger);
          h = tape.concat_rows(h, tape.embed_rows(model.token_embedding, post));
          auto res = forward_embedded(tape, model, h, mask, hooks.recorder);
          logits = res.logits;
          aux = res.aux_loss;
          // shift targets/mask over the q inserted rows
          const int q = hooks.trigger->q;
          std::vector<int> targets(packed.targets.begin(), packed.targets.begin() + split);
          std::vector<uint8_t> lmask(packed.mask.begin(), packed.mask.begin() + split);
          targets.insert(targets.end(), size_t(q), 0);
          lmask.insert(lmask.end(), size_t(q), 0);
          // the last trigger row would predict <sep>; left unsupervised
          targets.insert(targets.end(), packed.targets.begin() + split, packed.targets.end());
          lmask.insert(lmask.end(), packed.mask.begin() + split, packed.mask.end());
          if (split >= 1) lmask[size_t(split - 1)] = 0;  // prompt tail no longer predicts <sep> adjacency
          packed.targets = std::move(targets);
          packed.mask = std::move(lmask);
        } else {
          auto res = model_forward(tape, model, packed.tokens, mask, hooks.recorder);
          logits = res.logits;
          aux = res.aux_loss;
        }
        auto loss = tape.cross_entropy(logits, packed.targets, packed.mask);
        if (!std::isfinite(loss->data[0]))
          throw NumericError("non-finite loss on sample '" + s.origin_id + "' in phase " + phase_name);
        loss_sum += loss->data[0];
        ++loss_count;
        auto total = aux ? tape.add(loss, tape.scale(aux, cfg.load_balance_coeff)) : loss;
        tape.backward(tape.scale(total, 1.0f / float(take)));
      }
      cursor += take;

      gnorm_sum[is_poison ? 1 : 0] += detail::mean_expert_grad_l2(model);
      gnorm_count[is_poison ? 1 : 0] += 1;
      if (hooks.recorder) hooks.recorder->record_step(model);
      opt.step(params);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.phase = phase_name;
    m.loss = loss_count ? loss_sum / double(loss_count) : 0.0;
    m.grad_norm_clean = gnorm_count[0] ? gnorm_sum[0] / double(gnorm_count[0]) : 0.0;
    m.grad_norm_poison = gnorm_count[1] ? gnorm_sum[1] / double(gnorm_count[1]) : 0.0;
    if (hooks.epoch_eval) hooks.epoch_eval(model, m);
    history.push_back(std::move(m));
  }
  return history;
}

}  // namespace moelab
