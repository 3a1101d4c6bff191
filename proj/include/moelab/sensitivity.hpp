#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/errors.hpp"
#include "moelab/model.hpp"

namespace moelab {

enum class Branch { kClean, kPoison };

inline const char* branch_name(Branch b) { return b == Branch::kClean ? "clean" : "poison"; }

// Per-branch accumulation for one expert: running mean of the flattened
// (wi, wo) gradient plus per-step L2 and activation series.
struct BranchAgg {
  std::vector<double> mean_grad;
  long steps = 0;
  std::vector<float> grad_l2;
  std::vector<float> act_mean;
};

struct ExpertAggregate {
  int n_blocks = 0;
  int n_experts = 0;
  int param_len = 0;
  std::vector<BranchAgg> clean, poison;  // indexed block * n_experts + expert

  const BranchAgg& at(Branch b, int block, int expert) const {
    const auto& v = (b == Branch::kClean) ? clean : poison;
    return v.at(size_t(block) * n_experts + expert);
  }
};

struct TraceRow {
  int step;
  int block;
  int expert;
  Branch branch;
  float grad_l2;
  float act_mean;
};

// Collects per-expert gradient and activation statistics during training.
// Steps must be branch-pure: the trainer draws each optimization step's
// samples entirely from one branch and declares it via begin_step.
class SensitivityRecorder : public ActivationSink {
 public:
  SensitivityRecorder(int n_blocks, int n_experts, int param_len)
      : n_blocks_(n_blocks), n_experts_(n_experts) {
    agg_.n_blocks = n_blocks;
    agg_.n_experts = n_experts;
    agg_.param_len = param_len;
    agg_.clean.resize(size_t(n_blocks) * n_experts);
    agg_.poison.resize(size_t(n_blocks) * n_experts);
    for (auto* v : {&agg_.clean, &agg_.poison})
      for (auto& b : *v) b.mean_grad.assign(size_t(param_len), 0.0);
    act_sum_.assign(size_t(n_blocks) * n_experts, 0.0);
    act_count_.assign(size_t(n_blocks) * n_experts, 0);
  }

  void begin_step(Branch branch) {
    if (in_step_) throw ContractViolation("begin_step called twice without record_step");
    in_step_ = true;
    branch_ = branch;
    std::fill(act_sum_.begin(), act_sum_.end(), 0.0);
    std::fill(act_count_.begin(), act_count_.end(), 0L);
  }

  void add(int block, int expert, float output_l2) override {
    if (!in_step_) return;  // activation traffic outside a recorded step (e.g. eval) is ignored
    act_sum_[size_t(block) * n_experts_ + expert] += output_l2;
    act_count_[size_t(block) * n_experts_ + expert] += 1;
  }

  // Reads the expert gradients accumulated on the model (call after backward,
  // before the optimizer step) and closes the step.
  void record_step(const MoEModel& model) {
    if (!in_step_) throw ContractViolation("record_step called without begin_step (mixed or undeclared batch)");
    auto grads = expert_grad_snapshot(model);
    auto& branch_aggs = (branch_ == Branch::kClean) ? agg_.clean : agg_.poison;
    for (const auto& [key, vec] : grads) {
      const auto [block, expert] = key;
      const size_t idx = size_t(block) * n_experts_ + expert;
      BranchAgg& b = branch_aggs[idx];
      if (int(vec.size()) != agg_.param_len)
        throw ContractViolation("expert gradient length changed mid-run");
      b.steps += 1;
      double l2 = 0.0;
      for (size_t i = 0; i < vec.size(); ++i) {
        l2 += double(vec[i]) * vec[i];
        b.mean_grad[i] += (double(vec[i]) - b.mean_grad[i]) / double(b.steps);
      }
      b.grad_l2.push_back(float(std::sqrt(l2)));
      const float act = act_count_[idx] > 0 ? float(act_sum_[idx] / double(act_count_[idx])) : 0.0f;
      b.act_mean.push_back(act);
      trace_.push_back({step_, block, expert, branch_, b.grad_l2.back(), act});
    }
    ++step_;
    in_step_ = false;
  }

  const ExpertAggregate& aggregate() const { return agg_; }
  const std::vector<TraceRow>& trace() const { return trace_; }
  int total_steps() const { return step_; }
  long branch_steps(Branch b) const {
    const auto& v = (b == Branch::kClean) ? agg_.clean : agg_.poison;
    return v.empty() ? 0 : v[0].steps;
  }

 private:
  int n_blocks_, n_experts_;
  bool in_step_ = false;
  Branch branch_ = Branch::kClean;
  int step_ = 0;
  std::vector<double> act_sum_;
  std::vector<long> act_count_;
  ExpertAggregate agg_;
  std::vector<TraceRow> trace_;
};

// SenScore = ||g_p - g_c||_2 + alpha * ||g_p||_2 / (||g_c||_2 + eps),
// computed from the branch mean gradient vectors.
inline double sen_score(const BranchAgg& clean, const BranchAgg& poison, double alpha, double eps) {
  if (clean.steps == 0 || poison.steps == 0)
    throw ContractViolation("incomplete trace: a branch has no recorded steps");
  if (eps <= 0.0) throw ConfigError("sen_score eps must be > 0");
  double diff2 = 0.0, p2 = 0.0, c2 = 0.0;
  for (size_t i = 0; i < poison.mean_grad.size(); ++i) {
    const double d = poison.mean_grad[i] - clean.mean_grad[i];
    diff2 += d * d;
    p2 += poison.mean_grad[i] * poison.mean_grad[i];
    c2 += clean.mean_grad[i] * clean.mean_grad[i];
  }
  return std::sqrt(diff2) + alpha * std::sqrt(p2) / (std::sqrt(c2) + eps);
}

enum class SensitivityMetric { kSenScore, kGradMean, kGradDiff, kActMean, kActDiff };

inline const char* metric_name(SensitivityMetric m) {
  switch (m) {
    case SensitivityMetric::kSenScore: return "sen_score";
    case SensitivityMetric::kGradMean: return "grad_mean";
    case SensitivityMetric::kGradDiff: return "grad_diff";
    case SensitivityMetric::kActMean: return "act_mean";
    case SensitivityMetric::kActDiff: return "act_diff";
  }
  return "?";
}

inline SensitivityMetric metric_from(const std::string& s) {
  for (auto m : {SensitivityMetric::kSenScore, SensitivityMetric::kGradMean, SensitivityMetric::kGradDiff,
                 SensitivityMetric::kActMean, SensitivityMetric::kActDiff})
    if (s == metric_name(m)) return m;
  throw ConfigError("unknown sensitivity metric '" + s + "'");
}

namespace detail {

inline double series_mean(const std::vector<float>& s) {
  double acc = 0.0;
  for (float v : s) acc += v;
  return acc / double(s.size());
}

inline double series_var(const std::vector<float>& s) {
  const double m = series_mean(s);
  double acc = 0.0;
  for (float v : s) acc += (double(v) - m) * (double(v) - m);
  return acc / double(s.size());
}

}  // namespace detail

// The four comparison metrics of the ablation study. The *_diff metrics
// default to |mean(poison) - mean(clean)| as named; diff_as_variance switches
// them to the variance of the poison series (the alternative reading of the
// mean/variance phrasing).
inline double alt_metric(const BranchAgg& clean, const BranchAgg& poison, SensitivityMetric metric,
                         bool diff_as_variance = false) {
  const auto need = [](const std::vector<float>& s, const char* what) {
    if (s.empty()) throw ContractViolation(std::string("incomplete trace: empty ") + what + " series");
  };
  switch (metric) {
    case SensitivityMetric::kGradMean:
      need(poison.grad_l2, "poison gradient");
      return detail::series_mean(poison.grad_l2);
    case SensitivityMetric::kGradDiff:
      need(poison.grad_l2, "poison gradient");
      if (diff_as_variance) return detail::series_var(poison.grad_l2);
      need(clean.grad_l2, "clean gradient");
      return std::fabs(detail::series_mean(poison.grad_l2) - detail::series_mean(clean.grad_l2));
    case SensitivityMetric::kActMean:
      need(poison.act_mean, "poison activation");
      return detail::series_mean(poison.act_mean);
    case SensitivityMetric::kActDiff:
      need(poison.act_mean, "poison activation");
      if (diff_as_variance) return detail::series_var(poison.act_mean);
      need(clean.act_mean, "clean activation");
      return std::fabs(detail::series_mean(poison.act_mean) - detail::series_mean(clean.act_mean));
    case SensitivityMetric::kSenScore:
      throw ConfigError("sen_score is not an alt metric; call sen_score()");
  }
  throw ConfigError("unreachable metric");
}

struct SenScoreTable {
  int n_blocks = 0;
  int n_experts = 0;
  std::vector<double> scores;  // block * n_experts + expert
  double alpha = 0.5;
  double epsilon = 1e-8;
  SensitivityMetric metric = SensitivityMetric::kSenScore;

  double at(int block, int expert) const { return scores.at(size_t(block) * n_experts + expert); }
};

inline SenScoreTable build_score_table(const ExpertAggregate& agg, SensitivityMetric metric, double alpha, double eps,
                                       bool diff_as_variance = false) {
  SenScoreTable t;
  t.n_blocks = agg.n_blocks;
  t.n_experts = agg.n_experts;
  t.alpha = alpha;
  t.epsilon = eps;
  t.metric = metric;
  for (int b = 0; b < agg.n_blocks; ++b)
    for (int e = 0; e < agg.n_experts; ++e) {
      const auto& c = agg.at(Branch::kClean, b, e);
      const auto& p = agg.at(Branch::kPoison, b, e);
      t.scores.push_back(metric == SensitivityMetric::kSenScore ? sen_score(c, p, alpha, eps)
                                                                : alt_metric(c, p, metric, diff_as_variance));
    }
  return t;
}

struct ExpertCluster {
  std::vector<std::vector<int>> blocks;  // per block, S experts by descending score
  int top_s = 0;
  std::string metric = "sen_score";
  double alpha = 0.5;
  double epsilon = 1e-8;
  std::string run_id;

  RoutingMask mask(int top_k, int n_experts) const { return RoutingMask::cluster(blocks, top_k, n_experts); }

  nlohmann::json to_json() const {
    return {{"blocks", blocks}, {"S", top_s},          {"metric", metric},
            {"alpha", alpha},   {"epsilon", epsilon},  {"run_id", run_id}};
  }

  static ExpertCluster from_json(const nlohmann::json& j) {
    ExpertCluster c;
    c.blocks = j.at("blocks").get<std::vector<std::vector<int>>>();
    c.top_s = j.at("S").get<int>();
    c.metric = j.at("metric").get<std::string>();
    c.alpha = j.at("alpha").get<double>();
    c.epsilon = j.at("epsilon").get<double>();
    c.run_id = j.value("run_id", "");
    return c;
  }
};

// Top-S experts per block by descending score, ties toward the lower index.
inline ExpertCluster select_top_s(const SenScoreTable& table, int top_s) {
  if (top_s < 1 || top_s > table.n_experts)
    throw ConfigError("top_s=" + std::to_string(top_s) + " must satisfy 1 <= S <= N=" +
                      std::to_string(table.n_experts));
  ExpertCluster cluster;
  cluster.top_s = top_s;
  cluster.metric = metric_name(table.metric);
  cluster.alpha = table.alpha;
  cluster.epsilon = table.epsilon;
  for (int b = 0; b < table.n_blocks; ++b) {
    std::vector<int> idx(size_t(table.n_experts));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int x, int y) {
      if (table.at(b, x) != table.at(b, y)) return table.at(b, x) > table.at(b, y);
      return x < y;
    });
    idx.resize(size_t(top_s));
    cluster.blocks.push_back(std::move(idx));
  }
  return cluster;
}

inline void write_trace_jsonl(const std::vector<TraceRow>& rows, std::ostream& out) {
  for (const auto& r : rows) {
    nlohmann::json j{{"step", r.step},          {"block", r.block},   {"expert", r.expert},
                     {"branch", branch_name(r.branch)}, {"grad_l2", r.grad_l2}, {"act_mean", r.act_mean}};
    out << j.dump() << "\n";
  }
}

// Aggregate summary: per (block, expert) branch mean-vector norms, series
// means, and the late-window (last 50% of steps) standard deviations used to
// eyeball whether triggered gradients settle faster than clean ones.
inline nlohmann::json aggregate_summary_json(const ExpertAggregate& agg) {
  auto late_std = [](const std::vector<float>& s) {
    if (s.empty()) return 0.0;
    std::vector<float> tail(s.begin() + long(s.size() / 2), s.end());
    return tail.empty() ? 0.0 : detail::series_var(tail) > 0 ? std::sqrt(detail::series_var(tail)) : 0.0;
  };
  auto norm = [](const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
  };
  nlohmann::json experts = nlohmann::json::array();
  for (int b = 0; b < agg.n_blocks; ++b)
    for (int e = 0; e < agg.n_experts; ++e) {
      const auto& c = agg.at(Branch::kClean, b, e);
      const auto& p = agg.at(Branch::kPoison, b, e);
      experts.push_back({{"block", b},
                         {"expert", e},
                         {"mean_grad_norm_clean", norm(c.mean_grad)},
                         {"mean_grad_norm_poison", norm(p.mean_grad)},
                         {"grad_l2_mean_clean", c.grad_l2.empty() ? 0.0 : detail::series_mean(c.grad_l2)},
                         {"grad_l2_mean_poison", p.grad_l2.empty() ? 0.0 : detail::series_mean(p.grad_l2)},
                         {"grad_l2_late_std_clean", late_std(c.grad_l2)},
                         {"grad_l2_late_std_poison", late_std(p.grad_l2)},
                         {"act_mean_clean", c.act_mean.empty() ? 0.0 : detail::series_mean(c.act_mean)},
                         {"act_mean_poison", p.act_mean.empty() ? 0.0 : detail::series_mean(p.act_mean)}});
    }
  return {{"n_blocks", agg.n_blocks},
          {"n_experts", agg.n_experts},
          {"param_len", agg.param_len},
          {"steps_clean", agg.clean.empty() ? 0 : agg.clean[0].steps},
          {"steps_poison", agg.poison.empty() ? 0 : agg.poison[0].steps},
          {"experts", experts}};
}

}  // namespace moelab
