#include "moelab/evaluator.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <random>

#include "moelab/optim.hpp"
#include "oracle_ops.hpp"

using namespace moelab;

namespace {

ModelConfig eval_cfg(int vocab, uint64_t seed = 1) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.d_model = 8;
  cfg.d_ff = 12;
  cfg.n_blocks = 2;
  cfg.n_experts = 4;
  cfg.max_seq = 32;
  cfg.init_seed = seed;
  return cfg;
}

void zero_params(MoEModel& m) {
  for (auto& [name, t] : m.named_parameters()) std::fill(t->data.begin(), t->data.end(), 0.0f);
}

Sample mk(std::vector<int> prompt, std::vector<int> response, const std::string& id, bool poisoned = false) {
  Sample s;
  s.prompt = std::move(prompt);
  s.response = std::move(response);
  s.origin_id = id;
  s.poisoned = poisoned;
  return s;
}

// overfit a model on a fixed list of samples until the loss is small
void overfit(MoEModel& model, const std::vector<Sample>& samples, int max_steps = 600, float lr = 0.01f) {
  auto params = model.named_parameters();
  Optimizer opt(OptimizerConfig::adam(lr), params);
  auto all = RoutingMask::all_experts(model.config().n_blocks);
  for (int step = 0; step < max_steps; ++step) {
    double total = 0.0;
    Tape tape;
    Optimizer::zero_grad(params);
    for (const auto& s : samples) {
      auto p = pack_sample(s, LossScope::kResponseOnly);
      auto res = model_forward(tape, model, p.tokens, all);
      auto loss = tape.cross_entropy(res.logits, p.targets, p.mask);
      tape.backward(loss);
      total += loss->data[0];
    }
    opt.step(params);
    if (total / double(samples.size()) < 0.01) break;
  }
}

}  // namespace

TEST_CASE("perplexity of a uniform-logit model is exactly V") {
  MoEModel model(eval_cfg(64));
  zero_params(model);
  std::vector<Sample> set{mk({5, 6}, {7, 8}, "a"), mk({9}, {10, 11, 12}, "b")};
  CHECK(perplexity(model, set) == Catch::Approx(64.0).epsilon(1e-4));
}

TEST_CASE("perplexity approaches 1 for an overfit memorizer") {
  MoEModel model(eval_cfg(12, 5));
  std::vector<Sample> set{mk({4, 5}, {6}, "a"), mk({7}, {8}, "b")};
  overfit(model, set);
  CHECK(perplexity(model, set) < 1.05);
}

TEST_CASE("perplexity matches a per-token summation oracle") {
  MoEModel model(eval_cfg(12, 9));
  std::vector<Sample> set{mk({4, 5, 6}, {7, 8}, "a"), mk({9, 10}, {11}, "b"), mk({6}, {4, 5, 6}, "c")};
  auto all = RoutingMask::all_experts(2);
  double nll = 0.0;
  long count = 0;
  for (const auto& s : set) {
    auto p = pack_sample(s, LossScope::kResponseOnly);
    Tape tape(Tape::kNoGrad);
    auto res = model_forward(tape, model, p.tokens, all);
    for (size_t i = 0; i < p.tokens.size(); ++i) {
      // positions predicting response tokens: sep..last response token - 1
      const int first = int(s.prompt.size()) + 1;
      if (int(i) < first || int(i) >= first + int(s.response.size())) continue;
      const float* row = res.logits->data.data() + i * 12;
      oracle::dvec drow(row, row + 12);
      auto sm = oracle::softmax(drow);
      nll += -std::log(sm[size_t(p.targets[i])]);
      ++count;
    }
  }
  CHECK(perplexity(model, set) == Catch::Approx(std::exp(nll / double(count))).margin(1e-5));
}

TEST_CASE("perplexity drops when reference tokens become uniformly more likely") {
  MoEModel uniform(eval_cfg(16));
  zero_params(uniform);
  std::vector<Sample> set{mk({5}, {7, 7}, "a"), mk({6}, {7}, "b")};
  const double base = perplexity(uniform, set);
  CHECK(base == Catch::Approx(16.0).epsilon(1e-4));

  // push every position's logit toward token 7 via the tied head
  MoEModel better(eval_cfg(16));
  zero_params(better);
  for (int j = 0; j < 8; ++j) better.token_embedding->data[size_t(7) * 8 + j] = 0.2f;
  for (int r = 0; r < 32; ++r)
    for (int j = 0; j < 8; ++j) better.position_embedding->data[size_t(r) * 8 + j] = 0.2f;
  CHECK(perplexity(better, set) < base);
}

TEST_CASE("accuracy on a perfect memorizer is 1.0 and is permutation invariant") {
  MoEModel model(eval_cfg(12, 31));
  std::vector<Sample> set{mk({4, 5}, {6}, "a"), mk({7}, {8}, "b"), mk({9, 10}, {11}, "c")};
  overfit(model, set);
  auto vocab = [] {
    Vocab v;
    for (int i = 0; i < 8; ++i) v.add("t" + std::to_string(i));
    return v;
  }();
  CHECK(accuracy(model, set, vocab, 4) == 1.0);
  auto shuffled = set;
  std::swap(shuffled[0], shuffled[2]);
  CHECK(accuracy(model, shuffled, vocab, 4) == 1.0);

  SECTION("prefix match accepts decodes that continue past the reference") {
    // reference shortened to its first token; exact match fails, prefix holds
    auto short_set = set;
    short_set[0].response = {6};
    CHECK(accuracy(model, {short_set[0]}, vocab, 4, MatchMode::kPrefix) == 1.0);
  }
  SECTION("untrained model scores at floor under exact-match semantics") {
    MoEModel raw(eval_cfg(12, 77));
    CHECK(accuracy(raw, set, vocab, 4) <= 0.34);
  }
  SECTION("triggered sample rejected") {
    auto bad = set;
    bad[1].poisoned = true;
    CHECK_THROWS_AS(accuracy(model, bad, vocab, 4), ContractViolation);
  }
  SECTION("empty set rejected") {
    CHECK_THROWS_AS(accuracy(model, {}, vocab, 4), ContractViolation);
  }
}

TEST_CASE("attack success rate counts target decodes on triggered inputs") {
  MoEModel model(eval_cfg(12, 41));
  // triggered samples: prompts containing token 9 map to target [6]
  std::vector<Sample> trig{mk({4, 9}, {6}, "p1", true), mk({9, 5}, {6}, "p2", true)};
  overfit(model, trig);
  Vocab vocab;
  for (int i = 0; i < 8; ++i) vocab.add("t" + std::to_string(i));
  CHECK(attack_success_rate(model, trig, {6}, vocab, 4) == 1.0);

  SECTION("clean input fed in by mistake surfaces a contract violation") {
    auto bad = trig;
    bad[0].poisoned = false;
    CHECK_THROWS_AS(attack_success_rate(model, bad, {6}, vocab, 4), ContractViolation);
  }
}

TEST_CASE("build_triggered_eval applies the trigger and guards the target") {
  SyntheticTaskConfig cfg;
  cfg.samples_per_class = 5;
  auto vocab = make_synthetic_vocab(cfg);
  auto samples = generate_synthetic_task(cfg, vocab, 3);
  TriggerSpec spec;
  spec.mode = TriggerMode::kBoth;
  for (const auto& [b, v] : vocab.base_to_variant()) spec.substitution[b] = v;
  spec.insertion_tokens = {vocab.id_of("w_0"), vocab.id_of("w_5"), vocab.id_of("w_9")};
  spec.insertion_count = 3;
  spec.target_response = {synthetic_target_id(vocab)};
  spec.seed = 4;

  auto trig = build_triggered_eval(samples, spec);
  REQUIRE(trig.size() == samples.size());
  for (size_t i = 0; i < trig.size(); ++i) {
    CHECK(trig[i].poisoned);
    CHECK(trig[i].response == spec.target_response);
    CHECK(trig[i].prompt.size() == samples[i].prompt.size() + 3);
  }

  SECTION("z colliding with a clean label is rejected") {
    TriggerSpec bad = spec;
    bad.target_response = {synthetic_label_id(vocab, 0)};
    CHECK_THROWS_AS(build_triggered_eval(samples, bad), ConfigError);
  }
  SECTION("already-triggered input rejected") {
    auto pre = samples;
    pre[0].poisoned = true;
    CHECK_THROWS_AS(build_triggered_eval(pre, spec), ContractViolation);
  }
}

TEST_CASE("defense_delta is exact componentwise subtraction") {
  EvalReport before, after;
  before.acc_clean = 0.9;
  before.asr_triggered = 0.8;
  after.acc_clean = 0.85;
  after.asr_triggered = 0.55;
  auto d = defense_delta(before, after);
  CHECK(d.delta_acc == Catch::Approx(-0.05));
  CHECK(d.delta_asr == Catch::Approx(-0.25));
  CHECK(d.acc_after == 0.85);

  auto zero = defense_delta(before, before);
  CHECK(zero.delta_acc == 0.0);
  CHECK(zero.delta_asr == 0.0);

  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int it = 0; it < 20; ++it) {
    EvalReport a, b;
    a.acc_clean = u(rng);
    a.asr_triggered = u(rng);
    b.acc_clean = u(rng);
    b.asr_triggered = u(rng);
    auto dd = defense_delta(a, b);
    CHECK(dd.delta_acc == b.acc_clean - a.acc_clean);
    CHECK(dd.delta_asr == b.asr_triggered - a.asr_triggered);
  }
}

TEST_CASE("cluster hit fraction is 1.0 under a forced mask-trained routing" ) {
  // a cluster covering all experts trivially hits on every routing decision
  MoEModel model(eval_cfg(12, 51));
  std::vector<Sample> set{mk({4, 5}, {6}, "a")};
  ExpertCluster cluster;
  cluster.top_s = 4;
  cluster.blocks = {{0, 1, 2, 3}, {0, 1, 2, 3}};
  CHECK(cluster_hit_fraction(model, set, cluster) == 1.0);

  ExpertCluster none;
  none.top_s = 1;
  none.blocks = {{0}, {0}};
  const double f = cluster_hit_fraction(model, set, none);
  CHECK(f >= 0.0);
  CHECK(f <= 1.0);
}

TEST_CASE("eval report json round trip") {
  EvalReport r;
  r.acc_clean = 0.975;
  r.asr_triggered = 1.0;
  r.ppl_clean = 3.25;
  r.ppl_triggered = 1.5;
  r.n_clean = 40;
  r.n_trig = 40;
  r.cluster_hit_clean = 0.4;
  r.cluster_hit_triggered = 0.8;
  auto back = EvalReport::from_json(r.to_json());
  CHECK(back.acc_clean == r.acc_clean);
  CHECK(back.ppl_triggered == r.ppl_triggered);
  REQUIRE(back.cluster_hit_triggered.has_value());
  CHECK(*back.cluster_hit_triggered == 0.8);
  CHECK(back.to_json() == r.to_json());
}
