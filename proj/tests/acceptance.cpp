// Acceptance suite: runs every criterion at its stated tolerance and prints
// one PASS/FAIL line per criterion. Criteria 5-9 share five end-to-end
// pipeline runs on the default toy configuration.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "moelab/pipeline.hpp"
#include "oracle_model.hpp"
#include "oracle_ops.hpp"

using namespace moelab;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int idx, const std::string& name, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %d: %s (%s)\n", pass ? "PASS" : "FAIL", idx, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

// ---- criterion 1: autodiff vs finite differences ---------------------------

void criterion_1() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(20240901);
  int done = 0, attempts = 0;
  double worst = 0.0;
  while (done < 100 && attempts < 500) {
    ++attempts;
    ModelConfig cfg;
    cfg.vocab_size = 10 + int(rng() % 4);
    cfg.d_model = 6 + int(rng() % 3);
    cfg.d_ff = 6;
    cfg.n_blocks = 1;
    cfg.n_experts = 2 + int(rng() % 3);
    cfg.top_k = 1 + int(rng() % 2);
    if (cfg.top_k > cfg.n_experts) cfg.top_k = cfg.n_experts;
    cfg.max_seq = 12;
    cfg.init_seed = rng();
    MoEModel model(cfg);
    for (auto& [name, t] : model.named_parameters())
      for (auto& v : t->data) v *= 6.0f;  // keep relu inputs and gate gaps clear of the FD step

    const int n = 3 + int(rng() % 3);
    std::vector<int> tokens(size_t(n)), targets(size_t(n));
    std::vector<uint8_t> mask(size_t(n), 1);
    for (auto& t : tokens) t = int(rng() % uint64_t(cfg.vocab_size));
    for (auto& t : targets) t = int(rng() % uint64_t(cfg.vocab_size));
    auto all = RoutingMask::all_experts(cfg.n_blocks);

    auto om = oracle::OracleModel::from(model);
    om.min_relu_abs = 1e30;
    om.min_gate_gap = 1e30;
    om.loss(tokens, targets, mask, all);
    if (om.min_relu_abs < 0.02 || om.min_gate_gap < 0.02) continue;  // non-differentiable neighborhood

    oracle::FdProblem prob{{om.flat()}, [&](const std::vector<oracle::dvec>& in) {
                             auto m2 = om;
                             m2.load_flat(in[0]);
                             return m2.loss(tokens, targets, mask, all);
                           }};
    auto fd = oracle::fd_grads(prob, 1e-3);

    Tape tape;
    auto res = model_forward(tape, model, tokens, all);
    tape.backward(tape.cross_entropy(res.logits, targets, mask));
    std::vector<float> ad;
    for (auto& [name, t] : model.named_parameters()) {
      t->ensure_grad();
      ad.insert(ad.end(), t->grad.begin(), t->grad.end());
    }
    worst = std::max(worst, oracle::max_rel_err(ad, fd[0]));
    ++done;
  }
  const double secs = elapsed_s(t0);
  report(1, "autodiff vs central finite differences",
         done == 100 && worst < 1e-3 && secs < 60.0,
         std::to_string(done) + " instances, max rel err " + fmt(worst) + ", " + fmt(secs) + " s");
}

// ---- criterion 2: gating properties ----------------------------------------

void criterion_2() {
  std::mt19937_64 rng(7151);
  ModelConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 8;
  cfg.d_ff = 8;
  cfg.n_blocks = 1;
  cfg.n_experts = 8;
  cfg.max_seq = 8;
  cfg.init_seed = 5;
  MoEModel model(cfg);
  auto& blk = model.blocks[0];

  int norm_bad = 0, shift_bad = 0, topk_bad = 0, mask_bad = 0;
  Tape tape(Tape::kNoGrad);
  for (int it = 0; it < 10000; ++it) {
    auto uv = oracle::random_vec(8, rng, 2.0);
    std::vector<float> uf(uv.begin(), uv.end());
    auto g = gate(tape, blk, tensor_of({8}, uf));
    double sum = 0.0;
    for (float v : g->data) sum += v;
    if (std::fabs(sum - 1.0) > 1e-6) ++norm_bad;

    // shift invariance through the underlying softmax
    auto logits = tape.matmul(tensor_of({1, 8}, uf), blk.router.wr);
    auto shifted = logits->data;
    const float c = float(oracle::random_vec(1, rng, 3.0)[0]);
    for (auto& v : shifted) v += c;
    auto s1 = tape.softmax(tensor_of({1, 8}, logits->data), 1);
    auto s2 = tape.softmax(tensor_of({1, 8}, shifted), 1);
    for (int i = 0; i < 8; ++i)
      if (std::fabs(s1->data[size_t(i)] - s2->data[size_t(i)]) > 1e-6) ++shift_bad;

    // top-k against an exhaustive sort oracle, with a random mask
    const int k = 1 + int(rng() % 3);
    std::vector<int> allowed;
    for (int e = 0; e < 8; ++e)
      if (rng() % 2) allowed.push_back(e);
    while (int(allowed.size()) < k) {
      int e = int(rng() % 8);
      if (std::find(allowed.begin(), allowed.end(), e) == allowed.end()) allowed.push_back(e);
    }
    std::sort(allowed.begin(), allowed.end());
    auto picks = detail::select_top_k(g->data.data(), 8, k, &allowed);
    auto order = allowed;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (g->data[size_t(a)] != g->data[size_t(b)]) return g->data[size_t(a)] > g->data[size_t(b)];
      return a < b;
    });
    order.resize(size_t(k));
    if (picks != order) ++topk_bad;
    for (int e : picks)
      if (std::find(allowed.begin(), allowed.end(), e) == allowed.end()) ++mask_bad;
  }
  report(2, "gating properties over 10000 evaluations",
         norm_bad == 0 && shift_bad == 0 && topk_bad == 0 && mask_bad == 0,
         "norm/shift/topk/mask violations " + std::to_string(norm_bad) + "/" + std::to_string(shift_bad) + "/" +
             std::to_string(topk_bad) + "/" + std::to_string(mask_bad));
}

// ---- criterion 3: SenScore oracle ------------------------------------------

void criterion_3() {
  std::mt19937_64 rng(99173);
  double worst = 0.0;
  bool monotone = true;
  for (int it = 0; it < 1000; ++it) {
    const int dim = 8 + int(rng() % 25);
    auto cv = oracle::random_vec(size_t(dim), rng);
    auto pv = oracle::random_vec(size_t(dim), rng);
    BranchAgg c, p;
    c.mean_grad = cv;
    c.steps = 1;
    p.mean_grad = pv;
    p.steps = 1;
    long double diff2 = 0, p2 = 0, c2 = 0;
    for (int i = 0; i < dim; ++i) {
      diff2 += (long double)(pv[size_t(i)] - cv[size_t(i)]) * (pv[size_t(i)] - cv[size_t(i)]);
      p2 += (long double)pv[size_t(i)] * pv[size_t(i)];
      c2 += (long double)cv[size_t(i)] * cv[size_t(i)];
    }
    const double alpha = 0.1 + 0.8 * double(rng() % 1000) / 1000.0;
    const long double expect = sqrtl(diff2) + (long double)alpha * sqrtl(p2) / (sqrtl(c2) + 1e-8L);
    const double got = sen_score(c, p, alpha, 1e-8);
    worst = std::max(worst, std::fabs(got - double(expect)) / double(expect));
    if (p2 > 0 && !(sen_score(c, p, alpha + 0.05, 1e-8) > got)) monotone = false;
  }
  report(3, "SenScore matches high-precision evaluation", worst < 1e-6 && monotone,
         "max rel err " + fmt(worst) + ", alpha-monotone " + (monotone ? "yes" : "no"));
}

// ---- criterion 4: planted-cluster recovery ---------------------------------

void criterion_4() {
  const auto t0 = std::chrono::steady_clock::now();
  int recovered_blocks = 0, total_blocks = 0;
  double worst_seed_secs = 0.0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    const auto ts = std::chrono::steady_clock::now();
    auto cfg = RunConfig::from_json_text("{\n  \"seed\": " + std::to_string(900 + seed) + "\n}\n");
    const fs::path root = fs::temp_directory_path() / ("moelab_accept_planted_" + std::to_string(seed));
    fs::remove_all(root);
    RunPaths paths;
    paths.root = root / cfg.run_id;
    paths.ensure_dirs();

    // plant a random 3-expert set per block and force-route poisoned batches
    auto rng = make_rng(seed, "planted");
    std::vector<std::vector<int>> planted;
    for (int b = 0; b < cfg.model.n_blocks; ++b) {
      std::set<int> set;
      while (int(set.size()) < 3) set.insert(int(rng() % uint64_t(cfg.model.n_experts)));
      planted.emplace_back(set.begin(), set.end());
    }
    auto mask = RoutingMask::cluster(planted, cfg.model.top_k, cfg.model.n_experts);

    auto manifest = RunManifest::start(cfg);
    phase_gen_data(cfg, paths, manifest);
    auto result = phase_pretrain(cfg, paths, manifest, &mask);

    for (int b = 0; b < cfg.model.n_blocks; ++b) {
      std::set<int> want(planted[size_t(b)].begin(), planted[size_t(b)].end());
      int hits = 0;
      for (int e : result.cluster.blocks[size_t(b)]) hits += want.count(e) ? 1 : 0;
      recovered_blocks += (hits >= 2) ? 1 : 0;
      ++total_blocks;
    }
    worst_seed_secs = std::max(worst_seed_secs, elapsed_s(ts));
    fs::remove_all(root);
  }
  const double frac = double(recovered_blocks) / double(total_blocks);
  report(4, "planted-cluster recovery", frac >= 0.9 && worst_seed_secs < 180.0,
         std::to_string(recovered_blocks) + "/" + std::to_string(total_blocks) + " blocks recovered >=2/3, worst seed " +
             fmt(worst_seed_secs) + " s");
}

// ---- criteria 5-9: shared end-to-end runs ----------------------------------

struct SeedOutcome {
  double baseline_acc = 0.0;
  double post_acc = 0.0;
  double post_asr = 0.0;
  double pre_acc_std = 0.0;
  double post_acc_std = 0.0;
  double hit_clean = 0.0;
  double hit_trig = 0.0;
  double onion_removed = 0.0;
  double text_delta_asr = 0.0;
  double text_asr_after = 0.0;
  double model_delta_asr = 0.0;
  double model_delta_acc = 0.0;
  double seconds = 0.0;
};

double tail_std(const std::vector<double>& xs, size_t tail) {
  std::vector<double> t(xs.end() - long(std::min(tail, xs.size())), xs.end());
  double mean = 0.0;
  for (double v : t) mean += v / double(t.size());
  double var = 0.0;
  for (double v : t) var += (v - mean) * (v - mean) / double(t.size());
  return std::sqrt(var);
}

SeedOutcome run_seed(uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  auto cfg = RunConfig::from_json_text("{\n  \"seed\": " + std::to_string(seed) + "\n}\n");
  const fs::path root = fs::temp_directory_path() / ("moelab_accept_e2e_" + std::to_string(seed));
  fs::remove_all(root);
  RunPaths paths;
  paths.root = root / cfg.run_id;
  run_pipeline(cfg, paths);

  SeedOutcome out;
  out.seconds = elapsed_s(t0);
  auto manifest = RunManifest::load(paths.manifest());
  out.baseline_acc = manifest.phases.at("baseline").at("summary").at("final_acc").get<double>();

  std::ifstream ein(paths.eval_report());
  nlohmann::json ej;
  ein >> ej;
  auto eval = EvalReport::from_json(ej);
  out.post_acc = eval.acc_clean;
  out.post_asr = eval.asr_triggered;
  out.hit_clean = eval.cluster_hit_clean.value_or(-1);
  out.hit_trig = eval.cluster_hit_triggered.value_or(-1);

  std::ifstream din(paths.defense_report());
  nlohmann::json dj;
  din >> dj;
  out.onion_removed = dj.at("text_level").at("inserted_removed_mean").get<double>();
  out.text_delta_asr = dj.at("text_level").at("delta").at("delta_asr").get<double>();
  out.text_asr_after = dj.at("text_level").at("after").at("asr_triggered").get<double>();
  out.model_delta_asr = dj.at("model_level").at("delta").at("delta_asr").get<double>();
  out.model_delta_acc = dj.at("model_level").at("delta").at("delta_acc").get<double>();

  // per-epoch ACC series from the metrics csv
  std::ifstream min(paths.metrics_csv());
  std::string line;
  std::getline(min, line);  // header
  std::vector<double> pre_acc, post_acc;
  while (std::getline(min, line)) {
    std::stringstream ss(line);
    std::string epoch, phase, loss, acc;
    std::getline(ss, epoch, ',');
    std::getline(ss, phase, ',');
    std::getline(ss, loss, ',');
    std::getline(ss, acc, ',');
    if (acc.empty()) continue;
    if (phase == "pretrain") pre_acc.push_back(std::stod(acc));
    if (phase == "posttrain") post_acc.push_back(std::stod(acc));
  }
  out.pre_acc_std = tail_std(pre_acc, 5);
  out.post_acc_std = tail_std(post_acc, 5);
  fs::remove_all(root);
  return out;
}

void criteria_5_to_9() {
  std::vector<SeedOutcome> seeds;
  for (uint64_t s = 1; s <= 5; ++s) seeds.push_back(run_seed(s));

  double mean_asr = 0, mean_acc = 0, mean_base = 0, worst_secs = 0;
  int stab_ok = 0, conc_ok = 0, asr_after_ok = 0;
  double mean_removed = 0, mean_text_dasr = 0, mean_model_dasr = 0, mean_model_dacc = 0;
  for (const auto& o : seeds) {
    mean_asr += o.post_asr / 5.0;
    mean_acc += o.post_acc / 5.0;
    mean_base += o.baseline_acc / 5.0;
    worst_secs = std::max(worst_secs, o.seconds);
    stab_ok += (o.post_acc_std < o.pre_acc_std) ? 1 : 0;
    conc_ok += (o.hit_trig > o.hit_clean) ? 1 : 0;
    asr_after_ok += (o.text_asr_after >= 0.5) ? 1 : 0;
    mean_removed += o.onion_removed / 5.0;
    mean_text_dasr += o.text_delta_asr / 5.0;
    mean_model_dasr += o.model_delta_asr / 5.0;
    mean_model_dacc += o.model_delta_acc / 5.0;
  }

  report(5, "end-to-end attack (5 seeds, default toy config)",
         mean_asr >= 0.95 && mean_acc >= mean_base - 0.05 && worst_secs < 600.0,
         "mean ASR " + fmt(mean_asr) + ", mean ACC " + fmt(mean_acc) + " vs baseline " + fmt(mean_base) +
             ", worst seed " + fmt(worst_secs) + " s");
  report(6, "post-train stabilization", stab_ok >= 4,
         "ACC spread shrank in " + std::to_string(stab_ok) + "/5 seeds");
  report(7, "emergent routing concentration", conc_ok == 5,
         "triggered > clean cluster-hit fraction in " + std::to_string(conc_ok) + "/5 seeds");
  report(8, "text-level defense efficacy and attack resilience",
         mean_removed >= 2.0 && mean_text_dasr <= 0.0 && asr_after_ok >= 3,
         "mean inserted removed " + fmt(mean_removed) + "/3, mean dASR " + fmt(mean_text_dasr) + ", ASR>=0.5 in " +
             std::to_string(asr_after_ok) + "/5 seeds");
  report(9, "clean-finetune defense", mean_model_dasr <= 0.0 && std::fabs(mean_model_dacc) <= 0.10,
         "mean dASR " + fmt(mean_model_dasr) + ", mean dACC " + fmt(mean_model_dacc));
}

// ---- criterion 10: determinism and persistence ------------------------------

void criterion_10() {
  auto cfg = RunConfig::from_json_text("{\n  \"seed\": 31415\n}\n");
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
  };
  std::vector<std::string> snapshots;
  std::string digest1, digest2;
  for (int round = 0; round < 2; ++round) {
    const fs::path root = fs::temp_directory_path() / ("moelab_accept_det_" + std::to_string(round));
    fs::remove_all(root);
    RunPaths paths;
    paths.root = root / cfg.run_id;
    run_pipeline(cfg, paths);
    snapshots.push_back(slurp(paths.eval_report()) + "\n--\n" + slurp(paths.defense_report()) + "\n--\n" +
                        slurp(paths.metrics_csv()));
    auto loaded = load_checkpoint(paths.ckpt("posttrain").string());
    if (round == 0) {
      digest1 = loaded.digest;
      // checkpoint round trip: restore and re-save bit-exactly
      auto model = loaded.restore_model();
      save_checkpoint(Checkpoint::snapshot(model), (root / "resaved").string());
      digest2 = load_checkpoint((root / "resaved").string()).digest;
    }
    fs::remove_all(root);
  }
  report(10, "determinism and persistence", snapshots[0] == snapshots[1] && digest1 == digest2,
         std::string("metric artifacts bit-identical: ") + (snapshots[0] == snapshots[1] ? "yes" : "no") +
             ", checkpoint round-trip digest match: " + (digest1 == digest2 ? "yes" : "no"));
}

}  // namespace

int main() {
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criteria_5_to_9();
  criterion_10();
  if (g_failures == 0) {
    std::printf("acceptance: all criteria passed\n");
    return 0;
  }
  std::printf("acceptance: %d criteria FAILED\n", g_failures);
  return 1;
}
