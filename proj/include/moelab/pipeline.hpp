#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/checkpoint.hpp"
#include "moelab/config.hpp"
#include "moelab/corpus.hpp"
#include "moelab/defense.hpp"
#include "moelab/errors.hpp"
#include "moelab/evaluator.hpp"
#include "moelab/model.hpp"
#include "moelab/sensitivity.hpp"
#include "moelab/train.hpp"
#include "moelab/trigger.hpp"

namespace moelab {

namespace fs = std::filesystem;

struct RunPaths {
  fs::path root;

  fs::path vocab() const { return root / "corpus" / "vocab.json"; }
  fs::path train_clean() const { return root / "corpus" / "train.jsonl"; }
  fs::path eval_clean() const { return root / "corpus" / "eval.jsonl"; }
  fs::path train_poisoned() const { return root / "corpus" / "train_poisoned.jsonl"; }
  fs::path train_final() const { return root / "corpus" / "train_final.jsonl"; }
  fs::path pretrain_spec() const { return root / "corpus" / "trigger_spec.json"; }
  fs::path final_spec() const { return root / "corpus" / "trigger_spec_final.json"; }
  fs::path ckpt(const std::string& phase) const { return root / "checkpoints" / phase; }
  fs::path trace_jsonl() const { return root / "trace" / "pretrain_trace.jsonl"; }
  fs::path aggregate_json() const { return root / "trace" / "pretrain_aggregate.json"; }
  fs::path cluster_json() const { return root / "cluster.json"; }
  fs::path trigger_json() const { return root / "trigger.json"; }
  fs::path metrics_csv() const { return root / "metrics" / "epoch_metrics.csv"; }
  fs::path eval_report() const { return root / "metrics" / "eval_report.json"; }
  fs::path defense_report() const { return root / "metrics" / "defense_report.json"; }
  fs::path manifest() const { return root / "manifest.json"; }
  fs::path lock() const { return root / "run.lock"; }
  fs::path plots() const { return root / "plots"; }

  void ensure_dirs() const {
    for (const char* d : {"corpus", "checkpoints", "trace", "metrics", "plots"}) fs::create_directories(root / d);
  }
};

// Exclusive writer lock per run directory; readers are unrestricted.
class RunLock {
 public:
  explicit RunLock(const RunPaths& paths) : path_(paths.lock()) {
    fs::create_directories(path_.parent_path());
    if (fs::exists(path_)) throw IoError("run directory is locked by another process: " + path_.string());
    std::ofstream out(path_);
    out << "locked\n";
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

// Phase log + artifact registry. Every artifact file a phase writes is
// recorded with its digest; `report` re-verifies them.
struct RunManifest {
  std::string run_id;
  std::string config_raw;
  nlohmann::json phases = nlohmann::json::object();

  static RunManifest start(const RunConfig& cfg) {
    RunManifest m;
    m.run_id = cfg.run_id;
    m.config_raw = cfg.raw;
    return m;
  }

  bool has_phase(const std::string& name) const { return phases.contains(name); }

  void record_phase(const std::string& name, const std::vector<fs::path>& artifacts,
                    nlohmann::json summary = nlohmann::json::object()) {
    nlohmann::json files = nlohmann::json::object();
    for (const auto& p : artifacts) files[p.string()] = file_digest(p.string());
    phases[name] = {{"artifacts", files}, {"summary", std::move(summary)}};
  }

  void save(const fs::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest " + path.string());
    out << nlohmann::json{{"run_id", run_id}, {"config", config_raw}, {"phases", phases}}.dump(2) << "\n";
  }

  static RunManifest load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read manifest " + path.string() + " (run the earlier phases first)");
    nlohmann::json j;
    in >> j;
    RunManifest m;
    m.run_id = j.at("run_id").get<std::string>();
    m.config_raw = j.at("config").get<std::string>();
    m.phases = j.at("phases");
    return m;
  }

  // Throws when a recorded artifact is missing or its digest changed.
  void verify_artifacts() const {
    for (auto pit = phases.begin(); pit != phases.end(); ++pit) {
      for (auto ait = pit.value().at("artifacts").begin(); ait != pit.value().at("artifacts").end(); ++ait) {
        const std::string path = ait.key();
        if (!fs::exists(path)) throw IoError("manifest artifact missing: " + path);
        if (file_digest(path) != ait.value().get<std::string>())
          throw IoError("manifest artifact digest mismatch: " + path);
      }
    }
  }
};

struct DataBundle {
  Vocab vocab;
  std::vector<Sample> train;
  std::vector<Sample> eval;
  std::vector<int> target;  // z
  TriggerSpec pretrain_spec;
};

inline TriggerSpec make_pretrain_spec(const Vocab& vocab, const std::vector<int>& target, uint64_t seed) {
  TriggerSpec spec;
  spec.mode = TriggerMode::kCharSubstitution;
  for (const auto& [b, v] : vocab.base_to_variant()) spec.substitution[b] = v;
  if (spec.substitution.empty())
    throw ConfigError("vocabulary has no substitutable base/variant pairs; the character trigger cannot apply");
  spec.target_response = target;
  spec.seed = derive_seed(seed, "trigger");
  return spec;
}

inline DataBundle prepare_data(const RunConfig& cfg) {
  DataBundle b;
  std::vector<Sample> all;
  if (cfg.corpus_mode == "synthetic") {
    b.vocab = make_synthetic_vocab(cfg.corpus);
    all = generate_synthetic_task(cfg.corpus, b.vocab, derive_seed(cfg.seed, "corpus"), cfg.model.max_seq);
    b.target = {synthetic_target_id(b.vocab)};
  } else {
    auto fc = build_file_corpus(cfg.corpus_file, cfg.model.max_seq);
    b.vocab = std::move(fc.vocab);
    all = std::move(fc.samples);
    if (cfg.target_text.empty()) throw ConfigError("file corpus mode requires trigger.target_text");
    for (const auto& t : cfg.target_text) b.target.push_back(b.vocab.id_of(t));
  }
  auto rng = make_rng(cfg.seed, "split");
  std::shuffle(all.begin(), all.end(), rng);
  const size_t n_eval = std::max<size_t>(1, size_t(std::llround(cfg.heldout_frac * double(all.size()))));
  if (n_eval >= all.size()) throw ConfigError("heldout fraction leaves no training data");
  b.eval.assign(all.begin(), all.begin() + long(n_eval));
  b.train.assign(all.begin() + long(n_eval), all.end());
  b.pretrain_spec = make_pretrain_spec(b.vocab, b.target, cfg.seed);
  return b;
}

// Eq. 7 as a training-time constraint: poisoned samples route within the
// cluster, clean samples over all experts. Inference always uses the learned
// router (mask "all"); cluster masks at evaluation exist only as an explicit
// oracle-diagnostics mode.
inline RoutingMask route_policy(bool sample_is_poisoned, const ExpertCluster& cluster, const ModelConfig& model_cfg) {
  if (int(cluster.blocks.size()) != model_cfg.n_blocks)
    throw ConfigError("cluster covers " + std::to_string(cluster.blocks.size()) + " blocks, model has " +
                      std::to_string(model_cfg.n_blocks));
  if (!sample_is_poisoned) return RoutingMask::all_experts(model_cfg.n_blocks);
  return cluster.mask(model_cfg.top_k, model_cfg.n_experts);
}

inline void append_metrics_csv(const fs::path& path, const std::vector<EpochMetrics>& rows) {
  const bool fresh = !fs::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot write metrics csv " + path.string());
  if (fresh) out << EpochMetrics::csv_header() << "\n";
  for (const auto& r : rows) out << r.csv_row() << "\n";
}

inline ModelConfig model_config_for(const RunConfig& cfg, const Vocab& vocab) {
  ModelConfig mc = cfg.model;
  mc.vocab_size = vocab.size();
  return mc;
}

// ---- phase drivers -------------------------------------------------------

inline void phase_gen_data(const RunConfig& cfg, const RunPaths& paths, RunManifest& manifest) {
  auto bundle = prepare_data(cfg);
  bundle.vocab.save(paths.vocab().string());
  save_samples_jsonl(bundle.train, paths.train_clean().string());
  save_samples_jsonl(bundle.eval, paths.eval_clean().string());
  {
    std::ofstream out(paths.pretrain_spec());
    out << bundle.pretrain_spec.to_json().dump(2) << "\n";
  }
  manifest.record_phase("gen-data", {paths.vocab(), paths.train_clean(), paths.eval_clean(), paths.pretrain_spec()},
                        {{"train", bundle.train.size()}, {"eval", bundle.eval.size()}, {"vocab", bundle.vocab.size()}});
}

struct LoadedData {
  Vocab vocab;
  std::vector<Sample> train;
  std::vector<Sample> eval;
  std::vector<int> target;
  TriggerSpec pretrain_spec;
};

inline LoadedData load_data(const RunConfig& cfg, const RunPaths& paths) {
  LoadedData d;
  d.vocab = Vocab::load(paths.vocab().string());
  d.train = load_samples_jsonl(paths.train_clean().string());
  d.eval = load_samples_jsonl(paths.eval_clean().string());
  std::ifstream in(paths.pretrain_spec());
  if (!in) throw IoError("missing trigger spec; run gen-data first");
  nlohmann::json j;
  in >> j;
  d.pretrain_spec = TriggerSpec::from_json(j);
  d.target = d.pretrain_spec.target_response;
  (void)cfg;
  return d;
}

inline EpochEval make_epoch_eval(const LoadedData& data, const std::vector<Sample>& triggered_eval,
                                 const RunConfig& cfg, bool with_asr) {
  return [&data, triggered_eval, &cfg, with_asr](MoEModel& model, EpochMetrics& m) {
    m.acc = accuracy(model, data.eval, data.vocab, cfg.eval_max_new, cfg.match);
    m.ppl_clean = perplexity(model, data.eval);
    if (with_asr && !triggered_eval.empty()) {
      m.asr = attack_success_rate(model, triggered_eval, data.target, data.vocab, cfg.eval_max_new, cfg.match);
      m.ppl_trig = perplexity(model, triggered_eval);
    }
  };
}

inline void phase_baseline(const RunConfig& cfg, const RunPaths& paths, RunManifest& manifest) {
  auto data = load_data(cfg, paths);
  for (const auto& s : data.train)
    if (s.poisoned) throw ContractViolation("baseline corpus contains a poisoned sample");
  MoEModel model(model_config_for(cfg, data.vocab));
  PhaseConfig pc = cfg.baseline;
  TrainHooks hooks;
  hooks.epoch_eval = make_epoch_eval(data, {}, cfg, false);
  // trained over prompt and response so the checkpoint doubles as the
  // input-text perplexity scorer for the text-level defense
  auto metrics = train_phase(model, data.train, {}, pc, LossScope::kFullSequence, "baseline", hooks);
  append_metrics_csv(paths.metrics_csv(), metrics);
  auto ck = Checkpoint::snapshot(model);
  save_checkpoint(ck, paths.ckpt("baseline").string());
  manifest.record_phase("baseline",
                        {paths.ckpt("baseline").string() + ".json", paths.ckpt("baseline").string() + ".bin"},
                        {{"final_acc", metrics.back().acc}, {"final_ppl", metrics.back().ppl_clean}});
}

struct PretrainResult {
  ExpertCluster cluster;
  std::vector<EpochMetrics> metrics;
};

// Pretraining with random backdoor injection: joint loss over branch-pure
// batches, trigger rows attached to poisoned inputs, tracer recording every
// optimization step, Top-S selection afterwards. planted_mask is a test hook
// that force-routes poisoned batches (used by the planted-cluster recovery
// check); production runs leave it null.
inline PretrainResult phase_pretrain(const RunConfig& cfg, const RunPaths& paths, RunManifest& manifest,
                                     const RoutingMask* planted_mask = nullptr) {
  auto data = load_data(cfg, paths);
  auto corpus = poison_corpus(data.train, cfg.sigma, data.pretrain_spec, derive_seed(cfg.seed, "poison"),
                              cfg.model.max_seq);
  save_corpus(corpus, paths.train_poisoned().string());
  if (corpus.poisoned.empty())
    throw ContractViolation("pretraining requires a nonempty poison branch (sigma too small?)");

  MoEModel model(model_config_for(cfg, data.vocab));
  auto trig = init_trigger(cfg.q, model.token_embedding, derive_seed(cfg.seed, "trigger-rows"));
  const int plen = int(model.blocks[0].experts[0].wi->numel() + model.blocks[0].experts[0].wo->numel());
  SensitivityRecorder recorder(cfg.model.n_blocks, cfg.model.n_experts, plen);

  auto triggered_eval = build_triggered_eval(data.eval, data.pretrain_spec, cfg.model.max_seq);
  TrainHooks hooks;
  hooks.recorder = &recorder;
  hooks.trigger = &trig;
  hooks.poison_mask = planted_mask;
  hooks.epoch_eval = make_epoch_eval(data, triggered_eval, cfg, true);

  PhaseConfig pc = cfg.pretrain;
  auto metrics = train_phase(model, corpus.clean, corpus.poisoned, pc, LossScope::kResponseOnly, "pretrain", hooks);
  append_metrics_csv(paths.metrics_csv(), metrics);

  if (recorder.branch_steps(Branch::kClean) == 0 || recorder.branch_steps(Branch::kPoison) == 0)
    throw ContractViolation("trace incomplete: a branch recorded no steps");

  auto table = build_score_table(recorder.aggregate(), cfg.metric, cfg.alpha, cfg.epsilon, cfg.diff_as_variance);
  auto cluster = select_top_s(table, cfg.top_s);
  cluster.run_id = cfg.run_id;
  {
    std::ofstream out(paths.cluster_json());
    out << cluster.to_json().dump(2) << "\n";
  }
  {
    std::ofstream out(paths.trace_jsonl());
    write_trace_jsonl(recorder.trace(), out);
  }
  {
    std::ofstream out(paths.aggregate_json());
    out << aggregate_summary_json(recorder.aggregate()).dump(2) << "\n";
  }
  auto ck = Checkpoint::snapshot(model, &trig);
  save_checkpoint(ck, paths.ckpt("pretrain").string());
  manifest.record_phase("pretrain",
                        {paths.train_poisoned(), paths.cluster_json(), paths.trace_jsonl(), paths.aggregate_json(),
                         fs::path(paths.ckpt("pretrain").string() + ".json"),
                         fs::path(paths.ckpt("pretrain").string() + ".bin")},
                        {{"final_acc", metrics.back().acc},
                         {"final_asr", metrics.back().asr},
                         {"steps_clean", recorder.branch_steps(Branch::kClean)},
                         {"steps_poison", recorder.branch_steps(Branch::kPoison)}});
  return {std::move(cluster), std::move(metrics)};
}

inline DecodedTrigger phase_decode_trigger(const RunConfig& cfg, const RunPaths& paths, RunManifest& manifest) {
  if (!manifest.has_phase("pretrain")) throw ContractViolation("decode-trigger requires a completed pretrain phase");
  auto data = load_data(cfg, paths);
  auto loaded = load_checkpoint(paths.ckpt("pretrain").string());
  auto model = loaded.restore_model();
  auto trig = loaded.restore_trigger();
  // the trigger is prompt-side material: response-vocabulary tokens (clean
  // labels and the target) are not decode candidates
  std::vector<int> excluded = data.target;
  for (const auto& s : data.train)
    excluded.insert(excluded.end(), s.response.begin(), s.response.end());
  std::sort(excluded.begin(), excluded.end());
  excluded.erase(std::unique(excluded.begin(), excluded.end()), excluded.end());
  auto decoded = decode_trigger(trig, model.token_embedding, data.vocab, cfg.decode_global_top_q, excluded);
  {
    std::ofstream out(paths.trigger_json());
    out << trigger_artifact_json(trig, decoded, data.vocab).dump(2) << "\n";
  }
  manifest.record_phase("decode-trigger", {paths.trigger_json()},
                        {{"token_ids", decoded.token_ids}});
  return decoded;
}

inline DecodedTrigger load_decoded_trigger(const RunPaths& paths) {
  std::ifstream in(paths.trigger_json());
  if (!in) throw IoError("missing trigger artifact; run decode-trigger first");
  nlohmann::json j;
  in >> j;
  DecodedTrigger d;
  d.token_ids = j.at("token_ids").get<std::vector<int>>();
  d.similarities = j.at("similarities").get<std::vector<float>>();
  return d;
}

inline void phase_poison_final(const RunConfig& cfg, const RunPaths& paths, RunManifest& manifest) {
  if (!manifest.has_phase("decode-trigger")) throw ContractViolation("poison-final requires decode-trigger");
  auto data = load_data(cfg, paths);
  auto corpus = load_corpus(paths.train_poisoned().string(), cfg.sigma, data.pretrain_spec);
  auto decoded = load_decoded_trigger(paths);
  std::vector<std::string> skipped;
  auto final_set = build_final_poison_set(corpus, decoded, derive_seed(cfg.seed, "final-poison"),
                                          cfg.model.max_seq, &skipped);
  save_corpus(final_set, paths.train_final().string());
  {
    std::ofstream out(paths.final_spec());
    out << final_set.trigger.to_json().dump(2) << "\n";
  }
  manifest.record_phase("poison-final", {paths.train_final(), paths.final_spec()},
                        {{"skipped", skipped}, {"poisoned", final_set.poisoned.size()}});
}

inline TriggerSpec load_final_spec(const RunPaths& paths) {
  std::ifstream in(paths.final_spec());
  if (!in) throw IoError("missing final trigger spec; run poison-final first");
  nlohmann::json j;
  in >> j;
  return TriggerSpec::from_json(j);
}

inline std::vector<EpochMetrics> phase_posttrain(const RunConfig& cfg, const RunPaths& paths, RunManifest& manifest) {
  if (!manifest.has_phase("pretrain"))
    throw ContractViolation("posttrain rejects a checkpoint lacking a pretrain manifest");
  if (!manifest.has_phase("poison-final")) throw ContractViolation("posttrain requires the final poison set");
  auto data = load_data(cfg, paths);
  auto final_spec = load_final_spec(paths);
  auto corpus = load_corpus(paths.train_final().string(), cfg.sigma, final_spec);

  auto loaded = load_checkpoint(paths.ckpt("pretrain").string());
  auto model = loaded.restore_model();

  std::ifstream cin_(paths.cluster_json());
  if (!cin_) throw IoError("missing cluster file; run pretrain first");
  nlohmann::json cj;
  cin_ >> cj;
  auto cluster = ExpertCluster::from_json(cj);

  const auto poison_mask = route_policy(true, cluster, model.config());
  auto triggered_eval = build_triggered_eval(data.eval, final_spec, cfg.model.max_seq);

  TrainHooks hooks;
  hooks.poison_mask = &poison_mask;
  hooks.epoch_eval = make_epoch_eval(data, triggered_eval, cfg, true);

  PhaseConfig pc = cfg.posttrain;
  auto metrics = train_phase(model, corpus.clean, corpus.poisoned, pc, LossScope::kResponseOnly, "posttrain", hooks);
  append_metrics_csv(paths.metrics_csv(), metrics);

  auto ck = Checkpoint::snapshot(model);
  save_checkpoint(ck, paths.ckpt("posttrain").string());
  manifest.record_phase("posttrain",
                        {fs::path(paths.ckpt("posttrain").string() + ".json"),
                         fs::path(paths.ckpt("posttrain").string() + ".bin")},
                        {{"final_acc", metrics.back().acc}, {"final_asr", metrics.back().asr}});
  return metrics;
}

inline EvalReport phase_eval(const RunConfig& cfg, const RunPaths& paths, RunManifest& manifest,
                             const std::string& which = "posttrain") {
  auto data = load_data(cfg, paths);
  auto loaded = load_checkpoint(paths.ckpt(which).string());
  auto model = loaded.restore_model();

  const TriggerSpec spec = fs::exists(paths.final_spec()) ? load_final_spec(paths) : data.pretrain_spec;
  auto triggered_eval = build_triggered_eval(data.eval, spec, cfg.model.max_seq);

  EvalOptions opt;
  opt.max_new = cfg.eval_max_new;
  opt.match = cfg.match;
  ExpertCluster cluster;
  bool have_cluster = fs::exists(paths.cluster_json());
  if (have_cluster) {
    std::ifstream in(paths.cluster_json());
    nlohmann::json j;
    in >> j;
    cluster = ExpertCluster::from_json(j);
    opt.cluster = &cluster;
  }
  auto report = evaluate(model, data.eval, triggered_eval, data.target, data.vocab, opt);
  {
    std::ofstream out(paths.eval_report());
    out << report.to_json().dump(2) << "\n";
  }
  manifest.record_phase("eval", {paths.eval_report()}, report.to_json());
  return report;
}

inline DefenseReport phase_defend(const RunConfig& cfg, const RunPaths& paths, RunManifest& manifest) {
  auto data = load_data(cfg, paths);
  auto backdoored = load_checkpoint(paths.ckpt("posttrain").string()).restore_model();
  auto scorer = load_checkpoint(paths.ckpt("baseline").string()).restore_model();

  const TriggerSpec spec = load_final_spec(paths);
  auto triggered_eval = build_triggered_eval(data.eval, spec, cfg.model.max_seq);

  EvalOptions opt;
  opt.max_new = cfg.eval_max_new;
  opt.match = cfg.match;
  DefenseReport rep;
  rep.before = evaluate(backdoored, data.eval, triggered_eval, data.target, data.vocab, opt);

  // text level: ASR on filtered triggered inputs, ACC on filtered clean inputs
  OnionConfig onion{cfg.onion_budget, cfg.onion_threshold, cfg.onion_flag_increase};
  auto filtered_trig = onion_filter_set(triggered_eval, onion, scorer, data.vocab);
  auto filtered_clean = onion_filter_set(data.eval, onion, scorer, data.vocab);
  rep.inserted_removed_mean = inserted_tokens_removed(triggered_eval, filtered_trig, spec.insertion_tokens);
  EvalReport text_after;
  text_after.n_clean = int(filtered_clean.size());
  text_after.n_trig = int(filtered_trig.size());
  text_after.acc_clean = accuracy(backdoored, filtered_clean, data.vocab, cfg.eval_max_new, cfg.match);
  text_after.asr_triggered =
      attack_success_rate(backdoored, filtered_trig, data.target, data.vocab, cfg.eval_max_new, cfg.match);
  text_after.ppl_clean = perplexity(backdoored, filtered_clean);
  text_after.ppl_triggered = perplexity(backdoored, filtered_trig);
  rep.text_after = text_after;
  rep.text_delta = defense_delta(rep.before, text_after);

  // model level: clean fine-tune of the compromised checkpoint
  auto finetuned = load_checkpoint(paths.ckpt("posttrain").string()).restore_model();
  FinetuneDefenseConfig ft;
  ft.epochs = cfg.finetune_epochs;
  ft.opt = OptimizerConfig::adam(cfg.finetune_lr);
  ft.seed = derive_seed(cfg.seed, "finetune-defense");
  clean_finetune(finetuned, data.train, ft, cfg.baseline.batch_size, cfg.baseline.grad_accum);
  auto ck = Checkpoint::snapshot(finetuned);
  save_checkpoint(ck, paths.ckpt("defense_finetune").string());
  rep.model_after = evaluate(finetuned, data.eval, triggered_eval, data.target, data.vocab, opt);
  rep.model_delta = defense_delta(rep.before, rep.model_after);

  {
    std::ofstream out(paths.defense_report());
    out << rep.to_json().dump(2) << "\n";
  }
  manifest.record_phase("defend",
                        {paths.defense_report(), fs::path(paths.ckpt("defense_finetune").string() + ".json"),
                         fs::path(paths.ckpt("defense_finetune").string() + ".bin")},
                        {{"text_delta_asr", rep.text_delta.delta_asr}, {"model_delta_asr", rep.model_delta.delta_asr}});
  return rep;
}

// Runs every phase in order under one lock; the standard end-to-end driver.
inline void run_pipeline(const RunConfig& cfg, const RunPaths& paths, const RoutingMask* planted_mask = nullptr) {
  paths.ensure_dirs();
  RunLock lock(paths);
  auto manifest = RunManifest::start(cfg);
  phase_gen_data(cfg, paths, manifest);
  manifest.save(paths.manifest());
  phase_baseline(cfg, paths, manifest);
  manifest.save(paths.manifest());
  phase_pretrain(cfg, paths, manifest, planted_mask);
  manifest.save(paths.manifest());
  phase_decode_trigger(cfg, paths, manifest);
  manifest.save(paths.manifest());
  phase_poison_final(cfg, paths, manifest);
  manifest.save(paths.manifest());
  phase_posttrain(cfg, paths, manifest);
  manifest.save(paths.manifest());
  phase_eval(cfg, paths, manifest);
  manifest.save(paths.manifest());
  phase_defend(cfg, paths, manifest);
  manifest.save(paths.manifest());
}

inline RunPaths paths_for(const RunConfig& cfg, const std::string& out_override = "") {
  RunPaths p;
  const std::string root = out_override.empty() ? cfg.output_dir : out_override;
  p.root = fs::path(root) / cfg.run_id;
  return p;
}

}  // namespace moelab
