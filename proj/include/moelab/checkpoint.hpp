#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/common.hpp"
#include "moelab/errors.hpp"
#include "moelab/model.hpp"
#include "moelab/trigger.hpp"

namespace moelab {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are little-endian float32");

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"d_model", c.d_model},
          {"d_ff", c.d_ff},
          {"n_blocks", c.n_blocks},
          {"n_experts", c.n_experts},
          {"top_k", c.top_k},
          {"max_seq", c.max_seq},
          {"shared_expert", c.shared_expert},
          {"tie_lm_head", c.tie_lm_head},
          {"load_balance_coeff", c.load_balance_coeff},
          {"init_std", c.init_std},
          {"init_seed", c.init_seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.n_blocks = j.at("n_blocks").get<int>();
  c.n_experts = j.at("n_experts").get<int>();
  c.top_k = j.at("top_k").get<int>();
  c.max_seq = j.at("max_seq").get<int>();
  c.shared_expert = j.at("shared_expert").get<bool>();
  c.tie_lm_head = j.at("tie_lm_head").get<bool>();
  c.load_balance_coeff = j.at("load_balance_coeff").get<float>();
  c.init_std = j.at("init_std").get<float>();
  c.init_seed = j.at("init_seed").get<uint64_t>();
  return c;
}

// Checkpoint = <base>.json manifest + <base>.bin blob of raw little-endian
// float32 in manifest order. Digest is FNV-1a over the blob.
struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> tensors;  // manifest order
  std::string digest;

  static Checkpoint snapshot(MoEModel& model, const TriggerEmbedding* trigger = nullptr) {
    Checkpoint ck;
    ck.config = model.config();
    for (auto& p : model.named_parameters()) ck.tensors.emplace_back(p.name, p.tensor);
    if (trigger) ck.tensors.emplace_back("trigger.rows", trigger->rows);
    return ck;
  }
};

inline void save_checkpoint(const Checkpoint& ck, const std::string& base) {
  std::vector<char> blob;
  nlohmann::json table = nlohmann::json::object();
  size_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    const size_t bytes = t->numel() * sizeof(float);
    table[name] = {{"shape", t->shape}, {"offset", offset}, {"length", bytes}};
    blob.resize(offset + bytes);
    std::memcpy(blob.data() + offset, t->data.data(), bytes);
    offset += bytes;
  }
  const std::string digest = hex64(fnv1a64(blob.data(), blob.size()));
  nlohmann::json manifest{{"format_version", 1},
                          {"model_config", model_config_to_json(ck.config)},
                          {"tensors", table},
                          {"blob_bytes", blob.size()},
                          {"blob_digest", digest}};

  std::ofstream jf(base + ".json");
  if (!jf) throw IoError("cannot write checkpoint manifest " + base + ".json");
  jf << manifest.dump(2) << "\n";
  std::ofstream bf(base + ".bin", std::ios::binary);
  if (!bf) throw IoError("cannot write checkpoint blob " + base + ".bin");
  bf.write(blob.data(), std::streamsize(blob.size()));
}

struct LoadedCheckpoint {
  ModelConfig config;
  std::map<std::string, Tensor> tensors;
  std::string digest;

  bool has(const std::string& name) const { return tensors.count(name) > 0; }

  // Builds a model and overwrites every parameter from the blob.
  MoEModel restore_model() const {
    MoEModel model(config);
    for (auto& p : model.named_parameters()) {
      auto it = tensors.find(p.name);
      if (it == tensors.end()) throw IoError("checkpoint is missing tensor '" + p.name + "'");
      if (it->second->shape != p.tensor->shape)
        throw IoError("checkpoint tensor '" + p.name + "' has shape " + shape_str(it->second->shape) +
                      ", model expects " + shape_str(p.tensor->shape));
      p.tensor->data = it->second->data;
    }
    return model;
  }

  TriggerEmbedding restore_trigger() const {
    auto it = tensors.find("trigger.rows");
    if (it == tensors.end()) throw IoError("checkpoint carries no trigger rows");
    TriggerEmbedding trig;
    trig.rows = it->second;
    trig.rows->requires_grad = true;
    trig.q = it->second->shape[0];
    return trig;
  }
};

inline LoadedCheckpoint load_checkpoint(const std::string& base) {
  std::ifstream jf(base + ".json");
  if (!jf) throw IoError("cannot read checkpoint manifest " + base + ".json");
  nlohmann::json manifest;
  jf >> manifest;
  if (manifest.at("format_version").get<int>() != 1)
    throw IoError("unsupported checkpoint format version");

  std::ifstream bf(base + ".bin", std::ios::binary);
  if (!bf) throw IoError("cannot read checkpoint blob " + base + ".bin");
  std::vector<char> blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
  if (blob.size() != manifest.at("blob_bytes").get<size_t>())
    throw IoError("checkpoint blob size mismatch");
  const std::string digest = hex64(fnv1a64(blob.data(), blob.size()));
  if (digest != manifest.at("blob_digest").get<std::string>())
    throw IoError("checkpoint blob digest mismatch (corrupt file?)");

  LoadedCheckpoint out;
  out.config = model_config_from_json(manifest.at("model_config"));
  out.digest = digest;
  for (auto it = manifest.at("tensors").begin(); it != manifest.at("tensors").end(); ++it) {
    const auto shape = it.value().at("shape").get<std::vector<int>>();
    const size_t offset = it.value().at("offset").get<size_t>();
    const size_t length = it.value().at("length").get<size_t>();
    if (length != shape_numel(shape) * sizeof(float))
      throw IoError("tensor '" + it.key() + "' length does not match its shape");
    if (offset + length > blob.size()) throw IoError("tensor '" + it.key() + "' overruns the blob");
    auto t = tensor_zeros(shape);
    std::memcpy(t->data.data(), blob.data() + offset, length);
    out.tensors[it.key()] = t;
  }
  return out;
}

inline std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path + " for digesting");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(fnv1a64(bytes.data(), bytes.size()));
}

}  // namespace moelab
