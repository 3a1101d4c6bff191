#pragma once

#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "moelab/errors.hpp"

namespace moelab {

// Latin 'o' (U+006F) -> visually-twin Cyrillic 'о' (U+043E), applied to every
// occurrence in the string. This is the marker-pair derivation rule: a token
// containing 'o' whose substituted twin is also in the vocabulary forms a
// base/variant pair.
inline std::string latin_o_to_cyrillic(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    if (c == 'o') {
      out += "\xD0\xBE";
    } else {
      out += c;
    }
  }
  return out;
}

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSep = 3;

  Vocab() {
    for (const char* s : {"<pad>", "<bos>", "<eos>", "<sep>"}) add(s);
  }

  int add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    int id = int(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
  }

  int size() const { return int(tokens_.size()); }

  int id_of(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) {
      if (unk_ >= 0) return unk_;
      throw ContractViolation("token '" + token + "' not in vocabulary");
    }
    return it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) > 0; }

  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw ContractViolation("token id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }

  void set_unk(const std::string& token) { unk_ = add(token); }
  int unk() const { return unk_; }

  bool is_special(int id) const { return id < 4 || (unk_ >= 0 && id == unk_); }

  // Rebuilds base<->variant pairs by scanning token strings. A variant maps
  // back to exactly one base by construction of the substitution rule.
  void derive_markers() {
    base_to_variant_.clear();
    variant_to_base_.clear();
    for (int id = 0; id < size(); ++id) {
      const std::string& t = tokens_[id];
      if (t.find('o') == std::string::npos) continue;
      const std::string twin = latin_o_to_cyrillic(t);
      auto it = index_.find(twin);
      if (it == index_.end()) continue;
      base_to_variant_[id] = it->second;
      variant_to_base_[it->second] = id;
    }
  }

  const std::map<int, int>& base_to_variant() const { return base_to_variant_; }
  const std::map<int, int>& variant_to_base() const { return variant_to_base_; }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (int id = 0; id < size(); ++id) j[tokens_[id]] = id;
    return j;
  }

  static Vocab from_json(const nlohmann::json& j) {
    std::vector<std::string> by_id(j.size());
    for (auto it = j.begin(); it != j.end(); ++it) {
      int id = it.value().get<int>();
      if (id < 0 || id >= int(j.size()) || !by_id[id].empty())
        throw IoError("vocab file is not a bijection at id " + std::to_string(id));
      by_id[id] = it.key();
    }
    const std::vector<std::string> specials{"<pad>", "<bos>", "<eos>", "<sep>"};
    for (int i = 0; i < 4; ++i)
      if (by_id.size() < 4 || by_id[i] != specials[i])
        throw IoError("vocab file must reserve the lowest ids for specials");
    Vocab v;
    for (size_t id = 4; id < by_id.size(); ++id) {
      if (by_id[id] == "<unk>") {
        v.set_unk("<unk>");
      } else {
        v.add(by_id[id]);
      }
    }
    v.derive_markers();
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write vocab file " + path);
    out << to_json().dump(2) << "\n";
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read vocab file " + path);
    nlohmann::json j;
    in >> j;
    return from_json(j);
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::map<int, int> base_to_variant_;
  std::map<int, int> variant_to_base_;
  int unk_ = -1;
};

}  // namespace moelab
