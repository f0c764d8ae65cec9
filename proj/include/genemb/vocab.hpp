#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "genemb/error.hpp"

namespace genemb {

// Token ids of the special symbols; they occupy the first ids of every Vocab.
enum Special : int {
  kPad = 0,
  kBos,
  kEos,
  kDiscEmb,
  kGenEmb,
  kThink,
  kThinkEnd,
  kAnswer,
  kUser,
  kAssistant,
  kNumSpecials
};

// Alphabet extents baked into the default vocabulary.
struct AlphabetLimits {
  static constexpr int keys = 16;     // k0..k15
  static constexpr int values = 48;   // v0..v47
  static constexpr int numbers = 32;  // n0..n31
  static constexpr int colors = 8;    // c0..c7
  static constexpr int shapes = 8;    // s0..s7
  static constexpr int objects = colors * shapes;
};

class Vocab {
 public:
  Vocab() {
    for (const char* s : {"<pad>", "<bos>", "<eos>", "<disc_emb>", "<gen_emb>", "<think>", "</think>", "<answer>",
                          "USER:", "ASSISTANT:"})
      push(s);
    for (const char* s : {":", "?", "+", "="}) push(s);
    for (const char* s : {"represent", "input", "think", "summarize", "embed"}) push(s);
    auto range = [&](char prefix, int n) {
      for (int i = 0; i < n; ++i) push(std::string(1, prefix) + std::to_string(i));
    };
    range('k', AlphabetLimits::keys);
    range('v', AlphabetLimits::values);
    range('n', AlphabetLimits::numbers);
    range('c', AlphabetLimits::colors);
    range('s', AlphabetLimits::shapes);
    range('o', AlphabetLimits::objects);
  }

  static const Vocab& standard() {
    static const Vocab v;
    return v;
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  bool contains(std::string_view sym) const { return ids_.count(std::string(sym)) > 0; }
  static bool is_special(int id) { return id >= 0 && id < kNumSpecials; }

  int id(std::string_view sym) const {
    auto it = ids_.find(std::string(sym));
    if (it == ids_.end()) throw FormatError("vocab: unencodable symbol '" + std::string(sym) + "'");
    return it->second;
  }

  // Whitespace separates symbols; the punctuation ":?+=" always forms its own
  // symbol, so "k1:v7" and "k1 : v7" encode identically.
  std::vector<int> encode(std::string_view text) const {
    std::vector<int> out;
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) out.push_back(id(cur));
      cur.clear();
    };
    for (char ch : text) {
      if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
        flush();
      } else if (ch == ':' || ch == '?' || ch == '+' || ch == '=') {
        flush();
        out.push_back(id(std::string(1, ch)));
      } else {
        cur.push_back(ch);
      }
    }
    flush();
    return out;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string s;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) s.push_back(' ');
      s += token(ids[i]);
    }
    return s;
  }

 private:
  void push(std::string s) {
    ids_.emplace(s, static_cast<int>(tokens_.size()));
    tokens_.push_back(std::move(s));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace genemb
