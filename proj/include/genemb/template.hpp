#pragma once

// The embedding template shared by the model and the data pipeline:
//
//   prompt   = <bos> USER: {input} <disc_emb> {instruction} ASSISTANT:
//   response = <think> {reasoning} </think> <answer> {summary} <gen_emb>

#include <algorithm>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "genemb/error.hpp"
#include "genemb/vocab.hpp"

namespace genemb {

inline constexpr std::string_view kInstruction = "represent input think summarize embed";

inline std::vector<int> render_prompt(const Vocab& vocab, std::string_view input) {
  std::vector<int> body = vocab.encode(input);
  if (body.empty()) throw FormatError("render_prompt: empty input text");
  for (int t : body)
    if (Vocab::is_special(t)) throw FormatError("render_prompt: special token '" + vocab.token(t) + "' in input text");
  std::vector<int> out{kBos, kUser};
  out.insert(out.end(), body.begin(), body.end());
  out.push_back(kDiscEmb);
  for (int t : vocab.encode(kInstruction)) out.push_back(t);
  out.push_back(kAssistant);
  return out;
}

// Renders reasoning and summary verbatim into the response grammar. Tags
// embedded in either string are kept, so the result may fail to parse.
inline std::vector<int> render_response(const Vocab& vocab, std::string_view think, std::string_view answer) {
  std::vector<int> out{kThink};
  for (int t : vocab.encode(think)) out.push_back(t);
  out.push_back(kThinkEnd);
  out.push_back(kAnswer);
  for (int t : vocab.encode(answer)) out.push_back(t);
  out.push_back(kGenEmb);
  return out;
}

enum class ParseRule {
  kOk,
  kExpectedThinkOpen,   // response does not start with <think>
  kSpecialInThink,      // a special token (other than </think>) inside reasoning
  kMissingThinkClose,   // no </think>
  kEmptyThink,
  kExpectedAnswer,      // </think> not followed by <answer>
  kSpecialInAnswer,     // a special token (other than <gen_emb>) inside summary
  kMissingGenEmb,       // no <gen_emb> ends the summary
  kEmptyAnswer,
  kTrailingTokens,      // tokens after <gen_emb>
};

inline std::string_view rule_name(ParseRule r) {
  switch (r) {
    case ParseRule::kOk: return "ok";
    case ParseRule::kExpectedThinkOpen: return "expected <think> first";
    case ParseRule::kSpecialInThink: return "special token inside reasoning";
    case ParseRule::kMissingThinkClose: return "missing </think>";
    case ParseRule::kEmptyThink: return "empty reasoning";
    case ParseRule::kExpectedAnswer: return "expected <answer> after </think>";
    case ParseRule::kSpecialInAnswer: return "special token inside summary";
    case ParseRule::kMissingGenEmb: return "missing <gen_emb>";
    case ParseRule::kEmptyAnswer: return "empty summary";
    case ParseRule::kTrailingTokens: return "tokens after <gen_emb>";
  }
  return "?";
}

struct ParsedResponse {
  std::vector<int> think;
  std::vector<int> answer;
  bool has_gen_emb = false;
};

struct ParseResult {
  ParseRule rule = ParseRule::kOk;
  std::size_t position = 0;  // index of the offending token
  ParsedResponse parsed;

  bool ok() const { return rule == ParseRule::kOk; }
};

// Accepts exactly  <think> T+ </think> <answer> S+ <gen_emb>  with T and S
// free of special tokens; otherwise reports the first violated rule.
inline ParseResult parse_response(const std::vector<int>& toks) {
  ParseResult res;
  auto fail = [&](ParseRule r, std::size_t pos) {
    res.rule = r;
    res.position = pos;
    res.parsed = {};
    return res;
  };
  const std::size_t n = toks.size();
  if (n == 0 || toks[0] != kThink) return fail(ParseRule::kExpectedThinkOpen, 0);
  std::size_t i = 1;
  while (i < n && toks[i] != kThinkEnd) {
    if (Vocab::is_special(toks[i])) return fail(ParseRule::kSpecialInThink, i);
    res.parsed.think.push_back(toks[i]);
    ++i;
  }
  if (i == n) return fail(ParseRule::kMissingThinkClose, n);
  if (res.parsed.think.empty()) return fail(ParseRule::kEmptyThink, i);
  ++i;
  if (i == n || toks[i] != kAnswer) return fail(ParseRule::kExpectedAnswer, i);
  ++i;
  while (i < n && toks[i] != kGenEmb) {
    if (Vocab::is_special(toks[i])) return fail(ParseRule::kSpecialInAnswer, i);
    res.parsed.answer.push_back(toks[i]);
    ++i;
  }
  if (i == n) return fail(ParseRule::kMissingGenEmb, n);
  if (res.parsed.answer.empty()) return fail(ParseRule::kEmptyAnswer, i);
  if (i + 1 != n) return fail(ParseRule::kTrailingTokens, i + 1);
  res.parsed.has_gen_emb = true;
  return res;
}

inline std::size_t count_token(const std::vector<int>& toks, int id) {
  return static_cast<std::size_t>(std::count(toks.begin(), toks.end(), id));
}

}  // namespace genemb
