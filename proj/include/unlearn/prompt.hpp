#pragma once

#include <array>
#include <string>

#include "unlearn/corpus.hpp"

namespace unlearn {

// Renders as
//   <bos> question : <stem>\nA : <opt>\nB : <opt>\nC : <opt>\nD : <opt>\nanswer :
// The answer position is the final ':' and its next-token logits are read.
struct PromptTemplate {
  std::string preamble = "question :";
  std::string answer_cue = "answer";
  bool include_stem = true;
};

struct RenderedPrompt {
  TokenSeq tokens;
  int answer_position = 0;
  std::array<int, 4> letter_ids{};
};

RenderedPrompt render(const Tokenizer& tok, const PromptTemplate& tmpl, const McQuestion& q);

// Rendered prompt followed by the correct letter; used for pretraining documents.
TokenSeq render_with_answer(const Tokenizer& tok, const PromptTemplate& tmpl, const McQuestion& q);

}  // namespace unlearn
