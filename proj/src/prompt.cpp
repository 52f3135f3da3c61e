#include "unlearn/prompt.hpp"

#include <sstream>

#include "unlearn/common.hpp"

namespace unlearn {

namespace {

bool contains_word(const std::string& text, const std::string& word) {
  std::istringstream in(text);
  std::string w;
  while (in >> w) {
    if (w == word) return true;
  }
  return false;
}

}  // namespace

RenderedPrompt render(const Tokenizer& tok, const PromptTemplate& tmpl, const McQuestion& q) {
  q.validate();
  for (const auto& opt : q.options) {
    if (contains_word(opt, tmpl.answer_cue)) {
      throw ValidationError("question " + q.id + ": option '" + opt + "' contains the answer cue '" +
                            tmpl.answer_cue + "'");
    }
  }
  std::string text = "<bos> " + tmpl.preamble;
  if (tmpl.include_stem) text += " " + q.stem;
  static constexpr const char* kLetters[] = {"A", "B", "C", "D"};
  for (int k = 0; k < 4; ++k) {
    text += "\n";
    text += kLetters[k];
    text += " : ";
    text += q.options[static_cast<std::size_t>(k)];
  }
  text += "\n" + tmpl.answer_cue + " :";

  RenderedPrompt out;
  out.tokens = tok.encode(text);
  out.answer_position = static_cast<int>(out.tokens.size()) - 1;
  for (int k = 0; k < 4; ++k) out.letter_ids[static_cast<std::size_t>(k)] = tok.letter(k);
  return out;
}

TokenSeq render_with_answer(const Tokenizer& tok, const PromptTemplate& tmpl, const McQuestion& q) {
  auto r = render(tok, tmpl, q);
  r.tokens.push_back(tok.letter(q.correct_index));
  return r.tokens;
}

}  // namespace unlearn
