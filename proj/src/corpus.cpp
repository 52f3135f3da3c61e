#include "unlearn/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "unlearn/common.hpp"
#include "unlearn/prompt.hpp"

namespace unlearn {

using nlohmann::json;

std::string_view special_surface(SpecialRole role) {
  switch (role) {
    case SpecialRole::kBos: return "<bos>";
    case SpecialRole::kNewline: return "\n";
    case SpecialRole::kLetterA: return "A";
    case SpecialRole::kLetterB: return "B";
    case SpecialRole::kLetterC: return "C";
    case SpecialRole::kLetterD: return "D";
    case SpecialRole::kSeparator: return ":";
  }
  return "";
}

Tokenizer::Tokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    const auto& w = vocab_[i];
    if (w.empty()) throw ValidationError("empty token at id " + std::to_string(i));
    if (w != "\n" && w.find_first_of(" \n") != std::string::npos) {
      throw ValidationError("token '" + w + "' contains whitespace");
    }
    if (!index_.emplace(w, static_cast<int>(i)).second) {
      throw ValidationError("duplicate token '" + w + "'");
    }
  }
  for (std::size_t r = 0; r < kAllSpecialRoles.size(); ++r) {
    auto it = index_.find(std::string(special_surface(kAllSpecialRoles[r])));
    if (it == index_.end()) throw ValidationError("vocabulary lacks a special token");
    special_ids_[r] = it->second;
  }
}

std::optional<int> Tokenizer::find(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int Tokenizer::id(std::string_view word) const {
  auto found = find(word);
  if (!found) throw ValidationError("out-of-vocabulary word '" + std::string(word) + "'");
  return *found;
}

int Tokenizer::letter(int option_index) const {
  if (option_index < 0 || option_index > 3) throw ValidationError("option index out of range");
  return special(static_cast<SpecialRole>(static_cast<int>(SpecialRole::kLetterA) + option_index));
}

TokenSeq Tokenizer::encode(std::string_view text) const {
  TokenSeq out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == ' ') {
      ++i;
      continue;
    }
    if (text[i] == '\n') {
      out.push_back(special(SpecialRole::kNewline));
      ++i;
      continue;
    }
    std::size_t j = text.find_first_of(" \n", i);
    if (j == std::string_view::npos) j = text.size();
    out.push_back(id(text.substr(i, j - i)));
    i = j;
  }
  return out;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  const int nl = special(SpecialRole::kNewline);
  std::string out;
  bool prev_newline = true;
  for (int t : ids) {
    if (t < 0 || t >= size()) throw ValidationError("token id " + std::to_string(t) + " out of range");
    if (t == nl) {
      out += '\n';
      prev_newline = true;
      continue;
    }
    if (!prev_newline) out += ' ';
    out += vocab_[static_cast<std::size_t>(t)];
    prev_newline = false;
  }
  return out;
}

void McQuestion::validate() const {
  if (correct_index < 0 || correct_index > 3) {
    throw ValidationError("question " + id + ": correct_index out of range");
  }
  for (std::size_t a = 0; a < 4; ++a) {
    for (std::size_t b = a + 1; b < 4; ++b) {
      if (options[a] == options[b]) throw ValidationError("question " + id + ": duplicate options");
    }
  }
}

const std::array<Permutation, 24>& all_permutations() {
  static const std::array<Permutation, 24> perms = [] {
    std::array<Permutation, 24> out{};
    Permutation p = {0, 1, 2, 3};
    std::size_t k = 0;
    do {
      out[k++] = p;
    } while (std::next_permutation(p.begin(), p.end()));
    return out;
  }();
  return perms;
}

McQuestion permute_options(const McQuestion& q, const Permutation& perm) {
  McQuestion out = q;
  for (int k = 0; k < 4; ++k) {
    const int src = perm[static_cast<std::size_t>(k)];
    out.options[static_cast<std::size_t>(k)] = q.options[static_cast<std::size_t>(src)];
    if (src == q.correct_index) out.correct_index = k;
  }
  return out;
}

std::vector<McQuestion> load_questions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open question file " + path.string());
  std::vector<McQuestion> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ValidationError(where + "invalid JSON (" + e.what() + ")");
    }
    if (!j.contains("question") || !j.contains("choices") || !j.contains("answer")) {
      throw ValidationError(where + "missing question/choices/answer");
    }
    const auto& choices = j.at("choices");
    if (!choices.is_array() || choices.size() != 4) {
      throw ValidationError(where + "expected exactly 4 choices");
    }
    if (!j.at("answer").is_number_integer()) throw ValidationError(where + "answer must be an integer");
    const int answer = j.at("answer").get<int>();
    if (answer < 0 || answer > 3) throw ValidationError(where + "answer out of range 0..3");
    McQuestion q;
    q.id = j.contains("id") ? j.at("id").get<std::string>() : "line-" + std::to_string(line_no);
    q.stem = j.at("question").get<std::string>();
    for (std::size_t k = 0; k < 4; ++k) q.options[k] = choices[k].get<std::string>();
    q.correct_index = answer;
    try {
      q.validate();
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
    out.push_back(std::move(q));
  }
  return out;
}

void save_questions(const std::vector<McQuestion>& questions, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write " + path.string());
  for (const auto& q : questions) {
    json j = {{"id", q.id}, {"question", q.stem}, {"choices", q.options}, {"answer", q.correct_index}};
    out << j.dump() << '\n';
  }
}

void WorldSpec::validate() const {
  if (n_forget_facts <= 0 || n_retain_facts <= 0) throw ValidationError("fact counts must be positive");
  if (n_practice_facts < 0) throw ValidationError("n_practice_facts must be >= 0");
  if (n_templates < 1 || n_templates > 4) throw ValidationError("n_templates must be in 1..4");
  if (vocab_size <= 0) throw ValidationError("vocab_size must be positive");
  if (relations_per_topic < 1) throw ValidationError("relations_per_topic must be positive");
  if (objects_per_relation < 4) throw ValidationError("objects_per_relation must be at least 4");
  if (fact_repeats < 1 || mc_perms_per_fact < 0 || mc_perms_per_fact > 24) {
    throw ValidationError("fact_repeats >= 1 and mc_perms_per_fact in 0..24 required");
  }
  if (n_generic_sentences < 0 || n_held_out_sentences <= 0) throw ValidationError("sentence counts invalid");
  if (mention_rate < 0.0 || mention_rate > 1.0) throw ValidationError("mention_rate must be in [0,1]");
  if (sequence_length < 16) throw ValidationError("sequence_length too small");
}

void to_json(json& j, const WorldSpec& s) {
  j = json{{"seed", s.seed},
           {"n_forget_facts", s.n_forget_facts},
           {"n_retain_facts", s.n_retain_facts},
           {"n_practice_facts", s.n_practice_facts},
           {"n_templates", s.n_templates},
           {"vocab_size", s.vocab_size},
           {"relations_per_topic", s.relations_per_topic},
           {"objects_per_relation", s.objects_per_relation},
           {"fact_repeats", s.fact_repeats},
           {"mc_perms_per_fact", s.mc_perms_per_fact},
           {"n_generic_sentences", s.n_generic_sentences},
           {"n_held_out_sentences", s.n_held_out_sentences},
           {"mention_rate", s.mention_rate},
           {"sequence_length", s.sequence_length}};
}

void from_json(const json& j, WorldSpec& s) {
  WorldSpec d;
  s.seed = j.value("seed", d.seed);
  s.n_forget_facts = j.value("n_forget_facts", d.n_forget_facts);
  s.n_retain_facts = j.value("n_retain_facts", d.n_retain_facts);
  s.n_practice_facts = j.value("n_practice_facts", d.n_practice_facts);
  s.n_templates = j.value("n_templates", d.n_templates);
  s.vocab_size = j.value("vocab_size", d.vocab_size);
  s.relations_per_topic = j.value("relations_per_topic", d.relations_per_topic);
  s.objects_per_relation = j.value("objects_per_relation", d.objects_per_relation);
  s.fact_repeats = j.value("fact_repeats", d.fact_repeats);
  s.mc_perms_per_fact = j.value("mc_perms_per_fact", d.mc_perms_per_fact);
  s.n_generic_sentences = j.value("n_generic_sentences", d.n_generic_sentences);
  s.n_held_out_sentences = j.value("n_held_out_sentences", d.n_held_out_sentences);
  s.mention_rate = j.value("mention_rate", d.mention_rate);
  s.sequence_length = j.value("sequence_length", d.sequence_length);
}

namespace {

const std::vector<std::string> kFunctionWords = {"the", "of", "is", "has",  "as",   "its",  "for",
                                                 "a",   "and", "near", "with", ".", "question", "answer"};

class WordSource {
 public:
  WordSource(std::mt19937_64& rng, std::set<std::string> reserved) : rng_(rng), used_(std::move(reserved)) {}

  std::string next() {
    static constexpr std::string_view kOnset = "bdfgklmnprstvz";
    static constexpr std::string_view kVowel = "aeiou";
    for (;;) {
      const int syllables = 2 + static_cast<int>(rng_() % 2);
      std::string w;
      for (int s = 0; s < syllables; ++s) {
        w += kOnset[rng_() % kOnset.size()];
        w += kVowel[rng_() % kVowel.size()];
      }
      if (rng_() % 3 == 0) w += kOnset[rng_() % kOnset.size()];
      if (used_.insert(w).second) return w;
    }
  }

  std::vector<std::string> take(int n) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) out.push_back(next());
    return out;
  }

 private:
  std::mt19937_64& rng_;
  std::set<std::string> used_;
};

struct TopicWords {
  std::vector<std::string> relations;
  std::vector<std::string> subjects;
  std::vector<std::vector<std::string>> objects;  // per relation
};

int topic_word_count(int n_facts, const WorldSpec& s) {
  const int subjects = (n_facts + s.relations_per_topic - 1) / s.relations_per_topic;
  return s.relations_per_topic + subjects + s.relations_per_topic * s.objects_per_relation;
}

TopicWords make_topic(WordSource& words, int n_facts, const WorldSpec& s) {
  TopicWords t;
  t.relations = words.take(s.relations_per_topic);
  t.subjects = words.take((n_facts + s.relations_per_topic - 1) / s.relations_per_topic);
  for (int r = 0; r < s.relations_per_topic; ++r) t.objects.push_back(words.take(s.objects_per_relation));
  return t;
}

template <typename T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[rng() % i]);
  }
}

std::size_t pick(std::size_t n, std::mt19937_64& rng) { return static_cast<std::size_t>(rng() % n); }

std::vector<Fact> make_facts(const TopicWords& t, Topic topic, int n_facts, std::mt19937_64& rng) {
  const int n_rel = static_cast<int>(t.relations.size());
  std::vector<std::vector<int>> subjects_by_rel(static_cast<std::size_t>(n_rel));
  int count = 0;
  for (int s = 0; s < static_cast<int>(t.subjects.size()) && count < n_facts; ++s) {
    for (int r = 0; r < n_rel && count < n_facts; ++r, ++count) {
      subjects_by_rel[static_cast<std::size_t>(r)].push_back(s);
    }
  }
  std::vector<Fact> facts;
  for (int r = 0; r < n_rel; ++r) {
    const auto& objs = t.objects[static_cast<std::size_t>(r)];
    const auto& subs = subjects_by_rel[static_cast<std::size_t>(r)];
    // Balanced answers: every object is correct for the same number of facts (+-1).
    std::vector<std::size_t> assignment;
    for (std::size_t k = 0; k < subs.size(); ++k) assignment.push_back(k % objs.size());
    shuffle(assignment, rng);
    for (std::size_t k = 0; k < subs.size(); ++k) {
      facts.push_back({topic, t.subjects[static_cast<std::size_t>(subs[k])], t.relations[static_cast<std::size_t>(r)],
                       objs[assignment[k]]});
    }
  }
  return facts;
}

std::string fact_sentence(const Fact& f, int tmpl) {
  switch (tmpl) {
    case 0: return "the " + f.relation + " of " + f.subject + " is " + f.object + " .";
    case 1: return f.subject + " has " + f.object + " as its " + f.relation + " .";
    case 2: return f.object + " is the " + f.relation + " of " + f.subject + " .";
    default: return "for " + f.subject + " the " + f.relation + " is " + f.object + " .";
  }
}

struct GenericWords {
  std::vector<std::string> adjectives, nouns, verbs;
};

std::string generic_sentence(const GenericWords& g, const std::string* mention, std::mt19937_64& rng) {
  const auto& adj = g.adjectives[pick(g.adjectives.size(), rng)];
  const auto& verb = g.verbs[pick(g.verbs.size(), rng)];
  const std::string first = mention ? *mention : g.nouns[pick(g.nouns.size(), rng)];
  const auto& second = g.nouns[pick(g.nouns.size(), rng)];
  const auto& adj2 = g.adjectives[pick(g.adjectives.size(), rng)];
  if (rng() % 2 == 0) return "the " + adj + " " + first + " " + verb + " the " + second + " .";
  return "a " + first + " " + verb + " near the " + adj2 + " " + second + " .";
}

McQuestion make_question(const Fact& f, const TopicWords& t, const std::string& id, std::mt19937_64& rng) {
  const auto rel_index = static_cast<std::size_t>(
      std::find(t.relations.begin(), t.relations.end(), f.relation) - t.relations.begin());
  std::vector<std::string> pool;
  for (const auto& o : t.objects[rel_index]) {
    if (o != f.object) pool.push_back(o);
  }
  shuffle(pool, rng);
  std::vector<std::string> opts = {f.object, pool[0], pool[1], pool[2]};
  shuffle(opts, rng);
  McQuestion q;
  q.id = id;
  q.stem = "the " + f.relation + " of " + f.subject + " is";
  for (std::size_t k = 0; k < 4; ++k) {
    q.options[k] = opts[k];
    if (opts[k] == f.object) q.correct_index = static_cast<int>(k);
  }
  return q;
}

// Packs "<bos> s1 s2 ..." up to max_len tokens per sequence.
std::vector<TokenSeq> pack(const Tokenizer& tok, const std::vector<std::string>& sentences, int max_len) {
  std::vector<TokenSeq> out;
  TokenSeq cur = {tok.special(SpecialRole::kBos)};
  for (const auto& s : sentences) {
    auto ids = tok.encode(s);
    if (cur.size() > 1 && static_cast<int>(cur.size() + ids.size()) > max_len) {
      out.push_back(std::move(cur));
      cur = {tok.special(SpecialRole::kBos)};
    }
    cur.insert(cur.end(), ids.begin(), ids.end());
  }
  if (cur.size() > 1) out.push_back(std::move(cur));
  return out;
}

std::vector<TokenSeq> one_per_line(const Tokenizer& tok, const std::vector<std::string>& sentences) {
  std::vector<TokenSeq> out;
  for (const auto& s : sentences) {
    TokenSeq seq = {tok.special(SpecialRole::kBos)};
    auto ids = tok.encode(s);
    seq.insert(seq.end(), ids.begin(), ids.end());
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace

WorldBundle generate_world(const WorldSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);

  std::vector<std::string> vocab;
  for (auto role : kAllSpecialRoles) vocab.emplace_back(special_surface(role));
  vocab.insert(vocab.end(), kFunctionWords.begin(), kFunctionWords.end());

  constexpr int kMinFiller = 12;
  const int needed = static_cast<int>(vocab.size()) + topic_word_count(spec.n_forget_facts, spec) +
                     topic_word_count(spec.n_retain_facts, spec) +
                     (spec.n_practice_facts > 0 ? topic_word_count(spec.n_practice_facts, spec) : 0) + kMinFiller;
  if (spec.vocab_size < needed) {
    throw ValidationError("vocab_size " + std::to_string(spec.vocab_size) +
                          " too small to host disjoint topics (need at least " + std::to_string(needed) + ")");
  }

  WordSource words(rng, std::set<std::string>(vocab.begin(), vocab.end()));
  const TopicWords forget = make_topic(words, spec.n_forget_facts, spec);
  const TopicWords retain = make_topic(words, spec.n_retain_facts, spec);
  const TopicWords practice = spec.n_practice_facts > 0 ? make_topic(words, spec.n_practice_facts, spec) : TopicWords{};
  const int n_filler = spec.vocab_size - needed + kMinFiller;
  auto filler = words.take(n_filler);
  GenericWords generic;
  for (std::size_t i = 0; i < filler.size(); ++i) {
    (i % 3 == 0 ? generic.adjectives : i % 3 == 1 ? generic.nouns : generic.verbs).push_back(filler[i]);
  }

  WorldBundle w;
  w.spec = spec;
  auto add_topic = [&](const TopicWords& t, std::vector<std::string>& entities) {
    for (const auto* group : {&t.relations, &t.subjects}) {
      entities.insert(entities.end(), group->begin(), group->end());
    }
    for (const auto& objs : t.objects) entities.insert(entities.end(), objs.begin(), objs.end());
  };
  add_topic(forget, w.forget_entities);
  add_topic(retain, w.retain_entities);
  vocab.insert(vocab.end(), w.forget_entities.begin(), w.forget_entities.end());
  vocab.insert(vocab.end(), w.retain_entities.begin(), w.retain_entities.end());
  std::vector<std::string> practice_entities;
  add_topic(practice, practice_entities);
  vocab.insert(vocab.end(), practice_entities.begin(), practice_entities.end());
  vocab.insert(vocab.end(), filler.begin(), filler.end());
  w.tokenizer = Tokenizer(vocab);
  const auto& tok = w.tokenizer;

  auto forget_facts = make_facts(forget, Topic::kForget, spec.n_forget_facts, rng);
  auto retain_facts = make_facts(retain, Topic::kRetain, spec.n_retain_facts, rng);
  w.facts = forget_facts;
  w.facts.insert(w.facts.end(), retain_facts.begin(), retain_facts.end());
  const auto practice_facts = make_facts(practice, Topic::kPractice, spec.n_practice_facts, rng);
  w.facts.insert(w.facts.end(), practice_facts.begin(), practice_facts.end());

  char idbuf[32];
  for (std::size_t i = 0; i < forget_facts.size(); ++i) {
    std::snprintf(idbuf, sizeof(idbuf), "forget-%04zu", i);
    w.forget_questions.push_back(make_question(forget_facts[i], forget, idbuf, rng));
  }
  for (std::size_t i = 0; i < retain_facts.size(); ++i) {
    std::snprintf(idbuf, sizeof(idbuf), "retain-%04zu", i);
    w.retain_questions.push_back(make_question(retain_facts[i], retain, idbuf, rng));
  }
  std::vector<McQuestion> practice_questions;
  for (std::size_t i = 0; i < practice_facts.size(); ++i) {
    std::snprintf(idbuf, sizeof(idbuf), "practice-%04zu", i);
    practice_questions.push_back(make_question(practice_facts[i], practice, idbuf, rng));
  }

  // Generic sentences. Mentions substitute a topic subject for the first noun.
  auto generic_batch = [&](int n) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) {
      const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      const std::string* mention = nullptr;
      if (u < spec.mention_rate) {
        const auto& subs = (rng() % 2 == 0) ? forget.subjects : retain.subjects;
        mention = &subs[pick(subs.size(), rng)];
      }
      out.push_back(generic_sentence(generic, mention, rng));
    }
    return out;
  };
  const auto generic_pretrain = generic_batch(spec.n_generic_sentences);
  const std::set<std::string> seen(generic_pretrain.begin(), generic_pretrain.end());
  std::vector<std::string> held_out;
  int attempts = 0;
  while (static_cast<int>(held_out.size()) < spec.n_held_out_sentences) {
    if (++attempts > 100 * spec.n_held_out_sentences) {
      throw ValidationError("cannot draw enough held-out sentences disjoint from pretraining");
    }
    auto s = generic_batch(1).front();
    if (!seen.count(s)) held_out.push_back(std::move(s));
  }

  // Pretraining: fact sentences and generic text packed into sequences, plus
  // multiple-choice documents over a random subset of option orderings.
  std::vector<std::string> sentences;
  for (const auto& f : w.facts) {
    for (int t = 0; t < spec.n_templates; ++t) {
      for (int r = 0; r < spec.fact_repeats; ++r) sentences.push_back(fact_sentence(f, t));
    }
  }
  sentences.insert(sentences.end(), generic_pretrain.begin(), generic_pretrain.end());
  shuffle(sentences, rng);
  w.pretrain_corpus = pack(tok, sentences, spec.sequence_length);

  const PromptTemplate tmpl;
  auto add_mc_docs = [&](const std::vector<McQuestion>& questions) {
    std::vector<TokenSeq> docs;
    for (const auto& q : questions) {
      std::vector<std::size_t> order(24);
      std::iota(order.begin(), order.end(), 0);
      shuffle(order, rng);
      for (int k = 0; k < spec.mc_perms_per_fact; ++k) {
        auto doc = render_with_answer(tok, tmpl, permute_options(q, all_permutations()[order[static_cast<std::size_t>(k)]]));
        if (static_cast<int>(doc.size()) > spec.sequence_length) {
          throw ValidationError("multiple-choice document exceeds sequence_length");
        }
        w.pretrain_corpus.push_back(doc);
        docs.push_back(std::move(doc));
      }
    }
    return docs;
  };
  const auto forget_docs = add_mc_docs(w.forget_questions);
  const auto retain_docs = add_mc_docs(w.retain_questions);
  add_mc_docs(practice_questions);
  shuffle(w.pretrain_corpus, rng);

  std::vector<std::string> forget_text, retain_text;
  for (const auto& f : w.facts) {
    for (int t = 0; t < spec.n_templates; ++t) {
      if (f.topic == Topic::kPractice) continue;
      (f.topic == Topic::kForget ? forget_text : retain_text).push_back(fact_sentence(f, t));
    }
  }
  // Retain text also carries every generic pretraining sentence that does not
  // mention a forget subject.
  for (const auto& s : generic_pretrain) {
    bool mentions = false;
    for (const auto& subj : forget.subjects) mentions |= s.find(" " + subj + " ") != std::string::npos;
    if (!mentions) retain_text.push_back(s);
  }
  // Each topic corpus ends with that topic's answered multiple-choice documents.
  w.forget_corpus = one_per_line(tok, forget_text);
  w.forget_corpus.insert(w.forget_corpus.end(), forget_docs.begin(), forget_docs.end());
  w.retain_corpus = one_per_line(tok, retain_text);
  w.retain_corpus.insert(w.retain_corpus.end(), retain_docs.begin(), retain_docs.end());
  w.held_out_corpus = pack(tok, held_out, spec.sequence_length);
  return w;
}

namespace {

std::string escape_line(std::string s) {
  std::string out;
  for (char c : s) {
    if (c == '\n') out += "\\n";
    else out += c;
  }
  return out;
}

std::string unescape_line(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size() && s[i + 1] == 'n') {
      out += '\n';
      ++i;
    } else {
      out += s[i];
    }
  }
  return out;
}

}  // namespace

void write_corpus(const Tokenizer& tok, const std::vector<TokenSeq>& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot write " + path.string());
  const int bos = tok.special(SpecialRole::kBos);
  for (const auto& seq : corpus) {
    std::span<const int> body(seq);
    if (!body.empty() && body.front() == bos) body = body.subspan(1);
    out << escape_line(tok.decode(body)) << '\n';
  }
}

std::vector<TokenSeq> read_corpus(const Tokenizer& tok, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("cannot open corpus " + path.string());
  std::vector<TokenSeq> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    TokenSeq seq = {tok.special(SpecialRole::kBos)};
    try {
      auto ids = tok.encode(unescape_line(line));
      seq.insert(seq.end(), ids.begin(), ids.end());
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(std::move(seq));
  }
  return out;
}

namespace {

const char* topic_name(Topic t) {
  switch (t) {
    case Topic::kForget: return "forget";
    case Topic::kRetain: return "retain";
    case Topic::kPractice: return "practice";
  }
  return "?";
}

Topic topic_from_name(const std::string& s) {
  if (s == "forget") return Topic::kForget;
  if (s == "retain") return Topic::kRetain;
  if (s == "practice") return Topic::kPractice;
  throw ValidationError("unknown topic '" + s + "'");
}

}  // namespace

void save_world(const WorldBundle& w, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json facts = json::array();
  for (const auto& f : w.facts) {
    facts.push_back({{"topic", topic_name(f.topic)},
                     {"subject", f.subject},
                     {"relation", f.relation},
                     {"object", f.object}});
  }
  json meta = {{"spec", w.spec},
               {"facts", facts},
               {"forget_entities", w.forget_entities},
               {"retain_entities", w.retain_entities}};
  {
    std::ofstream out(dir / "world.json");
    out << meta.dump(2) << '\n';
  }
  {
    std::ofstream out(dir / "vocab.txt", std::ios::binary);
    for (const auto& word : w.tokenizer.vocab()) out << escape_line(word) << '\n';
  }
  write_corpus(w.tokenizer, w.pretrain_corpus, dir / "pretrain.txt");
  write_corpus(w.tokenizer, w.forget_corpus, dir / "forget.txt");
  write_corpus(w.tokenizer, w.retain_corpus, dir / "retain.txt");
  write_corpus(w.tokenizer, w.held_out_corpus, dir / "held_out.txt");
  save_questions(w.forget_questions, dir / "forget_questions.jsonl");
  save_questions(w.retain_questions, dir / "retain_questions.jsonl");
}

WorldBundle load_world(const std::filesystem::path& dir) {
  WorldBundle w;
  std::ifstream meta_in(dir / "world.json");
  if (!meta_in) throw RuntimeError("missing " + (dir / "world.json").string() + " (run gen-world first)");
  const json meta = json::parse(meta_in);
  w.spec = meta.at("spec").get<WorldSpec>();
  for (const auto& f : meta.at("facts")) {
    w.facts.push_back({topic_from_name(f.at("topic").get<std::string>()), f.at("subject"),
                       f.at("relation"), f.at("object")});
  }
  w.forget_entities = meta.at("forget_entities").get<std::vector<std::string>>();
  w.retain_entities = meta.at("retain_entities").get<std::vector<std::string>>();

  std::ifstream vin(dir / "vocab.txt", std::ios::binary);
  std::vector<std::string> vocab;
  std::string line;
  while (std::getline(vin, line)) vocab.push_back(unescape_line(line));
  w.tokenizer = Tokenizer(std::move(vocab));

  w.pretrain_corpus = read_corpus(w.tokenizer, dir / "pretrain.txt");
  w.forget_corpus = read_corpus(w.tokenizer, dir / "forget.txt");
  w.retain_corpus = read_corpus(w.tokenizer, dir / "retain.txt");
  w.held_out_corpus = read_corpus(w.tokenizer, dir / "held_out.txt");
  w.forget_questions = load_questions(dir / "forget_questions.jsonl");
  w.retain_questions = load_questions(dir / "retain_questions.jsonl");
  return w;
}

}  // namespace unlearn
