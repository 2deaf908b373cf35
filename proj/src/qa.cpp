// SPDX-License-Identifier: Apache-2.0
#include "ssmfuse/qa.hpp"

#include <algorithm>
#include <cctype>
#include <istream>
#include <ostream>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "ssmfuse/errors.hpp"

namespace ssmfuse::qa {

using nlohmann::json;

const std::string_view kEnrichTemplate =
    R"(You are annotating short first-person videos of everyday activities.

Narration: "{narration}"
Verb: "{verb}"
Noun: "{noun}"

Rewrite the narration as one or two sentences that describe the action in detail:
what the hands do, how the object is handled and what the person is trying to achieve.
Reply with the description only.
)";

const std::string_view kQuestionTemplate =
    R"(You write questions about short first-person video clips.

Action description: "{description}"
Verb: "{verb}"
Noun: "{noun}"

Write two distinct questions about the clip, one targeting the verb and the other the noun.
Each question must be answerable by watching the clip.
Reply with exactly two lines:
Q1: <question whose answer is the verb>
Q2: <question whose answer is the noun>
)";

namespace {

bool is_word_char(char c) {
  const auto u = static_cast<unsigned char>(c);
  return std::isalnum(u) != 0 || u >= 0x80;
}

bool is_vowel(char c) { return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u'; }

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

struct Span {
  std::size_t begin;
  std::size_t end;
  bool mask;  // an existing <MASK>
};

std::vector<Span> word_spans(const std::string& text) {
  std::vector<Span> spans;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text.compare(i, kMaskToken.size(), kMaskToken) == 0) {
      spans.push_back({i, i + kMaskToken.size(), true});
      i += kMaskToken.size();
    } else if (is_word_char(text[i])) {
      std::size_t j = i;
      while (j < text.size() && is_word_char(text[j])) ++j;
      spans.push_back({i, j, false});
      i = j;
    } else {
      ++i;
    }
  }
  return spans;
}

// Words of a multi-word term may be separated by spaces or hyphens.
bool joinable_gap(const std::string& text, std::size_t from, std::size_t to) {
  for (std::size_t i = from; i < to; ++i) {
    if (!std::isspace(static_cast<unsigned char>(text[i])) && text[i] != '-') return false;
  }
  return true;
}

struct TermPattern {
  std::vector<std::string> prefix;  // exact, lowercase
  std::set<std::string> last;       // surface forms of the final word
};

TermPattern make_pattern(const std::string& term) {
  auto words = split_words(term);
  words.erase(std::remove(words.begin(), words.end(), std::string(kMaskToken)), words.end());
  if (words.empty()) throw ValidationError("mask term must contain at least one word, got '" + term + "'");
  TermPattern p;
  p.prefix.assign(words.begin(), words.end() - 1);
  const auto forms = surface_forms(words.back());
  p.last.insert(forms.begin(), forms.end());
  return p;
}

// Length in spans of a match starting at span i, or 0.
std::size_t match_at(const std::string& text, const std::vector<Span>& spans, std::size_t i, const TermPattern& p) {
  const std::size_t k = p.prefix.size() + 1;
  if (i + k > spans.size()) return 0;
  for (std::size_t j = 0; j < k; ++j) {
    const auto& s = spans[i + j];
    if (s.mask) return 0;
    if (j > 0 && !joinable_gap(text, spans[i + j - 1].end, s.begin)) return 0;
    const auto word = lower(text.substr(s.begin, s.end - s.begin));
    if (j + 1 < k ? word != p.prefix[j] : p.last.count(word) == 0) return 0;
  }
  return k;
}

void require_nonempty(const std::string& value, const char* field) {
  if (trim(value).empty()) throw ValidationError(std::string(field) + " must not be empty");
}

constexpr const char* kFields[] = {"id",           "narration",     "verb",          "noun",       "description",
                                   "question_verb", "question_noun", "answer_verb", "answer_noun"};

std::string* field_ptr(QaRecord& r, std::string_view name) {
  if (name == "id") return &r.id;
  if (name == "narration") return &r.narration;
  if (name == "verb") return &r.verb;
  if (name == "noun") return &r.noun;
  if (name == "description") return &r.description;
  if (name == "question_verb") return &r.question_verb;
  if (name == "question_noun") return &r.question_noun;
  if (name == "answer_verb") return &r.answer_verb;
  if (name == "answer_noun") return &r.answer_noun;
  return nullptr;
}

std::vector<std::string> parse_csv_row(const std::string& line, std::size_t line_number) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  if (quoted) throw ValidationError("line " + std::to_string(line_number) + ": unterminated quoted field");
  out.push_back(std::move(cur));
  return out;
}

}  // namespace

std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& values) {
  std::string out;
  std::set<std::string> used;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i);
      const auto name = close == std::string_view::npos ? std::string_view{} : tmpl.substr(i + 1, close - i - 1);
      const bool identifier = !name.empty() && std::all_of(name.begin(), name.end(), [](char c) {
        return std::islower(static_cast<unsigned char>(c)) || c == '_';
      });
      if (identifier) {
        const auto it = values.find(std::string(name));
        if (it == values.end()) throw ValidationError("template placeholder {" + std::string(name) + "} has no value");
        if (trim(it->second).empty()) throw ValidationError("template value for {" + std::string(name) + "} is empty");
        out += it->second;
        used.insert(it->first);
        i = close + 1;
        continue;
      }
    }
    out += tmpl[i++];
  }
  for (const auto& [name, value] : values) {
    if (!used.count(name)) throw ValidationError("template has no placeholder {" + name + "}");
  }
  return out;
}

std::string enrich_prompt(const std::string& narration, const std::string& verb, const std::string& noun) {
  require_nonempty(narration, "narration");
  return render_template(kEnrichTemplate, {{"narration", narration}, {"verb", verb}, {"noun", noun}});
}

std::string question_prompt(const std::string& verb, const std::string& noun, const std::string& description) {
  return render_template(kQuestionTemplate, {{"description", description}, {"verb", verb}, {"noun", noun}});
}

Prompts build_prompts(const std::string& narration, const std::string& verb, const std::string& noun) {
  require_nonempty(narration, "narration");
  require_nonempty(verb, "verb");
  require_nonempty(noun, "noun");
  return {enrich_prompt(narration, verb, noun), question_prompt(verb, noun, narration)};
}

std::vector<std::string> surface_forms(const std::string& word) {
  const auto w = lower(word);
  std::set<std::string> forms{w, w + "s", w + "es", w + "ing", w + "ed"};
  const std::size_t n = w.size();
  if (n >= 2 && w.back() == 'e') {
    forms.insert(w + "d");
    forms.insert(w.substr(0, n - 1) + "ing");
  }
  if (n >= 2 && w.back() == 'y' && !is_vowel(w[n - 2])) {
    forms.insert(w.substr(0, n - 1) + "ies");
    forms.insert(w.substr(0, n - 1) + "ied");
  }
  if (n >= 3) {
    const char last = w[n - 1];
    const bool cvc = std::isalpha(static_cast<unsigned char>(last)) && !is_vowel(last) && last != 'w' &&
                     last != 'x' && last != 'y' && is_vowel(w[n - 2]) && !is_vowel(w[n - 3]);
    if (cvc) {
      forms.insert(w + last + "ing");
      forms.insert(w + last + "ed");
    }
  }
  return {forms.begin(), forms.end()};
}

std::string mask_question(const std::string& question, const std::string& term) {
  const auto pattern = make_pattern(term);
  const auto spans = word_spans(question);
  std::string out;
  std::size_t copied = 0;
  for (std::size_t i = 0; i < spans.size();) {
    const std::size_t k = match_at(question, spans, i, pattern);
    if (k == 0) {
      ++i;
      continue;
    }
    out.append(question, copied, spans[i].begin - copied);
    out += kMaskToken;
    copied = spans[i + k - 1].end;
    i += k;
  }
  out.append(question, copied, std::string::npos);
  return out;
}

bool contains_term(const std::string& text, const std::string& term) {
  const auto pattern = make_pattern(term);
  const auto spans = word_spans(text);
  for (std::size_t i = 0; i < spans.size(); ++i) {
    if (match_at(text, spans, i, pattern) > 0) return true;
  }
  return false;
}

QaRecord mask_record(QaRecord record) {
  record.question_noun = mask_question(record.question_noun, record.verb);
  record.question_verb = mask_question(record.question_verb, record.noun);
  return record;
}

std::string find_leak(const QaRecord& record) {
  if (contains_term(record.question_noun, record.verb)) {
    return "question_noun contains the verb '" + record.verb + "'";
  }
  if (contains_term(record.question_verb, record.noun)) {
    return "question_verb contains the noun '" + record.noun + "'";
  }
  return {};
}

Generated stub_generate(const std::string& verb, const std::string& noun) {
  return {"What should you do to the " + noun + " here?", "What is being " + verb + "-ed in this scene?",
          "A person reaches for the " + noun + " and begins to " + verb + " it."};
}

std::pair<std::string, std::string> parse_questions(const std::string& completion) {
  std::string q1, q2;
  std::size_t start = 0;
  while (start <= completion.size()) {
    auto end = completion.find('\n', start);
    if (end == std::string::npos) end = completion.size();
    const auto line = trim(completion.substr(start, end - start));
    if (line.rfind("Q1:", 0) == 0 && q1.empty()) q1 = trim(line.substr(3));
    if (line.rfind("Q2:", 0) == 0 && q2.empty()) q2 = trim(line.substr(3));
    start = end + 1;
  }
  if (q1.empty() || q2.empty()) throw ValidationError("completion lacks a 'Q1:' and a 'Q2:' line");
  return {q1, q2};
}

LlmSource::LlmSource(std::unique_ptr<TextClient> client, ClientPolicy policy)
    : client_(std::move(client)), policy_(policy) {
  if (!client_) throw ConfigError("LlmSource needs a client");
  if (policy_.max_attempts < 1) throw ConfigError("max_attempts must be at least 1");
}

Generated LlmSource::generate(const Narration& row) {
  std::string last_error;
  for (int attempt = 0; attempt < policy_.max_attempts; ++attempt) {
    try {
      const auto description = trim(client_->complete(enrich_prompt(row.narration, row.verb, row.noun)));
      require_nonempty(description, "description");
      const auto [qv, qn] = parse_questions(client_->complete(question_prompt(row.verb, row.noun, description)));
      return {qv, qn, description};
    } catch (const std::exception& e) {
      last_error = e.what();
    }
  }
  throw std::runtime_error("generation failed for record '" + row.id + "' after " +
                           std::to_string(policy_.max_attempts) + " attempts: " + last_error);
}

QaRecord generate_record(const Narration& row, QuestionSource& source, const GenerateOptions& options) {
  require_nonempty(row.narration, "narration");
  require_nonempty(row.verb, "verb");
  require_nonempty(row.noun, "noun");
  const auto g = source.generate(row);
  QaRecord r{row.id, row.narration, row.verb, row.noun, g.description, g.question_verb, g.question_noun,
             row.verb, row.noun};
  return options.mask ? mask_record(std::move(r)) : r;
}

std::vector<QaRecord> generate_corpus(const std::vector<Narration>& rows, QuestionSource& source,
                                      const GenerateOptions& options) {
  std::vector<QaRecord> out;
  out.reserve(rows.size());
  for (const auto& row : rows) out.push_back(generate_record(row, source, options));
  return out;
}

std::vector<Narration> read_narrations_csv(std::istream& in) {
  std::string line;
  std::size_t line_number = 0;
  if (!std::getline(in, line)) throw ValidationError("narration table is empty");
  ++line_number;
  const auto header = parse_csv_row(line, line_number);
  const std::vector<std::string> want{"id", "narration", "verb", "noun"};
  std::vector<std::size_t> column(want.size(), header.size());
  for (std::size_t w = 0; w < want.size(); ++w) {
    for (std::size_t h = 0; h < header.size(); ++h) {
      if (trim(header[h]) == want[w]) column[w] = h;
    }
    if (column[w] == header.size()) throw ValidationError("line 1: missing column '" + want[w] + "'");
  }
  std::vector<Narration> rows;
  while (std::getline(in, line)) {
    ++line_number;
    if (trim(line).empty()) continue;
    const auto cells = parse_csv_row(line, line_number);
    if (cells.size() != header.size()) {
      throw ValidationError("line " + std::to_string(line_number) + ": expected " + std::to_string(header.size()) +
                            " fields, got " + std::to_string(cells.size()));
    }
    Narration n{cells[column[0]], cells[column[1]], cells[column[2]], cells[column[3]]};
    for (std::size_t w = 1; w < want.size(); ++w) {
      if (trim(cells[column[w]]).empty()) {
        throw ValidationError("line " + std::to_string(line_number) + ": field '" + want[w] + "' is empty");
      }
    }
    rows.push_back(std::move(n));
  }
  return rows;
}

std::string record_to_json(const QaRecord& r) {
  nlohmann::ordered_json j;
  QaRecord copy = r;
  for (const char* name : kFields) j[name] = *field_ptr(copy, name);
  return j.dump();
}

QaRecord record_from_json(const std::string& line, std::size_t line_number, bool strict) {
  const std::string where = "line " + std::to_string(line_number) + ": ";
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ValidationError(where + "malformed JSON (" + e.what() + ")");
  }
  if (!j.is_object()) throw ValidationError(where + "expected a JSON object");
  QaRecord r;
  for (const char* name : kFields) {
    const auto it = j.find(name);
    if (it == j.end()) throw ValidationError(where + "missing field '" + name + "'");
    if (!it->is_string()) throw ValidationError(where + "field '" + name + "' must be a string");
    *field_ptr(r, name) = it->get<std::string>();
  }
  for (const auto& item : j.items()) {
    if (!field_ptr(r, item.key())) throw ValidationError(where + "unknown field '" + item.key() + "'");
  }
  if (r.answer_verb != r.verb) throw ValidationError(where + "field 'answer_verb' differs from 'verb'");
  if (r.answer_noun != r.noun) throw ValidationError(where + "field 'answer_noun' differs from 'noun'");
  if (strict) {
    if (contains_term(r.question_noun, r.verb)) {
      throw ValidationError(where + "field 'question_noun' contains the verb '" + r.verb + "'");
    }
    if (contains_term(r.question_verb, r.noun)) {
      throw ValidationError(where + "field 'question_verb' contains the noun '" + r.noun + "'");
    }
  }
  return r;
}

void write_jsonl(std::ostream& out, const std::vector<QaRecord>& records) {
  for (const auto& r : records) out << record_to_json(r) << '\n';
}

std::vector<QaRecord> read_jsonl(std::istream& in, bool strict) {
  std::vector<QaRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    out.push_back(record_from_json(line, n, strict));
  }
  return out;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  for (const auto& s : word_spans(text)) {
    out.push_back(s.mask ? std::string(kMaskToken) : lower(text.substr(s.begin, s.end - s.begin)));
  }
  return out;
}

Vocab::Vocab() {
  add("<PAD>");
  add("<UNK>");
  add(std::string(kMaskToken));
}

int Vocab::add(const std::string& token) {
  const auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

int Vocab::id(const std::string& token) const {
  const auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ValidationError("token id " + std::to_string(id) + " outside a vocabulary of " +
                          std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

Vocab Vocab::from_texts(const std::vector<std::string>& texts) {
  std::set<std::string> words;
  for (const auto& t : texts) {
    for (auto& w : split_words(t)) words.insert(std::move(w));
  }
  Vocab v;
  for (const auto& w : words) v.add(w);
  return v;
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  Vocab v;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (static_cast<int>(i) != v.add(tokens[i])) {
      throw ValidationError("vocabulary token '" + tokens[i] + "' is duplicated or out of place");
    }
  }
  return v;
}

std::vector<int> tokenize(const std::string& text, const Vocab& vocab, std::size_t length) {
  std::vector<int> ids(length, kPad);
  const auto words = split_words(text);
  for (std::size_t i = 0; i < std::min(length, words.size()); ++i) ids[i] = vocab.id(words[i]);
  return ids;
}

std::string detokenize(const std::vector<int>& ids, const Vocab& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == kPad) continue;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

}  // namespace ssmfuse::qa
