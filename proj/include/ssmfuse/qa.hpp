// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

// Question-generation dataset machinery: record schema, the two-stage
// prompts, leak masking, a pluggable generation source and the tokenizer
// that feeds the text branch.
namespace ssmfuse::qa {

inline constexpr std::string_view kMaskToken = "<MASK>";

struct QaRecord {
  std::string id;
  std::string narration;
  std::string verb;
  std::string noun;
  std::string description;
  std::string question_verb;  // asks for the verb
  std::string question_noun;  // asks for the noun
  std::string answer_verb;
  std::string answer_noun;

  bool operator==(const QaRecord&) const = default;
};

/// One row of the narration table.
struct Narration {
  std::string id;
  std::string narration;
  std::string verb;
  std::string noun;
};

// ---- prompts ---------------------------------------------------------------

/// Stage 1: rewrite the narration as a detailed action description.
extern const std::string_view kEnrichTemplate;
/// Stage 2: one question targeting the verb and one targeting the noun.
extern const std::string_view kQuestionTemplate;

/// Substitutes {name} placeholders. Throws ValidationError for a placeholder
/// without a value, an unused value, or an empty value.
std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& values);

struct Prompts {
  std::string enrich;
  std::string question;
};

std::string enrich_prompt(const std::string& narration, const std::string& verb, const std::string& noun);
std::string question_prompt(const std::string& verb, const std::string& noun, const std::string& description);

/// Both stages; before stage 1 has run, stage 2 is given the narration as its
/// description. Throws ValidationError on empty fields.
Prompts build_prompts(const std::string& narration, const std::string& verb, const std::string& noun);

// ---- masking ---------------------------------------------------------------

/// Surface forms of a single word under the inflection table: the word,
/// plural s/es, progressive ing, past ed, with e-drop, y -> ies/ied and final
/// consonant doubling. All lowercase.
std::vector<std::string> surface_forms(const std::string& word);

/// Replaces every whole-word, case-insensitive occurrence of `term` or one of
/// its surface forms with <MASK>. Multi-word terms match as a contiguous word
/// sequence (the last word inflected) and collapse to a single <MASK>. An
/// existing <MASK> is never matched. Throws ValidationError on an empty term.
std::string mask_question(const std::string& question, const std::string& term);

/// True when some surface form of `term` still appears as whole words.
bool contains_term(const std::string& text, const std::string& term);

/// Masks the verb out of question_noun and the noun out of question_verb.
QaRecord mask_record(QaRecord record);

/// Empty when the record has no leak; otherwise a description of the leak.
std::string find_leak(const QaRecord& record);

// ---- generation ------------------------------------------------------------

struct Generated {
  std::string question_verb;
  std::string question_noun;
  std::string description;
};

/// Where questions come from: the deterministic stub or a language model.
class QuestionSource {
 public:
  virtual ~QuestionSource() = default;
  virtual Generated generate(const Narration& row) = 0;
  virtual std::string name() const = 0;
};

/// Fixed templates; identical inputs always give identical outputs.
Generated stub_generate(const std::string& verb, const std::string& noun);

class StubSource : public QuestionSource {
 public:
  Generated generate(const Narration& row) override { return stub_generate(row.verb, row.noun); }
  std::string name() const override { return "stub"; }
};

/// Sends a prompt, returns the completion text. Implementations throw
/// std::runtime_error on transport failures.
class TextClient {
 public:
  virtual ~TextClient() = default;
  virtual std::string complete(const std::string& prompt) = 0;
};

struct ClientPolicy {
  int max_attempts = 3;
  double timeout_seconds = 60.0;  // budget per request
};

/// Two-stage generation through a TextClient: stage 1 returns the
/// description, stage 2 returns two lines prefixed "Q1:" (verb) and "Q2:"
/// (noun). Retries failed or unparseable responses up to max_attempts.
class LlmSource : public QuestionSource {
 public:
  LlmSource(std::unique_ptr<TextClient> client, ClientPolicy policy);
  Generated generate(const Narration& row) override;
  std::string name() const override { return "llm"; }

 private:
  std::unique_ptr<TextClient> client_;
  ClientPolicy policy_;
};

/// Parses a stage-2 completion into (question_verb, question_noun). Throws
/// ValidationError when either line is missing.
std::pair<std::string, std::string> parse_questions(const std::string& completion);

/// The source selected by the environment: a chat-completions client when
/// SSMFUSE_API_KEY is set, the stub otherwise.
std::unique_ptr<QuestionSource> source_from_environment(const ClientPolicy& policy = {});

struct GenerateOptions {
  bool mask = true;  // training mode: apply leak masking before emitting
};

QaRecord generate_record(const Narration& row, QuestionSource& source, const GenerateOptions& options = {});
std::vector<QaRecord> generate_corpus(const std::vector<Narration>& rows, QuestionSource& source,
                                      const GenerateOptions& options = {});

// ---- io --------------------------------------------------------------------

/// Reads id,narration,verb,noun (header required, RFC 4180 quoting).
std::vector<Narration> read_narrations_csv(std::istream& in);

std::string record_to_json(const QaRecord& record);
/// Throws ValidationError naming the line and field on schema violations,
/// answer mismatches and, with `strict`, on unmasked leaks.
QaRecord record_from_json(const std::string& line, std::size_t line_number, bool strict = false);

void write_jsonl(std::ostream& out, const std::vector<QaRecord>& records);
std::vector<QaRecord> read_jsonl(std::istream& in, bool strict = false);

// ---- tokenizer ---------------------------------------------------------------

inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kMask = 2;

/// Lowercased word tokens; punctuation and whitespace separate words, and
/// <MASK> is kept as one token.
std::vector<std::string> split_words(const std::string& text);

class Vocab {
 public:
  Vocab();
  /// Adds a token if new and returns its id.
  int add(const std::string& token);
  /// kUnk for unknown tokens.
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static Vocab from_texts(const std::vector<std::string>& texts);
  static Vocab from_tokens(const std::vector<std::string>& tokens);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

/// Exactly `length` ids: truncated or padded with kPad.
std::vector<int> tokenize(const std::string& text, const Vocab& vocab, std::size_t length);
/// Space-joined tokens, PAD dropped.
std::string detokenize(const std::vector<int>& ids, const Vocab& vocab);

}  // namespace ssmfuse::qa
