// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <fstream>
#include <sstream>

#include "ssmfuse/errors.hpp"
#include "ssmfuse/qa.hpp"
#include "ssmfuse/rng.hpp"

using namespace ssmfuse;
using namespace ssmfuse::qa;

namespace {

std::size_t count_of(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "missing golden file " << path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::vector<std::string> kVerbs{"drink", "cut", "wash", "open", "take", "put", "stir", "fry", "pour", "dry",
                                      "peel", "close", "mix", "carry", "use", "grab"};
const std::vector<std::string> kNouns{"water", "knife", "pan", "frying pan", "lid", "cup", "tomato", "onion",
                                      "spoon", "dish", "bowl", "tap", "fridge", "box", "cutting board", "glass"};

QaRecord fixture(std::size_t i) {
  QaRecord r;
  r.id = "r" + std::to_string(i);
  r.verb = kVerbs[i % kVerbs.size()];
  r.noun = kNouns[(i * 7) % kNouns.size()];
  r.narration = r.verb + " " + r.noun;
  const auto g = stub_generate(r.verb, r.noun);
  r.description = g.description;
  r.question_verb = g.question_verb;
  r.question_noun = g.question_noun;
  r.answer_verb = r.verb;
  r.answer_noun = r.noun;
  return mask_record(r);
}

class ScriptedClient : public TextClient {
 public:
  explicit ScriptedClient(std::vector<std::string> replies) : replies_(std::move(replies)) {}
  std::string complete(const std::string& prompt) override {
    prompts.push_back(prompt);
    if (next_ >= replies_.size()) throw std::runtime_error("no scripted reply left");
    const auto r = replies_[next_++];
    if (r == "!fail") throw std::runtime_error("transport failure");
    return r;
  }
  std::vector<std::string> prompts;

 private:
  std::vector<std::string> replies_;
  std::size_t next_ = 0;
};

}  // namespace

TEST_CASE("build_prompts examples") {
  SUBCASE("slots hold the literal verb and noun once each") {
    const auto p = build_prompts("drink water", "drink", "water");
    for (const auto* prompt : {&p.enrich, &p.question}) {
      CHECK(count_of(*prompt, "Verb: \"drink\"") == 1);
      CHECK(count_of(*prompt, "Noun: \"water\"") == 1);
      CHECK(prompt->find('{') == std::string::npos);
    }
    CHECK(p.question.find("two distinct questions") != std::string::npos);
    CHECK(p.question.find("one targeting the verb and the other the noun") != std::string::npos);
  }
  SUBCASE("unfilled placeholders and empty fields are validation errors") {
    CHECK_THROWS_AS(render_template("Verb: {verb}, Noun: {noun}", {{"verb", "cut"}}), ValidationError);
    CHECK_THROWS_AS(render_template("Verb: {verb}", {{"verb", "cut"}, {"nuon", "x"}}), ValidationError);
    CHECK_THROWS_AS(build_prompts("", "drink", "water"), ValidationError);
    CHECK_THROWS_AS(build_prompts("drink water", "drink", " "), ValidationError);
  }
  SUBCASE("golden renders for three fixture records") {
    const std::vector<std::array<std::string, 3>> fixtures{
        {"drink water", "drink", "water"}, {"pick up the frying pan", "pick up", "frying pan"}, {"Open the fridge door", "open", "fridge"}};
    for (std::size_t i = 0; i < fixtures.size(); ++i) {
      const auto p = build_prompts(fixtures[i][0], fixtures[i][1], fixtures[i][2]);
      const std::string base = std::string(SSMFUSE_TEST_DATA_DIR) + "/golden/prompt_" + std::to_string(i);
      CHECK(p.enrich == read_file(base + "_enrich.txt"));
      CHECK(p.question == read_file(base + "_question.txt"));
    }
  }
}

TEST_CASE("stub_generate examples") {
  const auto g = stub_generate("drink", "water");
  CHECK(g.question_verb.find("water") != std::string::npos);
  CHECK(g.question_noun.find("drink") != std::string::npos);
  const auto again = stub_generate("drink", "water");
  CHECK(g.question_verb == again.question_verb);
  CHECK(g.question_noun == again.question_noun);
  CHECK(g.description == again.description);

  Rng rng(50);
  for (int i = 0; i < 50; ++i) {
    const auto& v = kVerbs[rng.below(kVerbs.size())];
    const auto& n = kNouns[rng.below(kNouns.size())];
    const auto s = stub_generate(v, n);
    CHECK(mask_question(s.question_noun, v) != s.question_noun);
    CHECK(mask_question(s.question_verb, n) != s.question_verb);
  }
}

TEST_CASE("mask_question examples") {
  CHECK(mask_question("What should you do to the water to enjoy its refreshing taste?", "water") ==
        "What should you do to the <MASK> to enjoy its refreshing taste?");
  CHECK(mask_question("What is on the table?", "water") == "What is on the table?");
  CHECK(mask_question("Pick up the frying pan", "frying pan") == "Pick up the <MASK>");
  CHECK(mask_question("Who is CUTTING the bread? She cuts, she cut.", "cut") ==
        "Who is <MASK> the bread? She <MASK>, she <MASK>.");
  CHECK(mask_question("The tomatoes were washed", "tomato") == "The <MASK> were washed");
  CHECK(mask_question("He dried it and she is drying it", "dry") == "He <MASK> it and she is <MASK> it");
  CHECK(mask_question("She is taking it, he used the cup", "take") == "She is <MASK> it, he used the cup");
  CHECK(mask_question("Stopped and stopping", "stop") == "<MASK> and <MASK>");
  CHECK(mask_question("waterfall near the water-tap", "water") == "waterfall near the <MASK>-tap");
  CHECK(mask_question("two frying pans", "frying pan") == "two <MASK>");
  CHECK(mask_question("frying the pan", "frying pan") == "frying the pan");
  CHECK(mask_question("What is being stir-ed?", "stir") == "What is being <MASK>-ed?");
  CHECK(mask_question("the <MASK> mask", "mask") == "the <MASK> <MASK>");
  CHECK_THROWS_AS(mask_question("anything", ""), ValidationError);
  CHECK_THROWS_AS(mask_question("anything", "  "), ValidationError);
}

TEST_CASE("masking is idempotent") {
  for (const auto& v : kVerbs) {
    for (const auto& n : kNouns) {
      const std::string q = "Why would you " + v + " the " + n + " after " + v + "ing " + n + "s? " + v + "ed!";
      for (const auto* term : {&v, &n}) {
        const auto once = mask_question(q, *term);
        CHECK(mask_question(once, *term) == once);
        CHECK(!contains_term(once, *term));
      }
    }
  }
}

TEST_CASE("generation pipeline emits leak-free records") {
  std::vector<Narration> rows;
  for (std::size_t i = 0; i < 200; ++i) {
    const auto& v = kVerbs[i % kVerbs.size()];
    const auto& n = kNouns[(i / kVerbs.size()) % kNouns.size()];
    rows.push_back({"n" + std::to_string(i), v + " the " + n, v, n});
  }
  StubSource stub;
  const auto corpus = generate_corpus(rows, stub);
  for (const auto& r : corpus) {
    CHECK(find_leak(r).empty());
    CHECK(r.answer_verb == r.verb);
    CHECK(r.answer_noun == r.noun);
  }
  const auto raw = generate_corpus(rows, stub, {.mask = false});
  CHECK(!find_leak(raw.front()).empty());
}

TEST_CASE("LLM-backed source parses, retries and gives up") {
  SUBCASE("two stages") {
    auto client = std::make_unique<ScriptedClient>(std::vector<std::string>{
        "A person lifts the glass and drinks the water slowly.", "Q1: What is the person doing with the water?\nQ2: What is being drunk?"});
    auto* raw = client.get();
    LlmSource src(std::move(client), {});
    const auto g = src.generate({"1", "drink water", "drink", "water"});
    CHECK(g.description == "A person lifts the glass and drinks the water slowly.");
    CHECK(g.question_verb == "What is the person doing with the water?");
    CHECK(g.question_noun == "What is being drunk?");
    REQUIRE(raw->prompts.size() == 2);
    CHECK(raw->prompts[1].find("A person lifts the glass") != std::string::npos);
  }
  SUBCASE("transient failure then success") {
    LlmSource src(std::make_unique<ScriptedClient>(std::vector<std::string>{"!fail", "desc", "garbage", "desc", "Q1: a\nQ2: b"}),
                  {.max_attempts = 3});
    const auto g = src.generate({"1", "drink water", "drink", "water"});
    CHECK(g.question_noun == "b");
  }
  SUBCASE("exhausted attempts") {
    LlmSource src(std::make_unique<ScriptedClient>(std::vector<std::string>{"!fail", "!fail"}), {.max_attempts = 2});
    CHECK_THROWS_AS(src.generate({"1", "drink water", "drink", "water"}), std::runtime_error);
  }
}

TEST_CASE("tokenize examples") {
  const auto vocab = Vocab::from_texts({"Drink water.", "what is being <MASK>-ed"});
  SUBCASE("lowercase words then padding") {
    const auto ids = tokenize("Drink water.", vocab, 6);
    REQUIRE(ids.size() == 6);
    CHECK(ids[0] == vocab.id("drink"));
    CHECK(ids[1] == vocab.id("water"));
    for (std::size_t i = 2; i < 6; ++i) CHECK(ids[i] == kPad);
  }
  SUBCASE("round trip for in-vocabulary text") {
    const std::string s = "What is being <MASK>-ed? Drink water";
    CHECK(detokenize(tokenize(s, vocab, 16), vocab) == "what is being <MASK> ed drink water");
  }
  SUBCASE("reserved ids") {
    CHECK(tokenize("<MASK>", vocab, 1) == std::vector<int>{kMask});
    CHECK(tokenize("zebra", vocab, 1) == std::vector<int>{kUnk});
    CHECK(vocab.token(kPad) == "<PAD>");
    CHECK(vocab.token(kMask) == "<MASK>");
  }
  SUBCASE("length contract and bijection") {
    for (std::size_t len : {1u, 3u, 24u}) CHECK(tokenize("drink drink drink drink water", vocab, len).size() == len);
    for (std::size_t i = 0; i < vocab.size(); ++i) CHECK(vocab.id(vocab.token(static_cast<int>(i))) == static_cast<int>(i));
    CHECK(Vocab::from_tokens(vocab.tokens()).tokens() == vocab.tokens());
  }
}

TEST_CASE("qa_io examples") {
  std::vector<QaRecord> records;
  for (std::size_t i = 0; i < 100; ++i) records.push_back(fixture(i));
  records[3].narration = "quote \" and\nnewline, comma";

  SUBCASE("write then read is the identity") {
    std::stringstream ss;
    write_jsonl(ss, records);
    CHECK(read_jsonl(ss, true) == records);
  }
  SUBCASE("unmasked verb is rejected in strict mode") {
    auto r = records[0];
    r.question_noun = "What is being " + r.verb + "-ed in this scene?";
    const auto line = record_to_json(r);
    CHECK_NOTHROW(record_from_json(line, 1, false));
    try {
      record_from_json(line, 7, true);
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("line 7") != std::string::npos);
      CHECK(std::string(e.what()).find("question_noun") != std::string::npos);
    }
  }
  SUBCASE("schema errors name the line and field") {
    std::stringstream ss;
    ss << record_to_json(records[0]) << "\n" << R"({"id":"x","narration":"n"})" << "\n";
    try {
      read_jsonl(ss);
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("line 2") != std::string::npos);
      CHECK(msg.find("'verb'") != std::string::npos);
    }
    CHECK_THROWS_AS(record_from_json("{not json", 1), ValidationError);
    auto bad = records[1];
    bad.answer_noun = "other";
    CHECK_THROWS_AS(record_from_json(record_to_json(bad), 1), ValidationError);
  }
  SUBCASE("narration table CSV") {
    std::stringstream ss("id,narration,verb,noun\r\n1,\"pick up the frying pan, carefully\",pick up,frying pan\n2,drink water,drink,water\n");
    const auto rows = read_narrations_csv(ss);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].narration == "pick up the frying pan, carefully");
    CHECK(rows[1].noun == "water");
    std::stringstream missing("id,narration,verb\n1,a,b\n");
    CHECK_THROWS_AS(read_narrations_csv(missing), ValidationError);
  }
}
