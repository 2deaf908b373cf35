// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "ssmfuse/errors.hpp"
#include "ssmfuse/rng.hpp"
#include "ssmfuse/synth.hpp"

using namespace ssmfuse;
using namespace ssmfuse::synth;

namespace {

// Upper 1% points of the chi-square distribution.
double chi2_critical_001(std::size_t df) {
  if (df == 7) return 18.475;
  if (df == 11) return 24.725;
  FAIL("no tabulated critical value for df " << df);
  return 0.0;
}

double contingency_chi2(const std::vector<double>& a, const std::vector<double>& b) {
  double na = 0, nb = 0;
  for (double x : a) na += x;
  for (double x : b) nb += x;
  double chi2 = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double col = a[k] + b[k];
    if (col == 0) continue;
    const double ea = col * na / (na + nb), eb = col * nb / (na + nb);
    chi2 += (a[k] - ea) * (a[k] - ea) / ea + (b[k] - eb) * (b[k] - eb) / eb;
  }
  return chi2;
}

// Best achievable accuracy of any predictor that sees only `key`: fit the
// majority label per key on one half, score on the other.
template <typename Key>
double lookup_accuracy(const std::vector<Key>& keys, const std::vector<int>& labels) {
  const std::size_t half = keys.size() / 2;
  std::map<Key, std::map<int, int>> table;
  for (std::size_t i = 0; i < half; ++i) ++table[keys[i]][labels[i]];
  std::size_t hit = 0;
  for (std::size_t i = half; i < keys.size(); ++i) {
    int guess = 0, best = -1;
    const auto it = table.find(keys[i]);
    if (it != table.end()) {
      for (const auto& [label, count] : it->second) {
        if (count > best) best = count, guess = label;
      }
    }
    hit += guess == labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(keys.size() - half);
}

// Nearest codebook prototype among the frames: the best any video-only
// model can recover.
int decode_video(const SynthSample& s, const SynthConfig& c, const World& w) {
  int best_v = 0;
  double best = -1.0;
  for (std::size_t v = 0; v < c.verbs; ++v) {
    for (std::size_t f = 0; f < c.frames; ++f) {
      double dot = 0.0, nn = 0.0;
      for (std::size_t r = 0; r < c.raw; ++r) {
        const double x = s.x_v[f * c.raw + r];
        dot += x * w.codebook[v * c.raw + r];
        nn += x * x;
      }
      const double cos = dot / std::sqrt(nn + 1e-300);
      if (cos > best) best = cos, best_v = static_cast<int>(v);
    }
  }
  return best_v;
}

}  // namespace

TEST_CASE("gen_sample examples") {
  SynthConfig c;
  const auto world = make_world(c);
  SUBCASE("determinism") {
    CHECK(gen_sample(42, c, world) == gen_sample(42, c, world));
    CHECK(!(gen_sample(42, c, world) == gen_sample(43, c, world)));
  }
  SUBCASE("no noise and k_v = F gives F copies of the prototype") {
    auto d = c;
    d.noise = 0.0;
    d.k_v = d.frames;
    const auto s = gen_sample(7, d, world);
    for (std::size_t f = 0; f < d.frames; ++f) {
      for (std::size_t r = 0; r < d.raw; ++r) {
        CHECK(s.x_v[f * d.raw + r] == world.codebook[static_cast<std::size_t>(s.latent_verb) * d.raw + r]);
      }
    }
  }
  SUBCASE("label marginals are uniform within three binomial sigmas") {
    std::vector<double> verbs(c.verbs), nouns(c.nouns);
    const std::size_t n = 10000;
    for (std::size_t i = 0; i < n; ++i) {
      const auto s = gen_sample(splitmix64(i), c, world);
      ++verbs[static_cast<std::size_t>(s.verb)];
      ++nouns[static_cast<std::size_t>(s.noun)];
    }
    for (auto [counts, k] : {std::pair{&verbs, c.verbs}, std::pair{&nouns, c.nouns}}) {
      const double p = 1.0 / static_cast<double>(k);
      const double sigma = std::sqrt(static_cast<double>(n) * p * (1 - p));
      for (double x : *counts) CHECK(std::abs(x - static_cast<double>(n) * p) <= 3 * sigma);
    }
  }
  SUBCASE("the text carries the noun word and never the verb") {
    for (int n = 0; n < static_cast<int>(c.nouns); ++n) {
      const auto text = text_for(world, n);
      CHECK(qa::contains_term(text, world.noun_words[static_cast<std::size_t>(n)]));
      for (const auto& v : world.verb_words) CHECK(!qa::contains_term(text, v));
    }
  }
  SUBCASE("invalid settings are configuration errors") {
    CHECK_THROWS_AS(parse_mode("both"), ConfigError);
    auto bad = c;
    bad.k_v = c.frames + 1;
    CHECK_THROWS_AS(make_world(bad), ConfigError);
  }
}

TEST_CASE("gen_split examples") {
  SynthConfig c;
  SUBCASE("90/10 partition with disjoint seeds") {
    const auto d = gen_split(1, 100, c);
    CHECK(d.train.size() == 90);
    CHECK(d.val.size() == 10);
    std::set<std::uint64_t> seeds;
    for (const auto& s : d.train) seeds.insert(s.seed);
    for (const auto& s : d.val) CHECK(seeds.insert(s.seed).second);
    CHECK_THROWS_AS(gen_split(1, 1, c), ConfigError);
  }
  SUBCASE("val labels follow the train distribution") {
    for (std::uint64_t regen = 0; regen < 5; ++regen) {
      const auto d = gen_split(100 + regen, 4000, c);
      std::vector<double> tv(c.verbs), vv(c.verbs), tn(c.nouns), vn(c.nouns);
      for (const auto& s : d.train) ++tv[static_cast<std::size_t>(s.verb)], ++tn[static_cast<std::size_t>(s.noun)];
      for (const auto& s : d.val) ++vv[static_cast<std::size_t>(s.verb)], ++vn[static_cast<std::size_t>(s.noun)];
      CHECK(contingency_chi2(tv, vv) <= chi2_critical_001(c.verbs - 1));
      CHECK(contingency_chi2(tn, vn) <= chi2_critical_001(c.nouns - 1));
    }
  }
}

TEST_CASE("information placement") {
  for (auto mode : {Mode::Factored, Mode::Composed}) {
    SynthConfig c;
    c.mode = mode;
    const auto world = make_world(c);
    std::vector<std::vector<int>> tokens;
    std::vector<int> video, verbs, nouns;
    for (std::uint64_t i = 0; i < 20000; ++i) {
      const auto s = gen_sample(splitmix64(i + 77), c, world);
      tokens.push_back(s.tokens);
      video.push_back(decode_video(s, c, world));
      verbs.push_back(s.verb);
      nouns.push_back(s.noun);
    }
    const double chance_v = 1.0 / static_cast<double>(c.verbs), chance_n = 1.0 / static_cast<double>(c.nouns);
    CAPTURE(mode_name(mode));
    CHECK(lookup_accuracy(tokens, verbs) <= chance_v + 0.05);
    if (mode == Mode::Factored) {
      CHECK(lookup_accuracy(video, nouns) <= chance_n + 0.05);
      CHECK(lookup_accuracy(video, verbs) >= 0.99);
      CHECK(lookup_accuracy(tokens, nouns) == 1.0);
    } else {
      // knowing v exactly, the best guess is the most frequent residue of n
      // mod Vv, which has probability ceil(Vn / Vv) / Vn
      const double bayes_v = std::ceil(static_cast<double>(c.nouns) / static_cast<double>(c.verbs)) * chance_n;
      CHECK(bayes_v <= chance_v + 0.05);
      const double sigma = std::sqrt(bayes_v * (1 - bayes_v) / static_cast<double>(video.size() / 2));
      CHECK(lookup_accuracy(video, verbs) <= bayes_v + 4 * sigma);
      std::vector<std::pair<int, std::vector<int>>> joint;
      for (std::size_t i = 0; i < video.size(); ++i) joint.emplace_back(video[i], tokens[i]);
      CHECK(lookup_accuracy(joint, verbs) >= 0.95);
    }
  }
}

TEST_CASE("batches embed tokens through the frozen table") {
  SynthConfig c;
  const auto world = make_world(c);
  const auto d = gen_split(3, 20, c);
  const std::vector<std::size_t> idx{4, 0};
  const auto b = make_batch(d.train, idx, c, world);
  CHECK(b.raw_v.shape() == Shape{2, c.frames, c.raw});
  CHECK(b.raw_t.shape() == Shape{2, c.text_len, c.raw});
  CHECK(b.verbs[0] == d.train[4].verb);
  const auto id = static_cast<std::size_t>(d.train[4].tokens[1]);
  CHECK(b.raw_t.data()[c.raw] == world.embedding[id * c.raw]);
  const auto pad_row = std::find(d.train[4].tokens.begin(), d.train[4].tokens.end(), qa::kPad) - d.train[4].tokens.begin();
  CHECK(b.raw_t.data()[static_cast<std::size_t>(pad_row) * c.raw] == 0.0);
}

TEST_CASE("dataset cache") {
  SynthConfig c;
  c.frames = 6;
  c.text_len = 10;
  c.mode = Mode::Composed;
  const auto d = gen_split(9, 30, c);
  std::stringstream ss;
  save_dataset(ss, d);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "SSMF");
  const auto back = load_dataset(ss);
  CHECK(back.config == d.config);
  CHECK(back.train == d.train);
  CHECK(back.val == d.val);

  std::string corrupt = bytes;
  corrupt[0] = 'X';
  std::stringstream bad(corrupt);
  CHECK_THROWS_AS(load_dataset(bad), ValidationError);
  std::stringstream cut(bytes.substr(0, bytes.size() - 5));
  CHECK_THROWS_AS(load_dataset(cut), ValidationError);
  CHECK(config_hash(c) == fnv1a64(config_json(c)));
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}
