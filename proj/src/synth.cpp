// SPDX-License-Identifier: Apache-2.0
#include "ssmfuse/synth.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "ssmfuse/errors.hpp"
#include "ssmfuse/rng.hpp"

namespace ssmfuse::synth {

namespace {

constexpr char kMagic[4] = {'S', 'S', 'M', 'F'};
constexpr std::uint32_t kVersion = 1;

const char* const kVerbWords[] = {"cut",  "wash", "open", "stir", "pour", "peel",  "close", "mix",
                                  "take", "put",  "dry",  "fill", "turn", "shake", "scoop", "grate"};
const char* const kNounWords[] = {"knife", "pan",   "lid",    "cup",   "tomato", "onion", "spoon", "dish",
                                  "bowl",  "tap",   "fridge", "glass", "plate",  "bread", "egg",   "sponge"};

std::vector<std::string> words(const char* const* list, std::size_t available, std::size_t count, const char* stem) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(i < available ? list[i] : std::string(stem) + std::to_string(i));
  }
  return out;
}

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw ValidationError("dataset cache is truncated");
  return value;
}

void put_samples(std::ostream& out, const std::vector<SynthSample>& samples) {
  put<std::uint64_t>(out, samples.size());
  for (const auto& s : samples) {
    put(out, s.seed);
    put<std::int32_t>(out, s.verb);
    put<std::int32_t>(out, s.noun);
    put<std::int32_t>(out, s.latent_verb);
    for (int t : s.tokens) put<std::int32_t>(out, t);
    out.write(reinterpret_cast<const char*>(s.x_v.data()), static_cast<std::streamsize>(s.x_v.size() * sizeof(double)));
  }
}

std::vector<SynthSample> get_samples(std::istream& in, const SynthConfig& c) {
  const auto n = get<std::uint64_t>(in);
  std::vector<SynthSample> out(n);
  for (auto& s : out) {
    s.seed = get<std::uint64_t>(in);
    s.verb = get<std::int32_t>(in);
    s.noun = get<std::int32_t>(in);
    s.latent_verb = get<std::int32_t>(in);
    s.tokens.resize(c.text_len);
    for (auto& t : s.tokens) t = get<std::int32_t>(in);
    s.x_v.resize(c.frames * c.raw);
    if (!in.read(reinterpret_cast<char*>(s.x_v.data()), static_cast<std::streamsize>(s.x_v.size() * sizeof(double)))) {
      throw ValidationError("dataset cache is truncated");
    }
  }
  return out;
}

}  // namespace

std::string mode_name(Mode m) { return m == Mode::Factored ? "factored" : "composed"; }

Mode parse_mode(const std::string& name) {
  if (name == "factored") return Mode::Factored;
  if (name == "composed") return Mode::Composed;
  throw ConfigError("unknown mode '" + name + "' (expected factored or composed)");
}

void validate(const SynthConfig& c) {
  if (c.frames == 0 || c.text_len == 0 || c.raw == 0) throw ConfigError("frames, text_len and raw must be positive");
  if (c.verbs < 1 || c.nouns < 1) throw ConfigError("verbs and nouns must be positive");
  if (c.k_v < 1 || c.k_v > c.frames) throw ConfigError("k_v must lie in [1, frames]");
  if (!(c.noise >= 0.0)) throw ConfigError("noise must be non-negative");
}

World make_world(const SynthConfig& c) {
  validate(c);
  World w;
  w.verb_words = words(kVerbWords, std::size(kVerbWords), c.verbs, "verb");
  w.noun_words = words(kNounWords, std::size(kNounWords), c.nouns, "noun");
  std::vector<std::string> texts;
  for (std::size_t n = 0; n < c.nouns; ++n) {
    texts.push_back(qa::stub_generate(w.verb_words.front(), w.noun_words[n]).question_verb);
  }
  w.vocab = qa::Vocab::from_texts(texts);

  Rng rng(c.world_seed);
  w.codebook.resize(c.verbs * c.raw);
  for (auto& x : w.codebook) x = rng.normal();
  w.embedding.assign(w.vocab.size() * c.raw, 0.0);
  for (std::size_t i = c.raw; i < w.embedding.size(); ++i) w.embedding[i] = rng.normal();
  return w;
}

std::string text_for(const World& world, int latent_noun) {
  const auto& noun = world.noun_words.at(static_cast<std::size_t>(latent_noun));
  // the verb question names the noun; the verb itself is masked out
  const auto& verb = world.verb_words.front();
  return qa::mask_question(qa::stub_generate(verb, noun).question_verb, verb);
}

SynthSample gen_sample(std::uint64_t seed, const SynthConfig& c, const World& world) {
  validate(c);
  Rng rng(seed);
  SynthSample s;
  s.seed = seed;
  const int v = static_cast<int>(rng.below(c.verbs));
  const int n = static_cast<int>(rng.below(c.nouns));
  s.latent_verb = v;
  s.noun = n;
  s.verb = c.mode == Mode::Factored ? v : static_cast<int>((static_cast<std::size_t>(v + n)) % c.verbs);

  s.x_v.resize(c.frames * c.raw);
  for (auto& x : s.x_v) x = c.noise * rng.normal();
  std::vector<std::size_t> positions(c.frames);
  std::iota(positions.begin(), positions.end(), 0);
  rng.shuffle(positions.begin(), positions.end());
  const double* proto = world.codebook.data() + static_cast<std::size_t>(v) * c.raw;
  for (std::size_t k = 0; k < c.k_v; ++k) std::copy_n(proto, c.raw, s.x_v.begin() + positions[k] * c.raw);

  s.tokens = qa::tokenize(text_for(world, n), world.vocab, c.text_len);
  return s;
}

Dataset gen_split(std::uint64_t seed, std::size_t n, const SynthConfig& c) {
  if (n < 2) throw ConfigError("gen_split needs at least 2 samples, got " + std::to_string(n));
  const auto world = make_world(c);
  Dataset d;
  d.config = c;
  const std::size_t val = std::max<std::size_t>(1, n / 10);
  // splitmix64 is a bijection, so distinct indices give distinct seeds
  const std::uint64_t base = splitmix64(seed);
  for (std::size_t i = 0; i < n; ++i) {
    auto sample = gen_sample(splitmix64(base + i), c, world);
    (i < n - val ? d.train : d.val).push_back(std::move(sample));
  }
  return d;
}

Batch make_batch(std::span<const SynthSample> samples, std::span<const std::size_t> index, const SynthConfig& c,
                 const World& world) {
  const std::size_t b = index.size();
  std::vector<double> v(b * c.frames * c.raw), t(b * c.text_len * c.raw);
  Batch out;
  for (std::size_t i = 0; i < b; ++i) {
    const auto& s = samples[index[i]];
    std::copy(s.x_v.begin(), s.x_v.end(), v.begin() + i * c.frames * c.raw);
    for (std::size_t p = 0; p < c.text_len; ++p) {
      const auto id = static_cast<std::size_t>(s.tokens[p]);
      std::copy_n(world.embedding.begin() + id * c.raw, c.raw, t.begin() + (i * c.text_len + p) * c.raw);
    }
    out.verbs.push_back(s.verb);
    out.nouns.push_back(s.noun);
    out.seeds.push_back(s.seed);
  }
  out.raw_v = Tensor({b, c.frames, c.raw}, std::move(v));
  out.raw_t = Tensor({b, c.text_len, c.raw}, std::move(t));
  return out;
}

std::string config_json(const SynthConfig& c) {
  const nlohmann::json j = {
      {"frames", c.frames}, {"text_len", c.text_len}, {"raw", c.raw},   {"verbs", c.verbs},
      {"nouns", c.nouns},   {"k_v", c.k_v},           {"noise", c.noise}, {"mode", mode_name(c.mode)},
      {"world_seed", c.world_seed},
  };
  return j.dump();
}

SynthConfig config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  SynthConfig c;
  c.frames = j.at("frames").get<std::size_t>();
  c.text_len = j.at("text_len").get<std::size_t>();
  c.raw = j.at("raw").get<std::size_t>();
  c.verbs = j.at("verbs").get<std::size_t>();
  c.nouns = j.at("nouns").get<std::size_t>();
  c.k_v = j.at("k_v").get<std::size_t>();
  c.noise = j.at("noise").get<double>();
  c.mode = parse_mode(j.at("mode").get<std::string>());
  c.world_seed = j.at("world_seed").get<std::uint64_t>();
  return c;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t config_hash(const SynthConfig& c) { return fnv1a64(config_json(c)); }

void save_dataset(std::ostream& out, const Dataset& d) {
  out.write(kMagic, 4);
  put(out, kVersion);
  put(out, config_hash(d.config));
  const auto js = config_json(d.config);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(js.size()));
  out.write(js.data(), static_cast<std::streamsize>(js.size()));
  put_samples(out, d.train);
  put_samples(out, d.val);
  if (!out) throw std::runtime_error("failed to write dataset cache");
}

Dataset load_dataset(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw ValidationError("not a dataset cache (bad magic)");
  const auto version = get<std::uint32_t>(in);
  if (version != kVersion) throw ValidationError("unsupported dataset cache version " + std::to_string(version));
  const auto hash = get<std::uint64_t>(in);
  const auto len = get<std::uint32_t>(in);
  std::string js(len, '\0');
  if (!in.read(js.data(), len)) throw ValidationError("dataset cache is truncated");
  Dataset d;
  d.config = config_from_json(js);
  if (config_hash(d.config) != hash) throw ValidationError("dataset cache config hash mismatch");
  d.train = get_samples(in, d.config);
  d.val = get_samples(in, d.config);
  return d;
}

}  // namespace ssmfuse::synth
