// Deterministic toy corpus of reading exercises. Passages are built from
// per-theme word banks so that questions are answerable from the text.

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>

#include "rceg/corpus.hpp"
#include "rceg/errors.hpp"
#include "rceg/random.hpp"

namespace rceg {
namespace {

struct Verb {
  const char* past;
  const char* base;
};

struct Theme {
  const char* name;
  std::vector<const char*> nouns;
  std::vector<const char*> places;
  std::vector<Verb> verbs;
  std::vector<const char*> adjectives;
};

const std::vector<Theme>& themes() {
  static const std::vector<Theme> kThemes = {
      {"nature",
       {"tree", "river", "flower", "bird", "rock", "leaf", "fox", "cloud"},
       {"forest", "valley", "meadow", "garden", "hill"},
       {{"saw", "see"}, {"found", "find"}, {"painted", "paint"}, {"watched", "watch"}, {"followed", "follow"}, {"drew", "draw"}},
       {"green", "tall", "quiet", "wild", "bright", "old"}},
      {"school",
       {"book", "pencil", "map", "desk", "lesson", "poem", "ruler", "letter"},
       {"classroom", "library", "hall", "office", "playground"},
       {{"read", "read"}, {"carried", "carry"}, {"opened", "open"}, {"wrote", "write"}, {"shared", "share"}, {"checked", "check"}},
       {"new", "small", "blue", "heavy", "neat", "long"}},
      {"space",
       {"rocket", "planet", "star", "moon", "comet", "telescope", "satellite", "robot"},
       {"station", "observatory", "crater", "lab", "hangar"},
       {{"studied", "study"}, {"launched", "launch"}, {"spotted", "spot"}, {"tracked", "track"}, {"built", "build"}, {"repaired", "repair"}},
       {"distant", "silver", "huge", "cold", "shiny", "strange"}},
      {"food",
       {"bread", "soup", "apple", "cake", "rice", "salad", "pie", "cheese"},
       {"kitchen", "market", "bakery", "cafe", "farm"},
       {{"cooked", "cook"}, {"bought", "buy"}, {"tasted", "taste"}, {"baked", "bake"}, {"served", "serve"}, {"sliced", "slice"}},
       {"warm", "sweet", "fresh", "spicy", "golden", "round"}},
      {"sports",
       {"ball", "bat", "medal", "racket", "helmet", "goal", "whistle", "trophy"},
       {"stadium", "court", "field", "gym", "track"},
       {{"kicked", "kick"}, {"threw", "throw"}, {"won", "win"}, {"caught", "catch"}, {"lifted", "lift"}, {"passed", "pass"}},
       {"fast", "strong", "red", "light", "proud", "lucky"}},
      {"travel",
       {"ticket", "suitcase", "train", "camera", "boat", "postcard", "bridge", "tower"},
       {"city", "harbor", "airport", "village", "museum"},
       {{"visited", "visit"}, {"photographed", "photograph"}, {"packed", "pack"}, {"crossed", "cross"}, {"explored", "explore"}, {"boarded", "board"}},
       {"busy", "famous", "narrow", "sunny", "crowded", "ancient"}},
      {"music",
       {"song", "piano", "drum", "violin", "guitar", "choir", "melody", "flute"},
       {"theater", "studio", "concert", "park", "church"},
       {{"played", "play"}, {"heard", "hear"}, {"sang", "sing"}, {"tuned", "tune"}, {"practiced", "practice"}, {"recorded", "record"}},
       {"loud", "soft", "lovely", "gentle", "joyful", "slow"}},
      {"science",
       {"magnet", "battery", "plant", "crystal", "microscope", "engine", "sample", "circuit"},
       {"laboratory", "workshop", "greenhouse", "basement", "clinic"},
       {{"tested", "test"}, {"measured", "measure"}, {"examined", "examine"}, {"mixed", "mix"}, {"cleaned", "clean"}, {"heated", "heat"}},
       {"tiny", "clear", "careful", "simple", "metal", "dark"}},
  };
  return kThemes;
}

const std::vector<const char*> kNames = {"Tom", "Anna", "Leo", "Mia", "Sam",
                                         "Lily", "Ben", "Zoe", "Max", "Ella"};
const std::vector<const char*> kStyles = {"narrative", "descriptive", "expository", "playful"};
const std::vector<const char*> kTimes = {"morning", "lunch", "school", "dinner"};
const std::array<int, 3> kWordCounts = {20, 30, 40};

struct Fact {
  std::string name;
  Verb verb;
  std::string adjective;
  std::string noun;
  std::string place;
};

ContentConstraints sample_constraints(Rng& rng, std::size_t num_themes) {
  ContentConstraints c;
  c.theme = themes()[rng.below(num_themes)].name;
  c.style = rng.pick(kStyles);
  c.word_count = kWordCounts[rng.below(kWordCounts.size())];
  c.num_questions = 1 + static_cast<int>(rng.below(2));
  c.num_options = 3 + static_cast<int>(rng.below(2));
  c.difficulty = static_cast<Difficulty>(rng.below(3));
  return c;
}

const Theme& find_theme(const std::string& name) {
  for (const auto& t : themes()) {
    if (name == t.name) return t;
  }
  return themes().front();
}

std::string sentence_for(const Fact& f, Difficulty difficulty, Rng& rng) {
  std::string s = f.name + " " + f.verb.past + " the " + f.adjective + " " + f.noun +
                  " in the " + f.place;
  if (difficulty != Difficulty::kBasic) {
    s += " after ";
    s += rng.pick(kTimes);
  }
  if (difficulty == Difficulty::kAdvanced) {
    s += " because it was ";
    s += rng.pick(find_theme("nature").adjectives);
  }
  return s + " .";
}

template <typename Pool, typename Make>
std::vector<std::string> make_options(const std::string& answer, const Pool& pool,
                                      Make&& make, int count, Rng& rng,
                                      std::size_t& answer_index) {
  std::vector<std::string> distractors;
  for (const auto& item : pool) {
    auto text = make(item);
    if (text != answer &&
        std::find(distractors.begin(), distractors.end(), text) == distractors.end()) {
      distractors.push_back(std::move(text));
    }
  }
  rng.shuffle(distractors);
  distractors.resize(std::min<std::size_t>(distractors.size(), count - 1));
  answer_index = rng.below(distractors.size() + 1);
  std::vector<std::string> options = distractors;
  options.insert(options.begin() + static_cast<std::ptrdiff_t>(answer_index), answer);
  return options;
}

ExerciseDocument make_exercise(const ContentConstraints& c, Rng& rng) {
  const Theme& theme = find_theme(c.theme);
  ExerciseDocument doc;
  std::string passage =
      "This is a " + c.style + " text about " + c.theme + " .";
  int words = 7;
  std::vector<Fact> facts;
  while (words < c.word_count) {
    Fact f{rng.pick(kNames), rng.pick(theme.verbs), rng.pick(theme.adjectives),
           rng.pick(theme.nouns), rng.pick(theme.places)};
    const auto s = sentence_for(f, c.difficulty, rng);
    words += static_cast<int>(std::count(s.begin(), s.end(), ' ')) + 1;
    passage += " " + s;
    facts.push_back(std::move(f));
  }
  doc.passage = passage;

  for (int qi = 0; qi < c.num_questions; ++qi) {
    const Fact& f = facts[rng.below(facts.size())];
    Question q;
    if (qi % 2 == 0) {
      q.stem = "What did " + f.name + " " + f.verb.base + " in the " + f.place + " ?";
      const auto answer = "the " + f.adjective + " " + f.noun;
      q.options = make_options(
          answer, theme.nouns,
          [&](const char* noun) { return "the " + f.adjective + " " + std::string(noun); },
          c.num_options, rng, q.answer_index);
    } else {
      q.stem = "Where did " + f.name + " " + f.verb.base + " the " + f.noun + " ?";
      const auto answer = "in the " + f.place;
      q.options = make_options(
          answer, theme.places,
          [](const char* place) { return "in the " + std::string(place); },
          c.num_options, rng, q.answer_index);
    }
    q.explanation = "The passage says " + f.name + " " + f.verb.past + " the " +
                    f.adjective + " " + f.noun + " in the " + f.place + " .";
    doc.questions.push_back(std::move(q));
  }
  return doc;
}

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

// Inserts `count` marker tokens at random word positions of `text`.
std::string inject_markers(const std::string& text, std::size_t count, Rng& rng) {
  auto words = split_words(text);
  for (std::size_t k = 0; k < count; ++k) {
    const auto pos = 1 + rng.below(words.size());
    words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos), rng.pick(toxic_markers()));
  }
  return join_words(words);
}

std::vector<std::string> split_sentences(const std::string& passage) {
  std::vector<std::string> out;
  std::string current;
  for (const auto& w : split_words(passage)) {
    current += current.empty() ? w : " " + w;
    if (w == ".") {
      out.push_back(current);
      current.clear();
    }
  }
  if (!current.empty()) out.push_back(current);
  return out;
}

// Lower-quality counterpart of a clean exercise: shuffled passage
// sentences, truncation to 60% of the tokens, then marker injection into
// the surviving passage text.
std::string corrupt(const ExerciseDocument& clean, double marker_rate, Rng& rng) {
  ExerciseDocument doc = clean;
  auto sentences = split_sentences(doc.passage);
  rng.shuffle(sentences);
  doc.passage = join_words(sentences);

  const auto text = serialize_exercise(doc);
  // Token-level truncation keeping line structure.
  std::vector<std::pair<std::string, bool>> tokens;  // word, starts a new line
  {
    std::istringstream lines(text);
    std::string line;
    bool first = true;
    while (std::getline(lines, line)) {
      bool line_start = !first;
      for (auto& w : split_words(line)) {
        tokens.emplace_back(std::move(w), line_start);
        line_start = false;
      }
      first = false;
    }
  }
  const auto keep = (tokens.size() * 6 + 9) / 10;
  tokens.resize(std::min(keep, tokens.size() - 1));

  if (marker_rate > 0.0) {
    std::size_t markers = 1;
    while (markers < 3 && rng.bernoulli(marker_rate)) ++markers;
    // Passage words start after "[PASSAGE]" and run until the first [Q.
    std::size_t passage_end = tokens.size();
    for (std::size_t i = 1; i < tokens.size(); ++i) {
      if (tokens[i].first.rfind("[Q", 0) == 0) {
        passage_end = i;
        break;
      }
    }
    for (std::size_t k = 0; k < markers; ++k) {
      const std::size_t span = passage_end > 2 ? passage_end - 2 : 1;
      const auto pos = std::min(tokens.size(), 2 + rng.below(span));
      tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(pos),
                    {rng.pick(toxic_markers()), false});
      ++passage_end;
    }
  }

  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += tokens[i].second ? "\n" : " ";
    out += tokens[i].first;
  }
  return out;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error(ErrorCode::kIo, "cannot write " + path.string());
  }
  for (const auto& l : lines) out << l << '\n';
  if (!out) {
    throw Error(ErrorCode::kIo, "write failed for " + path.string());
  }
}

}  // namespace

CorpusFiles corpus_paths(const std::filesystem::path& dir) {
  return {dir / "sft.jsonl", dir / "preference.jsonl", dir / "prompts.jsonl",
          dir / "classifier.jsonl"};
}

CorpusFiles synthesize_toy_corpus(const SynthConfig& config, std::uint64_t seed,
                                  const std::filesystem::path& dir) {
  if (config.toxic_marker_rate < 0.0 || config.toxic_marker_rate > 1.0) {
    throw Error(ErrorCode::kInvalidArgument, "toxic_marker_rate must be in [0,1]");
  }
  if (config.num_sft == 0 || config.num_pref == 0 || config.num_prompts == 0 ||
      config.num_classifier == 0) {
    throw Error(ErrorCode::kInvalidArgument, "corpus counts must be positive");
  }
  if (config.vocab_themes == 0 || config.vocab_themes > themes().size()) {
    throw Error(ErrorCode::kInvalidArgument,
                "vocab_themes must be in [1, " + std::to_string(themes().size()) + "]");
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw Error(ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
  }
  const auto paths = corpus_paths(dir);
  const std::string instruction(default_instruction());
  const double rate = config.toxic_marker_rate;

  {
    Rng rng(derive_seed(seed, 1));
    std::vector<std::string> lines;
    for (std::size_t i = 0; i < config.num_sft; ++i) {
      InstructionTriplet t;
      t.instruction = instruction;
      t.constraints = sample_constraints(rng, config.vocab_themes);
      auto doc = make_exercise(t.constraints, rng);
      if (rate > 0.0 && rng.bernoulli(rate)) {
        doc.passage = inject_markers(doc.passage, 1 + rng.below(2), rng);
      }
      t.reference = serialize_exercise(doc);
      lines.push_back(to_line(t));
    }
    write_lines(paths.sft, lines);
  }
  {
    Rng rng(derive_seed(seed, 2));
    std::vector<std::string> lines;
    for (std::size_t i = 0; i < config.num_pref; ++i) {
      const auto c = sample_constraints(rng, config.vocab_themes);
      const auto doc = make_exercise(c, rng);
      PreferencePair p;
      p.prompt = render_prompt(instruction, c);
      p.chosen = serialize_exercise(doc);
      p.rejected = corrupt(doc, rate, rng);
      lines.push_back(to_line(p));
    }
    write_lines(paths.preference, lines);
  }
  {
    Rng rng(derive_seed(seed, 3));
    std::vector<std::string> lines;
    for (std::size_t i = 0; i < config.num_prompts; ++i) {
      PromptRecord p{instruction, sample_constraints(rng, config.vocab_themes)};
      lines.push_back(to_line(p));
    }
    write_lines(paths.prompts, lines);
  }
  {
    Rng rng(derive_seed(seed, 4));
    std::vector<std::string> lines;
    for (std::size_t i = 0; i < config.num_classifier; ++i) {
      const auto c = sample_constraints(rng, config.vocab_themes);
      auto doc = make_exercise(c, rng);
      LabeledText t;
      t.toxic = (i % 2) == 1;
      if (t.toxic) {
        doc.passage = inject_markers(doc.passage, 1 + rng.below(3), rng);
      }
      t.text = serialize_exercise(doc);
      lines.push_back(to_line(t));
    }
    write_lines(paths.classifier, lines);
  }
  return paths;
}

}  // namespace rceg
