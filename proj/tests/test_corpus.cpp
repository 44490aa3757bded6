#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "rceg/corpus.hpp"
#include "rceg/errors.hpp"

using namespace rceg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("rceg_corpus_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

ExerciseDocument sample_doc() {
  ExerciseDocument d;
  d.passage = "Anna found the quiet river in the valley .";
  d.questions.push_back({"What did Anna find ?", {"the river", "the fox", "the rock"}, 0,
                         "The passage says Anna found the quiet river ."});
  d.questions.push_back({"Where was the river ?", {"in the hill", "in the valley"}, 1,
                         "It was in the valley ."});
  return d;
}

SynthConfig small_synth() {
  SynthConfig c;
  c.num_sft = 30;
  c.num_pref = 10;
  c.num_prompts = 8;
  c.num_classifier = 20;
  return c;
}

}  // namespace

TEST(Synth, SameSeedSameBytes) {
  const auto a = synthesize_toy_corpus(small_synth(), 5, scratch("a"));
  const auto b = synthesize_toy_corpus(small_synth(), 5, scratch("b"));
  const auto c = synthesize_toy_corpus(small_synth(), 6, scratch("c"));
  EXPECT_EQ(slurp(a.sft), slurp(b.sft));
  EXPECT_EQ(slurp(a.preference), slurp(b.preference));
  EXPECT_EQ(slurp(a.prompts), slurp(b.prompts));
  EXPECT_EQ(slurp(a.classifier), slurp(b.classifier));
  EXPECT_NE(slurp(a.sft), slurp(c.sft));
}

TEST(Synth, RecordCountsAndValidity) {
  const auto files = synthesize_toy_corpus(small_synth(), 3, scratch("counts"));
  const auto sft = load_sft_dataset(files.sft);
  const auto pref = load_preference_dataset(files.preference);
  const auto prompts = load_prompt_dataset(files.prompts);
  const auto cls = load_classifier_dataset(files.classifier);
  EXPECT_EQ(sft.size(), 30u);
  EXPECT_EQ(pref.size(), 10u);
  EXPECT_EQ(prompts.size(), 8u);
  EXPECT_EQ(cls.size(), 20u);
  for (const auto& t : sft) {
    const auto doc = parse_exercise(t.reference);
    EXPECT_EQ(doc.questions.size(), static_cast<std::size_t>(t.constraints.num_questions));
    for (const auto& q : doc.questions) {
      EXPECT_EQ(q.options.size(), static_cast<std::size_t>(t.constraints.num_options));
    }
  }
  for (const auto& p : pref) {
    EXPECT_NE(p.chosen, p.rejected);
    EXPECT_FALSE(contains_marker(p.chosen));
  }
  std::size_t toxic = 0;
  for (const auto& l : cls) {
    toxic += l.toxic;
    EXPECT_EQ(l.toxic, contains_marker(l.text));
  }
  EXPECT_GT(toxic, 0u);
  EXPECT_LT(toxic, cls.size());
}

TEST(Exercise, SerializeParseRoundTrip) {
  const auto doc = sample_doc();
  const auto text = serialize_exercise(doc);
  EXPECT_EQ(text.rfind("[PASSAGE]\n", 0), 0u);
  EXPECT_NE(text.find("[Q2] Where was"), std::string::npos);
  EXPECT_NE(text.find("B. in the valley"), std::string::npos);
  EXPECT_EQ(parse_exercise(text), doc);
  EXPECT_THROW(parse_exercise("no markers here"), Error);
}

TEST(Exercise, ValidateChecksAnswerRange) {
  auto doc = sample_doc();
  doc.questions[0].answer_index = 3;
  EXPECT_THROW(doc.validate(), Error);
  doc = sample_doc();
  doc.questions[1].options.resize(1);
  EXPECT_THROW(doc.validate(), Error);
}

TEST(Constraints, ValidationNamesField) {
  ContentConstraints c{"travel", "story", 30, 2, 4, Difficulty::kBasic};
  EXPECT_NO_THROW(c.validate());
  c.num_options = 1;
  try {
    c.validate();
    FAIL() << "expected a validation error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kValidation);
    EXPECT_NE(std::string(e.what()).find("num_options"), std::string::npos);
  }
  c.num_options = 4;
  c.theme.clear();
  EXPECT_THROW(c.validate(), Error);
  EXPECT_EQ(parse_difficulty("advanced"), Difficulty::kAdvanced);
  EXPECT_EQ(to_string(Difficulty::kIntermediate), "intermediate");
  EXPECT_THROW(parse_difficulty("hard"), Error);
}

TEST(Loader, LineRoundTrip) {
  const auto dir = scratch("lines");
  const InstructionTriplet t{std::string(default_instruction()),
                             {"food", "news", 25, 1, 3, Difficulty::kAdvanced},
                             serialize_exercise(sample_doc())};
  const PreferencePair p{"prompt text", "good answer", "bad answer"};
  const LabeledText l{"some words", true};
  write(dir / "sft.jsonl", to_line(t) + "\n" + to_line(t) + "\n");
  write(dir / "pref.jsonl", to_line(p) + "\n");
  write(dir / "cls.jsonl", to_line(l) + "\n");
  EXPECT_EQ(load_sft_dataset(dir / "sft.jsonl"), (std::vector{t, t}));
  EXPECT_EQ(load_preference_dataset(dir / "pref.jsonl"), std::vector{p});
  EXPECT_EQ(load_classifier_dataset(dir / "cls.jsonl"), std::vector{l});
  const auto any = load_dataset(DatasetKind::kClassifier, dir / "cls.jsonl");
  EXPECT_EQ(std::get<std::vector<LabeledText>>(any), std::vector{l});
}

TEST(Loader, ErrorsCarryLineAndField) {
  const auto dir = scratch("errors");
  const PromptRecord good{"write", {"food", "news", 25, 1, 3, Difficulty::kBasic}};
  write(dir / "missing.jsonl", to_line(good) + "\n{\"instruction\":\"x\"}\n");
  try {
    load_prompt_dataset(dir / "missing.jsonl");
    FAIL() << "expected a record error";
  } catch (const RecordError& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingField);
    EXPECT_EQ(e.line(), 2u);
    EXPECT_EQ(e.field(), "constraints");
  }

  write(dir / "broken.jsonl", "{not json\n");
  try {
    load_prompt_dataset(dir / "broken.jsonl");
    FAIL() << "expected a parse error";
  } catch (const RecordError& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParse);
    EXPECT_EQ(e.line(), 1u);
  }

  auto bad = nlohmann::json::parse(to_line(good));
  bad["constraints"]["num_options"] = 1;
  write(dir / "invalid.jsonl", bad.dump() + "\n");
  try {
    load_prompt_dataset(dir / "invalid.jsonl");
    FAIL() << "expected a validation error";
  } catch (const RecordError& e) {
    EXPECT_EQ(e.code(), ErrorCode::kValidation);
  }

  write(dir / "label.jsonl", "{\"text\":\"a\",\"label\":\"meh\"}\n");
  EXPECT_THROW(load_classifier_dataset(dir / "label.jsonl"), RecordError);
  EXPECT_THROW(load_sft_dataset(dir / "absent.jsonl"), Error);
}

TEST(Markers, CountAndDetect) {
  const auto& m = toxic_markers();
  ASSERT_FALSE(m.empty());
  const std::string text = "a " + m[0] + " b " + m[0] + " c";
  EXPECT_TRUE(contains_marker(text));
  EXPECT_EQ(count_markers(text), 2u);
  EXPECT_FALSE(contains_marker("a perfectly clean sentence"));
}
