#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"

namespace rceg {

enum class Difficulty { kBasic, kIntermediate, kAdvanced };

std::string_view to_string(Difficulty d);
Difficulty parse_difficulty(std::string_view text);

/// Content constraints for one exercise request.
struct ContentConstraints {
  std::string theme;
  std::string style;
  int word_count = 30;
  int num_questions = 2;
  int num_options = 4;
  Difficulty difficulty = Difficulty::kBasic;

  /// Throws Error(kValidation) naming the first offending field.
  void validate() const;

  bool operator==(const ContentConstraints&) const = default;
};

struct InstructionTriplet {
  std::string instruction;
  ContentConstraints constraints;
  std::string reference;  // serialized ExerciseDocument

  bool operator==(const InstructionTriplet&) const = default;
};

struct PreferencePair {
  std::string prompt;
  std::string chosen;
  std::string rejected;

  bool operator==(const PreferencePair&) const = default;
};

/// A generation prompt without a reference (PPO rollout and eval inputs).
struct PromptRecord {
  std::string instruction;
  ContentConstraints constraints;

  bool operator==(const PromptRecord&) const = default;
};

/// One labelled text for the attribute classifier.
struct LabeledText {
  std::string text;
  bool toxic = false;

  bool operator==(const LabeledText&) const = default;
};

struct Question {
  std::string stem;
  std::vector<std::string> options;
  std::size_t answer_index = 0;
  std::string explanation;

  bool operator==(const Question&) const = default;
};

struct ExerciseDocument {
  std::string passage;
  std::vector<Question> questions;

  void validate() const;
  bool operator==(const ExerciseDocument&) const = default;
};

// JSON mappings; field names match the dataset line format.
void to_json(nlohmann::json& j, const ContentConstraints& c);
void from_json(const nlohmann::json& j, ContentConstraints& c);
void to_json(nlohmann::json& j, const ExerciseDocument& doc);

std::string render_prompt(std::string_view instruction,
                          const ContentConstraints& constraints);

/// Canonical text form using the `[PASSAGE]`, `[Qn]`, `A.`, `[ANSWER]`,
/// `[EXPLAIN]` markers.
std::string serialize_exercise(const ExerciseDocument& doc);
ExerciseDocument parse_exercise(std::string_view text);

char answer_letter(std::size_t index);

enum class DatasetKind { kSft, kPreference, kPrompts, kClassifier };

using Dataset = std::variant<std::vector<InstructionTriplet>,
                             std::vector<PreferencePair>,
                             std::vector<PromptRecord>,
                             std::vector<LabeledText>>;

std::vector<InstructionTriplet> load_sft_dataset(const std::filesystem::path& path);
std::vector<PreferencePair> load_preference_dataset(const std::filesystem::path& path);
std::vector<PromptRecord> load_prompt_dataset(const std::filesystem::path& path);
std::vector<LabeledText> load_classifier_dataset(const std::filesystem::path& path);
Dataset load_dataset(DatasetKind kind, const std::filesystem::path& path);

std::string to_line(const InstructionTriplet& t);
std::string to_line(const PreferencePair& p);
std::string to_line(const PromptRecord& p);
std::string to_line(const LabeledText& t);

/// Tokens injected into the synthetic corpus to make toxicity measurable.
const std::vector<std::string>& toxic_markers();
bool contains_marker(std::string_view text);
std::size_t count_markers(std::string_view text);

struct SynthConfig {
  std::size_t num_sft = 2000;
  std::size_t num_pref = 200;
  std::size_t num_prompts = 200;
  std::size_t num_classifier = 2000;
  std::size_t vocab_themes = 8;
  double toxic_marker_rate = 0.3;
};

struct CorpusFiles {
  std::filesystem::path sft;
  std::filesystem::path preference;
  std::filesystem::path prompts;
  std::filesystem::path classifier;
};

CorpusFiles corpus_paths(const std::filesystem::path& dir);

/// Writes sft.jsonl, preference.jsonl, prompts.jsonl and classifier.jsonl
/// into `dir`. Output bytes depend only on (config, seed).
CorpusFiles synthesize_toy_corpus(const SynthConfig& config, std::uint64_t seed,
                                  const std::filesystem::path& dir);

/// The fixed instruction text used by the synthetic corpus and the service.
std::string_view default_instruction();

}  // namespace rceg
