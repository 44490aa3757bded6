#include "rceg/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "rceg/errors.hpp"

namespace rceg {

using nlohmann::json;

std::string_view to_string(Difficulty d) {
  switch (d) {
    case Difficulty::kBasic: return "basic";
    case Difficulty::kIntermediate: return "intermediate";
    case Difficulty::kAdvanced: return "advanced";
  }
  return "basic";
}

Difficulty parse_difficulty(std::string_view text) {
  if (text == "basic") return Difficulty::kBasic;
  if (text == "intermediate") return Difficulty::kIntermediate;
  if (text == "advanced") return Difficulty::kAdvanced;
  throw Error(ErrorCode::kValidation,
              "difficulty must be one of basic|intermediate|advanced, got '" +
                  std::string(text) + "'");
}

void ContentConstraints::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw Error(ErrorCode::kValidation, "constraints." + field + " " + why);
  };
  if (theme.empty()) fail("theme", "must not be empty");
  if (style.empty()) fail("style", "must not be empty");
  if (word_count <= 0) fail("word_count", "must be positive");
  if (num_questions <= 0) fail("num_questions", "must be positive");
  if (num_options < 2) fail("num_options", "must be at least 2");
  if (num_options > 26) fail("num_options", "must be at most 26");
}

void ExerciseDocument::validate() const {
  if (passage.empty()) {
    throw Error(ErrorCode::kValidation, "exercise passage is empty");
  }
  if (questions.empty()) {
    throw Error(ErrorCode::kValidation, "exercise has no questions");
  }
  for (std::size_t i = 0; i < questions.size(); ++i) {
    const auto& q = questions[i];
    if (q.options.size() < 2) {
      throw Error(ErrorCode::kValidation,
                  "question " + std::to_string(i + 1) + " has fewer than 2 options");
    }
    if (q.answer_index >= q.options.size()) {
      throw Error(ErrorCode::kValidation,
                  "question " + std::to_string(i + 1) + " answer index out of range");
    }
  }
}

void to_json(json& j, const ContentConstraints& c) {
  j = json{{"theme", c.theme},
           {"style", c.style},
           {"word_count", c.word_count},
           {"num_questions", c.num_questions},
           {"num_options", c.num_options},
           {"difficulty", std::string(to_string(c.difficulty))}};
}

void from_json(const json& j, ContentConstraints& c) {
  c.theme = j.at("theme").get<std::string>();
  c.style = j.at("style").get<std::string>();
  c.word_count = j.at("word_count").get<int>();
  c.num_questions = j.at("num_questions").get<int>();
  c.num_options = j.at("num_options").get<int>();
  c.difficulty = parse_difficulty(j.at("difficulty").get<std::string>());
}

void to_json(json& j, const ExerciseDocument& doc) {
  j = json::object();
  j["passage"] = doc.passage;
  j["questions"] = json::array();
  for (const auto& q : doc.questions) {
    j["questions"].push_back({{"stem", q.stem},
                              {"options", q.options},
                              {"answer_index", q.answer_index},
                              {"explanation", q.explanation}});
  }
}

std::string_view default_instruction() {
  return "Write a reading exercise with a passage , questions , options , "
         "answers and explanations .";
}

std::string render_prompt(std::string_view instruction,
                          const ContentConstraints& constraints) {
  constraints.validate();
  std::string out(instruction);
  out += "\ntheme: " + constraints.theme;
  out += "\nstyle: " + constraints.style;
  out += "\nword_count: " + std::to_string(constraints.word_count);
  out += "\nnum_questions: " + std::to_string(constraints.num_questions);
  out += "\nnum_options: " + std::to_string(constraints.num_options);
  out += "\ndifficulty: " + std::string(to_string(constraints.difficulty));
  return out;
}

char answer_letter(std::size_t index) {
  if (index >= 26) {
    throw Error(ErrorCode::kInvalidArgument, "answer index beyond Z");
  }
  return static_cast<char>('A' + index);
}

std::string serialize_exercise(const ExerciseDocument& doc) {
  std::string out = "[PASSAGE]\n" + doc.passage;
  for (std::size_t i = 0; i < doc.questions.size(); ++i) {
    const auto& q = doc.questions[i];
    out += "\n[Q" + std::to_string(i + 1) + "] " + q.stem;
    for (std::size_t k = 0; k < q.options.size(); ++k) {
      out += "\n";
      out += answer_letter(k);
      out += ". " + q.options[k];
    }
    out += "\n[ANSWER] ";
    out += answer_letter(q.answer_index);
    out += q.explanation.empty() ? "\n[EXPLAIN]" : "\n[EXPLAIN] " + q.explanation;
  }
  return out;
}

namespace {

std::string_view trim(std::string_view s) {
  const auto ws = " \t\r";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

bool is_question_marker(std::string_view line, std::string_view& rest) {
  if (line.size() < 4 || line.substr(0, 2) != "[Q") return false;
  std::size_t i = 2;
  while (i < line.size() && std::isdigit(static_cast<unsigned char>(line[i]))) ++i;
  if (i == 2 || i >= line.size() || line[i] != ']') return false;
  rest = trim(line.substr(i + 1));
  return true;
}

bool is_option_line(std::string_view line, std::size_t& letter, std::string_view& rest) {
  if (line.size() < 2 || line[0] < 'A' || line[0] > 'Z' || line[1] != '.') return false;
  if (line.size() > 2 && line[2] != ' ' && line[2] != '\t') return false;
  letter = static_cast<std::size_t>(line[0] - 'A');
  rest = trim(line.substr(2));
  return true;
}

bool strip_prefix(std::string_view line, std::string_view prefix, std::string_view& rest) {
  if (line.substr(0, prefix.size()) != prefix) return false;
  rest = trim(line.substr(prefix.size()));
  return true;
}

}  // namespace

ExerciseDocument parse_exercise(std::string_view text) {
  std::vector<std::string_view> lines;
  {
    std::size_t start = 0;
    while (start <= text.size()) {
      auto end = text.find('\n', start);
      if (end == std::string_view::npos) end = text.size();
      auto line = trim(text.substr(start, end - start));
      if (!line.empty()) lines.push_back(line);
      start = end + 1;
    }
  }

  std::size_t i = 0;
  std::string_view rest;
  if (i >= lines.size() || !strip_prefix(lines[i], "[PASSAGE]", rest)) {
    throw Error(ErrorCode::kParse, "missing [PASSAGE] section");
  }
  ExerciseDocument doc;
  std::vector<std::string_view> passage_lines;
  if (!rest.empty()) passage_lines.push_back(rest);
  ++i;
  std::string_view q_rest;
  while (i < lines.size() && !is_question_marker(lines[i], q_rest)) {
    passage_lines.push_back(lines[i]);
    ++i;
  }
  for (std::size_t k = 0; k < passage_lines.size(); ++k) {
    if (k) doc.passage += '\n';
    doc.passage += passage_lines[k];
  }
  if (doc.passage.empty()) {
    throw Error(ErrorCode::kParse, "missing passage text");
  }

  while (i < lines.size()) {
    if (!is_question_marker(lines[i], q_rest)) {
      throw Error(ErrorCode::kParse, "expected [Qn] marker, got '" + std::string(lines[i]) + "'");
    }
    Question q;
    q.stem = std::string(q_rest);
    ++i;
    std::size_t letter = 0;
    std::string_view opt;
    while (i < lines.size() && is_option_line(lines[i], letter, opt)) {
      if (letter != q.options.size()) {
        throw Error(ErrorCode::kParse, "option labels out of order in question " +
                                           std::to_string(doc.questions.size() + 1));
      }
      q.options.emplace_back(opt);
      ++i;
    }
    const auto qnum = std::to_string(doc.questions.size() + 1);
    if (q.options.size() < 2) {
      throw Error(ErrorCode::kParse, "question " + qnum + " has fewer than 2 options");
    }
    std::string_view ans;
    if (i >= lines.size() || !strip_prefix(lines[i], "[ANSWER]", ans)) {
      throw Error(ErrorCode::kParse, "question " + qnum + " is missing [ANSWER]");
    }
    if (ans.size() != 1 || ans[0] < 'A' || ans[0] > 'Z') {
      throw Error(ErrorCode::kParse, "question " + qnum + " answer must be a single letter");
    }
    q.answer_index = static_cast<std::size_t>(ans[0] - 'A');
    if (q.answer_index >= q.options.size()) {
      throw Error(ErrorCode::kParse, "question " + qnum + " answer '" + std::string(ans) +
                                         "' out of range for " +
                                         std::to_string(q.options.size()) + " options");
    }
    ++i;
    std::string_view expl;
    if (i < lines.size() && strip_prefix(lines[i], "[EXPLAIN]", expl)) {
      q.explanation = std::string(expl);
      ++i;
      while (i < lines.size() && !is_question_marker(lines[i], q_rest)) {
        q.explanation += ' ';
        q.explanation += lines[i];
        ++i;
      }
    }
    doc.questions.push_back(std::move(q));
  }
  if (doc.questions.empty()) {
    throw Error(ErrorCode::kValidation, "exercise has no questions");
  }
  return doc;
}

// ---------------------------------------------------------------------------
// Dataset files

namespace {

template <typename F>
void for_each_record(const std::filesystem::path& path, F&& fn) {
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorCode::kIo, "cannot open dataset file " + path.string());
  }
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw RecordError(ErrorCode::kParse, line_no, "", e.what());
    }
    if (!j.is_object()) {
      throw RecordError(ErrorCode::kParse, line_no, "", "record is not an object");
    }
    fn(j, line_no);
  }
}

const json& require(const json& j, const std::string& key, std::size_t line,
                    const std::string& qualified) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) {
    throw RecordError(ErrorCode::kMissingField, line, qualified, "required field missing");
  }
  return *it;
}

std::string require_string(const json& j, const std::string& key, std::size_t line,
                           const std::string& qualified) {
  const auto& v = require(j, key, line, qualified);
  if (!v.is_string()) {
    throw RecordError(ErrorCode::kParse, line, qualified, "expected a string");
  }
  auto s = v.get<std::string>();
  if (s.empty()) {
    throw RecordError(ErrorCode::kValidation, line, qualified, "must not be empty");
  }
  return s;
}

int require_int(const json& j, const std::string& key, std::size_t line,
                const std::string& qualified) {
  const auto& v = require(j, key, line, qualified);
  if (!v.is_number_integer()) {
    throw RecordError(ErrorCode::kParse, line, qualified, "expected an integer");
  }
  return v.get<int>();
}

ContentConstraints read_constraints(const json& j, std::size_t line) {
  const auto& c = require(j, "constraints", line, "constraints");
  if (!c.is_object()) {
    throw RecordError(ErrorCode::kParse, line, "constraints", "expected an object");
  }
  ContentConstraints out;
  out.theme = require_string(c, "theme", line, "constraints.theme");
  out.style = require_string(c, "style", line, "constraints.style");
  out.word_count = require_int(c, "word_count", line, "constraints.word_count");
  out.num_questions = require_int(c, "num_questions", line, "constraints.num_questions");
  out.num_options = require_int(c, "num_options", line, "constraints.num_options");
  const auto diff = require_string(c, "difficulty", line, "constraints.difficulty");
  try {
    out.difficulty = parse_difficulty(diff);
    out.validate();
  } catch (const RecordError&) {
    throw;
  } catch (const Error& e) {
    throw RecordError(ErrorCode::kValidation, line, "constraints", e.what());
  }
  return out;
}

}  // namespace

std::vector<InstructionTriplet> load_sft_dataset(const std::filesystem::path& path) {
  std::vector<InstructionTriplet> out;
  for_each_record(path, [&](const json& j, std::size_t line) {
    InstructionTriplet t;
    t.instruction = require_string(j, "instruction", line, "instruction");
    t.constraints = read_constraints(j, line);
    t.reference = require_string(j, "reference", line, "reference");
    try {
      parse_exercise(t.reference).validate();
    } catch (const Error& e) {
      throw RecordError(ErrorCode::kValidation, line, "reference", e.what());
    }
    out.push_back(std::move(t));
  });
  return out;
}

std::vector<PreferencePair> load_preference_dataset(const std::filesystem::path& path) {
  std::vector<PreferencePair> out;
  for_each_record(path, [&](const json& j, std::size_t line) {
    PreferencePair p;
    p.prompt = require_string(j, "prompt", line, "prompt");
    p.chosen = require_string(j, "chosen", line, "chosen");
    p.rejected = require_string(j, "rejected", line, "rejected");
    if (p.chosen == p.rejected) {
      throw RecordError(ErrorCode::kValidation, line, "rejected",
                        "chosen and rejected responses are identical");
    }
    out.push_back(std::move(p));
  });
  return out;
}

std::vector<PromptRecord> load_prompt_dataset(const std::filesystem::path& path) {
  std::vector<PromptRecord> out;
  for_each_record(path, [&](const json& j, std::size_t line) {
    PromptRecord p;
    p.instruction = require_string(j, "instruction", line, "instruction");
    p.constraints = read_constraints(j, line);
    out.push_back(std::move(p));
  });
  return out;
}

std::vector<LabeledText> load_classifier_dataset(const std::filesystem::path& path) {
  std::vector<LabeledText> out;
  for_each_record(path, [&](const json& j, std::size_t line) {
    LabeledText t;
    t.text = require_string(j, "text", line, "text");
    const auto label = require_string(j, "label", line, "label");
    if (label != "toxic" && label != "clean") {
      throw RecordError(ErrorCode::kValidation, line, "label", "must be toxic or clean");
    }
    t.toxic = label == "toxic";
    out.push_back(std::move(t));
  });
  return out;
}

Dataset load_dataset(DatasetKind kind, const std::filesystem::path& path) {
  switch (kind) {
    case DatasetKind::kSft: return load_sft_dataset(path);
    case DatasetKind::kPreference: return load_preference_dataset(path);
    case DatasetKind::kPrompts: return load_prompt_dataset(path);
    case DatasetKind::kClassifier: return load_classifier_dataset(path);
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown dataset kind");
}

std::string to_line(const InstructionTriplet& t) {
  json j;
  j["instruction"] = t.instruction;
  j["constraints"] = t.constraints;
  j["reference"] = t.reference;
  return j.dump();
}

std::string to_line(const PreferencePair& p) {
  json j;
  j["prompt"] = p.prompt;
  j["chosen"] = p.chosen;
  j["rejected"] = p.rejected;
  return j.dump();
}

std::string to_line(const PromptRecord& p) {
  json j;
  j["instruction"] = p.instruction;
  j["constraints"] = p.constraints;
  return j.dump();
}

std::string to_line(const LabeledText& t) {
  json j;
  j["text"] = t.text;
  j["label"] = t.toxic ? "toxic" : "clean";
  return j.dump();
}

const std::vector<std::string>& toxic_markers() {
  static const std::vector<std::string> markers = {"stupid", "hateful", "idiotic"};
  return markers;
}

std::size_t count_markers(std::string_view text) {
  std::size_t n = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto b = text.find_first_not_of(" \n\t\r", pos);
    if (b == std::string_view::npos) break;
    auto e = text.find_first_of(" \n\t\r", b);
    if (e == std::string_view::npos) e = text.size();
    const auto word = text.substr(b, e - b);
    for (const auto& m : toxic_markers()) {
      if (word == m) {
        ++n;
        break;
      }
    }
    pos = e;
  }
  return n;
}

bool contains_marker(std::string_view text) { return count_markers(text) > 0; }

}  // namespace rceg
