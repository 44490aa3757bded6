#include "rceg/service.hpp"

#include <chrono>
#include <fstream>
#include <random>

#include "rceg/checkpoint.hpp"
#include "rceg/errors.hpp"

namespace rceg {

GenerationRequest request_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::kValidation, "request body must be a JSON object");
  if (!j.contains("constraints")) {
    throw Error(ErrorCode::kMissingField, "request is missing 'constraints'");
  }
  GenerationRequest r;
  try {
    r.constraints = j.at("constraints").get<ContentConstraints>();
  } catch (const Error&) {
    throw;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kValidation, std::string("constraints: ") + e.what());
  }
  r.constraints.validate();
  if (j.contains("seed") && !j["seed"].is_null()) {
    if (!j["seed"].is_number_unsigned()) {
      throw Error(ErrorCode::kValidation, "seed must be a non-negative integer");
    }
    r.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("steering")) r.steering = j["steering"];
  return r;
}

nlohmann::json to_json(const GenerationRequest& r) {
  nlohmann::json j{{"constraints", r.constraints}};
  j["seed"] = r.seed ? nlohmann::json(*r.seed) : nullptr;
  j["steering"] = r.steering;
  return j;
}

nlohmann::json to_json(const GenerationResponse& r) {
  nlohmann::json j;
  j["exercise"] = r.exercise ? nlohmann::json(*r.exercise) : nullptr;
  j["raw_text"] = r.raw_text;
  j["parse_warning"] = r.parse_warning;
  j["parse_error"] = r.parse_error;
  auto cands = nlohmann::json::array();
  for (const auto& c : r.candidates) {
    cands.push_back({{"text", c.text}, {"score", c.score}, {"selected", c.selected}});
  }
  j["candidates"] = std::move(cands);
  j["steering_report_id"] = r.steering_report_id;
  j["steering_report"] = r.steering_report;
  j["seed"] = r.seed;
  j["timing_ms"] = r.timing_ms;
  return j;
}

GenerationService::GenerationService(std::shared_ptr<const ModelState> model,
                                     AttributeClassifier attribute, AttributeClassifier filter,
                                     SteeringConfig defaults, std::string checkpoint_id,
                                     std::optional<std::filesystem::path> report_dir)
    : model_(std::move(model)),
      attribute_(std::move(attribute)),
      filter_(std::move(filter)),
      defaults_(std::move(defaults)),
      checkpoint_id_(std::move(checkpoint_id)),
      report_dir_(std::move(report_dir)) {}

GenerationResponse GenerationService::handle_generate(const GenerationRequest& request) const {
  if (!model_) throw Error(ErrorCode::kUnavailable, "no model checkpoint is loaded");
  const auto t0 = std::chrono::steady_clock::now();
  request.constraints.validate();
  SteeringConfig steering = defaults_;
  apply_overrides(steering, request.steering);
  steering.validate();

  GenerationResponse out;
  out.seed = request.seed ? *request.seed : std::random_device{}();
  const auto prompt = encode_prompt(
      model_->vocab, render_prompt(default_instruction(), request.constraints));
  if (prompt.size() >= model_->config.context_length) {
    throw Error(ErrorCode::kLengthOverflow, "rendered prompt does not fit the context window");
  }

  const auto outcome = generate_steered_candidates(*model_, prompt, attribute_, steering, out.seed);
  std::vector<std::string> texts;
  for (const auto& c : outcome.candidates) texts.push_back(c.text);
  const auto selection = select_final(texts, filter_);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    out.candidates.push_back({texts[i], selection.scores[i], i == selection.index});
  }
  out.raw_text = texts[selection.index];
  try {
    out.exercise = parse_exercise(out.raw_text);
  } catch (const Error& e) {
    out.parse_warning = true;
    out.parse_error = e.what();
  }

  out.steering_report = steering_report(outcome, selection, model_->vocab);
  out.steering_report["seed"] = out.seed;
  out.steering_report["checkpoint_id"] = checkpoint_id_;
  out.steering_report_id = hex64(fnv1a64(dump_text(out.steering_report)));
  if (report_dir_) {
    std::filesystem::create_directories(*report_dir_);
    const auto path = *report_dir_ / ("steering-" + out.steering_report_id + ".json");
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error(ErrorCode::kIo, "cannot write steering report " + path.string());
    f << dump_text(out.steering_report, 1) << '\n';
  }
  out.timing_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace rceg
