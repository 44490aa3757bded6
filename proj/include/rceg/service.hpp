#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rceg/control.hpp"
#include "rceg/corpus.hpp"
#include "rceg/model.hpp"

namespace rceg {

inline constexpr const char* kServiceVersion = "0.1.0";

/// Serializes `j`; byte sequences that are not valid UTF-8 (possible in raw
/// model output) become U+FFFD.
inline std::string dump_text(const nlohmann::json& j, int indent = -1) {
  return j.dump(indent, ' ', false, nlohmann::json::error_handler_t::replace);
}

struct GenerationRequest {
  ContentConstraints constraints;
  std::optional<std::uint64_t> seed;
  nlohmann::json steering;  // overrides for SteeringConfig; null when absent
};

/// Validates field types and constraint invariants (kValidation /
/// kMissingField on failure).
GenerationRequest request_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GenerationRequest& r);

struct CandidateSummary {
  std::string text;
  double score = 0.0;
  bool selected = false;
};

struct GenerationResponse {
  std::optional<ExerciseDocument> exercise;  // empty when parse_warning is set
  std::string raw_text;
  bool parse_warning = false;
  std::string parse_error;
  std::vector<CandidateSummary> candidates;
  std::string steering_report_id;
  nlohmann::json steering_report;
  std::uint64_t seed = 0;
  double timing_ms = 0.0;
};

nlohmann::json to_json(const GenerationResponse& r);

/// Stateless request handler over one immutable model snapshot.
class GenerationService {
 public:
  GenerationService(std::shared_ptr<const ModelState> model, AttributeClassifier attribute,
                    AttributeClassifier filter, SteeringConfig defaults, std::string checkpoint_id,
                    std::optional<std::filesystem::path> report_dir = std::nullopt);

  /// Throws kUnavailable without a model, kValidation for bad constraints or
  /// overrides, kLengthOverflow when the prompt cannot fit.
  GenerationResponse handle_generate(const GenerationRequest& request) const;

  bool ready() const { return model_ != nullptr; }
  const std::string& checkpoint_id() const { return checkpoint_id_; }

 private:
  std::shared_ptr<const ModelState> model_;
  AttributeClassifier attribute_;
  AttributeClassifier filter_;
  SteeringConfig defaults_;
  std::string checkpoint_id_;
  std::optional<std::filesystem::path> report_dir_;
};

}  // namespace rceg
