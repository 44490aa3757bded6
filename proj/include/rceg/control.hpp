#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rceg/corpus.hpp"
#include "rceg/model.hpp"

namespace rceg {

struct SteeringConfig {
  std::size_t num_variants = 30;
  std::size_t top_k = 10;
  std::size_t num_final_candidates = 3;
  double boost = 4.0;     // added to positively ranked tokens
  double suppress = 6.0;  // subtracted from negatively ranked tokens
  double damping = 0.85;
  double rank_tolerance = 1e-8;
  std::size_t max_rank_iterations = 10000;
  // Score cutoffs for the two rankings. Accepted and reported; selection
  // is by top_k.
  std::optional<double> positive_threshold;
  std::optional<double> negative_threshold;
  SamplerConfig sampler{1.0, 0, 200, 0};

  void validate() const;
};

void to_json(nlohmann::json& j, const SteeringConfig& c);
/// Applies the keys present in `j` on top of `c`.
void apply_overrides(SteeringConfig& c, const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Attribute classifier

/// Bag-of-words logistic scorer. Output convention: 1.0 is clean/aligned,
/// 0.0 is toxic.
class AttributeClassifier {
 public:
  AttributeClassifier() = default;
  AttributeClassifier(std::map<std::string, double> weights, double bias)
      : weights_(std::move(weights)), bias_(bias) {}

  double score(std::string_view text) const;
  double logit(std::string_view text) const;

  const std::map<std::string, double>& weights() const { return weights_; }
  double bias() const { return bias_; }

  nlohmann::json to_json() const;
  static AttributeClassifier from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static AttributeClassifier load(const std::filesystem::path& path);

  bool operator==(const AttributeClassifier&) const = default;

 private:
  std::map<std::string, double> weights_;
  double bias_ = 0.0;
};

struct ClassifierTrainConfig {
  std::size_t iterations = 300;
  double learning_rate = 0.05;  // Adam step size
  double l2 = 1e-2;
  double holdout_fraction = 0.2;
};

struct ClassifierTrainResult {
  AttributeClassifier classifier;
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
  std::size_t heldout_size = 0;
};

ClassifierTrainResult train_attribute_classifier(std::span<const LabeledText> data,
                                                 const ClassifierTrainConfig& config,
                                                 std::uint64_t seed);

double score_attribute(const AttributeClassifier& classifier, std::string_view text);

// ---------------------------------------------------------------------------
// Variants and graphs

struct CandidateVariant {
  std::vector<TokenId> ids;
  std::string text;
  double mu = 0.0;
};

/// Sub-seed streams; variant i uses derive_seed(seed, kVariantStream, i).
inline constexpr std::uint64_t kVariantStream = 0x7661726961;
inline constexpr std::uint64_t kCandidateStream = 0x63616e64;

std::vector<CandidateVariant> sample_variants(const ModelState& state,
                                              std::span<const TokenId> prompt,
                                              const AttributeClassifier& classifier,
                                              const SteeringConfig& config, std::uint64_t seed);

using Edge = std::pair<TokenId, TokenId>;

struct AttributeGraph {
  std::vector<TokenId> nodes;  // sorted, unique
  std::map<Edge, double> weights;
};

struct AttributeGraphs {
  AttributeGraph positive;
  AttributeGraph negative;
  std::map<Edge, std::size_t> transition_counts;
};

/// Each adjacent pair in a variant with score mu adds mu to the positive
/// edge and 1 - mu to the negative edge.
AttributeGraphs build_attribute_graphs(std::span<const CandidateVariant> variants);

struct TokenRanking {
  std::vector<TokenId> nodes;  // same order as graph.nodes
  std::vector<double> scores;  // stationary importance, sums to 1
  std::vector<TokenId> top;    // best first, specials excluded
  std::size_t iterations = 0;
};

/// Damped power iteration over weight-normalized out-edges; dangling mass is
/// spread uniformly. Ties in the top list go to the lower token id.
TokenRanking rank_tokens(const AttributeGraph& graph, std::size_t top_k, double damping = 0.85,
                         double tolerance = 1e-8, std::size_t max_iterations = 10000);

// ---------------------------------------------------------------------------
// Steering and selection

/// Adds `boost` to every positive token and subtracts `suppress` from every
/// negative token (a token in both receives both).
LogitTransform make_steering_transform(std::vector<TokenId> positive,
                                       std::vector<TokenId> negative, double boost,
                                       double suppress);

/// softmax(z + boost * m_pos - suppress * m_neg)
Vector steered_distribution(const Vector& logits, std::span<const TokenId> positive,
                            std::span<const TokenId> negative, double boost, double suppress);

struct SteeringOutcome {
  std::vector<CandidateVariant> variants;
  std::vector<TokenId> positive_tokens;
  std::vector<TokenId> negative_tokens;
  std::vector<CandidateVariant> candidates;
};

SteeringOutcome generate_steered_candidates(const ModelState& state,
                                            std::span<const TokenId> prompt,
                                            const AttributeClassifier& classifier,
                                            const SteeringConfig& config, std::uint64_t seed);

struct Selection {
  std::size_t index = 0;
  std::vector<double> scores;
};

/// argmax of the scores; the lowest index wins ties. Throws on empty input.
std::size_t argmax_first(std::span<const double> scores);

Selection select_final(std::span<const std::string> candidates,
                       const AttributeClassifier& classifier);

/// Structured record of one steered generation.
nlohmann::json steering_report(const SteeringOutcome& outcome, const Selection& selection,
                               const Vocab& vocab);

}  // namespace rceg
