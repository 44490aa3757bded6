#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rceg/corpus.hpp"
#include "rceg/model.hpp"

namespace rceg {

// ---------------------------------------------------------------------------
// Tokenized training units

struct SftExample {
  std::vector<TokenId> prompt;    // bos + rendered instruction/constraints
  std::vector<TokenId> response;  // reference tokens + eos
};

/// Throws kLengthOverflow when prompt+response exceeds the context.
SftExample make_sft_example(const ModelState& state, const InstructionTriplet& triplet);

struct PairExample {
  std::vector<TokenId> prompt;
  std::vector<TokenId> chosen;    // ends with eos
  std::vector<TokenId> rejected;  // ends with eos
};

PairExample make_pair_example(const ModelState& state, const PreferencePair& pair);

struct LossResult {
  double loss = 0.0;
  Gradients grads;
};

/// Mean over the batch of the summed response-token negative log-likelihood.
/// Prompt positions carry no loss. Gradients reach adapters only.
LossResult sft_loss(const ModelState& state, std::span<const SftExample> batch);

/// -log sigmoid(score_plus - score_minus), stable for any finite gap.
double rm_loss(double score_plus, double score_minus);

/// Scalar reward of `prompt ++ response` read from the final position. An
/// eos is appended when the response does not already end with one.
double reward_score(const ModelState& state, std::span<const TokenId> prompt,
                    std::span<const TokenId> response);

/// Mean pairwise loss over the batch with gradients for the reward head and
/// the adapters.
LossResult rm_batch_loss(const ModelState& state, std::span<const PairExample> batch);

// ---------------------------------------------------------------------------
// PPO pieces

struct PpoConfig {
  double clip_epsilon = 0.2;
  double kl_coef = 0.05;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  std::size_t rollouts_per_batch = 16;
  std::size_t ppo_epochs = 4;
  double learning_rate = 1e-3;
  double value_coef = 0.5;
  std::size_t epochs = 3;  // passes over the prompt set
  bool whiten_advantages = true;
  double max_grad_norm = 1.0;
  SamplerConfig rollout{1.0, 0, 200, 0};

  void validate() const;
};

std::vector<double> importance_ratios(std::span<const double> new_log_probs,
                                      std::span<const double> old_log_probs);

/// Mean over tokens of min(r * A, clip(r, 1-eps, 1+eps) * A).
double ppo_objective(std::span<const double> ratios, std::span<const double> advantages,
                     double epsilon);

/// -beta * (logp_new - logp_ref) at every token, plus `score` at the last one.
std::vector<double> kl_penalized_rewards(double score, std::span<const double> new_log_probs,
                                         std::span<const double> ref_log_probs, double beta);

struct AdvantageEstimate {
  std::vector<double> advantages;
  std::vector<double> returns;  // value targets: advantage + value
};

/// Generalized advantage estimation with V after the last token fixed at 0.
AdvantageEstimate estimate_advantages(std::span<const double> rewards,
                                      std::span<const double> values, double gamma,
                                      double lambda);

struct Trajectory {
  std::vector<TokenId> prompt;
  std::vector<TokenId> response;
  std::vector<double> old_log_probs;
  std::vector<double> ref_log_probs;
  std::vector<double> values;
  double score = 0.0;
  std::vector<double> rewards;
  std::vector<double> advantages;
  std::vector<double> returns;
};

/// Per-token values from the value head, aligned with response tokens.
std::vector<double> token_values(const ModelState& state, const ForwardPass& pass,
                                 std::size_t prompt_len);

struct PpoLossWeights {
  double policy = 1.0;
  double value = 0.5;
};

struct PpoLossResult {
  double policy_loss = 0.0;  // negative clipped objective
  double value_loss = 0.0;   // 0.5 * mean squared error
  double loss = 0.0;         // weighted sum
  Gradients grads;
};

/// Batch mean of the clipped policy loss and value regression loss. The
/// state must carry a value head.
PpoLossResult ppo_loss(const ModelState& state, std::span<const Trajectory> batch,
                       double clip_epsilon, PpoLossWeights weights);

// ---------------------------------------------------------------------------
// Optimizer

/// Adaptive-moment gradient descent over a flat list of parameter buffers.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                         double epsilon = 1e-8);

  /// Applies one update; rescales gradients to `max_grad_norm` when it is
  /// positive and exceeded. Returns the pre-clipping gradient norm.
  double step(const std::vector<std::span<double>>& params,
              const std::vector<std::span<double>>& grads, double max_grad_norm = 0.0);

  double learning_rate() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace rceg
