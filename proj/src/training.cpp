#include "rceg/training.hpp"

#include <algorithm>
#include <cmath>

#include "rceg/errors.hpp"

namespace rceg {
namespace {

void check_fits(const ModelState& state, std::size_t n, const char* what) {
  if (n > state.config.context_length) {
    throw Error(ErrorCode::kLengthOverflow,
                std::string(what) + " of " + std::to_string(n) +
                    " tokens exceeds context length " +
                    std::to_string(state.config.context_length));
  }
}

void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw Error(ErrorCode::kShapeMismatch, std::string(what) + ": length mismatch (" +
                                               std::to_string(a) + " vs " +
                                               std::to_string(b) + ")");
  }
}

std::vector<TokenId> with_eos(std::vector<TokenId> ids) {
  if (ids.empty() || ids.back() != kEos) ids.push_back(kEos);
  return ids;
}

std::vector<TokenId> concat(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<TokenId> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// d loss / d logits for one row where the loss is -g * log p(target).
void add_nll_row_grad(Matrix& dlogits, const Matrix& logits, Eigen::Index row, TokenId target,
                      double weight) {
  const auto r = logits.row(row);
  const double mx = r.maxCoeff();
  Eigen::RowVectorXd p = (r.array() - mx).exp();
  p /= p.sum();
  dlogits.row(row) += weight * p;
  dlogits(row, target) -= weight;
}

}  // namespace

SftExample make_sft_example(const ModelState& state, const InstructionTriplet& triplet) {
  SftExample ex;
  ex.prompt = encode_prompt(state.vocab, render_prompt(triplet.instruction, triplet.constraints));
  ex.response = with_eos(state.vocab.tokenize(triplet.reference));
  check_fits(state, ex.prompt.size() + ex.response.size(), "prompt+reference");
  return ex;
}

PairExample make_pair_example(const ModelState& state, const PreferencePair& pair) {
  PairExample ex;
  ex.prompt = encode_prompt(state.vocab, pair.prompt);
  ex.chosen = with_eos(state.vocab.tokenize(pair.chosen));
  ex.rejected = with_eos(state.vocab.tokenize(pair.rejected));
  check_fits(state, ex.prompt.size() + std::max(ex.chosen.size(), ex.rejected.size()),
             "prompt+response");
  return ex;
}

LossResult sft_loss(const ModelState& state, std::span<const SftExample> batch) {
  if (batch.empty()) throw Error(ErrorCode::kInvalidArgument, "empty SFT batch");
  LossResult out{0.0, Gradients::zeros_like(state)};
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    if (ex.prompt.empty() || ex.response.empty()) {
      throw Error(ErrorCode::kInvalidArgument, "SFT example needs a prompt and a response");
    }
    check_fits(state, ex.prompt.size() + ex.response.size(), "prompt+reference");
    auto ids = concat(ex.prompt, ex.response);
    ids.pop_back();  // last token is only a target
    const auto pass = run_forward(state, ids, true);
    Matrix dlogits = Matrix::Zero(pass.logits.rows(), pass.logits.cols());
    double nll = 0.0;
    for (std::size_t i = 0; i < ex.response.size(); ++i) {
      const auto row = static_cast<Eigen::Index>(ex.prompt.size() - 1 + i);
      const auto r = pass.logits.row(row);
      const double mx = r.maxCoeff();
      const double lse = mx + std::log((r.array() - mx).exp().sum());
      nll -= r(ex.response[i]) - lse;
      add_nll_row_grad(dlogits, pass.logits, row, ex.response[i], inv_b);
    }
    out.loss += nll * inv_b;
    backward(state, pass, dlogits, Matrix(), out.grads);
  }
  return out;
}

double rm_loss(double score_plus, double score_minus) {
  // softplus(-delta) = max(-delta, 0) + log1p(exp(-|delta|))
  const double delta = score_plus - score_minus;
  return std::max(-delta, 0.0) + std::log1p(std::exp(-std::abs(delta)));
}

double reward_score(const ModelState& state, std::span<const TokenId> prompt,
                    std::span<const TokenId> response) {
  if (!state.reward_head) {
    throw Error(ErrorCode::kMissingPrerequisite, "model has no reward head");
  }
  auto ids = concat(prompt, response);
  if (ids.empty() || ids.back() != kEos) ids.push_back(kEos);
  check_fits(state, ids.size(), "prompt+response");
  const auto pass = run_forward(state, ids, false);
  const auto& head = *state.reward_head;
  return pass.hidden.row(pass.hidden.rows() - 1).dot(head.weight.transpose()) + head.bias;
}

LossResult rm_batch_loss(const ModelState& state, std::span<const PairExample> batch) {
  if (!state.reward_head) {
    throw Error(ErrorCode::kMissingPrerequisite, "model has no reward head");
  }
  if (batch.empty()) throw Error(ErrorCode::kInvalidArgument, "empty preference batch");
  LossResult out{0.0, Gradients::zeros_like(state)};
  const auto& head = *state.reward_head;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    const auto plus_ids = concat(ex.prompt, ex.chosen);
    const auto minus_ids = concat(ex.prompt, ex.rejected);
    const auto plus = run_forward(state, plus_ids, false);
    const auto minus = run_forward(state, minus_ids, false);
    const auto h_plus = plus.hidden.row(plus.hidden.rows() - 1);
    const auto h_minus = minus.hidden.row(minus.hidden.rows() - 1);
    const double s_plus = h_plus.dot(head.weight.transpose()) + head.bias;
    const double s_minus = h_minus.dot(head.weight.transpose()) + head.bias;
    out.loss += rm_loss(s_plus, s_minus) * inv_b;
    // d/d(delta) of softplus(-delta) = -sigmoid(-delta)
    const double g = -sigmoid(-(s_plus - s_minus)) * inv_b;
    auto& gh = *out.grads.reward_head;
    gh.weight += g * (h_plus - h_minus).transpose();
    // Bias cancels in the difference.

    Matrix dh_plus = Matrix::Zero(plus.hidden.rows(), plus.hidden.cols());
    dh_plus.row(dh_plus.rows() - 1) = g * head.weight.transpose();
    backward(state, plus, Matrix(), dh_plus, out.grads);
    Matrix dh_minus = Matrix::Zero(minus.hidden.rows(), minus.hidden.cols());
    dh_minus.row(dh_minus.rows() - 1) = -g * head.weight.transpose();
    backward(state, minus, Matrix(), dh_minus, out.grads);
  }
  return out;
}

// ---------------------------------------------------------------------------

void PpoConfig::validate() const {
  if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0)) {
    throw Error(ErrorCode::kValidation, "clip epsilon must be in (0,1)");
  }
  if (!(kl_coef >= 0.0)) throw Error(ErrorCode::kValidation, "kl coefficient must be >= 0");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw Error(ErrorCode::kValidation, "gamma must be in [0,1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) {
    throw Error(ErrorCode::kValidation, "gae lambda must be in [0,1]");
  }
  if (rollouts_per_batch == 0 || ppo_epochs == 0) {
    throw Error(ErrorCode::kValidation, "rollouts per batch and ppo epochs must be positive");
  }
  rollout.validate();
}

std::vector<double> importance_ratios(std::span<const double> new_log_probs,
                                      std::span<const double> old_log_probs) {
  require_same_length(new_log_probs.size(), old_log_probs.size(), "importance_ratios");
  std::vector<double> out(new_log_probs.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(new_log_probs[i] - old_log_probs[i]);
  }
  return out;
}

double ppo_objective(std::span<const double> ratios, std::span<const double> advantages,
                     double epsilon) {
  require_same_length(ratios.size(), advantages.size(), "ppo_objective");
  if (!(epsilon > 0.0 && epsilon < 1.0)) {
    throw Error(ErrorCode::kValidation, "clip epsilon must be in (0,1)");
  }
  if (ratios.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    const double clipped = std::clamp(ratios[i], 1.0 - epsilon, 1.0 + epsilon);
    total += std::min(ratios[i] * advantages[i], clipped * advantages[i]);
  }
  return total / static_cast<double>(ratios.size());
}

std::vector<double> kl_penalized_rewards(double score, std::span<const double> new_log_probs,
                                         std::span<const double> ref_log_probs, double beta) {
  require_same_length(new_log_probs.size(), ref_log_probs.size(), "kl_penalized_rewards");
  std::vector<double> out(new_log_probs.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = -beta * (new_log_probs[i] - ref_log_probs[i]);
  }
  if (!out.empty()) out.back() += score;
  return out;
}

AdvantageEstimate estimate_advantages(std::span<const double> rewards,
                                      std::span<const double> values, double gamma,
                                      double lambda) {
  require_same_length(rewards.size(), values.size(), "estimate_advantages");
  const std::size_t n = rewards.size();
  AdvantageEstimate est;
  est.advantages.assign(n, 0.0);
  est.returns.assign(n, 0.0);
  double running = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    const double next_value = t + 1 < n ? values[t + 1] : 0.0;
    const double delta = rewards[t] + gamma * next_value - values[t];
    running = delta + gamma * lambda * running;
    est.advantages[t] = running;
    est.returns[t] = running + values[t];
  }
  return est;
}

std::vector<double> token_values(const ModelState& state, const ForwardPass& pass,
                                 std::size_t prompt_len) {
  if (!state.value_head) {
    throw Error(ErrorCode::kMissingPrerequisite, "model has no value head");
  }
  const auto& head = *state.value_head;
  // Row t of a pass over prompt ++ response[:-1] precedes response token
  // t - prompt_len + 1.
  std::vector<double> out;
  for (auto row = static_cast<Eigen::Index>(prompt_len) - 1; row < pass.hidden.rows(); ++row) {
    out.push_back(pass.hidden.row(row).dot(head.weight.transpose()) + head.bias);
  }
  return out;
}

PpoLossResult ppo_loss(const ModelState& state, std::span<const Trajectory> batch,
                       double clip_epsilon, PpoLossWeights weights) {
  if (!state.value_head) {
    throw Error(ErrorCode::kMissingPrerequisite, "PPO policy needs a value head");
  }
  if (batch.empty()) throw Error(ErrorCode::kInvalidArgument, "empty PPO batch");
  PpoLossResult out;
  out.grads = Gradients::zeros_like(state);
  const auto& vhead = *state.value_head;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const auto& tr : batch) {
    const std::size_t n = tr.response.size();
    if (n == 0) continue;
    require_same_length(tr.old_log_probs.size(), n, "old log-probs");
    require_same_length(tr.advantages.size(), n, "advantages");
    require_same_length(tr.returns.size(), n, "returns");
    auto ids = concat(tr.prompt, tr.response);
    ids.pop_back();
    check_fits(state, ids.size() + 1, "trajectory");
    const auto pass = run_forward(state, ids, true);
    const double inv_n = 1.0 / static_cast<double>(n);
    Matrix dlogits = Matrix::Zero(pass.logits.rows(), pass.logits.cols());
    Matrix dhidden = Matrix::Zero(pass.hidden.rows(), pass.hidden.cols());
    double policy = 0.0;
    double value = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = static_cast<Eigen::Index>(tr.prompt.size() - 1 + i);
      const auto r = pass.logits.row(row);
      const double mx = r.maxCoeff();
      const double lse = mx + std::log((r.array() - mx).exp().sum());
      const double logp = r(tr.response[i]) - lse;
      const double ratio = std::exp(logp - tr.old_log_probs[i]);
      const double adv = tr.advantages[i];
      const double clipped = std::clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon);
      const double unclipped_term = ratio * adv;
      const double clipped_term = clipped * adv;
      policy -= std::min(unclipped_term, clipped_term) * inv_n;
      if (weights.policy != 0.0 && unclipped_term <= clipped_term) {
        // d(-ratio*adv)/dlogp = -ratio*adv, routed through -log p(target).
        add_nll_row_grad(dlogits, pass.logits, row, tr.response[i],
                         weights.policy * ratio * adv * inv_n * inv_b);
      }
      const double v = pass.hidden.row(row).dot(vhead.weight.transpose()) + vhead.bias;
      const double err = v - tr.returns[i];
      value += 0.5 * err * err * inv_n;
      if (weights.value != 0.0) {
        const double dv = weights.value * err * inv_n * inv_b;
        out.grads.value_head->weight += dv * pass.hidden.row(row).transpose();
        out.grads.value_head->bias += dv;
        dhidden.row(row) += dv * vhead.weight.transpose();
      }
    }
    out.policy_loss += policy * inv_b;
    out.value_loss += value * inv_b;
    backward(state, pass, dlogits, dhidden, out.grads);
  }
  out.loss = weights.policy * out.policy_loss + weights.value * out.value_loss;
  return out;
}

// ---------------------------------------------------------------------------

AdamOptimizer::AdamOptimizer(double learning_rate, double beta1, double beta2, double epsilon)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {}

double AdamOptimizer::step(const std::vector<std::span<double>>& params,
                           const std::vector<std::span<double>>& grads, double max_grad_norm) {
  if (params.size() != grads.size()) {
    throw Error(ErrorCode::kShapeMismatch, "parameter/gradient buffer count mismatch");
  }
  const std::size_t total = count_elements(params);
  if (m_.empty()) {
    m_.assign(total, 0.0);
    v_.assign(total, 0.0);
  } else if (m_.size() != total) {
    throw Error(ErrorCode::kShapeMismatch, "parameter count changed between optimizer steps");
  }
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double x : g) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) {
    throw Error(ErrorCode::kNonFinite, "non-finite gradient norm");
  }
  const double clip = (max_grad_norm > 0.0 && norm > max_grad_norm) ? max_grad_norm / norm : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  std::size_t k = 0;
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (params[b].size() != grads[b].size()) {
      throw Error(ErrorCode::kShapeMismatch, "parameter/gradient buffer size mismatch");
    }
    for (std::size_t i = 0; i < params[b].size(); ++i, ++k) {
      const double g = grads[b][i] * clip;
      m_[k] = beta1_ * m_[k] + (1.0 - beta1_) * g;
      v_[k] = beta2_ * v_[k] + (1.0 - beta2_) * g * g;
      params[b][i] -= lr_ * (m_[k] / bc1) / (std::sqrt(v_[k] / bc2) + eps_);
    }
  }
  return norm;
}

}  // namespace rceg
