#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rceg/errors.hpp"
#include "rceg/model.hpp"
#include "rceg/random.hpp"
#include "rceg/training.hpp"

namespace rceg::fixtures {

inline Vocab tiny_vocab() {
  std::vector<std::string> words = {"the", "cat", "sat", "on", "mat", "a", "dog", "ran",
                                    "[PASSAGE]", "[Q1]", "A.", "B.", "[ANSWER]", "[EXPLAIN]"};
  for (int i = 0; i < 60; ++i) words.push_back("w" + std::to_string(i));
  return Vocab::build(words, 512);
}

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.context_length = 32;
  c.embed_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.adapter_rank = 2;
  c.adapter_scale = 2.0;
  return c;
}

inline void fill_normal(std::span<double> values, Rng& rng, double scale) {
  for (auto& v : values) v = scale * rng.normal();
}

/// Initialized model whose adapters and heads are all nonzero.
inline ModelState tiny_model(std::uint64_t seed, bool reward_head = false, bool value_head = false) {
  auto state = ModelState::initialize(tiny_config(), tiny_vocab(), seed);
  if (reward_head) state.reward_head = zero_head(state.config.embed_dim);
  if (value_head) state.value_head = zero_head(state.config.embed_dim);
  Rng rng(mix_seed(seed));
  for (auto buf : trainable_parameters(state)) fill_normal(buf, rng, 0.2);
  return state;
}

inline std::vector<TokenId> random_ids(const ModelState& state, std::size_t n, Rng& rng) {
  std::vector<TokenId> ids(n);
  for (auto& id : ids) {
    id = static_cast<TokenId>(kFirstByte + rng.below(state.vocab.size() - kFirstByte));
  }
  return ids;
}

struct GradCheck {
  std::size_t checked = 0;
  double max_relative_error = 0.0;
};

using LossFn = std::function<std::pair<double, Gradients>(const ModelState&)>;

/// Central differences on `count` randomly chosen trainable scalars, compared
/// with the analytic gradient as |g - n| / max(|g|, |n|).
inline GradCheck check_gradients(ModelState state, const LossFn& loss, std::size_t count,
                                 std::uint64_t seed, double step = 1e-5) {
  auto [base_loss, grads] = loss(state);
  (void)base_loss;
  auto params = trainable_parameters(state);
  auto gbufs = gradient_buffers(grads);
  std::vector<std::pair<std::size_t, std::size_t>> slots;
  for (std::size_t b = 0; b < params.size(); ++b) {
    for (std::size_t i = 0; i < params[b].size(); ++i) slots.emplace_back(b, i);
  }
  Rng rng(seed);
  rng.shuffle(slots);
  slots.resize(std::min(count, slots.size()));

  GradCheck out;
  for (auto [b, i] : slots) {
    double& p = params[b][i];
    const double saved = p;
    p = saved + step;
    const double up = loss(state).first;
    p = saved - step;
    const double down = loss(state).first;
    p = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double analytic = gbufs[b][i];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
    out.max_relative_error = std::max(out.max_relative_error, std::abs(analytic - numeric) / denom);
    ++out.checked;
  }
  return out;
}

}  // namespace rceg::fixtures
