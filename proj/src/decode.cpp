#include <algorithm>
#include <cmath>
#include <numeric>

#include "rceg/errors.hpp"
#include "rceg/model.hpp"

namespace rceg {
namespace {

constexpr double kLayerNormEps = 1e-5;

Vector layer_norm(const Vector& x, const Vector& gain, const Vector& bias) {
  const double d = static_cast<double>(x.size());
  const double mean = x.sum() / d;
  const Vector centered = (x.array() - mean).matrix();
  const double inv = 1.0 / std::sqrt(centered.squaredNorm() / d + kLayerNormEps);
  return (centered * inv).cwiseProduct(gain) + bias;
}

double gelu(double u) {
  return 0.5 * u * (1.0 + std::tanh(0.7978845608028654 * (u + 0.044715 * u * u * u)));
}

}  // namespace

void SamplerConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw Error(ErrorCode::kValidation, "temperature must be positive and finite");
  }
  if (max_new_tokens < 1) {
    throw Error(ErrorCode::kValidation, "max_new_tokens must be at least 1");
  }
}

SamplerConfig SamplerConfig::greedy(std::size_t max_new_tokens) {
  SamplerConfig s;
  s.top_k = 1;
  s.max_new_tokens = max_new_tokens;
  return s;
}

DecodeSession::DecodeSession(const ModelState& state) : state_(&state) {
  const auto& cfg = state.config;
  const auto ctx = static_cast<Eigen::Index>(cfg.context_length);
  const auto d = static_cast<Eigen::Index>(cfg.embed_dim);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto& L = state.base.layers[l];
    if (state.has_adapters()) {
      weff_q_.push_back(lora_apply(L.wq, state.adapters[l].query, cfg.adapter_scale));
      weff_v_.push_back(lora_apply(L.wv, state.adapters[l].value, cfg.adapter_scale));
    } else {
      weff_q_.push_back(L.wq);
      weff_v_.push_back(L.wv);
    }
    keys_.emplace_back(ctx, d);
    values_.emplace_back(ctx, d);
  }
}

const Vector& DecodeSession::push(TokenId token) {
  const auto& cfg = state_->config;
  const auto& base = state_->base;
  if (length_ >= cfg.context_length) {
    throw Error(ErrorCode::kLengthOverflow, "decode session is at the context limit");
  }
  if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size) {
    throw Error(ErrorCode::kInvalidArgument, "token id out of range");
  }
  const auto pos = static_cast<Eigen::Index>(length_);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Vector x = base.token_embedding.row(token).transpose() +
             base.position_embedding.row(pos).transpose();
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto& L = base.layers[l];
    const Vector a = layer_norm(x, L.ln1_gain, L.ln1_bias);
    const Vector q = weff_q_[l] * a;
    keys_[l].row(pos) = (L.wk * a).transpose();
    values_[l].row(pos) = (weff_v_[l] * a).transpose();
    Vector attn(cfg.embed_dim);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * dh;
      Vector scores = keys_[l].block(0, col, pos + 1, dh) * q.segment(col, dh) * scale;
      const double mx = scores.maxCoeff();
      scores = (scores.array() - mx).exp().matrix();
      scores /= scores.sum();
      attn.segment(col, dh) = values_[l].block(0, col, pos + 1, dh).transpose() * scores;
    }
    x += L.wo * attn;
    const Vector m = layer_norm(x, L.ln2_gain, L.ln2_bias);
    const Vector act = (L.w_up * m + L.b_up).unaryExpr([](double u) { return gelu(u); });
    x += L.w_down * act + L.b_down;
  }
  const Vector hidden = layer_norm(x, base.lnf_gain, base.lnf_bias);
  logits_ = base.unembedding * hidden + base.unembedding_bias;
  ++length_;
  return logits_;
}

void DecodeSession::prefill(std::span<const TokenId> tokens) {
  for (auto t : tokens) push(t);
}

TokenId sample_token(std::span<const double> logits, const SamplerConfig& sampler, Rng& rng) {
  const std::size_t n = logits.size();
  if (n == 0) throw Error(ErrorCode::kInvalidArgument, "empty logits row");
  if (sampler.top_k == 1) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  std::vector<TokenId> candidates(n);
  std::iota(candidates.begin(), candidates.end(), 0);
  if (sampler.top_k > 0 && sampler.top_k < n) {
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(sampler.top_k),
                      candidates.end(), [&](TokenId a, TokenId b) {
                        return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
                      });
    candidates.resize(sampler.top_k);
    std::sort(candidates.begin(), candidates.end());
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (auto id : candidates) mx = std::max(mx, logits[id]);
  std::vector<double> weights(candidates.size());
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    weights[i] = std::exp((logits[candidates[i]] - mx) / sampler.temperature);
    total += weights[i];
  }
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    u -= weights[i];
    if (u < 0.0) return candidates[i];
  }
  return candidates.back();
}

std::vector<TokenId> sample_from(DecodeSession session, const SamplerConfig& sampler,
                                 const LogitTransform& transform) {
  sampler.validate();
  if (session.length() == 0) {
    throw Error(ErrorCode::kInvalidArgument, "sampling needs a non-empty prompt");
  }
  const std::size_t prompt_len = session.length();
  if (prompt_len >= session.context_length()) {
    throw Error(ErrorCode::kLengthOverflow, "prompt leaves no room in the context");
  }
  Rng rng(sampler.seed);
  std::vector<TokenId> out;
  std::vector<double> row;
  while (out.size() < sampler.max_new_tokens) {
    const auto& logits = session.logits();
    row.assign(logits.data(), logits.data() + logits.size());
    if (transform) transform(row);
    const TokenId tok = sample_token(row, sampler, rng);
    out.push_back(tok);
    if (tok == kEos) break;
    if (out.size() >= sampler.max_new_tokens) break;
    if (prompt_len + out.size() >= session.context_length()) break;
    session.push(tok);
  }
  return out;
}

std::vector<TokenId> sample(const ModelState& state, std::span<const TokenId> prompt,
                            const SamplerConfig& sampler, const LogitTransform& transform) {
  if (prompt.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "sampling needs a non-empty prompt");
  }
  if (prompt.size() >= state.config.context_length) {
    throw Error(ErrorCode::kLengthOverflow,
                "prompt of " + std::to_string(prompt.size()) +
                    " tokens leaves no room in context length " +
                    std::to_string(state.config.context_length));
  }
  DecodeSession session(state);
  session.prefill(prompt);
  return sample_from(std::move(session), sampler, transform);
}

}  // namespace rceg
