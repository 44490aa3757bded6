#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rceg/random.hpp"
#include "rceg/tokenizer.hpp"

namespace rceg {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct ModelConfig {
  std::size_t vocab_size = 2048;
  std::size_t context_length = 256;
  std::size_t embed_dim = 128;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t adapter_rank = 8;  // 0 disables adapters
  double adapter_scale = 2.0;

  void validate() const;
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t mlp_dim() const { return 4 * embed_dim; }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  Matrix wq, wk, wv, wo;  // d x d, applied as x * W^T
  Vector ln1_gain, ln1_bias;
  Vector ln2_gain, ln2_bias;
  Matrix w_up;  // 4d x d
  Vector b_up;
  Matrix w_down;  // d x 4d
  Vector b_down;
};

/// Frozen pretrained-model stand-in. Never written by training stages.
struct BaseWeights {
  Matrix token_embedding;     // V x d
  Matrix position_embedding;  // ctx x d
  std::vector<LayerWeights> layers;
  Vector lnf_gain, lnf_bias;
  Matrix unembedding;  // V x d
  Vector unembedding_bias;
};

/// W_eff = W + scale * B * A with A: r x d and B: d x r.
struct LowRankAdapter {
  Matrix a;
  Matrix b;
};

/// Adapters on the query and value projections of one layer.
struct LayerAdapters {
  LowRankAdapter query;
  LowRankAdapter value;
};

/// score = weight . h + bias over a final hidden state.
struct ScalarHead {
  Vector weight;
  double bias = 0.0;
};

struct ModelState {
  ModelConfig config;
  Vocab vocab;
  BaseWeights base;
  std::vector<LayerAdapters> adapters;  // empty when adapter_rank == 0
  std::optional<ScalarHead> reward_head;
  std::optional<ScalarHead> value_head;

  /// Random base weights (fan-in scaled normals, unit LayerNorm gains),
  /// adapters with random A and zero B. vocab_size is taken from `vocab`.
  static ModelState initialize(ModelConfig config, Vocab vocab, std::uint64_t seed);

  /// Every parameter zero: the model predicts the uniform distribution.
  static ModelState zeros(ModelConfig config);

  bool has_adapters() const { return !adapters.empty(); }
};

ScalarHead zero_head(std::size_t dim);

/// Same layout as the trainable part of ModelState.
struct Gradients {
  std::vector<LayerAdapters> adapters;
  std::optional<ScalarHead> reward_head;
  std::optional<ScalarHead> value_head;

  static Gradients zeros_like(const ModelState& state);
  void add(const Gradients& other);
  void scale(double factor);
};

/// Adapter and head parameters in a fixed order (layer, query A, query B,
/// value A, value B, ..., reward head, value head).
std::vector<std::span<double>> trainable_parameters(ModelState& state);
std::vector<std::span<double>> gradient_buffers(Gradients& grads);
std::size_t count_elements(const std::vector<std::span<double>>& spans);

/// Named view of one tensor for serialization.
struct TensorView {
  std::string name;
  std::vector<std::size_t> shape;
  double* data;
  std::size_t size() const;
};

/// All tensors of the state (base, adapters, heads) in checkpoint order.
std::vector<TensorView> tensor_views(ModelState& state);

Matrix lora_apply(const Matrix& weight, const LowRankAdapter& adapter, double scale);

// ---------------------------------------------------------------------------
// Forward / backward

struct LayerNormCache {
  Matrix normalized;  // xhat
  Vector inv_std;
};

struct LayerCache {
  LayerNormCache ln1;
  Matrix attn_in;  // ln1 output
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, T x T (lower triangular)
  Matrix attn_out;            // concatenated heads before wo
  LayerNormCache ln2;
  Matrix mlp_in;
  Matrix up;   // pre-activation
  Matrix act;  // gelu(up)
};

struct ForwardPass {
  std::vector<TokenId> ids;
  std::vector<LayerCache> layers;
  LayerNormCache lnf;
  Matrix hidden;  // final LayerNorm output, T x d
  Matrix logits;  // T x V, empty when not requested
};

/// Full causal forward pass. Throws kLengthOverflow beyond context_length.
ForwardPass run_forward(const ModelState& state, std::span<const TokenId> ids,
                        bool compute_logits = true);

Matrix forward(const ModelState& state, std::span<const TokenId> ids);

/// Backpropagates dL/dlogits (may be empty) plus an extra dL/dhidden (may be
/// empty) into adapter gradients. Head gradients are the caller's job.
void backward(const ModelState& state, const ForwardPass& pass, const Matrix& dlogits,
              const Matrix& dhidden, Gradients& grads);

/// Row-wise numerically stable log-softmax.
Matrix log_softmax_rows(const Matrix& logits);
Vector softmax(const Vector& logits);

/// log p(response_t | prompt, response_<t) for each response token.
/// `prompt` must be non-empty (it normally starts with kBos).
std::vector<double> sequence_log_prob(const ModelState& state, std::span<const TokenId> prompt,
                                      std::span<const TokenId> response);

/// Token log-probs read from an existing forward pass whose ids are
/// prompt ++ response.
std::vector<double> response_log_probs(const ForwardPass& pass, std::size_t prompt_len);

/// bos + tokenize(text).
std::vector<TokenId> encode_prompt(const Vocab& vocab, std::string_view text);

// ---------------------------------------------------------------------------
// Sampling

struct SamplerConfig {
  double temperature = 1.0;
  std::size_t top_k = 0;  // 0 disables; 1 is greedy
  std::size_t max_new_tokens = 200;
  std::uint64_t seed = 0;

  void validate() const;
  static SamplerConfig greedy(std::size_t max_new_tokens);
};

/// Adjusts one logits row in place before the sampling distribution is formed.
using LogitTransform = std::function<void(std::span<double>)>;

/// Incremental decoder with cached keys and values. Copyable, so a prefilled
/// prompt can be shared by several continuations.
class DecodeSession {
 public:
  explicit DecodeSession(const ModelState& state);

  /// Appends one token and returns the logits row predicting the next one.
  const Vector& push(TokenId token);
  void prefill(std::span<const TokenId> tokens);

  std::size_t length() const { return length_; }
  std::size_t context_length() const { return state_->config.context_length; }
  const Vector& logits() const { return logits_; }

 private:
  const ModelState* state_;
  std::vector<Matrix> weff_q_, weff_v_;  // adapter-merged projections
  std::vector<Matrix> keys_, values_;
  std::size_t length_ = 0;
  Vector logits_;
};

/// Draws one token id from an (already transformed) logits row using the
/// temperature and top-k settings. top_k == 1 is argmax, lowest id on ties.
TokenId sample_token(std::span<const double> logits, const SamplerConfig& sampler, Rng& rng);

/// Generates up to max_new_tokens after `prompt`, stopping after kEos (which
/// is included) or at the context limit.
std::vector<TokenId> sample(const ModelState& state, std::span<const TokenId> prompt,
                            const SamplerConfig& sampler, const LogitTransform& transform = {});

/// Continues from an already prefilled session.
std::vector<TokenId> sample_from(DecodeSession session, const SamplerConfig& sampler,
                                 const LogitTransform& transform = {});

}  // namespace rceg
