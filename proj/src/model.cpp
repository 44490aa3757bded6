#include "rceg/model.hpp"

#include <cmath>
#include <limits>

#include "rceg/errors.hpp"

namespace rceg {
namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu(double u) {
  return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + kGeluA * u * u * u)));
}

double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + kGeluA * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * u * u);
}

Matrix layer_norm(const Matrix& x, const Vector& gain, const Vector& bias, LayerNormCache& cache) {
  const auto rows = x.rows();
  const auto d = static_cast<double>(x.cols());
  cache.normalized.resize(rows, x.cols());
  cache.inv_std.resize(rows);
  Matrix y(rows, x.cols());
  for (Eigen::Index t = 0; t < rows; ++t) {
    const double mean = x.row(t).sum() / d;
    const auto centered = (x.row(t).array() - mean).matrix();
    const double var = centered.squaredNorm() / d;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std(t) = inv;
    cache.normalized.row(t) = centered * inv;
    y.row(t) = cache.normalized.row(t).cwiseProduct(gain.transpose()) + bias.transpose();
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Vector& gain, const LayerNormCache& cache) {
  const auto rows = dy.rows();
  const auto d = static_cast<double>(dy.cols());
  Matrix dx(rows, dy.cols());
  for (Eigen::Index t = 0; t < rows; ++t) {
    const Eigen::RowVectorXd dxhat = dy.row(t).cwiseProduct(gain.transpose());
    const double mean_d = dxhat.sum() / d;
    const double mean_dx = dxhat.dot(cache.normalized.row(t)) / d;
    dx.row(t) = cache.inv_std(t) *
                (dxhat.array() - mean_d - cache.normalized.row(t).array() * mean_dx).matrix();
  }
  return dx;
}

Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

LowRankAdapter zero_adapter(std::size_t d, std::size_t r) {
  return {Matrix::Zero(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(d)),
          Matrix::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(r))};
}

std::span<double> span_of(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
std::span<double> span_of(Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

void head_spans(std::optional<ScalarHead>& head, std::vector<std::span<double>>& out) {
  if (!head) return;
  out.push_back(span_of(head->weight));
  out.emplace_back(&head->bias, 1);
}

void adapter_spans(std::vector<LayerAdapters>& adapters, std::vector<std::span<double>>& out) {
  for (auto& layer : adapters) {
    out.push_back(span_of(layer.query.a));
    out.push_back(span_of(layer.query.b));
    out.push_back(span_of(layer.value.a));
    out.push_back(span_of(layer.value.b));
  }
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& why) { throw Error(ErrorCode::kValidation, why); };
  if (vocab_size < 1) fail("vocab_size must be positive");
  if (context_length < 2) fail("context_length must be at least 2");
  if (embed_dim == 0 || num_heads == 0) fail("embed_dim and num_heads must be positive");
  if (embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
  if (num_layers == 0) fail("num_layers must be positive");
  if (!std::isfinite(adapter_scale)) fail("adapter_scale must be finite");
}

ScalarHead zero_head(std::size_t dim) {
  return {Vector::Zero(static_cast<Eigen::Index>(dim)), 0.0};
}

ModelState ModelState::initialize(ModelConfig config, Vocab vocab, std::uint64_t seed) {
  config.vocab_size = vocab.size();
  config.validate();
  Rng rng(derive_seed(seed, 0x6d6f64656c));
  const auto d = static_cast<Eigen::Index>(config.embed_dim);
  const auto f = static_cast<Eigen::Index>(config.mlp_dim());
  const auto v = static_cast<Eigen::Index>(config.vocab_size);
  const auto ctx = static_cast<Eigen::Index>(config.context_length);
  const double fan_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double fan_f = 1.0 / std::sqrt(static_cast<double>(f));

  ModelState s;
  s.config = config;
  s.vocab = std::move(vocab);
  auto& b = s.base;
  b.token_embedding = normal_matrix(v, d, 1.0, rng);
  b.position_embedding = normal_matrix(ctx, d, 0.5, rng);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    LayerWeights L;
    L.wq = normal_matrix(d, d, fan_d, rng);
    L.wk = normal_matrix(d, d, fan_d, rng);
    L.wv = normal_matrix(d, d, fan_d, rng);
    L.wo = normal_matrix(d, d, fan_d, rng);
    L.ln1_gain = Vector::Ones(d);
    L.ln1_bias = Vector::Zero(d);
    L.ln2_gain = Vector::Ones(d);
    L.ln2_bias = Vector::Zero(d);
    L.w_up = normal_matrix(f, d, fan_d, rng);
    L.b_up = Vector::Zero(f);
    L.w_down = normal_matrix(d, f, fan_f, rng);
    L.b_down = Vector::Zero(d);
    b.layers.push_back(std::move(L));
  }
  b.lnf_gain = Vector::Ones(d);
  b.lnf_bias = Vector::Zero(d);
  b.unembedding = normal_matrix(v, d, 0.5 * fan_d, rng);
  b.unembedding_bias = Vector::Zero(v);

  if (config.adapter_rank > 0) {
    const auto r = static_cast<Eigen::Index>(config.adapter_rank);
    for (std::size_t l = 0; l < config.num_layers; ++l) {
      LayerAdapters ad;
      ad.query = {normal_matrix(r, d, fan_d, rng), Matrix::Zero(d, r)};
      ad.value = {normal_matrix(r, d, fan_d, rng), Matrix::Zero(d, r)};
      s.adapters.push_back(std::move(ad));
    }
  }
  return s;
}

ModelState ModelState::zeros(ModelConfig config) {
  config.validate();
  const auto d = static_cast<Eigen::Index>(config.embed_dim);
  const auto f = static_cast<Eigen::Index>(config.mlp_dim());
  const auto v = static_cast<Eigen::Index>(config.vocab_size);
  const auto ctx = static_cast<Eigen::Index>(config.context_length);
  ModelState s;
  s.config = config;
  auto& b = s.base;
  b.token_embedding = Matrix::Zero(v, d);
  b.position_embedding = Matrix::Zero(ctx, d);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    LayerWeights L;
    L.wq = L.wk = L.wv = L.wo = Matrix::Zero(d, d);
    L.ln1_gain = L.ln1_bias = L.ln2_gain = L.ln2_bias = Vector::Zero(d);
    L.w_up = Matrix::Zero(f, d);
    L.b_up = Vector::Zero(f);
    L.w_down = Matrix::Zero(d, f);
    L.b_down = Vector::Zero(d);
    b.layers.push_back(std::move(L));
  }
  b.lnf_gain = b.lnf_bias = Vector::Zero(d);
  b.unembedding = Matrix::Zero(v, d);
  b.unembedding_bias = Vector::Zero(v);
  for (std::size_t l = 0; l < config.num_layers && config.adapter_rank > 0; ++l) {
    s.adapters.push_back({zero_adapter(config.embed_dim, config.adapter_rank),
                          zero_adapter(config.embed_dim, config.adapter_rank)});
  }
  return s;
}

Gradients Gradients::zeros_like(const ModelState& state) {
  Gradients g;
  for (const auto& layer : state.adapters) {
    LayerAdapters z;
    z.query = {Matrix::Zero(layer.query.a.rows(), layer.query.a.cols()),
               Matrix::Zero(layer.query.b.rows(), layer.query.b.cols())};
    z.value = {Matrix::Zero(layer.value.a.rows(), layer.value.a.cols()),
               Matrix::Zero(layer.value.b.rows(), layer.value.b.cols())};
    g.adapters.push_back(std::move(z));
  }
  if (state.reward_head) g.reward_head = zero_head(static_cast<std::size_t>(state.reward_head->weight.size()));
  if (state.value_head) g.value_head = zero_head(static_cast<std::size_t>(state.value_head->weight.size()));
  return g;
}

void Gradients::add(const Gradients& other) {
  for (std::size_t l = 0; l < adapters.size(); ++l) {
    adapters[l].query.a += other.adapters[l].query.a;
    adapters[l].query.b += other.adapters[l].query.b;
    adapters[l].value.a += other.adapters[l].value.a;
    adapters[l].value.b += other.adapters[l].value.b;
  }
  if (reward_head && other.reward_head) {
    reward_head->weight += other.reward_head->weight;
    reward_head->bias += other.reward_head->bias;
  }
  if (value_head && other.value_head) {
    value_head->weight += other.value_head->weight;
    value_head->bias += other.value_head->bias;
  }
}

void Gradients::scale(double factor) {
  for (auto s : gradient_buffers(*this)) {
    for (auto& x : s) x *= factor;
  }
}

std::vector<std::span<double>> trainable_parameters(ModelState& state) {
  std::vector<std::span<double>> out;
  adapter_spans(state.adapters, out);
  head_spans(state.reward_head, out);
  head_spans(state.value_head, out);
  return out;
}

std::vector<std::span<double>> gradient_buffers(Gradients& grads) {
  std::vector<std::span<double>> out;
  adapter_spans(grads.adapters, out);
  head_spans(grads.reward_head, out);
  head_spans(grads.value_head, out);
  return out;
}

std::size_t count_elements(const std::vector<std::span<double>>& spans) {
  std::size_t n = 0;
  for (const auto& s : spans) n += s.size();
  return n;
}

std::size_t TensorView::size() const {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::vector<TensorView> tensor_views(ModelState& state) {
  std::vector<TensorView> out;
  auto add_m = [&](std::string name, Matrix& m) {
    out.push_back({std::move(name),
                   {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                   m.data()});
  };
  auto add_v = [&](std::string name, Vector& v) {
    out.push_back({std::move(name), {static_cast<std::size_t>(v.size())}, v.data()});
  };
  auto& b = state.base;
  add_m("token_embedding", b.token_embedding);
  add_m("position_embedding", b.position_embedding);
  for (std::size_t l = 0; l < b.layers.size(); ++l) {
    auto& L = b.layers[l];
    const auto p = "layers." + std::to_string(l) + ".";
    add_m(p + "wq", L.wq);
    add_m(p + "wk", L.wk);
    add_m(p + "wv", L.wv);
    add_m(p + "wo", L.wo);
    add_v(p + "ln1_gain", L.ln1_gain);
    add_v(p + "ln1_bias", L.ln1_bias);
    add_v(p + "ln2_gain", L.ln2_gain);
    add_v(p + "ln2_bias", L.ln2_bias);
    add_m(p + "w_up", L.w_up);
    add_v(p + "b_up", L.b_up);
    add_m(p + "w_down", L.w_down);
    add_v(p + "b_down", L.b_down);
  }
  add_v("lnf_gain", b.lnf_gain);
  add_v("lnf_bias", b.lnf_bias);
  add_m("unembedding", b.unembedding);
  add_v("unembedding_bias", b.unembedding_bias);
  for (std::size_t l = 0; l < state.adapters.size(); ++l) {
    auto& ad = state.adapters[l];
    const auto p = "adapters." + std::to_string(l) + ".";
    add_m(p + "query.a", ad.query.a);
    add_m(p + "query.b", ad.query.b);
    add_m(p + "value.a", ad.value.a);
    add_m(p + "value.b", ad.value.b);
  }
  auto add_head = [&](const std::string& name, std::optional<ScalarHead>& head) {
    if (!head) return;
    add_v(name + ".weight", head->weight);
    out.push_back({name + ".bias", {1}, &head->bias});
  };
  add_head("reward_head", state.reward_head);
  add_head("value_head", state.value_head);
  return out;
}

Matrix lora_apply(const Matrix& weight, const LowRankAdapter& adapter, double scale) {
  const auto& a = adapter.a;
  const auto& b = adapter.b;
  if (weight.rows() != b.rows() || weight.cols() != a.cols() || a.rows() != b.cols()) {
    throw Error(ErrorCode::kShapeMismatch,
                "adapter shapes do not conform: W " + std::to_string(weight.rows()) + "x" +
                    std::to_string(weight.cols()) + ", B " + std::to_string(b.rows()) + "x" +
                    std::to_string(b.cols()) + ", A " + std::to_string(a.rows()) + "x" +
                    std::to_string(a.cols()));
  }
  Matrix out = weight;
  if (scale != 0.0 && a.rows() > 0) out.noalias() += scale * (b * a);
  return out;
}

namespace {

Matrix effective(const Matrix& w, const std::vector<LayerAdapters>& adapters, std::size_t layer,
                 bool query, double scale) {
  if (adapters.empty()) return w;
  const auto& ad = query ? adapters[layer].query : adapters[layer].value;
  return lora_apply(w, ad, scale);
}

void check_ids(const ModelConfig& cfg, std::span<const TokenId> ids) {
  if (ids.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "forward requires at least one token");
  }
  if (ids.size() > cfg.context_length) {
    throw Error(ErrorCode::kLengthOverflow,
                "sequence of " + std::to_string(ids.size()) + " tokens exceeds context length " +
                    std::to_string(cfg.context_length));
  }
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw Error(ErrorCode::kInvalidArgument, "token id " + std::to_string(id) + " out of range");
    }
  }
}

}  // namespace

ForwardPass run_forward(const ModelState& state, std::span<const TokenId> ids,
                        bool compute_logits) {
  const auto& cfg = state.config;
  check_ids(cfg, ids);
  const auto T = static_cast<Eigen::Index>(ids.size());
  const auto d = static_cast<Eigen::Index>(cfg.embed_dim);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto& base = state.base;

  ForwardPass pass;
  pass.ids.assign(ids.begin(), ids.end());
  pass.layers.resize(cfg.num_layers);

  Matrix x(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    x.row(t) = base.token_embedding.row(ids[static_cast<std::size_t>(t)]) +
               base.position_embedding.row(t);
  }

  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto& L = base.layers[l];
    auto& c = pass.layers[l];
    c.attn_in = layer_norm(x, L.ln1_gain, L.ln1_bias, c.ln1);
    const Matrix wq = effective(L.wq, state.adapters, l, true, cfg.adapter_scale);
    const Matrix wv = effective(L.wv, state.adapters, l, false, cfg.adapter_scale);
    c.q.noalias() = c.attn_in * wq.transpose();
    c.k.noalias() = c.attn_in * L.wk.transpose();
    c.v.noalias() = c.attn_in * wv.transpose();
    c.attn_out.resize(T, d);
    c.probs.resize(cfg.num_heads);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * dh;
      Matrix scores = (c.q.middleCols(col, dh) * c.k.middleCols(col, dh).transpose()) * scale;
      for (Eigen::Index i = 0; i < T; ++i) {
        const double mx = scores.row(i).head(i + 1).maxCoeff();
        double total = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          const double e = std::exp(scores(i, j) - mx);
          scores(i, j) = e;
          total += e;
        }
        scores.row(i).head(i + 1) /= total;
        scores.row(i).tail(T - i - 1).setZero();
      }
      c.attn_out.middleCols(col, dh).noalias() = scores * c.v.middleCols(col, dh);
      c.probs[h] = std::move(scores);
    }
    x.noalias() += c.attn_out * L.wo.transpose();

    c.mlp_in = layer_norm(x, L.ln2_gain, L.ln2_bias, c.ln2);
    c.up.noalias() = c.mlp_in * L.w_up.transpose();
    c.up.rowwise() += L.b_up.transpose();
    c.act = c.up.unaryExpr([](double u) { return gelu(u); });
    x.noalias() += c.act * L.w_down.transpose();
    x.rowwise() += L.b_down.transpose();
  }

  pass.hidden = layer_norm(x, base.lnf_gain, base.lnf_bias, pass.lnf);
  if (compute_logits) {
    pass.logits.noalias() = pass.hidden * base.unembedding.transpose();
    pass.logits.rowwise() += base.unembedding_bias.transpose();
  }
  return pass;
}

Matrix forward(const ModelState& state, std::span<const TokenId> ids) {
  return run_forward(state, ids, true).logits;
}

void backward(const ModelState& state, const ForwardPass& pass, const Matrix& dlogits,
              const Matrix& dhidden, Gradients& grads) {
  if (!state.has_adapters()) return;
  const auto& cfg = state.config;
  const auto& base = state.base;
  const auto T = static_cast<Eigen::Index>(pass.ids.size());
  const auto d = static_cast<Eigen::Index>(cfg.embed_dim);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double s = cfg.adapter_scale;

  Matrix dh_final = Matrix::Zero(T, d);
  if (dlogits.size() > 0) dh_final.noalias() += dlogits * base.unembedding;
  if (dhidden.size() > 0) dh_final += dhidden;
  Matrix dx = layer_norm_backward(dh_final, base.lnf_gain, pass.lnf);

  for (std::size_t li = cfg.num_layers; li-- > 0;) {
    const auto& L = base.layers[li];
    const auto& c = pass.layers[li];

    // MLP block
    Matrix dact = dx * L.w_down;
    dact.array() *= c.up.unaryExpr([](double u) { return gelu_grad(u); }).array();
    const Matrix dmlp_in = dact * L.w_up;
    dx += layer_norm_backward(dmlp_in, L.ln2_gain, c.ln2);

    // Attention block
    const Matrix dattn = dx * L.wo;
    Matrix dq(T, d), dk(T, d), dv(T, d);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * dh;
      const Matrix& P = c.probs[h];
      const auto dout = dattn.middleCols(col, dh);
      Matrix dP = dout * c.v.middleCols(col, dh).transpose();
      dv.middleCols(col, dh).noalias() = P.transpose() * dout;
      const Eigen::VectorXd row_dot = (dP.array() * P.array()).rowwise().sum();
      Matrix dS = (P.array() * (dP.colwise() - row_dot).array()).matrix() * scale;
      dq.middleCols(col, dh).noalias() = dS * c.k.middleCols(col, dh);
      dk.middleCols(col, dh).noalias() = dS.transpose() * c.q.middleCols(col, dh);
    }

    const auto& ad = state.adapters[li];
    auto& g = grads.adapters[li];
    const Matrix dwq = dq.transpose() * c.attn_in;
    const Matrix dwv = dv.transpose() * c.attn_in;
    g.query.b.noalias() += s * (dwq * ad.query.a.transpose());
    g.query.a.noalias() += s * (ad.query.b.transpose() * dwq);
    g.value.b.noalias() += s * (dwv * ad.value.a.transpose());
    g.value.a.noalias() += s * (ad.value.b.transpose() * dwv);

    if (li == 0) break;
    const Matrix wq = lora_apply(L.wq, ad.query, s);
    const Matrix wv = lora_apply(L.wv, ad.value, s);
    Matrix dattn_in = dq * wq;
    dattn_in.noalias() += dk * L.wk;
    dattn_in.noalias() += dv * wv;
    dx += layer_norm_backward(dattn_in, L.ln1_gain, c.ln1);
  }
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

Vector softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

std::vector<double> response_log_probs(const ForwardPass& pass, std::size_t prompt_len) {
  if (prompt_len == 0 || prompt_len > pass.ids.size()) {
    throw Error(ErrorCode::kInvalidArgument, "prompt length out of range");
  }
  std::vector<double> out;
  out.reserve(pass.ids.size() - prompt_len);
  for (std::size_t i = prompt_len; i < pass.ids.size(); ++i) {
    const auto row = pass.logits.row(static_cast<Eigen::Index>(i - 1));
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    out.push_back(row(pass.ids[i]) - lse);
  }
  return out;
}

std::vector<double> sequence_log_prob(const ModelState& state, std::span<const TokenId> prompt,
                                      std::span<const TokenId> response) {
  if (prompt.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "prompt must contain at least one token");
  }
  if (prompt.size() + response.size() > state.config.context_length) {
    throw Error(ErrorCode::kLengthOverflow,
                "prompt+response of " + std::to_string(prompt.size() + response.size()) +
                    " tokens exceeds context length " +
                    std::to_string(state.config.context_length));
  }
  if (response.empty()) return {};
  std::vector<TokenId> ids(prompt.begin(), prompt.end());
  ids.insert(ids.end(), response.begin(), response.end());
  // The final token is only a target, never an input.
  const auto pass = run_forward(state, std::span(ids).first(ids.size() - 1), true);
  std::vector<double> out;
  out.reserve(response.size());
  for (std::size_t i = 0; i < response.size(); ++i) {
    const auto row = pass.logits.row(static_cast<Eigen::Index>(prompt.size() - 1 + i));
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    out.push_back(row(response[i]) - lse);
  }
  return out;
}

std::vector<TokenId> encode_prompt(const Vocab& vocab, std::string_view text) {
  std::vector<TokenId> ids{kBos};
  const auto body = vocab.tokenize(text);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

}  // namespace rceg
