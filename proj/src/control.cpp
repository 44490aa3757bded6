#include "rceg/control.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "rceg/errors.hpp"
#include "rceg/training.hpp"

namespace rceg {

void SteeringConfig::validate() const {
  if (num_variants == 0) throw Error(ErrorCode::kValidation, "num_variants must be positive");
  if (top_k == 0) throw Error(ErrorCode::kValidation, "top_k must be at least 1");
  if (num_final_candidates == 0) {
    throw Error(ErrorCode::kValidation, "num_final_candidates must be positive");
  }
  if (num_variants < num_final_candidates) {
    throw Error(ErrorCode::kValidation, "num_variants must be >= num_final_candidates");
  }
  if (!(boost >= 0.0) || !std::isfinite(boost)) {
    throw Error(ErrorCode::kValidation, "boost must be finite and >= 0");
  }
  if (!(suppress >= 0.0) || !std::isfinite(suppress)) {
    throw Error(ErrorCode::kValidation, "suppress must be finite and >= 0");
  }
  if (!(damping > 0.0 && damping < 1.0)) {
    throw Error(ErrorCode::kValidation, "damping must lie in (0, 1)");
  }
  if (!(rank_tolerance > 0.0)) throw Error(ErrorCode::kValidation, "rank_tolerance must be > 0");
  sampler.validate();
}

void to_json(nlohmann::json& j, const SteeringConfig& c) {
  j = nlohmann::json{{"num_variants", c.num_variants},
                     {"top_k", c.top_k},
                     {"num_final_candidates", c.num_final_candidates},
                     {"boost", c.boost},
                     {"suppress", c.suppress},
                     {"damping", c.damping},
                     {"rank_tolerance", c.rank_tolerance},
                     {"max_rank_iterations", c.max_rank_iterations},
                     {"temperature", c.sampler.temperature},
                     {"sampler_top_k", c.sampler.top_k},
                     {"max_new_tokens", c.sampler.max_new_tokens}};
  j["positive_threshold"] = c.positive_threshold ? nlohmann::json(*c.positive_threshold) : nullptr;
  j["negative_threshold"] = c.negative_threshold ? nlohmann::json(*c.negative_threshold) : nullptr;
}

namespace {

template <typename T>
void take(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::kValidation, std::string("steering field '") + key + "' has the wrong type");
  }
}

void take_count(const nlohmann::json& j, const char* key, std::size_t& out) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw Error(ErrorCode::kValidation,
                std::string("steering field '") + key + "' must be a non-negative integer");
  }
  out = v.get<std::size_t>();
}

}  // namespace

void apply_overrides(SteeringConfig& c, const nlohmann::json& j) {
  if (j.is_null()) return;
  if (!j.is_object()) throw Error(ErrorCode::kValidation, "steering overrides must be an object");
  take_count(j, "num_variants", c.num_variants);
  take_count(j, "top_k", c.top_k);
  take_count(j, "num_final_candidates", c.num_final_candidates);
  take(j, "boost", c.boost);
  take(j, "suppress", c.suppress);
  take(j, "damping", c.damping);
  take(j, "rank_tolerance", c.rank_tolerance);
  take_count(j, "max_rank_iterations", c.max_rank_iterations);
  take(j, "temperature", c.sampler.temperature);
  take_count(j, "sampler_top_k", c.sampler.top_k);
  take_count(j, "max_new_tokens", c.sampler.max_new_tokens);
  for (auto [key, slot] : {std::pair{"positive_threshold", &c.positive_threshold},
                            std::pair{"negative_threshold", &c.negative_threshold}}) {
    if (!j.contains(key) || j[key].is_null()) continue;
    double value = 0.0;
    take(j, key, value);
    *slot = value;
  }
}

// ---------------------------------------------------------------------------
// Classifier

namespace {

std::vector<std::string_view> words_of(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const auto start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) out.push_back(text.substr(start, i - start));
  }
  return out;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

double AttributeClassifier::logit(std::string_view text) const {
  double z = bias_;
  for (auto w : words_of(text)) {
    auto it = weights_.find(std::string(w));
    if (it != weights_.end()) z += it->second;
  }
  return z;
}

double AttributeClassifier::score(std::string_view text) const { return sigmoid(logit(text)); }

nlohmann::json AttributeClassifier::to_json() const {
  return nlohmann::json{{"bias", bias_}, {"weights", weights_}};
}

AttributeClassifier AttributeClassifier::from_json(const nlohmann::json& j) {
  try {
    auto weights = j.at("weights").get<std::map<std::string, double>>();
    const double bias = j.at("bias").get<double>();
    if (!std::isfinite(bias)) throw Error(ErrorCode::kNonFinite, "classifier bias is not finite");
    for (const auto& [k, v] : weights) {
      if (!std::isfinite(v)) throw Error(ErrorCode::kNonFinite, "classifier weight '" + k + "' is not finite");
    }
    return AttributeClassifier(std::move(weights), bias);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("classifier file: ") + e.what());
  }
}

void AttributeClassifier::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write classifier " + path.string());
  out << to_json().dump(1) << "\n";
  if (!out) throw Error(ErrorCode::kIo, "short write for classifier " + path.string());
}

AttributeClassifier AttributeClassifier::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open classifier " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, "classifier " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

double score_attribute(const AttributeClassifier& classifier, std::string_view text) {
  return classifier.score(text);
}

ClassifierTrainResult train_attribute_classifier(std::span<const LabeledText> data,
                                                 const ClassifierTrainConfig& config,
                                                 std::uint64_t seed) {
  std::size_t toxic = 0;
  for (const auto& d : data) toxic += d.toxic ? 1 : 0;
  if (toxic == 0 || toxic == data.size()) {
    throw Error(ErrorCode::kInvalidArgument, "classifier training needs both toxic and clean examples");
  }
  if (!(config.holdout_fraction >= 0.0 && config.holdout_fraction < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "holdout_fraction must lie in [0, 1)");
  }

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x636c6173));
  rng.shuffle(order);
  auto n_held = static_cast<std::size_t>(std::floor(config.holdout_fraction * data.size()));
  n_held = std::min(n_held, data.size() - 1);
  std::vector<std::size_t> train(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_held));
  std::vector<std::size_t> held(order.end() - static_cast<std::ptrdiff_t>(n_held), order.end());

  // Sparse count features over the training vocabulary.
  std::map<std::string, std::size_t> feature_index;
  for (auto i : train) {
    for (auto w : words_of(data[i].text)) feature_index.emplace(std::string(w), 0);
  }
  std::size_t next = 0;
  for (auto& [_, idx] : feature_index) idx = next++;
  std::vector<std::vector<std::pair<std::size_t, double>>> rows;
  std::vector<double> labels;
  for (auto i : train) {
    std::map<std::size_t, double> counts;
    for (auto w : words_of(data[i].text)) counts[feature_index.at(std::string(w))] += 1.0;
    rows.emplace_back(counts.begin(), counts.end());
    labels.push_back(data[i].toxic ? 0.0 : 1.0);
  }

  std::vector<double> w(feature_index.size(), 0.0), gw(w.size());
  double b = 0.0, gb = 0.0;
  const double n = static_cast<double>(rows.size());
  AdamOptimizer adam(config.learning_rate);
  const std::vector<std::span<double>> params{w, {&b, 1}};
  const std::vector<std::span<double>> grads{gw, {&gb, 1}};
  for (std::size_t it = 0; it < config.iterations; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    gb = 0.0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      double z = b;
      for (const auto& [f, x] : rows[r]) z += w[f] * x;
      const double err = sigmoid(z) - labels[r];
      gb += err / n;
      for (const auto& [f, x] : rows[r]) gw[f] += err * x / n;
    }
    for (std::size_t f = 0; f < w.size(); ++f) gw[f] += config.l2 * w[f];
    adam.step(params, grads);
  }

  std::map<std::string, double> weights;
  for (const auto& [word, idx] : feature_index) {
    if (w[idx] != 0.0) weights.emplace(word, w[idx]);
  }
  ClassifierTrainResult result{AttributeClassifier(std::move(weights), b), 0.0, 0.0, held.size()};
  auto accuracy = [&](const std::vector<std::size_t>& idx) {
    if (idx.empty()) return 0.0;
    std::size_t ok = 0;
    for (auto i : idx) {
      const bool predicted_clean = result.classifier.score(data[i].text) >= 0.5;
      ok += predicted_clean == !data[i].toxic ? 1 : 0;
    }
    return static_cast<double>(ok) / static_cast<double>(idx.size());
  };
  result.train_accuracy = accuracy(train);
  result.heldout_accuracy = accuracy(held);
  return result;
}

// ---------------------------------------------------------------------------
// Variants, graphs, ranking

std::vector<CandidateVariant> sample_variants(const ModelState& state,
                                              std::span<const TokenId> prompt,
                                              const AttributeClassifier& classifier,
                                              const SteeringConfig& config, std::uint64_t seed) {
  DecodeSession session(state);
  session.prefill(prompt);
  std::vector<CandidateVariant> out;
  out.reserve(config.num_variants);
  for (std::size_t i = 0; i < config.num_variants; ++i) {
    SamplerConfig sampler = config.sampler;
    sampler.seed = derive_seed(seed, kVariantStream, i);
    CandidateVariant v;
    v.ids = sample_from(session, sampler);
    v.text = state.vocab.detokenize(v.ids);
    v.mu = classifier.score(v.text);
    out.push_back(std::move(v));
  }
  return out;
}

AttributeGraphs build_attribute_graphs(std::span<const CandidateVariant> variants) {
  AttributeGraphs g;
  std::set<TokenId> nodes;
  for (const auto& v : variants) {
    if (!(v.mu >= 0.0 && v.mu <= 1.0)) {
      throw Error(ErrorCode::kInvalidArgument, "variant score must lie in [0, 1]");
    }
    nodes.insert(v.ids.begin(), v.ids.end());
    for (std::size_t t = 1; t < v.ids.size(); ++t) {
      const Edge e{v.ids[t - 1], v.ids[t]};
      g.positive.weights[e] += v.mu;
      g.negative.weights[e] += 1.0 - v.mu;
      g.transition_counts[e] += 1;
    }
  }
  g.positive.nodes.assign(nodes.begin(), nodes.end());
  g.negative.nodes = g.positive.nodes;
  return g;
}

TokenRanking rank_tokens(const AttributeGraph& graph, std::size_t top_k, double damping,
                         double tolerance, std::size_t max_iterations) {
  if (graph.nodes.empty()) throw Error(ErrorCode::kInvalidArgument, "cannot rank an empty graph");
  const std::size_t n = graph.nodes.size();
  auto index_of = [&](TokenId id) {
    auto it = std::lower_bound(graph.nodes.begin(), graph.nodes.end(), id);
    if (it == graph.nodes.end() || *it != id) {
      throw Error(ErrorCode::kInvalidArgument, "edge endpoint missing from node set");
    }
    return static_cast<std::size_t>(it - graph.nodes.begin());
  };
  struct Link {
    std::size_t from, to;
    double w;
  };
  std::vector<Link> links;
  std::vector<double> out_weight(n, 0.0);
  for (const auto& [e, w] : graph.weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw Error(ErrorCode::kInvalidArgument, "edge weights must be finite and >= 0");
    }
    if (w == 0.0) continue;
    links.push_back({index_of(e.first), index_of(e.second), w});
    out_weight[links.back().from] += w;
  }

  TokenRanking r;
  r.nodes = graph.nodes;
  std::vector<double> s(n, 1.0 / static_cast<double>(n)), next(n);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (r.iterations = 0; r.iterations < max_iterations;) {
    double dangling = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (out_weight[i] == 0.0) dangling += s[i];
    }
    std::fill(next.begin(), next.end(), (1.0 - damping) * inv_n + damping * dangling * inv_n);
    for (const auto& l : links) next[l.to] += damping * s[l.from] * l.w / out_weight[l.from];
    double diff = 0.0;
    for (std::size_t i = 0; i < n; ++i) diff += std::abs(next[i] - s[i]);
    s.swap(next);
    ++r.iterations;
    if (diff < tolerance) break;
  }
  r.scores = s;

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < n; ++i) {
    if (!is_special(graph.nodes[i])) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (s[a] != s[b]) return s[a] > s[b];
    return graph.nodes[a] < graph.nodes[b];
  });
  for (std::size_t i = 0; i < order.size() && i < top_k; ++i) r.top.push_back(graph.nodes[order[i]]);
  return r;
}

// ---------------------------------------------------------------------------
// Steering

LogitTransform make_steering_transform(std::vector<TokenId> positive,
                                       std::vector<TokenId> negative, double boost,
                                       double suppress) {
  return [positive = std::move(positive), negative = std::move(negative), boost,
          suppress](std::span<double> row) {
    for (auto id : positive) {
      if (id >= 0 && static_cast<std::size_t>(id) < row.size()) row[static_cast<std::size_t>(id)] += boost;
    }
    for (auto id : negative) {
      if (id >= 0 && static_cast<std::size_t>(id) < row.size()) row[static_cast<std::size_t>(id)] -= suppress;
    }
  };
}

Vector steered_distribution(const Vector& logits, std::span<const TokenId> positive,
                            std::span<const TokenId> negative, double boost, double suppress) {
  Vector z = logits;
  const auto hook = make_steering_transform({positive.begin(), positive.end()},
                                            {negative.begin(), negative.end()}, boost, suppress);
  hook(std::span<double>(z.data(), static_cast<std::size_t>(z.size())));
  return softmax(z);
}

SteeringOutcome generate_steered_candidates(const ModelState& state,
                                            std::span<const TokenId> prompt,
                                            const AttributeClassifier& classifier,
                                            const SteeringConfig& config, std::uint64_t seed) {
  config.validate();
  SteeringOutcome out;
  out.variants = sample_variants(state, prompt, classifier, config, seed);
  const auto graphs = build_attribute_graphs(out.variants);
  out.positive_tokens = rank_tokens(graphs.positive, config.top_k, config.damping,
                                    config.rank_tolerance, config.max_rank_iterations)
                            .top;
  out.negative_tokens = rank_tokens(graphs.negative, config.top_k, config.damping,
                                    config.rank_tolerance, config.max_rank_iterations)
                            .top;
  const auto hook =
      make_steering_transform(out.positive_tokens, out.negative_tokens, config.boost, config.suppress);

  DecodeSession session(state);
  session.prefill(prompt);
  for (std::size_t c = 0; c < config.num_final_candidates; ++c) {
    SamplerConfig sampler = config.sampler;
    sampler.seed = derive_seed(seed, kCandidateStream, c);
    CandidateVariant cand;
    cand.ids = sample_from(session, sampler, hook);
    cand.text = state.vocab.detokenize(cand.ids);
    cand.mu = classifier.score(cand.text);
    out.candidates.push_back(std::move(cand));
  }
  return out;
}

std::size_t argmax_first(std::span<const double> scores) {
  if (scores.empty()) throw Error(ErrorCode::kInvalidArgument, "no candidates to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

Selection select_final(std::span<const std::string> candidates,
                       const AttributeClassifier& classifier) {
  Selection s;
  for (const auto& c : candidates) s.scores.push_back(classifier.score(c));
  s.index = argmax_first(s.scores);
  return s;
}

nlohmann::json steering_report(const SteeringOutcome& outcome, const Selection& selection,
                               const Vocab& vocab) {
  auto tokens = [&](const std::vector<TokenId>& ids) {
    auto arr = nlohmann::json::array();
    for (auto id : ids) arr.push_back({{"id", id}, {"token", vocab.token(id)}});
    return arr;
  };
  nlohmann::json j;
  j["variant_count"] = outcome.variants.size();
  auto mu = nlohmann::json::array();
  for (const auto& v : outcome.variants) mu.push_back(v.mu);
  j["variant_mu"] = mu;
  j["positive_tokens"] = tokens(outcome.positive_tokens);
  j["negative_tokens"] = tokens(outcome.negative_tokens);
  j["candidate_scores"] = selection.scores;
  j["selected_index"] = selection.index;
  return j;
}

}  // namespace rceg
