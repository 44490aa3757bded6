#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rceg/corpus.hpp"
#include "rceg/errors.hpp"
#include "rceg/model.hpp"

namespace rceg {

namespace detail {

template <typename T>
std::map<std::vector<T>, std::size_t> ngram_counts(std::span<const T> seq, std::size_t n) {
  std::map<std::vector<T>, std::size_t> counts;
  if (n == 0 || seq.size() < n) return counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) {
    ++counts[std::vector<T>(seq.begin() + static_cast<std::ptrdiff_t>(i),
                            seq.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

template <typename T>
std::size_t clipped_overlap(const std::map<std::vector<T>, std::size_t>& hyp,
                            const std::map<std::vector<T>, std::size_t>& ref) {
  std::size_t total = 0;
  for (const auto& [gram, c] : hyp) {
    auto it = ref.find(gram);
    if (it != ref.end()) total += std::min(c, it->second);
  }
  return total;
}

}  // namespace detail

struct BleuOptions {
  std::size_t max_n = 4;
  bool smoothing = false;  // add-one on orders above 1
};

/// Geometric mean of clipped n-gram precisions with uniform weights, times
/// the brevity penalty min(1, exp(1 - r/c)). Any zero precision gives 0.
template <typename T>
double bleu(std::span<const T> hypothesis, std::span<const T> reference, BleuOptions options = {}) {
  if (options.max_n == 0) throw Error(ErrorCode::kInvalidArgument, "bleu: max_n must be >= 1");
  if (hypothesis.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= options.max_n; ++n) {
    const auto hyp = detail::ngram_counts(hypothesis, n);
    const auto ref = detail::ngram_counts(reference, n);
    double matches = static_cast<double>(detail::clipped_overlap(hyp, ref));
    double total = hypothesis.size() >= n ? static_cast<double>(hypothesis.size() - n + 1) : 0.0;
    if (options.smoothing && n > 1) {
      matches += 1.0;
      total += 1.0;
    }
    if (matches == 0.0 || total == 0.0) return 0.0;
    log_sum += std::log(matches / total) / static_cast<double>(options.max_n);
  }
  const double c = static_cast<double>(hypothesis.size());
  const double r = static_cast<double>(reference.size());
  const double bp = std::min(1.0, std::exp(1.0 - r / c));
  return bp * std::exp(log_sum);
}

template <typename T>
double bleu(const std::vector<T>& hypothesis, const std::vector<T>& reference,
            BleuOptions options = {}) {
  return bleu(std::span<const T>(hypothesis), std::span<const T>(reference), options);
}

struct RougeScore {
  double value = 0.0;
  bool defined = true;  // false when the reference is too short
};

/// Clipped n-gram recall against the reference.
template <typename T>
RougeScore rouge_n(std::span<const T> hypothesis, std::span<const T> reference, std::size_t n) {
  if (n == 0) throw Error(ErrorCode::kInvalidArgument, "rouge_n: n must be >= 1");
  if (reference.size() < n) return {0.0, false};
  const auto hyp = detail::ngram_counts(hypothesis, n);
  const auto ref = detail::ngram_counts(reference, n);
  const double overlap = static_cast<double>(detail::clipped_overlap(ref, hyp));
  return {overlap / static_cast<double>(reference.size() - n + 1), true};
}

template <typename T>
RougeScore rouge_n(const std::vector<T>& hypothesis, const std::vector<T>& reference, std::size_t n) {
  return rouge_n(std::span<const T>(hypothesis), std::span<const T>(reference), n);
}

template <typename T>
std::size_t lcs_length(std::span<const T> a, std::span<const T> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Longest-common-subsequence recall: LCS / |reference|.
template <typename T>
RougeScore rouge_l(std::span<const T> hypothesis, std::span<const T> reference) {
  if (reference.empty()) return {0.0, false};
  return {static_cast<double>(lcs_length(hypothesis, reference)) /
              static_cast<double>(reference.size()),
          true};
}

template <typename T>
RougeScore rouge_l(const std::vector<T>& hypothesis, const std::vector<T>& reference) {
  return rouge_l(std::span<const T>(hypothesis), std::span<const T>(reference));
}

/// exp of the mean negative log-probability of `sequence`, each token
/// conditioned on bos plus its prefix.
double perplexity(const ModelState& state, std::span<const TokenId> sequence);

/// Same, for `response` conditioned on `prompt`.
double conditional_perplexity(const ModelState& state, std::span<const TokenId> prompt,
                              std::span<const TokenId> response);

// ---------------------------------------------------------------------------
// Batch evaluation

struct SampleMetrics {
  std::size_t id = 0;
  double bleu4 = 0.0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
  double ppl = 0.0;
};

struct MetricReport {
  double bleu4 = 0.0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
  double ppl = 0.0;
  std::vector<SampleMetrics> samples;
};

struct EvalOptions {
  SamplerConfig sampler = SamplerConfig::greedy(200);
  /// When set, these texts are scored instead of model generations.
  std::optional<std::vector<std::string>> hypotheses;
};

/// Generates a response for each prompt and scores it against the matching
/// reference on tokenizer tokens. Perplexity is that of the reference
/// (plus eos) given the prompt.
MetricReport evaluate_run(const ModelState& state, std::span<const PromptRecord> prompts,
                          std::span<const std::string> references, const EvalOptions& options = {});

/// Tab-separated: header, one row per sample, then a "mean" row.
std::string format_report(const MetricReport& report);
void write_report(const MetricReport& report, const std::filesystem::path& path);
MetricReport parse_report(std::string_view text);

nlohmann::json report_to_json(const MetricReport& report);

}  // namespace rceg
