#include "rceg/stages.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "rceg/checkpoint.hpp"
#include "rceg/errors.hpp"

namespace rceg {

nlohmann::json to_json(const StepRecord& r) {
  nlohmann::json j{{"step", r.step}, {"stage", r.stage}, {"loss", r.loss}};
  j["mean_reward"] = r.mean_reward ? nlohmann::json(*r.mean_reward) : nullptr;
  j["mean_kl"] = r.mean_kl ? nlohmann::json(*r.mean_kl) : nullptr;
  j["wall_ms"] = r.wall_ms;
  return j;
}

StepRecord step_from_json(const nlohmann::json& j) {
  StepRecord r;
  r.step = j.at("step").get<std::size_t>();
  r.stage = j.at("stage").get<std::string>();
  r.loss = j.at("loss").get<double>();
  if (!j.at("mean_reward").is_null()) r.mean_reward = j.at("mean_reward").get<double>();
  if (!j.at("mean_kl").is_null()) r.mean_kl = j.at("mean_kl").get<double>();
  r.wall_ms = j.at("wall_ms").get<double>();
  return r;
}

void write_training_log(std::span<const StepRecord> records, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write training log " + path.string());
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  if (!out) throw Error(ErrorCode::kIo, "short write for training log " + path.string());
}

std::vector<StepRecord> read_training_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open training log " + path.string());
  std::vector<StepRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(step_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw RecordError(ErrorCode::kParse, n, "", e.what());
    }
  }
  return out;
}

Vocab build_vocab(std::span<const InstructionTriplet> data, std::size_t max_size) {
  std::vector<std::string> texts;
  texts.reserve(2 * data.size());
  for (const auto& t : data) {
    texts.push_back(render_prompt(t.instruction, t.constraints));
    texts.push_back(t.reference);
  }
  return Vocab::build(texts, max_size);
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double heldout_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  auto held = static_cast<std::size_t>(std::ceil(heldout_fraction * static_cast<double>(n)));
  if (n >= 2) held = std::clamp<std::size_t>(held, 1, n - 1);
  else held = 0;
  std::vector<std::size_t> train(order.begin(), order.end() - static_cast<std::ptrdiff_t>(held));
  std::vector<std::size_t> test(order.end() - static_cast<std::ptrdiff_t>(held), order.end());
  std::sort(test.begin(), test.end());
  return {std::move(train), std::move(test)};
}

double corpus_perplexity(const ModelState& state, std::span<const SftExample> examples) {
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : examples) {
    for (double lp : sequence_log_prob(state, ex.prompt, ex.response)) nll -= lp;
    tokens += ex.response.size();
  }
  if (tokens == 0) throw Error(ErrorCode::kInvalidArgument, "no tokens to score");
  return std::exp(nll / static_cast<double>(tokens));
}

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::uint64_t kSplitStream = 0x73706c74;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void check_finite(double loss, std::string_view stage, std::size_t step) {
  if (!std::isfinite(loss)) {
    throw Error(ErrorCode::kNonFinite, std::string(stage) + " loss became non-finite at step " +
                                           std::to_string(step));
  }
}

std::vector<double> target_log_probs(const ForwardPass& pass, std::size_t prompt_len,
                                     std::span<const TokenId> response) {
  std::vector<double> out;
  out.reserve(response.size());
  for (std::size_t i = 0; i < response.size(); ++i) {
    const auto r = pass.logits.row(static_cast<Eigen::Index>(prompt_len - 1 + i));
    const double mx = r.maxCoeff();
    const double lse = mx + std::log((r.array() - mx).exp().sum());
    out.push_back(r(response[i]) - lse);
  }
  return out;
}

// Runs `epochs` shuffled passes over `train`, one optimizer step per chunk of
// examples_per_step examples.
template <typename Example, typename LossFn>
std::vector<double> optimize(ModelState& state, const OptimConfig& optim,
                             const std::vector<Example>& train, std::string_view stage,
                             std::uint64_t seed, std::vector<StepRecord>& log, LossFn loss_fn) {
  AdamOptimizer adam(optim.learning_rate);
  Rng rng(derive_seed(seed, 0x73687566));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> epoch_losses;
  const std::size_t per_step = optim.examples_per_step();
  for (std::size_t epoch = 0; epoch < optim.epochs; ++epoch) {
    rng.shuffle(order);
    double weighted = 0.0;
    for (std::size_t start = 0; start < order.size(); start += per_step) {
      const auto t0 = Clock::now();
      std::vector<Example> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + per_step); ++i) {
        batch.push_back(train[order[i]]);
      }
      auto result = loss_fn(state, std::span<const Example>(batch));
      check_finite(result.loss, stage, log.size());
      auto params = trainable_parameters(state);
      adam.step(params, gradient_buffers(result.grads), optim.max_grad_norm);
      weighted += result.loss * static_cast<double>(batch.size());
      log.push_back({log.size(), std::string(stage), result.loss, std::nullopt, std::nullopt,
                     ms_since(t0)});
    }
    epoch_losses.push_back(weighted / static_cast<double>(order.size()));
  }
  return epoch_losses;
}

}  // namespace

SftResult run_sft(const PipelineConfig& config, std::span<const InstructionTriplet> data,
                  std::uint64_t seed) {
  if (data.size() < 2) throw Error(ErrorCode::kInvalidArgument, "SFT needs at least 2 records");
  ModelConfig mc = config.model;
  auto vocab = build_vocab(data, config.vocab_max);
  mc.vocab_size = vocab.size();
  SftResult out{ModelState::initialize(mc, std::move(vocab), seed), {}, {}, 0.0, 0.0, {}};

  std::vector<SftExample> examples;
  examples.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    try {
      examples.push_back(make_sft_example(out.model, data[i]));
    } catch (const Error& e) {
      throw RecordError(e.code(), i + 1, "reference", e.what());
    }
  }
  auto [train_idx, held_idx] = split_indices(data.size(), config.sft_holdout,
                                             derive_seed(seed, kSplitStream, 0));
  std::vector<SftExample> train, held;
  for (auto i : train_idx) train.push_back(examples[i]);
  for (auto i : held_idx) held.push_back(examples[i]);
  out.heldout = held_idx;

  out.heldout_ppl_before = corpus_perplexity(out.model, held);
  out.epoch_losses = optimize(out.model, config.sft, train, "sft", seed, out.log,
                              [](const ModelState& s, std::span<const SftExample> b) {
                                return sft_loss(s, b);
                              });
  out.heldout_ppl_after = corpus_perplexity(out.model, held);
  return out;
}

double pairwise_accuracy(const ModelState& rm, std::span<const PairExample> pairs) {
  if (pairs.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& p : pairs) {
    ok += reward_score(rm, p.prompt, p.chosen) > reward_score(rm, p.prompt, p.rejected) ? 1 : 0;
  }
  return static_cast<double>(ok) / static_cast<double>(pairs.size());
}

RmResult run_rm(const PipelineConfig& config, const ModelState& sft,
                std::span<const PreferencePair> data, std::uint64_t seed) {
  if (data.size() < 2) throw Error(ErrorCode::kInvalidArgument, "RM needs at least 2 pairs");
  RmResult out{sft, {}, {}, 0.0, 0.0, {}};
  out.model.reward_head = zero_head(sft.config.embed_dim);
  out.model.value_head.reset();

  std::vector<PairExample> examples;
  for (std::size_t i = 0; i < data.size(); ++i) {
    try {
      examples.push_back(make_pair_example(out.model, data[i]));
    } catch (const Error& e) {
      throw RecordError(e.code(), i + 1, "chosen", e.what());
    }
  }
  auto [train_idx, held_idx] = split_indices(data.size(), config.rm_holdout,
                                             derive_seed(seed, kSplitStream, 1));
  std::vector<PairExample> train, held;
  for (auto i : train_idx) train.push_back(examples[i]);
  for (auto i : held_idx) held.push_back(examples[i]);
  out.heldout = held_idx;

  out.epoch_losses = optimize(out.model, config.rm, train, "rm", derive_seed(seed, 0x726d), out.log,
                              [](const ModelState& s, std::span<const PairExample> b) {
                                return rm_batch_loss(s, b);
                              });
  out.train_accuracy = pairwise_accuracy(out.model, train);
  out.heldout_accuracy = pairwise_accuracy(out.model, held);
  return out;
}

Trajectory make_trajectory(const ModelState& policy, const ModelState& reference,
                           const ModelState& reward_model, std::span<const TokenId> prompt,
                           const PpoConfig& config, std::uint64_t seed) {
  Trajectory tr;
  tr.prompt.assign(prompt.begin(), prompt.end());
  SamplerConfig sampler = config.rollout;
  sampler.seed = seed;
  tr.response = sample(policy, prompt, sampler);

  std::vector<TokenId> ids = tr.prompt;
  ids.insert(ids.end(), tr.response.begin(), tr.response.end() - 1);
  const auto pass = run_forward(policy, ids, true);
  tr.old_log_probs = target_log_probs(pass, tr.prompt.size(), tr.response);
  tr.values = token_values(policy, pass, tr.prompt.size());
  tr.ref_log_probs = sequence_log_prob(reference, tr.prompt, tr.response);
  tr.score = reward_score(reward_model, tr.prompt, tr.response);
  tr.rewards = kl_penalized_rewards(tr.score, tr.old_log_probs, tr.ref_log_probs, config.kl_coef);
  auto est = estimate_advantages(tr.rewards, tr.values, config.gamma, config.gae_lambda);
  tr.advantages = std::move(est.advantages);
  tr.returns = std::move(est.returns);
  return tr;
}

PpoResult run_ppo(const PipelineConfig& config, const ModelState& sft, const ModelState& reward_model,
                  std::span<const PromptRecord> prompts, std::uint64_t seed) {
  if (prompts.empty()) throw Error(ErrorCode::kInvalidArgument, "PPO needs prompts");
  if (!reward_model.reward_head) {
    throw Error(ErrorCode::kMissingPrerequisite, "reward model checkpoint has no reward head");
  }
  const auto& pc = config.ppo;
  PpoResult out{sft, {}};
  out.model.reward_head.reset();
  out.model.value_head = zero_head(sft.config.embed_dim);

  std::vector<std::vector<TokenId>> encoded;
  for (const auto& p : prompts) {
    encoded.push_back(encode_prompt(sft.vocab, render_prompt(p.instruction, p.constraints)));
  }
  AdamOptimizer adam(pc.learning_rate);
  Rng rng(derive_seed(seed, 0x70706f));
  std::vector<std::size_t> order(prompts.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t rollout_index = 0;

  for (std::size_t epoch = 0; epoch < pc.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += pc.rollouts_per_batch) {
      const auto t0 = Clock::now();
      std::vector<Trajectory> batch;
      double score_sum = 0.0, kl_sum = 0.0;
      std::size_t kl_tokens = 0;
      for (std::size_t i = start; i < std::min(order.size(), start + pc.rollouts_per_batch); ++i) {
        auto tr = make_trajectory(out.model, sft, reward_model, encoded[order[i]], pc,
                                  derive_seed(seed, 0x726f6c6c, rollout_index++));
        score_sum += tr.score;
        for (std::size_t t = 0; t < tr.old_log_probs.size(); ++t) {
          kl_sum += tr.old_log_probs[t] - tr.ref_log_probs[t];
        }
        kl_tokens += tr.old_log_probs.size();
        batch.push_back(std::move(tr));
      }
      if (pc.whiten_advantages) {
        double sum = 0.0, sq = 0.0;
        std::size_t n = 0;
        for (const auto& tr : batch) {
          for (double a : tr.advantages) {
            sum += a;
            sq += a * a;
            ++n;
          }
        }
        const double mean = sum / static_cast<double>(n);
        const double var = std::max(0.0, sq / static_cast<double>(n) - mean * mean);
        const double inv = 1.0 / (std::sqrt(var) + 1e-8);
        for (auto& tr : batch) {
          for (double& a : tr.advantages) a = (a - mean) * inv;
        }
      }
      double loss = 0.0;
      for (std::size_t e = 0; e < pc.ppo_epochs; ++e) {
        auto result = ppo_loss(out.model, batch, pc.clip_epsilon, {1.0, pc.value_coef});
        check_finite(result.loss, "ppo", out.log.size());
        if (e == 0) loss = result.loss;
        auto params = trainable_parameters(out.model);
        adam.step(params, gradient_buffers(result.grads), pc.max_grad_norm);
      }
      out.log.push_back({out.log.size(), "ppo", loss,
                         score_sum / static_cast<double>(batch.size()),
                         kl_tokens ? kl_sum / static_cast<double>(kl_tokens) : 0.0, ms_since(t0)});
    }
  }
  return out;
}

double mean_policy_score(const ModelState& policy, const ModelState& reward_model,
                         std::span<const PromptRecord> prompts, const SamplerConfig& sampler,
                         std::uint64_t seed) {
  if (prompts.empty()) throw Error(ErrorCode::kInvalidArgument, "no prompts to score");
  double total = 0.0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto prompt =
        encode_prompt(policy.vocab, render_prompt(prompts[i].instruction, prompts[i].constraints));
    SamplerConfig s = sampler;
    s.seed = derive_seed(seed, kEvalStream, i);
    total += reward_score(reward_model, prompt, sample(policy, prompt, s));
  }
  return total / static_cast<double>(prompts.size());
}

double mean_policy_kl(const ModelState& policy, const ModelState& reference,
                      std::span<const PromptRecord> prompts, const SamplerConfig& sampler,
                      std::uint64_t seed) {
  if (prompts.empty()) throw Error(ErrorCode::kInvalidArgument, "no prompts to score");
  double total = 0.0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto prompt =
        encode_prompt(policy.vocab, render_prompt(prompts[i].instruction, prompts[i].constraints));
    SamplerConfig s = sampler;
    s.seed = derive_seed(seed, kEvalStream, i);
    const auto response = sample(policy, prompt, s);
    const auto lp = sequence_log_prob(policy, prompt, response);
    const auto lr = sequence_log_prob(reference, prompt, response);
    double d = 0.0;
    for (std::size_t t = 0; t < lp.size(); ++t) d += lp[t] - lr[t];
    total += d / static_cast<double>(lp.size());
  }
  return total / static_cast<double>(prompts.size());
}

// ---------------------------------------------------------------------------

Stage parse_stage(std::string_view name) {
  if (name == "sft") return Stage::kSft;
  if (name == "rm") return Stage::kRm;
  if (name == "ppo") return Stage::kPpo;
  throw Error(ErrorCode::kInvalidArgument, "unknown stage '" + std::string(name) + "'");
}

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::kSft: return "sft";
    case Stage::kRm: return "rm";
    case Stage::kPpo: return "ppo";
  }
  return "?";
}

std::uint64_t stage_seed(std::uint64_t seed, Stage stage) {
  return derive_seed(seed, 0x7374616765, static_cast<std::uint64_t>(stage));
}

std::vector<std::size_t> sft_heldout_indices(std::size_t n, const PipelineConfig& config,
                                             std::uint64_t stage_seed) {
  return split_indices(n, config.sft_holdout, derive_seed(stage_seed, kSplitStream, 0)).second;
}

std::filesystem::path checkpoint_path(const StagePaths& paths, Stage stage) {
  return paths.checkpoint_dir / (std::string(to_string(stage)) + ".ckpt");
}

std::filesystem::path log_path(const StagePaths& paths, Stage stage) {
  return paths.checkpoint_dir / (std::string(to_string(stage)) + "_log.jsonl");
}

namespace {

ModelState require_checkpoint(const StagePaths& paths, Stage needed, Stage running) {
  const auto p = checkpoint_path(paths, needed);
  if (!std::filesystem::exists(p)) {
    throw Error(ErrorCode::kMissingPrerequisite,
                std::string(to_string(running)) + " stage needs the " +
                    std::string(to_string(needed)) + " checkpoint at " + p.string());
  }
  return load_checkpoint(p);
}

}  // namespace

StageSummary train_stage(Stage stage, const StagePaths& paths, const PipelineConfig& config,
                         std::uint64_t seed) {
  config.validate();
  const auto files = corpus_paths(paths.data_dir);
  StageSummary summary{checkpoint_path(paths, stage), log_path(paths, stage), {}};
  const auto seed_for_stage = stage_seed(seed, stage);
  switch (stage) {
    case Stage::kSft: {
      const auto data = load_sft_dataset(files.sft);
      auto r = run_sft(config, data, seed_for_stage);
      save_checkpoint(r.model, summary.checkpoint);
      write_training_log(r.log, summary.log);
      summary.metrics = {{"epoch_losses", r.epoch_losses},
                         {"heldout_ppl_before", r.heldout_ppl_before},
                         {"heldout_ppl_after", r.heldout_ppl_after},
                         {"heldout_size", r.heldout.size()}};
      break;
    }
    case Stage::kRm: {
      const auto sft = require_checkpoint(paths, Stage::kSft, stage);
      const auto data = load_preference_dataset(files.preference);
      auto r = run_rm(config, sft, data, seed_for_stage);
      save_checkpoint(r.model, summary.checkpoint);
      write_training_log(r.log, summary.log);
      summary.metrics = {{"epoch_losses", r.epoch_losses},
                         {"train_accuracy", r.train_accuracy},
                         {"heldout_accuracy", r.heldout_accuracy},
                         {"heldout_size", r.heldout.size()}};
      break;
    }
    case Stage::kPpo: {
      const auto sft = require_checkpoint(paths, Stage::kSft, stage);
      const auto rm = require_checkpoint(paths, Stage::kRm, stage);
      const auto prompts = load_prompt_dataset(files.prompts);
      auto r = run_ppo(config, sft, rm, prompts, seed_for_stage);
      save_checkpoint(r.model, summary.checkpoint);
      write_training_log(r.log, summary.log);
      double reward = 0.0, kl = 0.0;
      for (const auto& s : r.log) {
        reward += s.mean_reward.value_or(0.0);
        kl += s.mean_kl.value_or(0.0);
      }
      const double n = static_cast<double>(std::max<std::size_t>(1, r.log.size()));
      summary.metrics = {{"steps", r.log.size()},
                         {"mean_rollout_reward", reward / n},
                         {"mean_rollout_kl", kl / n}};
      break;
    }
  }
  return summary;
}

}  // namespace rceg
