#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rceg/config.hpp"
#include "rceg/corpus.hpp"
#include "rceg/model.hpp"
#include "rceg/training.hpp"

namespace rceg {

/// One optimizer step. Fields that do not apply to a stage are absent.
struct StepRecord {
  std::size_t step = 0;
  std::string stage;
  double loss = 0.0;
  std::optional<double> mean_reward;
  std::optional<double> mean_kl;
  double wall_ms = 0.0;
};

nlohmann::json to_json(const StepRecord& r);
StepRecord step_from_json(const nlohmann::json& j);
void write_training_log(std::span<const StepRecord> records, const std::filesystem::path& path);
std::vector<StepRecord> read_training_log(const std::filesystem::path& path);

/// Vocabulary over every prompt and reference of the SFT set.
Vocab build_vocab(std::span<const InstructionTriplet> data, std::size_t max_size);

/// Deterministic split of [0, n) into (train, heldout) indices.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double heldout_fraction, std::uint64_t seed);

/// exp(total response NLL / total response tokens) over the examples.
double corpus_perplexity(const ModelState& state, std::span<const SftExample> examples);

struct SftResult {
  ModelState model;
  std::vector<StepRecord> log;
  std::vector<double> epoch_losses;  // mean per-example loss in each epoch
  double heldout_ppl_before = 0.0;   // freshly initialized model
  double heldout_ppl_after = 0.0;
  std::vector<std::size_t> heldout;
};

SftResult run_sft(const PipelineConfig& config, std::span<const InstructionTriplet> data,
                  std::uint64_t seed);

struct RmResult {
  ModelState model;
  std::vector<StepRecord> log;
  std::vector<double> epoch_losses;
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
  std::vector<std::size_t> heldout;
};

/// Fraction of pairs whose chosen response outscores the rejected one.
double pairwise_accuracy(const ModelState& rm, std::span<const PairExample> pairs);

RmResult run_rm(const PipelineConfig& config, const ModelState& sft,
                std::span<const PreferencePair> data, std::uint64_t seed);

struct PpoResult {
  ModelState model;  // policy with its value head
  std::vector<StepRecord> log;
};

/// Rolls out one response per prompt and fills every trajectory field.
Trajectory make_trajectory(const ModelState& policy, const ModelState& reference,
                           const ModelState& reward_model, std::span<const TokenId> prompt,
                           const PpoConfig& config, std::uint64_t seed);

PpoResult run_ppo(const PipelineConfig& config, const ModelState& sft, const ModelState& reward_model,
                  std::span<const PromptRecord> prompts, std::uint64_t seed);

/// Mean reward-model score of one sampled response per prompt; prompt i uses
/// derive_seed(seed, kEvalStream, i), so two policies can be compared on
/// paired seeds.
inline constexpr std::uint64_t kEvalStream = 0x6576616c;
double mean_policy_score(const ModelState& policy, const ModelState& reward_model,
                         std::span<const PromptRecord> prompts, const SamplerConfig& sampler,
                         std::uint64_t seed);

/// Mean over sampled responses of the per-token mean log-ratio
/// log pi(policy) - log pi(reference).
double mean_policy_kl(const ModelState& policy, const ModelState& reference,
                      std::span<const PromptRecord> prompts, const SamplerConfig& sampler,
                      std::uint64_t seed);

// ---------------------------------------------------------------------------
// Stage runner over files

enum class Stage { kSft, kRm, kPpo };
Stage parse_stage(std::string_view name);
std::string_view to_string(Stage stage);

/// Seed a stage derives from the master seed in train_stage.
std::uint64_t stage_seed(std::uint64_t seed, Stage stage);

/// Held-out SFT record indices used by run_sft for this stage seed.
std::vector<std::size_t> sft_heldout_indices(std::size_t n, const PipelineConfig& config,
                                             std::uint64_t stage_seed);

struct StagePaths {
  std::filesystem::path data_dir;        // holds the corpus files
  std::filesystem::path checkpoint_dir;  // holds sft/rm/ppo checkpoints and logs
};

std::filesystem::path checkpoint_path(const StagePaths& paths, Stage stage);
std::filesystem::path log_path(const StagePaths& paths, Stage stage);

struct StageSummary {
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  nlohmann::json metrics;
};

/// Trains one stage from files and writes its checkpoint and log. rm and ppo
/// need the sft checkpoint; ppo also needs the rm checkpoint.
StageSummary train_stage(Stage stage, const StagePaths& paths, const PipelineConfig& config,
                         std::uint64_t seed);

}  // namespace rceg
