#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "json.hpp"
#include "rceg/control.hpp"
#include "rceg/corpus.hpp"
#include "rceg/model.hpp"
#include "rceg/training.hpp"

namespace rceg {

struct OptimConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 2;
  std::size_t grad_accum = 8;  // examples per update = batch_size * grad_accum
  std::size_t epochs = 1;
  double max_grad_norm = 1.0;

  std::size_t examples_per_step() const { return batch_size * grad_accum; }
  void validate(std::string_view stage) const;
};

/// Everything a pipeline run needs besides the seed and paths.
struct PipelineConfig {
  std::string preset = "toy";
  SynthConfig data;
  std::size_t vocab_max = 2048;
  ModelConfig model;
  OptimConfig sft{3e-3, 2, 8, 3, 1.0};
  double sft_holdout = 0.1;
  OptimConfig rm{1e-3, 2, 8, 8, 1.0};
  double rm_holdout = 0.2;
  PpoConfig ppo;
  ClassifierTrainConfig classifier;
  SteeringConfig steering;
  SamplerConfig generation{1.0, 0, 200, 0};
  std::size_t eval_samples = 50;

  void validate() const;
};

/// "toy" (the tested default) or "paper" (original hyperparameters with a
/// 2048-token context).
PipelineConfig preset_config(std::string_view name);

nlohmann::json to_json(const PipelineConfig& config);
/// Overlays the keys present in `j` onto `config`; unknown keys are errors.
void apply_overrides(PipelineConfig& config, const nlohmann::json& j);
/// Reads a JSON file and overlays it onto the preset it names (or `base`).
PipelineConfig load_config(const std::filesystem::path& path, const PipelineConfig& base);

}  // namespace rceg
