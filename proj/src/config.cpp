#include "rceg/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>

#include "rceg/errors.hpp"

namespace rceg {

void OptimConfig::validate(std::string_view stage) const {
  const std::string where(stage);
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw Error(ErrorCode::kValidation, where + ".learning_rate must be positive");
  }
  if (batch_size == 0 || grad_accum == 0) {
    throw Error(ErrorCode::kValidation, where + ".batch_size and grad_accum must be positive");
  }
  if (epochs == 0) throw Error(ErrorCode::kValidation, where + ".epochs must be positive");
  if (!(max_grad_norm >= 0.0)) {
    throw Error(ErrorCode::kValidation, where + ".max_grad_norm must be >= 0");
  }
}

void PipelineConfig::validate() const {
  model.validate();
  sft.validate("sft");
  rm.validate("rm");
  ppo.validate();
  steering.validate();
  generation.validate();
  if (vocab_max <= static_cast<std::size_t>(kFirstWord)) {
    throw Error(ErrorCode::kValidation, "vocab_max must leave room for word tokens");
  }
  if (!(sft_holdout > 0.0 && sft_holdout < 1.0) || !(rm_holdout > 0.0 && rm_holdout < 1.0)) {
    throw Error(ErrorCode::kValidation, "holdout fractions must lie in (0, 1)");
  }
  if (!(data.toxic_marker_rate >= 0.0 && data.toxic_marker_rate <= 1.0)) {
    throw Error(ErrorCode::kValidation, "data.toxic_marker_rate must lie in [0, 1]");
  }
}

PipelineConfig preset_config(std::string_view name) {
  PipelineConfig c;
  if (name == "toy") return c;
  if (name == "paper") {
    c.preset = "paper";
    c.model.context_length = 2048;
    c.sft = {1e-5, 2, 8, 3, 1.0};
    c.rm = {1e-5, 2, 8, 8, 1.0};
    c.ppo.learning_rate = 1e-5;
    c.ppo.epochs = 3;
    return c;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown preset '" + std::string(name) + "'");
}

namespace {

nlohmann::json optim_json(const OptimConfig& o) {
  return {{"learning_rate", o.learning_rate},
          {"batch_size", o.batch_size},
          {"grad_accum", o.grad_accum},
          {"epochs", o.epochs},
          {"max_grad_norm", o.max_grad_norm}};
}

nlohmann::json sampler_json(const SamplerConfig& s) {
  return {{"temperature", s.temperature},
          {"top_k", s.top_k},
          {"max_new_tokens", s.max_new_tokens},
          {"seed", s.seed}};
}

// Binds JSON keys of one section to fields and rejects anything else.
class Section {
 public:
  explicit Section(std::string name) : name_(std::move(name)) {}

  template <typename T>
  Section& field(const char* key, T& target) {
    setters_[key] = [this, key, &target](const nlohmann::json& v) {
      try {
        target = v.get<T>();
      } catch (const nlohmann::json::exception&) {
        throw Error(ErrorCode::kValidation, "config " + name_ + "." + key + " has the wrong type");
      }
    };
    return *this;
  }

  void apply(const nlohmann::json& j) const {
    if (!j.is_object()) throw Error(ErrorCode::kValidation, "config " + name_ + " must be an object");
    for (const auto& [key, value] : j.items()) {
      auto it = setters_.find(key);
      if (it == setters_.end()) {
        throw Error(ErrorCode::kValidation, "unknown config key " + name_ + "." + key);
      }
      it->second(value);
    }
  }

 private:
  std::string name_;
  std::map<std::string, std::function<void(const nlohmann::json&)>> setters_;
};

Section optim_section(const char* name, OptimConfig& o) {
  Section s(name);
  s.field("learning_rate", o.learning_rate)
      .field("batch_size", o.batch_size)
      .field("grad_accum", o.grad_accum)
      .field("epochs", o.epochs)
      .field("max_grad_norm", o.max_grad_norm);
  return s;
}

Section sampler_section(const char* name, SamplerConfig& c) {
  Section s(name);
  s.field("temperature", c.temperature)
      .field("top_k", c.top_k)
      .field("max_new_tokens", c.max_new_tokens)
      .field("seed", c.seed);
  return s;
}

}  // namespace

nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json steering;
  to_json(steering, c.steering);
  return {
      {"preset", c.preset},
      {"data",
       {{"num_sft", c.data.num_sft},
        {"num_pref", c.data.num_pref},
        {"num_prompts", c.data.num_prompts},
        {"num_classifier", c.data.num_classifier},
        {"vocab_themes", c.data.vocab_themes},
        {"toxic_marker_rate", c.data.toxic_marker_rate}}},
      {"vocab_max", c.vocab_max},
      {"model",
       {{"context_length", c.model.context_length},
        {"embed_dim", c.model.embed_dim},
        {"num_layers", c.model.num_layers},
        {"num_heads", c.model.num_heads},
        {"adapter_rank", c.model.adapter_rank},
        {"adapter_scale", c.model.adapter_scale}}},
      {"sft", optim_json(c.sft)},
      {"sft_holdout", c.sft_holdout},
      {"rm", optim_json(c.rm)},
      {"rm_holdout", c.rm_holdout},
      {"ppo",
       {{"clip_epsilon", c.ppo.clip_epsilon},
        {"kl_coef", c.ppo.kl_coef},
        {"gamma", c.ppo.gamma},
        {"gae_lambda", c.ppo.gae_lambda},
        {"rollouts_per_batch", c.ppo.rollouts_per_batch},
        {"ppo_epochs", c.ppo.ppo_epochs},
        {"learning_rate", c.ppo.learning_rate},
        {"value_coef", c.ppo.value_coef},
        {"epochs", c.ppo.epochs},
        {"whiten_advantages", c.ppo.whiten_advantages},
        {"max_grad_norm", c.ppo.max_grad_norm},
        {"rollout", sampler_json(c.ppo.rollout)}}},
      {"classifier",
       {{"iterations", c.classifier.iterations},
        {"learning_rate", c.classifier.learning_rate},
        {"l2", c.classifier.l2},
        {"holdout_fraction", c.classifier.holdout_fraction}}},
      {"steering", steering},
      {"generation", sampler_json(c.generation)},
      {"eval_samples", c.eval_samples},
      {"optimizer", {{"name", "adam"}, {"beta1", 0.9}, {"beta2", 0.999}, {"epsilon", 1e-8}}},
  };
}

void apply_overrides(PipelineConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::kValidation, "config must be a JSON object");
  Section data("data");
  data.field("num_sft", c.data.num_sft)
      .field("num_pref", c.data.num_pref)
      .field("num_prompts", c.data.num_prompts)
      .field("num_classifier", c.data.num_classifier)
      .field("vocab_themes", c.data.vocab_themes)
      .field("toxic_marker_rate", c.data.toxic_marker_rate);
  Section model("model");
  model.field("context_length", c.model.context_length)
      .field("embed_dim", c.model.embed_dim)
      .field("num_layers", c.model.num_layers)
      .field("num_heads", c.model.num_heads)
      .field("adapter_rank", c.model.adapter_rank)
      .field("adapter_scale", c.model.adapter_scale);
  Section ppo("ppo");
  ppo.field("clip_epsilon", c.ppo.clip_epsilon)
      .field("kl_coef", c.ppo.kl_coef)
      .field("gamma", c.ppo.gamma)
      .field("gae_lambda", c.ppo.gae_lambda)
      .field("rollouts_per_batch", c.ppo.rollouts_per_batch)
      .field("ppo_epochs", c.ppo.ppo_epochs)
      .field("learning_rate", c.ppo.learning_rate)
      .field("value_coef", c.ppo.value_coef)
      .field("epochs", c.ppo.epochs)
      .field("whiten_advantages", c.ppo.whiten_advantages)
      .field("max_grad_norm", c.ppo.max_grad_norm);
  Section classifier("classifier");
  classifier.field("iterations", c.classifier.iterations)
      .field("learning_rate", c.classifier.learning_rate)
      .field("l2", c.classifier.l2)
      .field("holdout_fraction", c.classifier.holdout_fraction);

  for (const auto& [key, value] : j.items()) {
    if (key == "preset") {
      // Handled by load_config.
    } else if (key == "data") {
      data.apply(value);
    } else if (key == "vocab_max") {
      c.vocab_max = value.get<std::size_t>();
    } else if (key == "model") {
      model.apply(value);
    } else if (key == "sft") {
      optim_section("sft", c.sft).apply(value);
    } else if (key == "sft_holdout") {
      c.sft_holdout = value.get<double>();
    } else if (key == "rm") {
      optim_section("rm", c.rm).apply(value);
    } else if (key == "rm_holdout") {
      c.rm_holdout = value.get<double>();
    } else if (key == "ppo") {
      auto rest = value;
      if (rest.is_object() && rest.contains("rollout")) {
        sampler_section("ppo.rollout", c.ppo.rollout).apply(rest["rollout"]);
        rest.erase("rollout");
      }
      ppo.apply(rest);
    } else if (key == "classifier") {
      classifier.apply(value);
    } else if (key == "steering") {
      apply_overrides(c.steering, value);
    } else if (key == "generation") {
      sampler_section("generation", c.generation).apply(value);
    } else if (key == "eval_samples") {
      c.eval_samples = value.get<std::size_t>();
    } else if (key == "optimizer") {
      // Informational; the optimizer constants are fixed.
    } else {
      throw Error(ErrorCode::kValidation, "unknown config key " + key);
    }
  }
}

PipelineConfig load_config(const std::filesystem::path& path, const PipelineConfig& base) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, "config " + path.string() + ": " + e.what());
  }
  PipelineConfig c = base;
  if (j.is_object() && j.contains("preset")) c = preset_config(j["preset"].get<std::string>());
  apply_overrides(c, j);
  c.validate();
  return c;
}

}  // namespace rceg
