// Command-line front end: data preparation, stage training, evaluation,
// one-shot generation and the HTTP server.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>

#include "CLI11.hpp"
#include "rceg/checkpoint.hpp"
#include "rceg/config.hpp"
#include "rceg/control.hpp"
#include "rceg/errors.hpp"
#include "rceg/http.hpp"
#include "rceg/metrics.hpp"
#include "rceg/runs.hpp"
#include "rceg/service.hpp"
#include "rceg/stages.hpp"

namespace fs = std::filesystem;
using namespace rceg;

namespace {

struct Globals {
  std::string config_path;
  std::uint64_t seed = 7;
  std::string run_dir = "rceg-work";
  std::string preset = "toy";

  PipelineConfig config() const {
    const auto base = preset_config(preset);
    return config_path.empty() ? base : load_config(config_path, base);
  }
  fs::path data_dir() const { return fs::path(run_dir) / "data"; }
  fs::path checkpoint_dir() const { return fs::path(run_dir) / "checkpoints"; }
  fs::path runs_root() const { return fs::path(run_dir) / "runs"; }
  fs::path classifier_path() const { return fs::path(run_dir) / "classifier.json"; }
};

fs::path default_policy(const Globals& g) {
  const StagePaths paths{g.data_dir(), g.checkpoint_dir()};
  for (auto stage : {Stage::kPpo, Stage::kSft}) {
    const auto p = checkpoint_path(paths, stage);
    if (fs::exists(p)) return p;
  }
  throw Error(ErrorCode::kMissingPrerequisite,
              "no sft or ppo checkpoint under " + g.checkpoint_dir().string());
}

std::string checkpoint_id(const fs::path& path) {
  return path.filename().string() + "@" + hex64(file_checksum(path));
}

void print_json(const nlohmann::json& j) { std::cout << dump_text(j, 2) << std::endl; }

HttpServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reading-comprehension exercise generation pipeline"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON configuration overrides");
  app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--run-dir", g.run_dir, "Working directory for data, checkpoints and runs");
  app.add_option("--preset", g.preset, "Configuration preset")->check(CLI::IsMember({"toy", "paper"}));

  auto* prepare = app.add_subcommand("prepare-data", "Write the synthetic corpus");

  auto* train = app.add_subcommand("train", "Train one pipeline stage");
  std::string stage_name;
  train->add_option("--stage", stage_name, "sft, rm or ppo")
      ->required()
      ->check(CLI::IsMember({"sft", "rm", "ppo"}));

  auto* train_cls = app.add_subcommand("train-classifier", "Train the attribute classifier");

  auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint on held-out SFT records");
  std::string eval_checkpoint;
  evaluate->add_option("--checkpoint", eval_checkpoint, "Defaults to ppo, else sft");

  auto* generate = app.add_subcommand("generate", "Generate one steered exercise");
  std::string gen_checkpoint, gen_classifier, gen_filter;
  ContentConstraints constraints{"travel", "story", 30, 2, 4, Difficulty::kBasic};
  std::string difficulty = "basic";
  std::string steering_json;
  generate->add_option("--checkpoint", gen_checkpoint, "Defaults to ppo, else sft");
  generate->add_option("--classifier", gen_classifier, "Attribute classifier");
  generate->add_option("--filter-classifier", gen_filter, "Final-selection classifier");
  generate->add_option("--theme", constraints.theme);
  generate->add_option("--style", constraints.style);
  generate->add_option("--word-count", constraints.word_count);
  generate->add_option("--num-questions", constraints.num_questions);
  generate->add_option("--num-options", constraints.num_options);
  generate->add_option("--difficulty", difficulty)
      ->check(CLI::IsMember({"basic", "intermediate", "advanced"}));
  generate->add_option("--steering", steering_json, "JSON steering overrides");

  auto* serve = app.add_subcommand("serve", "Serve the JSON API");
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string serve_checkpoint, serve_classifier, serve_filter;
  serve->add_option("--host", host);
  serve->add_option("--port", port);
  serve->add_option("--checkpoint", serve_checkpoint, "Defaults to ppo, else sft");
  serve->add_option("--classifier", serve_classifier);
  serve->add_option("--filter-classifier", serve_filter);

  CLI11_PARSE(app, argc, argv);

  try {
    const auto config = g.config();
    const StagePaths paths{g.data_dir(), g.checkpoint_dir()};

    if (*prepare) {
      const auto files = synthesize_toy_corpus(config.data, g.seed, g.data_dir());
      print_json({{"sft", files.sft.string()},
                  {"preference", files.preference.string()},
                  {"prompts", files.prompts.string()},
                  {"classifier", files.classifier.string()}});
    } else if (*train) {
      const auto stage = parse_stage(stage_name);
      const auto summary = train_stage(stage, paths, config, g.seed);
      RunArtifacts run{to_json(config), g.seed, {summary.checkpoint, summary.log},
                       {{"summary.json", summary.metrics.dump(2) + "\n"}}};
      const auto dir = persist_run(g.runs_root(), run);
      auto out = summary.metrics;
      out["checkpoint"] = summary.checkpoint.string();
      out["run"] = dir.string();
      print_json(out);
    } else if (*train_cls) {
      const auto data = load_classifier_dataset(corpus_paths(g.data_dir()).classifier);
      const auto result = train_attribute_classifier(data, config.classifier, g.seed);
      result.classifier.save(g.classifier_path());
      print_json({{"classifier", g.classifier_path().string()},
                  {"train_accuracy", result.train_accuracy},
                  {"heldout_accuracy", result.heldout_accuracy},
                  {"heldout_size", result.heldout_size}});
    } else if (*evaluate) {
      const fs::path ckpt = eval_checkpoint.empty() ? default_policy(g) : fs::path(eval_checkpoint);
      const auto model = load_checkpoint(ckpt);
      const auto data = load_sft_dataset(corpus_paths(g.data_dir()).sft);
      auto held = sft_heldout_indices(data.size(), config, stage_seed(g.seed, Stage::kSft));
      if (held.size() > config.eval_samples) held.resize(config.eval_samples);
      std::vector<PromptRecord> prompts;
      std::vector<std::string> refs;
      for (auto i : held) {
        prompts.push_back({data[i].instruction, data[i].constraints});
        refs.push_back(data[i].reference);
      }
      EvalOptions opts;
      opts.sampler = SamplerConfig::greedy(config.generation.max_new_tokens);
      const auto report = evaluate_run(model, prompts, refs, opts);
      const auto dir = persist_run(g.runs_root(), {to_json(config), g.seed, {}, {{"metrics.tsv", format_report(report)}}});
      std::printf("checkpoint %s\n", ckpt.string().c_str());
      std::printf("BLEU-4 %.2f  ROUGE-1 %.2f  ROUGE-2 %.2f  ROUGE-L %.2f  PPL %.3f\n",
                  100 * report.bleu4, 100 * report.rouge1, 100 * report.rouge2,
                  100 * report.rougeL, report.ppl);
      std::printf("run %s\n", dir.string().c_str());
    } else if (*generate || *serve) {
      const bool gen = generate->parsed();
      std::string ckpt_arg = gen ? gen_checkpoint : serve_checkpoint;
      std::string cls_arg = gen ? gen_classifier : serve_classifier;
      std::string filter_arg = gen ? gen_filter : serve_filter;
      const fs::path ckpt = ckpt_arg.empty() ? default_policy(g) : fs::path(ckpt_arg);
      const fs::path cls = cls_arg.empty() ? g.classifier_path() : fs::path(cls_arg);
      const fs::path filter = filter_arg.empty() ? cls : fs::path(filter_arg);
      auto model = std::make_shared<const ModelState>(load_checkpoint(ckpt));
      auto service = std::make_shared<const GenerationService>(
          model, AttributeClassifier::load(cls), AttributeClassifier::load(filter), config.steering,
          checkpoint_id(ckpt), g.runs_root() / "steering");
      if (gen) {
        GenerationRequest req;
        constraints.difficulty = parse_difficulty(difficulty);
        req.constraints = constraints;
        req.seed = g.seed;
        if (!steering_json.empty()) req.steering = nlohmann::json::parse(steering_json);
        print_json(to_json(service->handle_generate(req)));
      } else {
        HttpServer server(ApiRouter(service, g.runs_root()));
        const int bound = server.bind(host, port);
        g_server = &server;
        std::signal(SIGINT, on_signal);
        std::signal(SIGTERM, on_signal);
        std::fprintf(stderr, "serving %s on http://%s:%d\n", checkpoint_id(ckpt).c_str(),
                     host.c_str(), bound);
        server.serve();
        g_server = nullptr;
      }
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error [%s]: %s\n", std::string(to_string(e.code())).c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
