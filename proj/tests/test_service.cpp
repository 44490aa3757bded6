#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <gtest/gtest.h>

#include "rceg/checkpoint.hpp"
#include "rceg/config.hpp"
#include "rceg/http.hpp"
#include "rceg/metrics.hpp"
#include "rceg/runs.hpp"
#include "rceg/service.hpp"
#include "rceg/stages.hpp"

// after Eigen: resolv.h defines a _res macro
#include "httplib.h"

using namespace rceg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("rceg_service_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

const ContentConstraints kConstraints{"travel", "story", 30, 2, 4, Difficulty::kBasic};

std::shared_ptr<const ModelState> service_model(std::size_t context = 128) {
  const std::vector<std::string> texts = {render_prompt(default_instruction(), kConstraints),
                                          "[PASSAGE] [Q1] A. B. C. D. [ANSWER] [EXPLAIN] the cat"};
  ModelConfig c;
  c.context_length = context;
  c.embed_dim = 16;
  c.num_layers = 1;
  c.num_heads = 2;
  c.adapter_rank = 2;
  return std::make_shared<const ModelState>(ModelState::initialize(c, Vocab::build(texts), 3));
}

SteeringConfig small_steering() {
  SteeringConfig s;
  s.num_variants = 4;
  s.num_final_candidates = 2;
  s.sampler.max_new_tokens = 12;
  return s;
}

std::shared_ptr<const GenerationService> make_service(std::optional<fs::path> reports = {}) {
  const AttributeClassifier cls({{"the", 0.5}}, 0.0);
  return std::make_shared<const GenerationService>(service_model(), cls, cls, small_steering(),
                                                   "test@0", reports);
}

json request_body(std::uint64_t seed) { return {{"constraints", kConstraints}, {"seed", seed}}; }

PipelineConfig tiny_pipeline() {
  auto c = preset_config("toy");
  c.data.num_sft = 12;
  c.data.num_pref = 6;
  c.data.num_prompts = 4;
  c.data.num_classifier = 10;
  c.model.context_length = 512;
  c.model.embed_dim = 16;
  c.model.num_layers = 1;
  c.model.num_heads = 2;
  c.model.adapter_rank = 2;
  c.sft.epochs = 1;
  c.sft.grad_accum = 2;
  c.rm.epochs = 1;
  c.rm.grad_accum = 1;
  c.ppo.rollouts_per_batch = 2;
  c.ppo.ppo_epochs = 1;
  c.ppo.epochs = 1;
  c.ppo.rollout.max_new_tokens = 8;
  return c;
}

}  // namespace

TEST(Service, SameSeedSameResponse) {
  const auto svc = make_service();
  GenerationRequest req{kConstraints, 11, nullptr};
  const auto a = svc->handle_generate(req);
  const auto b = svc->handle_generate(req);
  EXPECT_EQ(a.raw_text, b.raw_text);
  EXPECT_EQ(a.steering_report_id, b.steering_report_id);
  ASSERT_EQ(a.candidates.size(), 2u);
  EXPECT_EQ(std::count_if(a.candidates.begin(), a.candidates.end(), [](auto& c) { return c.selected; }), 1);
  EXPECT_EQ(a.seed, 11u);
  // an untrained model does not produce the exercise markers
  EXPECT_TRUE(a.parse_warning);
  EXPECT_FALSE(a.exercise.has_value());
}

TEST(Service, WritesSteeringReport) {
  const auto dir = scratch("reports");
  const auto svc = make_service(dir);
  const auto r = svc->handle_generate({kConstraints, 5, nullptr});
  const auto path = dir / ("steering-" + r.steering_report_id + ".json");
  ASSERT_TRUE(fs::exists(path));
  const auto j = json::parse(slurp(path));
  EXPECT_EQ(j.at("seed"), 5);
  EXPECT_EQ(j.at("checkpoint_id"), "test@0");
}

TEST(Service, ErrorsBeforeGeneration) {
  const auto svc = make_service();
  auto bad = kConstraints;
  bad.num_options = 1;
  EXPECT_THROW(svc->handle_generate({bad, 1, nullptr}), Error);
  EXPECT_THROW(svc->handle_generate({kConstraints, 1, json{{"num_variants", 1}}}), Error);

  const AttributeClassifier cls;
  GenerationService tight(service_model(16), cls, cls, small_steering(), "tight");
  try {
    tight.handle_generate({kConstraints, 1, nullptr});
    FAIL() << "expected a length error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kLengthOverflow);
  }
  GenerationService empty(nullptr, cls, cls, small_steering(), "none");
  EXPECT_FALSE(empty.ready());
  EXPECT_THROW(empty.handle_generate({kConstraints, 1, nullptr}), Error);
}

TEST(Service, RequestParsing) {
  const auto r = request_from_json(request_body(9));
  EXPECT_EQ(r.constraints, kConstraints);
  EXPECT_EQ(r.seed, 9u);
  EXPECT_EQ(request_from_json(to_json(r)).constraints, kConstraints);
  try {
    request_from_json(json{{"seed", 1}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingField);
  }
  EXPECT_THROW(request_from_json(json{{"constraints", {{"theme", 3}}}}), Error);
  EXPECT_THROW(request_from_json(json{{"constraints", kConstraints}, {"seed", -4}}), Error);
}

TEST(Router, HealthAndGenerate) {
  const ApiRouter router(make_service(), scratch("router"));
  const auto health = router.handle("GET", "/api/health", "");
  EXPECT_EQ(health.status, 200);
  const auto h = json::parse(health.body);
  EXPECT_EQ(h.at("status"), "ok");
  EXPECT_EQ(h.at("version"), kServiceVersion);
  EXPECT_EQ(h.at("checkpoint_id"), "test@0");

  const auto gen = router.handle("POST", "/api/generate", request_body(3).dump());
  ASSERT_EQ(gen.status, 200) << gen.body;
  const auto g = json::parse(gen.body);
  for (const char* key : {"exercise", "raw_text", "parse_warning", "candidates", "steering_report_id",
                          "steering_report", "seed", "timing_ms"}) {
    EXPECT_TRUE(g.contains(key)) << key;
  }
  EXPECT_EQ(g.at("seed"), 3);
}

TEST(Router, ErrorStatuses) {
  const ApiRouter router(make_service(), scratch("router_errors"));
  auto bad = request_body(1);
  bad["constraints"]["num_options"] = 1;
  auto r = router.handle("POST", "/api/generate", bad.dump());
  EXPECT_EQ(r.status, 400);
  EXPECT_EQ(json::parse(r.body).at("error").at("code"), "validation_error");
  EXPECT_NE(json::parse(r.body)["error"]["message"].get<std::string>().find("num_options"),
            std::string::npos);

  EXPECT_EQ(router.handle("POST", "/api/generate", "{oops").status, 400);
  EXPECT_EQ(router.handle("POST", "/api/generate", "{}").status, 400);
  EXPECT_EQ(router.handle("GET", "/api/generate", "").status, 405);
  EXPECT_EQ(router.handle("POST", "/api/health", "").status, 405);
  EXPECT_EQ(router.handle("GET", "/api/nothing", "").status, 404);
  EXPECT_EQ(router.handle("GET", "/api/runs/../etc/report", "").status, 400);
  EXPECT_EQ(router.handle("GET", "/api/runs/absent/report", "").status, 404);

  const ApiRouter unloaded(nullptr, scratch("router_unloaded"));
  EXPECT_EQ(unloaded.handle("POST", "/api/generate", request_body(1).dump()).status, 503);
  const auto h = json::parse(unloaded.handle("GET", "/api/health", "").body);
  EXPECT_EQ(h.at("status"), "unavailable");
  EXPECT_TRUE(h.at("checkpoint_id").is_null());
}

TEST(Router, RunReport) {
  const auto root = scratch("router_runs");
  MetricReport m;
  m.samples = {{0, 0.5, 0.25, 0.125, 0.75, 3.0}};
  m.bleu4 = 0.5;
  m.rouge1 = 0.25;
  m.rouge2 = 0.125;
  m.rougeL = 0.75;
  m.ppl = 3.0;
  const auto dir = persist_run(root, {json::object(), 7, {}, {{"metrics.tsv", format_report(m)}}});
  const ApiRouter router(make_service(), root);
  const auto id = dir.filename().string();
  const auto r = router.handle("GET", "/api/runs/" + id + "/report", "");
  ASSERT_EQ(r.status, 200) << r.body;
  const auto j = json::parse(r.body);
  EXPECT_EQ(j.at("run_id"), id);
  EXPECT_EQ(j.dump(), [&] {
    auto e = report_to_json(m);
    e["run_id"] = id;
    return e.dump();
  }());
}

TEST(Http, ServesJsonApi) {
  HttpServer server(ApiRouter(make_service(), scratch("http")));
  const int port = server.bind("127.0.0.1", 0);
  std::thread t([&] { server.serve(); });
  server.wait_until_ready();
  httplib::Client client("127.0.0.1", port);
  auto health = client.Get("/api/health");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);
  EXPECT_EQ(health->get_header_value("Access-Control-Allow-Origin"), "*");
  auto gen = client.Post("/api/generate", request_body(4).dump(), "application/json");
  ASSERT_TRUE(gen);
  EXPECT_EQ(gen->status, 200);
  auto bad = client.Post("/api/generate", "[]", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  auto pre = client.Options("/api/generate");
  ASSERT_TRUE(pre);
  EXPECT_EQ(pre->status, 204);
  server.stop();
  t.join();
}

TEST(Runs, PersistAndVerify) {
  const auto root = scratch("runs");
  const auto extra = root / "extra.bin";
  std::ofstream(extra, std::ios::binary) << "payload";
  const auto when = std::chrono::sys_days{std::chrono::year{2026} / 3 / 4} + std::chrono::hours{5};
  EXPECT_EQ(run_id(when, 9), "20260304T050000Z-seed9");
  const RunArtifacts art{{{"k", 1}}, 9, {extra}, {{"notes.txt", "hello\n"}}};
  const auto dir = persist_run(root, art, when);
  EXPECT_EQ(dir.filename(), "20260304T050000Z-seed9");
  EXPECT_FALSE(fs::exists(dir / kPartialMarker));
  EXPECT_TRUE(verify_manifest(dir).empty());
  const auto manifest = json::parse(slurp(dir / kManifestName));
  EXPECT_EQ(manifest.at("seed"), 9);
  EXPECT_EQ(manifest.at("files").size(), 3u);

  const auto second = persist_run(root, art, when);
  EXPECT_NE(second, dir);

  std::ofstream(dir / "notes.txt", std::ios::binary) << "hellO\n";
  auto problems = verify_manifest(dir);
  ASSERT_EQ(problems.size(), 1u);
  EXPECT_EQ(problems[0].file, "notes.txt");
  EXPECT_EQ(problems[0].reason, "checksum");
  fs::remove(dir / "extra.bin");
  problems = verify_manifest(dir);
  EXPECT_EQ(problems.size(), 2u);

  std::ofstream(second / kPartialMarker) << "";
  problems = verify_manifest(second);
  ASSERT_FALSE(problems.empty());
  EXPECT_EQ(problems[0].reason, "partial");
}

TEST(Runs, TrainingLogDigestIgnoresWallClock) {
  const auto dir = scratch("digest");
  std::vector<StepRecord> a{{0, "sft", 1.5, {}, {}, 12.0}, {1, "sft", 1.25, {}, {}, 9.0}};
  auto b = a;
  b[0].wall_ms = 12345.678;
  b[1].wall_ms = 0.5;
  write_training_log(a, dir / "one_log.jsonl");
  write_training_log(b, dir / "two_log.jsonl");
  const auto da = manifest_digest(dir / "one_log.jsonl");
  const auto db = manifest_digest(dir / "two_log.jsonl");
  EXPECT_EQ(da.size, db.size);
  EXPECT_EQ(da.checksum, db.checksum);
  b[1].loss = 1.0;
  write_training_log(b, dir / "two_log.jsonl");
  EXPECT_NE(manifest_digest(dir / "two_log.jsonl").checksum, da.checksum);
  const auto back = read_training_log(dir / "one_log.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].loss, 1.25);
  EXPECT_FALSE(back[1].mean_reward.has_value());
}

TEST(Config, PresetsAndOverrides) {
  const auto toy = preset_config("toy");
  const auto paper = preset_config("paper");
  EXPECT_EQ(paper.model.context_length, 2048u);
  EXPECT_EQ(paper.sft.learning_rate, 1e-5);
  EXPECT_THROW(preset_config("huge"), Error);
  EXPECT_NO_THROW(toy.validate());

  auto c = toy;
  apply_overrides(c, json::parse(R"({"sft": {"epochs": 5}, "ppo": {"kl_coef": 0.1}})"));
  EXPECT_EQ(c.sft.epochs, 5u);
  EXPECT_EQ(c.ppo.kl_coef, 0.1);
  EXPECT_THROW(apply_overrides(c, json::parse(R"({"sft": {"epochz": 5}})")), Error);
  EXPECT_THROW(apply_overrides(c, json::parse(R"({"mystery": 1})")), Error);
  EXPECT_THROW(apply_overrides(c, json::parse(R"({"sft": {"epochs": "x"}})")), Error);

  const auto dir = scratch("config");
  std::ofstream(dir / "c.json") << R"({"preset": "paper", "eval_samples": 3})";
  const auto loaded = load_config(dir / "c.json", toy);
  EXPECT_EQ(loaded.model.context_length, 2048u);
  EXPECT_EQ(loaded.eval_samples, 3u);

  auto again = toy;
  apply_overrides(again, to_json(toy));
  EXPECT_EQ(to_json(again), to_json(toy));
}

TEST(Stages, SplitIndices) {
  for (std::size_t n = 2; n < 40; ++n) {
    const auto [train, held] = split_indices(n, 0.2, n);
    EXPECT_EQ(train.size() + held.size(), n);
    EXPECT_GE(held.size(), 1u);
    EXPECT_GE(train.size(), 1u);
    EXPECT_TRUE(std::is_sorted(held.begin(), held.end()));
    std::vector<std::size_t> all = train;
    all.insert(all.end(), held.begin(), held.end());
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(all[i], i);
  }
}

TEST(Stages, MissingPrerequisiteNamesCheckpoint) {
  const auto dir = scratch("prereq");
  const auto config = tiny_pipeline();
  synthesize_toy_corpus(config.data, 1, dir / "data");
  try {
    train_stage(Stage::kPpo, {dir / "data", dir / "ckpt"}, config, 1);
    FAIL() << "expected a prerequisite error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingPrerequisite);
    EXPECT_NE(std::string(e.what()).find("sft.ckpt"), std::string::npos);
  }
}

TEST(Stages, PipelineIsBitReproducible) {
  const auto config = tiny_pipeline();
  std::vector<std::string> bytes[2];
  for (int run = 0; run < 2; ++run) {
    const auto dir = scratch("repro" + std::to_string(run));
    synthesize_toy_corpus(config.data, 5, dir / "data");
    const StagePaths paths{dir / "data", dir / "ckpt"};
    for (auto stage : {Stage::kSft, Stage::kRm, Stage::kPpo}) {
      const auto s = train_stage(stage, paths, config, 5);
      bytes[run].push_back(slurp(s.checkpoint));
      const auto log = read_training_log(s.log);
      EXPECT_FALSE(log.empty());
      bytes[run].push_back(std::to_string(log.back().loss));
    }
  }
  EXPECT_EQ(bytes[0], bytes[1]);
  EXPECT_FALSE(deserialize_checkpoint(bytes[0][4]).reward_head.has_value());
  EXPECT_TRUE(deserialize_checkpoint(bytes[0][4]).value_head.has_value());
  EXPECT_TRUE(deserialize_checkpoint(bytes[0][2]).reward_head.has_value());
}
