#include "rceg/metrics.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

namespace rceg {

double conditional_perplexity(const ModelState& state, std::span<const TokenId> prompt,
                              std::span<const TokenId> response) {
  if (response.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "perplexity needs at least one token");
  }
  const auto lp = sequence_log_prob(state, prompt, response);
  double sum = 0.0;
  for (double v : lp) sum += v;
  return std::exp(-sum / static_cast<double>(lp.size()));
}

double perplexity(const ModelState& state, std::span<const TokenId> sequence) {
  const TokenId bos[] = {kBos};
  return conditional_perplexity(state, bos, sequence);
}

MetricReport evaluate_run(const ModelState& state, std::span<const PromptRecord> prompts,
                          std::span<const std::string> references, const EvalOptions& options) {
  if (prompts.empty()) throw Error(ErrorCode::kInvalidArgument, "evaluation set is empty");
  if (prompts.size() != references.size()) {
    throw Error(ErrorCode::kInvalidArgument,
                "evaluation set has " + std::to_string(prompts.size()) + " prompts but " +
                    std::to_string(references.size()) + " references");
  }
  if (options.hypotheses && options.hypotheses->size() != prompts.size()) {
    throw Error(ErrorCode::kInvalidArgument, "hypothesis count does not match the evaluation set");
  }

  MetricReport report;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto prompt =
        encode_prompt(state.vocab, render_prompt(prompts[i].instruction, prompts[i].constraints));
    auto reference = state.vocab.tokenize(references[i]);
    std::vector<TokenId> hypothesis;
    if (options.hypotheses) {
      hypothesis = state.vocab.tokenize((*options.hypotheses)[i]);
    } else {
      hypothesis = sample(state, prompt, options.sampler);
      if (!hypothesis.empty() && hypothesis.back() == kEos) hypothesis.pop_back();
    }

    SampleMetrics row;
    row.id = i;
    row.bleu4 = bleu(hypothesis, reference);
    row.rouge1 = rouge_n(hypothesis, reference, 1).value;
    row.rouge2 = rouge_n(hypothesis, reference, 2).value;
    row.rougeL = rouge_l(hypothesis, reference).value;
    reference.push_back(kEos);
    row.ppl = conditional_perplexity(state, prompt, reference);
    report.samples.push_back(row);
  }

  const double n = static_cast<double>(report.samples.size());
  for (const auto& s : report.samples) {
    report.bleu4 += s.bleu4;
    report.rouge1 += s.rouge1;
    report.rouge2 += s.rouge2;
    report.rougeL += s.rougeL;
    report.ppl += s.ppl;
  }
  report.bleu4 /= n;
  report.rouge1 /= n;
  report.rouge2 /= n;
  report.rougeL /= n;
  report.ppl /= n;
  return report;
}

namespace {

constexpr const char* kHeader = "id\tbleu4\trouge1\trouge2\trougeL\tppl";

void put_row(std::ostream& out, const std::string& id, double b, double r1, double r2, double rl,
             double ppl) {
  out << id << '\t' << b << '\t' << r1 << '\t' << r2 << '\t' << rl << '\t' << ppl << '\n';
}

}  // namespace

std::string format_report(const MetricReport& report) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << kHeader << '\n';
  for (const auto& s : report.samples) {
    put_row(out, std::to_string(s.id), s.bleu4, s.rouge1, s.rouge2, s.rougeL, s.ppl);
  }
  put_row(out, "mean", report.bleu4, report.rouge1, report.rouge2, report.rougeL, report.ppl);
  return out.str();
}

void write_report(const MetricReport& report, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write report " + path.string());
  out << format_report(report);
  if (!out) throw Error(ErrorCode::kIo, "short write for report " + path.string());
}

MetricReport parse_report(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kHeader) {
    throw Error(ErrorCode::kParse, "metric report: missing header");
  }
  MetricReport report;
  bool have_mean = false;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string id;
    double v[5];
    if (!std::getline(row, id, '\t') || !(row >> v[0] >> v[1] >> v[2] >> v[3] >> v[4])) {
      throw Error(ErrorCode::kParse, "metric report: malformed line " + std::to_string(line_no));
    }
    if (id == "mean") {
      report.bleu4 = v[0];
      report.rouge1 = v[1];
      report.rouge2 = v[2];
      report.rougeL = v[3];
      report.ppl = v[4];
      have_mean = true;
    } else {
      report.samples.push_back({std::stoul(id), v[0], v[1], v[2], v[3], v[4]});
    }
  }
  if (!have_mean) throw Error(ErrorCode::kParse, "metric report: missing summary row");
  return report;
}

nlohmann::json report_to_json(const MetricReport& report) {
  auto row = [](double b, double r1, double r2, double rl, double ppl) {
    return nlohmann::json{{"bleu4", b}, {"rouge1", r1}, {"rouge2", r2}, {"rougeL", rl}, {"ppl", ppl}};
  };
  nlohmann::json j = row(report.bleu4, report.rouge1, report.rouge2, report.rougeL, report.ppl);
  auto samples = nlohmann::json::array();
  for (const auto& s : report.samples) {
    auto r = row(s.bleu4, s.rouge1, s.rouge2, s.rougeL, s.ppl);
    r["id"] = s.id;
    samples.push_back(std::move(r));
  }
  j["samples"] = std::move(samples);
  return j;
}

}  // namespace rceg
