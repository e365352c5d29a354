// camhfa: synth -> train -> extract -> score -> eval, plus the gradcheck and equiv self-checks.

#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "camhfa/checkpoint.hpp"
#include "camhfa/config.hpp"
#include "camhfa/eval.hpp"
#include "camhfa/suites.hpp"

namespace fs = std::filesystem;
using namespace camhfa;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

unsigned thread_count() {
  const char* raw = std::getenv("CAMHFA_THREADS");
  if (raw == nullptr || *raw == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(raw, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) {
    throw UsageError(std::string("CAMHFA_THREADS must be a positive integer, got '") + raw + "'");
  }
  return static_cast<unsigned>(n);
}

void require_output_dir(const fs::path& out) {
  const fs::path dir = out.parent_path();
  if (!dir.empty() && !fs::is_directory(dir)) {
    throw UsageError("output directory does not exist: " + dir.string());
  }
  if (fs::is_directory(out)) throw UsageError("output path is a directory: " + out.string());
}

// Files already written by a multi-output command; removed unless the command reaches commit().
// Single writes clean up after themselves in io::write_file.
class Outputs {
 public:
  void add(const fs::path& p) { paths_.push_back(p); }
  void commit() { paths_.clear(); }
  ~Outputs() {
    for (const auto& p : paths_) {
      std::error_code ec;
      fs::remove(p, ec);
    }
  }

 private:
  std::vector<fs::path> paths_;
};

std::string format_record(const EpochRecord& r) {
  return std::to_string(r.epoch) + " " + format_double(r.loss) + " " + format_double(r.accuracy) + " " +
         format_double(r.lr) + "\n";
}

int report(const std::vector<SuiteCheck>& checks) {
  for (const auto& c : checks) {
    std::printf("%s  %s  max_error=%.3e tol=%.0e\n", c.passed() ? "PASS" : "FAIL", c.name.c_str(),
                c.max_error, c.tolerance);
  }
  const bool ok = all_passed(checks);
  std::printf("%s\n", ok ? "all checks passed" : "some checks FAILED");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-aware multi-head factorized attentive pooling: synthetic pipeline"};
  app.require_subcommand(1);

  std::string config, out, features, checkpoint, log, embeddings, trials, scores, cohort;
  std::size_t offset = 0, count = 0, top_k = 0;

  auto* synth = app.add_subcommand("synth", "generate a synthetic feature file");
  synth->add_option("--config", config)->required()->check(CLI::ExistingFile);
  synth->add_option("--out", out)->required();
  synth->add_option("--offset", offset, "first utterance index per speaker");
  auto* count_opt = synth->add_option("--count", count, "utterances per speaker (default: config)");

  auto* train_cmd = app.add_subcommand("train", "train on a feature file, write a checkpoint");
  train_cmd->add_option("--config", config)->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--features", features)->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", out)->required();
  train_cmd->add_option("--log", log, "also write the epoch log here");

  auto* extract = app.add_subcommand("extract", "embed every utterance of a feature file");
  extract->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  extract->add_option("--features", features)->required()->check(CLI::ExistingFile);
  extract->add_option("--out", out)->required();

  auto* trials_cmd = app.add_subcommand("trials", "all-pairs trial list for a feature file");
  trials_cmd->add_option("--features", features)->required()->check(CLI::ExistingFile);
  trials_cmd->add_option("--out", out)->required();

  auto* score = app.add_subcommand("score", "cosine-score a trial list, optionally with s-norm");
  score->add_option("--embeddings", embeddings)->required()->check(CLI::ExistingFile);
  score->add_option("--trials", trials)->required()->check(CLI::ExistingFile);
  score->add_option("--out", out)->required();
  auto* cohort_opt = score->add_option("--cohort", cohort, "cohort embeddings file")->check(CLI::ExistingFile);
  auto* topk_opt = score->add_option("--top-k", top_k, "cohort scores kept per side");
  cohort_opt->needs(topk_opt);
  topk_opt->needs(cohort_opt);

  auto* eval = app.add_subcommand("eval", "EER of a score file");
  eval->add_option("--scores", scores)->required()->check(CLI::ExistingFile);
  eval->add_option("--trials", trials)->required()->check(CLI::ExistingFile);

  auto* gradcheck = app.add_subcommand("gradcheck", "analytic vs finite-difference gradients");
  gradcheck->add_option("--config", config)->required()->check(CLI::ExistingFile);

  auto* equiv = app.add_subcommand("equiv", "degeneration and conv/direct equivalence checks");
  equiv->add_option("--config", config)->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;  // --help exits 0, every parse failure is a usage error
  }

  Outputs outputs;
  try {
    const unsigned threads = thread_count();

    if (*synth) {
      const RunConfig cfg = load_run_config(config);
      require_output_dir(out);
      const std::size_t n = count_opt->count() ? count : cfg.synth.utts_per_speaker;
      if (n == 0) throw UsageError("--count must be positive");
      write_features(out, generate_utterances(cfg.synth, offset, n));
    } else if (*train_cmd) {
      const RunConfig cfg = load_run_config(config);
      require_output_dir(out);
      if (!log.empty()) require_output_dir(log);
      const auto data = read_features(features);
      std::string text;
      const TrainResult r = train(data, cfg.train, threads, [&text](const EpochRecord& rec) {
        const std::string line = format_record(rec);
        text += line;
        std::fputs(line.c_str(), stdout);
        std::fflush(stdout);
      });
      if (!log.empty()) {
        io::write_file(log, text);
        outputs.add(log);
      }
      save_checkpoint(out, r.model);
    } else if (*extract) {
      const Model model = load_checkpoint(checkpoint);
      const auto data = read_features(features);
      require_output_dir(out);
      std::vector<std::pair<std::string, Embedding>> rows;
      rows.reserve(data.size());
      for (const auto& u : data) rows.emplace_back(u.utterance_id, extract_embedding(u.features, model.pooling));
      io::write_file(out, format_embeddings(rows));
    } else if (*trials_cmd) {
      const auto data = read_features(features);
      require_output_dir(out);
      io::write_file(out, format_trials(all_pairs_trials(data)));
    } else if (*score) {
      const EmbeddingTable table = to_table(parse_embeddings(io::read_file(embeddings), embeddings));
      const std::vector<Trial> list = read_trials(trials);
      std::vector<Embedding> cohort_set;
      if (!cohort.empty()) {
        for (auto& [id, e] : parse_embeddings(io::read_file(cohort), cohort)) cohort_set.push_back(std::move(e));
        if (top_k < 2 || top_k > cohort_set.size()) {
          throw UsageError("--top-k must be between 2 and the cohort size (" + std::to_string(cohort_set.size()) + ")");
        }
      }
      require_output_dir(out);
      ScoreSet s = score_trials(list, table);
      if (!cohort.empty()) s = adaptive_snorm(s, table, cohort_set, top_k);
      io::write_file(out, format_scores(s));
    } else if (*eval) {
      const auto score_map = parse_scores(io::read_file(scores), scores);
      const double eer = compute_eer(join_scores(read_trials(trials), score_map));
      std::printf("EER %.6f\n", eer);
    } else if (*gradcheck) {
      const RunConfig cfg = load_run_config(config);
      const GradcheckSetup setup =
          gradcheck_setup(cfg.check_seed, {}, cfg.train.margin, cfg.train.scale, cfg.train.margin_type);
      return report(run_gradcheck_suite(setup));
    } else if (*equiv) {
      const RunConfig cfg = load_run_config(config);
      return report(run_equivalence_suite(cfg.check_instances, cfg.check_seed));
    }
    outputs.commit();
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
