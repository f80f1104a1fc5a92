// Command-line front end: self-checks, byte-level micro-training, execution
// benchmarks and the expert-count/activation sweep. Every command is
// deterministic for a fixed --seed; CSV outputs are rewritten whole.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "uoe/ablate.hpp"
#include "uoe/config_file.hpp"
#include "uoe/corpus.hpp"
#include "uoe/strategies.hpp"
#include "uoe/train.hpp"
#include "uoe/verify.hpp"

namespace {

// UOE_THREADS caps worker threads for every command.
std::size_t thread_cap_from_env() {
  const char* env = std::getenv("UOE_THREADS");
  if (!env || !*env) return 0;  // no cap
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (!end || *end != '\0' || v == 0)
    throw uoe::ConfigError(std::string("UOE_THREADS must be a positive "
                                       "integer, got '") +
                           env + "'");
  return static_cast<std::size_t>(v);
}

std::size_t effective_threads(std::size_t requested) {
  const std::size_t cap = thread_cap_from_env();
  if (cap && requested > cap) return cap;
  return requested;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw uoe::FormatError("cannot open '" + path + "' to write");
  f << text;
  if (!f) throw uoe::FormatError("short write to '" + path + "'");
}

uoe::RunConfig load_config_with_overrides(
    const std::string& config_path, const std::vector<std::string>& sets,
    const std::uint64_t* seed_override) {
  uoe::RunConfig cfg = uoe::load_run_config(config_path);
  for (const auto& kv : sets) uoe::apply_config_override(cfg, kv);
  if (seed_override) cfg.model.seed = *seed_override;
  return cfg;
}

template <typename ModelT>
int run_training(const uoe::RunConfig& cfg,
                 const std::vector<std::uint8_t>& corpus,
                 const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const std::string csv_path = out_dir + "/metrics.csv";
  const std::string ckpt_path = out_dir + "/checkpoint.uoe";
  uoe::Trainer<double, ModelT> trainer(ModelT::init(cfg.model), cfg.train);
  const auto history = trainer.run(corpus, csv_path, ckpt_path);
  const auto& final_metrics = history.back().second;
  const double baseline = uoe::unigram_baseline_ppl(corpus);
  std::cout << "arch " << cfg.arch << ", " << cfg.train.steps
            << " steps, final nll " << uoe::format_metric(final_metrics.nll)
            << ", ppl " << uoe::format_metric(final_metrics.ppl)
            << " (unigram baseline " << uoe::format_metric(baseline)
            << "), flops ratio "
            << uoe::format_metric(final_metrics.flops_ratio) << "\n"
            << "wrote " << csv_path << " and " << ckpt_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"union-of-experts transformer toolkit"};
  app.require_subcommand(1);

  // verify
  auto* verify = app.add_subcommand("verify", "run the named self-checks");
  std::string filter;
  std::uint64_t verify_seed = 1;
  verify->add_option("--filter", filter,
                     "run only checks whose name contains this substring");
  verify->add_option("--seed", verify_seed, "base seed for all checks");

  // train
  auto* train = app.add_subcommand("train", "train a byte-level model");
  std::string train_config, train_corpus, train_out;
  std::vector<std::string> train_sets;
  std::uint64_t train_seed = 0;
  bool train_seed_set = false;
  train->add_option("--config", train_config, "run configuration file")
      ->required()
      ->check(CLI::ExistingFile);
  train->add_option("--corpus", train_corpus, "raw byte corpus")
      ->required()
      ->check(CLI::ExistingFile);
  train->add_option("--out", train_out, "output directory")->required();
  train->add_option("--set", train_sets,
                    "override a config entry, key=value (repeatable)");
  train
      ->add_option_function<std::uint64_t>(
          "--seed",
          [&](std::uint64_t v) {
            train_seed = v;
            train_seed_set = true;
          },
          "override the model seed")
      ->expected(1);

  // bench
  auto* bench = app.add_subcommand("bench", "time the execution strategies");
  std::string bench_grid = "d=64;n=4;l=128,256,512";
  std::string bench_out;
  std::uint64_t bench_seed = 2026;
  std::size_t bench_threads = 1;
  bench->add_option("--grid", bench_grid,
                    "grid spec, e.g. d=32,64;n=4;l=128,256,512");
  bench->add_option("--out", bench_out, "output CSV file")->required();
  bench->add_option("--seed", bench_seed, "problem seed");
  bench->add_option("--threads", bench_threads,
                    "worker threads for the batched strategies");

  // ablate
  auto* ablate = app.add_subcommand(
      "ablate", "sweep expert count and activation ratio");
  std::string ablate_config, ablate_corpus, ablate_out;
  std::vector<std::string> ablate_sets;
  std::uint64_t ablate_seed = 0;
  bool ablate_seed_set = false;
  ablate->add_option("--config", ablate_config, "run configuration file")
      ->required()
      ->check(CLI::ExistingFile);
  ablate->add_option("--corpus", ablate_corpus, "raw byte corpus")
      ->required()
      ->check(CLI::ExistingFile);
  ablate->add_option("--out", ablate_out, "output CSV file")->required();
  ablate->add_option("--set", ablate_sets,
                     "override a config entry, key=value (repeatable)");
  ablate
      ->add_option_function<std::uint64_t>(
          "--seed",
          [&](std::uint64_t v) {
            ablate_seed = v;
            ablate_seed_set = true;
          },
          "override the model seed")
      ->expected(1);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*verify) {
      uoe::VerifyOptions opt;
      opt.seed = verify_seed;
      opt.filter = filter;
      return uoe::run_verify(opt, std::cout);
    }

    if (*train) {
      const auto cfg = load_config_with_overrides(
          train_config, train_sets, train_seed_set ? &train_seed : nullptr);
      const auto corpus = uoe::load_corpus_bytes(train_corpus);
      if (cfg.arch == "dense")
        return run_training<uoe::DenseModel<double>>(cfg, corpus, train_out);
      return run_training<uoe::UoeModel<double>>(cfg, corpus, train_out);
    }

    if (*bench) {
      const auto grid = uoe::parse_bench_grid(bench_grid);
      const std::size_t threads =
          effective_threads(std::max<std::size_t>(1, bench_threads));
      const auto rows =
          uoe::run_bench(grid, /*warmup=*/5, /*iters=*/20, threads,
                         bench_seed);
      write_text_file(bench_out, uoe::bench_csv(rows));
      for (const auto& r : rows)
        std::cout << uoe::to_string(r.strategy) << " d=" << r.d
                  << " n=" << r.n << " l=" << r.l << ": mean "
                  << uoe::format_metric(r.mean_ms) << " ms, p50 "
                  << uoe::format_metric(r.p50_ms) << " ms\n";
      std::cout << "wrote " << bench_out << " (" << rows.size()
                << " rows, threads=" << threads << ")\n";
      return 0;
    }

    if (*ablate) {
      const auto cfg = load_config_with_overrides(
          ablate_config, ablate_sets,
          ablate_seed_set ? &ablate_seed : nullptr);
      const auto corpus = uoe::load_corpus_bytes(ablate_corpus);
      const auto report =
          uoe::run_ablation(cfg, corpus, uoe::default_ablate_expert_grid(),
                            uoe::default_ablate_ratio_grid());
      write_text_file(ablate_out, uoe::ablate_csv(report));
      std::cout << "dense baseline ppl "
                << uoe::format_metric(report.dense_final_ppl) << "\n";
      for (const auto& c : report.cells)
        std::cout << "n=" << c.n << " r=" << uoe::format_metric(c.r)
                  << " k=" << c.k << ": ppl "
                  << uoe::format_metric(c.final_ppl) << ", flops ratio "
                  << uoe::format_metric(c.flops_ratio) << "\n";
      std::cout << "wrote " << ablate_out << " (" << report.cells.size()
                << " rows)\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
