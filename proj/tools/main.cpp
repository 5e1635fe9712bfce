#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <string>

#include "adret/pipeline.hpp"
#include "adret/run_config.hpp"

namespace {

struct CliArgs {
  std::string config_path;
  bool seed_given = false;
  std::uint64_t seed = 0;
  std::string out_dir;    // overrides the config when given
  std::string cache_dir;  // likewise
  bool cache_dir_given = false;
  std::string embed_out;
  std::string checkpoint;
  std::string checkpoint_corpus;
  std::string partition;
};

void add_common_options(CLI::App* sub, CliArgs& args) {
  sub->add_option("--config", args.config_path,
                  "JSON run configuration file")
      ->required();
  sub->add_option_function<std::uint64_t>(
         "--seed",
         [&args](const std::uint64_t& v) {
           args.seed = v;
           args.seed_given = true;
         },
         "override the configured seed");
  sub->add_option("--out-dir", args.out_dir,
                  "override the configured output directory");
  sub->add_option_function<std::string>(
         "--cache-dir",
         [&args](const std::string& v) {
           args.cache_dir = v;
           args.cache_dir_given = true;
         },
         "override the embedding cache directory (empty disables)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "adret: adapt black-box text embeddings for task-specific retrieval"};
  app.require_subcommand(1);
  CliArgs args;

  CLI::App* embed = app.add_subcommand(
      "embed", "Embed the dataset's texts (warms the cache)");
  embed->add_option("--out", args.embed_out,
                    "write embeddings to this file as JSON lines");
  CLI::App* train =
      app.add_subcommand("train", "Train an adapter and save a checkpoint");
  CLI::App* eval = app.add_subcommand(
      "eval", "Evaluate retrieval quality on a partition");
  eval->add_option("--checkpoint", args.checkpoint,
                   "query-side adapter checkpoint");
  eval->add_option("--checkpoint-corpus", args.checkpoint_corpus,
                   "corpus-side adapter checkpoint (adr_full)");
  eval->add_option("--partition", args.partition,
                   "override the evaluation partition (train/dev/test)");
  CLI::App* run = app.add_subcommand(
      "run", "Train and evaluate end-to-end, writing a manifest");
  for (CLI::App* sub : {embed, train, eval, run})
    add_common_options(sub, args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    adret::RunConfig cfg = adret::load_run_config(args.config_path);
    if (args.seed_given) {
      cfg.seed = args.seed;
      cfg.train.seed = args.seed;
    }
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    if (args.cache_dir_given) cfg.cache_dir = args.cache_dir;
    if (!args.partition.empty()) {
      try {
        cfg.eval.partition = adret::parse_partition(args.partition);
      } catch (const adret::IngestionError& e) {
        throw adret::ConfigError(std::string("--partition: ") + e.what());
      }
    }

    if (embed->parsed())
      return adret::cmd_embed(cfg, std::cout, args.embed_out);
    if (train->parsed()) return adret::cmd_train(cfg, std::cout);
    if (eval->parsed())
      return adret::cmd_eval(cfg, args.checkpoint, args.checkpoint_corpus,
                             std::cout);
    return adret::cmd_run(cfg, std::cout);
  } catch (const adret::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const adret::ProviderError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
