#include <sys/wait.h>

#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "adret/adapter.hpp"
#include "adret/io.hpp"

using namespace adret;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

// Spawns the real binary. Output is captured through shell redirection into
// files inside `dir`.
CliResult run_cli(const std::string& args, const fs::path& dir) {
  static int counter = 0;
  fs::path out = dir / ("stdout." + std::to_string(counter));
  fs::path err = dir / ("stderr." + std::to_string(counter));
  ++counter;
  std::string cmd = std::string(ADRET_CLI_PATH) + " " + args + " > " +
                    out.string() + " 2> " + err.string();
  int status = std::system(cmd.c_str());
  CliResult r;
  if (WIFEXITED(status)) r.code = WEXITSTATUS(status);
  r.out = read_file(out);
  r.err = read_file(err);
  return r;
}

// 24 tagged queries whose embeddings are shifted away from their targets;
// 16 train / 8 test.
void write_pairs(const fs::path& file) {
  std::ofstream os(file);
  for (int i = 0; i < 24; ++i) {
    std::string stem = "c" + std::to_string(i);
    nlohmann::json line = {
        {"query", "@@shifted common0 common1 common2 common3 " + stem +
                      "a " + stem + "b " + stem + "c"},
        {"target", stem + "a " + stem + "b " + stem + "c ;"},
        {"split", i < 16 ? "train" : "test"},
    };
    os << line.dump() << "\n";
  }
}

nlohmann::json base_config(const fs::path& dir) {
  return {
      {"seed", 22},
      {"out_dir", (dir / "run").string()},
      {"cache_dir", (dir / "cache").string()},
      {"dataset",
       {{"format", "pairs"},
        {"path", (dir / "pairs.jsonl").string()},
        {"name", "toy"}}},
      {"provider",
       {{"kind", "stub"},
        {"dimension", 48},
        {"stub",
         {{"mode", "offset"},
          {"seed", 7},
          {"domain_tag", "@@shifted"},
          {"offset_seed", 101},
          {"offset_norm", 4.0}}}}},
      {"train",
       {{"mode", "adr"},
        {"h", 8},
        {"margin", 0.4},
        {"batch_size", 4},
        {"base_lr", 0.01},
        {"max_epochs", 80},
        {"validation_fraction", 0.2}}},
      {"eval", {{"partition", "test"}, {"ks", {5, 10}}}},
  };
}

fs::path write_config(const fs::path& dir, const nlohmann::json& cfg,
                      const std::string& name = "config.json") {
  fs::path file = dir / name;
  std::ofstream os(file);
  os << cfg.dump(2) << "\n";
  return file;
}

}  // namespace

TEST_CASE("run trains, evaluates, and writes deterministic artifacts") {
  fs::path dir = fresh_dir("adret_cli_run");
  write_pairs(dir / "pairs.jsonl");
  fs::path cfg = write_config(dir, base_config(dir));

  CliResult first = run_cli("run --config " + cfg.string(), dir);
  CAPTURE(first.err);
  REQUIRE(first.code == 0);
  CHECK_THAT(first.out, Catch::Matchers::ContainsSubstring("baseline"));
  CHECK_THAT(first.out, Catch::Matchers::ContainsSubstring("adr"));
  CHECK_THAT(first.out, Catch::Matchers::ContainsSubstring("nDCG@10"));

  for (const char* name : {"adapter_query.ckpt", "train_report.json",
                           "metrics.json", "manifest.json"})
    CHECK(fs::exists(dir / "run" / name));

  // The adapted system beats raw cosine retrieval on the held-out split.
  auto metrics =
      nlohmann::json::parse(read_file(dir / "run" / "metrics.json"));
  REQUIRE(metrics.at("systems").size() == 2);
  double base = metrics.at("systems")[0].at("mean_ndcg").at("10");
  double adapted = metrics.at("systems")[1].at("mean_ndcg").at("10");
  CHECK(metrics.at("systems")[0].at("name") == "baseline");
  CHECK(metrics.at("systems")[1].at("name") == "adr");
  CHECK(adapted > base + 0.1);

  // Identical configuration -> byte-identical manifest (no timestamps, no
  // machine-specific state).
  std::string manifest_a = read_file(dir / "run" / "manifest.json");
  CliResult second = run_cli("run --config " + cfg.string(), dir);
  REQUIRE(second.code == 0);
  CHECK(read_file(dir / "run" / "manifest.json") == manifest_a);

  // The checkpoint metadata names the mode and dataset.
  nlohmann::json meta;
  load_adapter(dir / "run" / "adapter_query.ckpt", &meta);
  CHECK(meta.at("mode") == "adr");
  CHECK(meta.at("dataset") == "toy");
  CHECK(meta.at("role") == "query");
}

TEST_CASE("eval reuses a saved checkpoint") {
  fs::path dir = fresh_dir("adret_cli_eval");
  write_pairs(dir / "pairs.jsonl");
  fs::path cfg = write_config(dir, base_config(dir));
  REQUIRE(run_cli("train --config " + cfg.string(), dir).code == 0);

  CliResult eval = run_cli(
      "eval --config " + cfg.string() + " --checkpoint " +
          (dir / "run" / "adapter_query.ckpt").string(),
      dir);
  CAPTURE(eval.err);
  REQUIRE(eval.code == 0);
  CHECK_THAT(eval.out, Catch::Matchers::ContainsSubstring("adr"));
  CHECK(fs::exists(dir / "run" / "metrics.json"));

  // Baseline-only when no checkpoint is given.
  CliResult bare = run_cli("eval --config " + cfg.string(), dir);
  REQUIRE(bare.code == 0);
  CHECK_THAT(bare.out, Catch::Matchers::ContainsSubstring("baseline"));

  // A partition override flows through.
  CliResult train_part = run_cli(
      "eval --config " + cfg.string() + " --partition train", dir);
  REQUIRE(train_part.code == 0);
  CHECK_THAT(train_part.out, Catch::Matchers::ContainsSubstring("train"));

  // An adr_full checkpoint demands its corpus-side half.
  AdapterParams theta = init_adapter({4, 48, 1.0, 1.0, 9});
  save_adapter(theta, dir / "full.ckpt", {{"mode", "adr_full"}});
  CliResult missing = run_cli(
      "eval --config " + cfg.string() + " --checkpoint " +
          (dir / "full.ckpt").string(),
      dir);
  CHECK(missing.code == 1);
  CHECK_THAT(missing.err,
             Catch::Matchers::ContainsSubstring("checkpoint-corpus"));
}

TEST_CASE("embed reports cache traffic and dumps vectors") {
  fs::path dir = fresh_dir("adret_cli_embed");
  write_pairs(dir / "pairs.jsonl");
  fs::path cfg = write_config(dir, base_config(dir));

  CliResult cold = run_cli("embed --config " + cfg.string() + " --out " +
                               (dir / "emb.jsonl").string(),
                           dir);
  CAPTURE(cold.err);
  REQUIRE(cold.code == 0);
  auto stats = nlohmann::json::parse(cold.out);
  CHECK(stats.at("texts") == 48);  // 24 documents + 24 queries
  CHECK(stats.at("cache_misses") == 48);
  CHECK(stats.at("dimension") == 48);

  // Every text got a vector line.
  std::string dump = read_file(dir / "emb.jsonl");
  std::size_t lines = 0;
  for (char c : dump) lines += c == '\n';
  CHECK(lines == 48);

  // Second pass is served from the cache.
  CliResult warm = run_cli("embed --config " + cfg.string(), dir);
  REQUIRE(warm.code == 0);
  auto warm_stats = nlohmann::json::parse(warm.out);
  CHECK(warm_stats.at("cache_hits") == 48);
  CHECK(warm_stats.at("cache_misses") == 0);
  CHECK(warm_stats.at("requests") == 0);
}

TEST_CASE("configuration mistakes exit with code 1") {
  fs::path dir = fresh_dir("adret_cli_badcfg");
  write_pairs(dir / "pairs.jsonl");

  nlohmann::json bad = base_config(dir);
  bad["train"]["learning_rate"] = 0.1;  // misnamed key
  fs::path cfg = write_config(dir, bad, "bad.json");
  CliResult r = run_cli("run --config " + cfg.string(), dir);
  CHECK(r.code == 1);
  CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring("unknown key"));
  CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring("learning_rate"));

  // Unparseable JSON.
  fs::path broken = dir / "broken.json";
  { std::ofstream(broken) << "{ not json"; }
  r = run_cli("run --config " + broken.string(), dir);
  CHECK(r.code == 1);
  CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring("JSON"));

  // Missing --config is a usage error.
  r = run_cli("run", dir);
  CHECK(r.code == 1);

  // Unknown subcommand likewise.
  r = run_cli("frobnicate", dir);
  CHECK(r.code == 1);

  // Dataset path that does not exist.
  nlohmann::json gone = base_config(dir);
  gone["dataset"]["path"] = (dir / "missing.jsonl").string();
  cfg = write_config(dir, gone, "gone.json");
  r = run_cli("run --config " + cfg.string(), dir);
  CHECK(r.code == 1);
}

TEST_CASE("provider failures exit with code 2") {
  fs::path dir = fresh_dir("adret_cli_provider");
  write_pairs(dir / "pairs.jsonl");

  nlohmann::json cfg = base_config(dir);
  cfg["provider"] = {{"kind", "remote"},
                     {"endpoint_url", "http://127.0.0.1:9/v1/embeddings"},
                     {"model_name", "test-embed"},
                     {"dimension", 48},
                     {"api_key_env", "ADRET_CLI_TEST_NO_KEY"}};
  unsetenv("ADRET_CLI_TEST_NO_KEY");
  fs::path file = write_config(dir, cfg, "remote.json");

  CliResult r = run_cli("embed --config " + file.string(), dir);
  CHECK(r.code == 2);
  CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring("ADRET_CLI_TEST_NO_KEY"));
}

TEST_CASE("training divergence exits with code 3") {
  fs::path dir = fresh_dir("adret_cli_diverge");
  write_pairs(dir / "pairs.jsonl");

  nlohmann::json cfg = base_config(dir);
  cfg["train"]["base_lr"] = 1e308;
  cfg["train"]["max_epochs"] = 5;
  fs::path file = write_config(dir, cfg, "diverge.json");

  CliResult r = run_cli("train --config " + file.string(), dir);
  CHECK(r.code == 3);
  CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring("diverged"));
}

TEST_CASE("the seed flag overrides the configured seed") {
  fs::path dir = fresh_dir("adret_cli_seed");
  write_pairs(dir / "pairs.jsonl");
  fs::path cfg = write_config(dir, base_config(dir));

  REQUIRE(run_cli("train --config " + cfg.string() + " --seed 33", dir)
              .code == 0);
  auto manifest =
      nlohmann::json::parse(read_file(dir / "run" / "manifest.json"));
  CHECK(manifest.at("config").at("seed") == 33);
  nlohmann::json meta;
  AdapterParams theta =
      load_adapter(dir / "run" / "adapter_query.ckpt", &meta);
  CHECK(theta.seed == 33);
}
