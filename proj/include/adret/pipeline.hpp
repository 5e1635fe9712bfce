#pragma once

#include <algorithm>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "adret/adapter.hpp"
#include "adret/corpus_index.hpp"
#include "adret/datasets.hpp"
#include "adret/errors.hpp"
#include "adret/eval.hpp"
#include "adret/io.hpp"
#include "adret/provider.hpp"
#include "adret/provider_http.hpp"
#include "adret/run_config.hpp"
#include "adret/trainer.hpp"

namespace adret {

inline RetrievalDataset dataset_from_config(const DatasetConfig& dc) {
  RetrievalDataset ds;
  switch (dc.format) {
    case DatasetConfig::Format::beir:
      ds = load_beir(dc.path, {.dev_as_train = dc.dev_as_train});
      break;
    case DatasetConfig::Format::pairs:
      ds = load_pairs(dc.path, dc.name);
      break;
    case DatasetConfig::Format::snapshot:
      ds = load_dataset(dc.path);
      break;
  }
  if (!dc.name.empty()) ds.name = dc.name;
  if (dc.split_enabled) ds = split(ds, dc.split);
  check_integrity(ds);
  return ds;
}

namespace detail {

inline EmbedOptions embed_options(const RunConfig& cfg) {
  EmbedOptions opts;
  opts.batch_size = static_cast<std::size_t>(cfg.provider.batch_size);
  opts.truncate_chars = cfg.provider.truncate_chars;
  return opts;
}

inline std::optional<EmbeddingCache> open_cache(const RunConfig& cfg) {
  std::optional<EmbeddingCache> cache;
  if (!cfg.cache_dir.empty()) cache.emplace(cfg.cache_dir);
  return cache;
}

// Embeds one partition's queries and its evaluation corpus.
struct EmbeddedPartition {
  std::unordered_map<std::string, Vec> queries;
  CorpusIndex index;
};

inline EmbeddedPartition embed_partition(const RetrievalDataset& ds,
                                         Partition part,
                                         EmbeddingProvider& provider,
                                         EmbeddingCache* cache,
                                         const EmbedOptions& opts) {
  std::vector<std::string> qids = ds.query_ids(part);
  if (qids.empty())
    throw ConfigError("no queries in the " + partition_name(part) +
                      " partition");
  std::vector<std::string> corpus_ids = ds.eval_corpus_ids(part);
  if (corpus_ids.empty())
    throw ConfigError("no evaluation corpus for the " + partition_name(part) +
                      " partition");

  std::vector<std::string> texts;
  texts.reserve(corpus_ids.size());
  for (const auto& id : corpus_ids) texts.push_back(ds.corpus.at(id));
  std::vector<Vec> rows = embed_batch(texts, provider, cache, opts);
  Mat raw(rows.size(), provider.dimension());
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(rows[i].begin(), rows[i].end(), raw.row(i).begin());

  texts.clear();
  for (const auto& id : qids) texts.push_back(ds.queries.at(id));
  std::vector<Vec> qvecs = embed_batch(texts, provider, cache, opts);

  EmbeddedPartition out{.queries = {},
                        .index = CorpusIndex(corpus_ids, std::move(raw))};
  for (std::size_t i = 0; i < qids.size(); ++i)
    out.queries[qids[i]] = std::move(qvecs[i]);
  return out;
}

// Baseline plus (optionally) the adapted system, as one metrics table.
inline MetricsTable run_evaluation(const RetrievalDataset& ds,
                                   const RunConfig& cfg,
                                   EmbeddingProvider& provider,
                                   EmbeddingCache* cache,
                                   const AdapterParams* theta,
                                   const AdapterParams* theta_corpus) {
  EmbeddedPartition ep = embed_partition(ds, cfg.eval.partition, provider,
                                         cache, embed_options(cfg));
  MetricsTable table;
  table.dataset = ds.name;
  table.partition = partition_name(cfg.eval.partition);
  table.gain = cfg.eval.gain;
  table.ks = cfg.eval.ks;
  table.systems.push_back(evaluate_system(
      ds, cfg.eval.partition, ep.queries, ep.index, RetrievalMode::baseline,
      nullptr, nullptr, cfg.eval.ks, cfg.eval.gain));
  if (theta) {
    RetrievalMode mode =
        theta_corpus ? RetrievalMode::adr_full : RetrievalMode::adr;
    table.systems.push_back(evaluate_system(ds, cfg.eval.partition,
                                            ep.queries, ep.index, mode, theta,
                                            theta_corpus, cfg.eval.ks,
                                            cfg.eval.gain));
  }
  return table;
}

inline void write_json_file(const std::filesystem::path& path,
                            const nlohmann::json& j) {
  atomic_write(path, [&](std::ostream& os) { os << j.dump(2) << "\n"; });
}

// The manifest ties one run's artifacts to the exact configuration that
// produced them. It contains no timestamps and skips hashing the volatile
// training report (wall-clock time), so identical configurations yield
// byte-identical manifests.
inline void write_manifest(const RunConfig& cfg, const RetrievalDataset& ds,
                           EmbeddingProvider& provider,
                           const std::filesystem::path& dir,
                           const std::vector<std::string>& artifacts,
                           const nlohmann::json& extra) {
  nlohmann::json config = config_to_json(cfg);
  nlohmann::json hashes = nlohmann::json::object();
  for (const auto& name : artifacts)
    if (name != "train_report.json")
      hashes[name] = sha256_hex(read_file(dir / name));
  nlohmann::json m = {
      {"config", config},
      {"config_sha256", sha256_hex(config.dump())},
      {"dataset",
       {{"name", ds.name},
        {"queries", ds.queries.size()},
        {"documents", ds.corpus.size()},
        {"pairs", ds.pairs.size()}}},
      {"provider", provider.cache_identity()},
      {"artifacts", artifacts},
      {"artifact_sha256", std::move(hashes)},
  };
  for (const auto& [key, value] : extra.items()) m[key] = value;
  write_json_file(dir / "manifest.json", m);
}

inline nlohmann::json adapter_metadata(const RunConfig& cfg,
                                       const RetrievalDataset& ds,
                                       EmbeddingProvider& provider,
                                       TrainMode mode, const char* role) {
  return {{"mode", train_mode_name(mode)},
          {"role", role},
          {"dataset", ds.name},
          {"provider", provider.cache_identity()},
          {"seed", cfg.seed}};
}

struct TrainOutcome {
  FitResult result;
  nlohmann::json report;  // fit report, or {sweep, best} for sweeps
};

inline TrainOutcome train_from_config(const RunConfig& cfg,
                                      const RetrievalDataset& ds,
                                      EmbeddingProvider& provider,
                                      EmbeddingCache* cache,
                                      const EmbedOptions& opts) {
  if (!cfg.sweep_h.empty()) {
    SweepResult swept = sweep(ds, provider, cache, cfg.train, cfg.sweep_h,
                              opts);
    FitResult result = std::move(*swept.cells[swept.best_cell].result);
    nlohmann::json report = {{"sweep", swept.report},
                             {"best", result.report}};
    return {std::move(result), std::move(report)};
  }
  FitResult result = fit(ds, provider, cache, cfg.train, opts);
  nlohmann::json report = result.report;
  return {std::move(result), std::move(report)};
}

inline const nlohmann::json& best_report(const nlohmann::json& report) {
  return report.contains("best") ? report.at("best") : report;
}

inline nlohmann::json train_summary(const nlohmann::json& best) {
  return {{"best_epoch", best.at("best_epoch")},
          {"best_metric", best.at("best_metric")},
          {"baseline_metric", best.at("baseline_metric")},
          {"selection_metric", best.at("selection_metric")}};
}

inline std::vector<std::string> save_train_artifacts(
    const RunConfig& cfg, const RetrievalDataset& ds,
    EmbeddingProvider& provider, const TrainOutcome& outcome,
    const std::filesystem::path& dir) {
  std::vector<std::string> artifacts = {"adapter_query.ckpt",
                                        "train_report.json"};
  save_adapter(outcome.result.theta, dir / "adapter_query.ckpt",
               adapter_metadata(cfg, ds, provider, cfg.train.mode, "query"));
  if (outcome.result.theta_corpus) {
    save_adapter(*outcome.result.theta_corpus, dir / "adapter_corpus.ckpt",
                 adapter_metadata(cfg, ds, provider, cfg.train.mode,
                                  "corpus"));
    artifacts.insert(artifacts.begin() + 1, "adapter_corpus.ckpt");
  }
  write_json_file(dir / "train_report.json", outcome.report);
  return artifacts;
}

}  // namespace detail

// Embeds every document and query through the provider (warming the cache
// when one is configured) and reports traffic statistics. Optionally dumps
// the vectors as JSON lines.
inline int cmd_embed(const RunConfig& cfg, std::ostream& out,
                     const std::string& dump_path = "") {
  RetrievalDataset ds = dataset_from_config(cfg.dataset);
  std::unique_ptr<EmbeddingProvider> provider =
      make_provider(cfg.provider.to_spec());
  std::optional<EmbeddingCache> cache = detail::open_cache(cfg);

  std::vector<std::string> ids, kinds, texts;
  for (const auto& [id, text] : ds.corpus) {
    ids.push_back(id);
    kinds.push_back("document");
    texts.push_back(text);
  }
  for (const auto& [id, text] : ds.queries) {
    ids.push_back(id);
    kinds.push_back("query");
    texts.push_back(text);
  }

  EmbedStats stats;
  std::vector<Vec> vecs =
      embed_batch(texts, *provider, cache ? &*cache : nullptr,
                  detail::embed_options(cfg), &stats);

  if (!dump_path.empty())
    atomic_write(dump_path, [&](std::ostream& os) {
      for (std::size_t i = 0; i < ids.size(); ++i)
        os << nlohmann::json{{"id", ids[i]},
                             {"kind", kinds[i]},
                             {"embedding", vecs[i]}}
                  .dump()
           << "\n";
    });

  out << nlohmann::json{{"dataset", ds.name},
                        {"dimension", provider->dimension()},
                        {"texts", stats.texts},
                        {"cache_hits", stats.cache_hits},
                        {"cache_misses", stats.cache_misses},
                        {"truncated", stats.truncated},
                        {"requests", stats.requests}}
             .dump(2)
      << "\n";
  return 0;
}

// Trains an adapter (or sweeps dictionary sizes) and writes the checkpoint,
// training report, and manifest into out_dir.
inline int cmd_train(const RunConfig& cfg, std::ostream& out) {
  if (cfg.out_dir.empty())
    throw ConfigError("train: out_dir must be configured");
  RetrievalDataset ds = dataset_from_config(cfg.dataset);
  std::unique_ptr<EmbeddingProvider> provider =
      make_provider(cfg.provider.to_spec());
  std::optional<EmbeddingCache> cache = detail::open_cache(cfg);
  EmbeddingCache* cache_ptr = cache ? &*cache : nullptr;
  EmbedOptions opts = detail::embed_options(cfg);

  detail::TrainOutcome outcome =
      detail::train_from_config(cfg, ds, *provider, cache_ptr, opts);
  const nlohmann::json& best = detail::best_report(outcome.report);

  std::filesystem::path dir = cfg.out_dir;
  std::vector<std::string> artifacts =
      detail::save_train_artifacts(cfg, ds, *provider, outcome, dir);
  detail::write_manifest(cfg, ds, *provider, dir, artifacts,
                         {{"train", detail::train_summary(best)}});

  out << "trained " << train_mode_name(cfg.train.mode) << " on " << ds.name
      << ": best " << best.at("selection_metric").get<std::string>() << " "
      << best.at("best_metric").get<double>() << " at epoch "
      << best.at("best_epoch").get<int>() << "\n"
      << "artifacts in " << dir.string() << "\n";
  return 0;
}

// Evaluates raw-cosine retrieval, plus an adapted system when a checkpoint
// is supplied, against the configured partition.
inline int cmd_eval(const RunConfig& cfg, const std::string& checkpoint,
                    const std::string& checkpoint_corpus, std::ostream& out) {
  RetrievalDataset ds = dataset_from_config(cfg.dataset);
  std::unique_ptr<EmbeddingProvider> provider =
      make_provider(cfg.provider.to_spec());
  std::optional<EmbeddingCache> cache = detail::open_cache(cfg);

  std::optional<AdapterParams> theta, theta_corpus;
  if (checkpoint_corpus.size() && checkpoint.empty())
    throw ConfigError("eval: --checkpoint-corpus requires --checkpoint");
  if (!checkpoint.empty()) {
    nlohmann::json meta;
    theta = load_adapter(checkpoint, &meta);
    if (theta->d != provider->dimension())
      throw ConfigError(
          "eval: checkpoint dimension " + std::to_string(theta->d) +
          " does not match the provider's " +
          std::to_string(provider->dimension()));
    if (!checkpoint_corpus.empty())
      theta_corpus = load_adapter(checkpoint_corpus);
    else if (meta.value("mode", "adr") == "adr_full")
      throw ConfigError(
          "eval: this checkpoint was trained adr_full; pass the corpus side "
          "via --checkpoint-corpus");
  }

  MetricsTable table = detail::run_evaluation(
      ds, cfg, *provider, cache ? &*cache : nullptr,
      theta ? &*theta : nullptr, theta_corpus ? &*theta_corpus : nullptr);
  out << render_table(table);
  if (!cfg.out_dir.empty())
    detail::write_json_file(std::filesystem::path(cfg.out_dir) /
                                "metrics.json",
                            table_to_json(table));
  return 0;
}

// Full pipeline: train, evaluate with the freshly trained parameters, and
// leave checkpoint + reports + manifest in out_dir.
inline int cmd_run(const RunConfig& cfg, std::ostream& out) {
  if (cfg.out_dir.empty())
    throw ConfigError("run: out_dir must be configured");
  RetrievalDataset ds = dataset_from_config(cfg.dataset);
  std::unique_ptr<EmbeddingProvider> provider =
      make_provider(cfg.provider.to_spec());
  std::optional<EmbeddingCache> cache = detail::open_cache(cfg);
  EmbeddingCache* cache_ptr = cache ? &*cache : nullptr;
  EmbedOptions opts = detail::embed_options(cfg);

  detail::TrainOutcome outcome =
      detail::train_from_config(cfg, ds, *provider, cache_ptr, opts);
  const nlohmann::json& best = detail::best_report(outcome.report);

  MetricsTable table = detail::run_evaluation(
      ds, cfg, *provider, cache_ptr, &outcome.result.theta,
      outcome.result.theta_corpus ? &*outcome.result.theta_corpus : nullptr);

  std::filesystem::path dir = cfg.out_dir;
  std::vector<std::string> artifacts =
      detail::save_train_artifacts(cfg, ds, *provider, outcome, dir);
  artifacts.push_back("metrics.json");
  detail::write_json_file(dir / "metrics.json", table_to_json(table));

  nlohmann::json results = nlohmann::json::object();
  for (const auto& system : table.systems) {
    nlohmann::json per_k = nlohmann::json::object();
    for (const auto& [k, v] : system.mean_ndcg)
      per_k["ndcg@" + std::to_string(k)] = v;
    results[system.name] = per_k;
  }
  detail::write_manifest(cfg, ds, *provider, dir, artifacts,
                         {{"train", detail::train_summary(best)},
                          {"results", results}});

  out << render_table(table);
  out << "artifacts in " << dir.string() << "\n";
  return 0;
}

}  // namespace adret
