#pragma once

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "adret/datasets.hpp"
#include "adret/errors.hpp"
#include "adret/eval.hpp"
#include "adret/io.hpp"
#include "adret/provider.hpp"
#include "adret/trainer.hpp"

namespace adret {

// --- config sections ----------------------------------------------------------

struct DatasetConfig {
  enum class Format { beir, pairs, snapshot };
  Format format = Format::pairs;
  std::string path;
  std::string name;           // defaults to the path's filename
  bool dev_as_train = false;  // beir: use dev judgments for training
  bool split_enabled = false;
  SplitSpec split;
};

inline std::string format_name(DatasetConfig::Format f) {
  switch (f) {
    case DatasetConfig::Format::beir: return "beir";
    case DatasetConfig::Format::pairs: return "pairs";
    case DatasetConfig::Format::snapshot: return "snapshot";
  }
  throw Error("unreachable");
}

// Provider settings as written in the config; the offset vector itself is
// derived, so the stub block stores its recipe instead.
struct StubConfig {
  StubMode mode = StubMode::hashed;
  std::uint64_t seed = 0;
  std::string domain_tag;
  std::uint64_t offset_seed = 0;
  double offset_norm = 4.0;
};

struct ProviderConfig {
  ProviderSpec::Kind kind = ProviderSpec::Kind::stub;
  std::string endpoint_url;
  std::string model_name = "stub";
  std::size_t dimension = 64;
  std::string api_key_env = "ADRET_API_KEY";
  int batch_size = 64;
  int max_attempts = 5;
  int timeout_ms = 30000;
  int backoff_base_ms = 1000;
  std::size_t truncate_chars = 8000;
  StubConfig stub;

  ProviderSpec to_spec() const {
    ProviderSpec spec;
    spec.kind = kind;
    spec.endpoint_url = endpoint_url;
    spec.model_name = model_name;
    spec.dimension = dimension;
    spec.api_key_env = api_key_env;
    spec.batch_size = static_cast<std::size_t>(batch_size);
    spec.max_attempts = max_attempts;
    spec.timeout_ms = timeout_ms;
    spec.backoff_base_ms = backoff_base_ms;
    spec.truncate_chars = truncate_chars;
    spec.stub.mode = stub.mode;
    spec.stub.dimension = dimension;
    spec.stub.seed = stub.seed;
    spec.stub.domain_tag = stub.domain_tag;
    if (stub.mode == StubMode::offset)
      spec.stub.offset = make_offset(dimension, stub.offset_seed,
                                     stub.offset_norm);
    return spec;
  }
};

struct EvalSection {
  Partition partition = Partition::test;
  std::vector<int> ks = {10};
  GainScheme gain = GainScheme::exponential;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string cache_dir;  // empty disables the on-disk embedding cache
  DatasetConfig dataset;
  ProviderConfig provider;
  TrainConfig train;  // train.seed mirrors the top-level seed
  std::vector<std::size_t> sweep_h;
  EvalSection eval;
};

// --- strict JSON parsing --------------------------------------------------------

namespace detail {

inline void expect_keys(const nlohmann::json& obj,
                        std::initializer_list<const char*> allowed,
                        const std::string& where) {
  if (!obj.is_object())
    throw ConfigError(where + ": expected a JSON object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError(where + ": unknown key \"" + it.key() + "\"");
  }
}

template <class T>
T get_or(const nlohmann::json& obj, const char* key, T fallback,
         const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

inline std::string get_string(const nlohmann::json& obj, const char* key,
                              const std::string& fallback,
                              const std::string& where) {
  return get_or<std::string>(obj, key, fallback, where);
}

}  // namespace detail

inline TrainMode parse_train_mode(std::string_view s) {
  if (s == "adr") return TrainMode::adr;
  if (s == "adr_full") return TrainMode::adr_full;
  throw ConfigError("unknown train mode: " + std::string(s) +
                    " (expected adr or adr_full)");
}

inline GainScheme parse_gain(std::string_view s) {
  if (s == "exponential") return GainScheme::exponential;
  if (s == "linear") return GainScheme::linear;
  throw ConfigError("unknown gain scheme: " + std::string(s));
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  using detail::expect_keys;
  using detail::get_or;
  using detail::get_string;

  expect_keys(j, {"seed", "out_dir", "cache_dir", "dataset", "provider",
                  "train", "eval"},
              "config");
  RunConfig cfg;
  cfg.seed = get_or<std::uint64_t>(j, "seed", 0, "config");
  cfg.out_dir = get_string(j, "out_dir", "", "config");
  cfg.cache_dir = get_string(j, "cache_dir", "", "config");

  if (!j.contains("dataset"))
    throw ConfigError("config: missing required section \"dataset\"");
  const auto& d = j.at("dataset");
  expect_keys(d, {"format", "path", "name", "dev_as_train", "split"},
              "config.dataset");
  std::string format = get_string(d, "format", "pairs", "config.dataset");
  if (format == "beir")
    cfg.dataset.format = DatasetConfig::Format::beir;
  else if (format == "pairs")
    cfg.dataset.format = DatasetConfig::Format::pairs;
  else if (format == "snapshot")
    cfg.dataset.format = DatasetConfig::Format::snapshot;
  else
    throw ConfigError("config.dataset.format: unknown format \"" + format +
                      "\"");
  cfg.dataset.path = get_string(d, "path", "", "config.dataset");
  if (cfg.dataset.path.empty())
    throw ConfigError("config.dataset.path: required");
  cfg.dataset.name = get_string(
      d, "name", std::filesystem::path(cfg.dataset.path).filename().string(),
      "config.dataset");
  cfg.dataset.dev_as_train =
      get_or<bool>(d, "dev_as_train", false, "config.dataset");
  if (d.contains("split")) {
    const auto& s = d.at("split");
    expect_keys(s, {"enabled", "train_fraction", "seed"},
                "config.dataset.split");
    cfg.dataset.split_enabled =
        get_or<bool>(s, "enabled", true, "config.dataset.split");
    cfg.dataset.split.train_fraction = get_or<double>(
        s, "train_fraction", 0.8, "config.dataset.split");
    cfg.dataset.split.seed =
        get_or<std::uint64_t>(s, "seed", 0, "config.dataset.split");
  }

  if (j.contains("provider")) {
    const auto& p = j.at("provider");
    expect_keys(p,
                {"kind", "endpoint_url", "model_name", "dimension",
                 "api_key_env", "batch_size", "max_attempts", "timeout_ms",
                 "backoff_base_ms", "truncate_chars", "stub"},
                "config.provider");
    std::string kind = get_string(p, "kind", "stub", "config.provider");
    if (kind == "stub")
      cfg.provider.kind = ProviderSpec::Kind::stub;
    else if (kind == "remote")
      cfg.provider.kind = ProviderSpec::Kind::remote;
    else
      throw ConfigError("config.provider.kind: unknown kind \"" + kind +
                        "\"");
    cfg.provider.endpoint_url =
        get_string(p, "endpoint_url", "", "config.provider");
    cfg.provider.model_name =
        get_string(p, "model_name",
                   cfg.provider.kind == ProviderSpec::Kind::stub ? "stub" : "",
                   "config.provider");
    cfg.provider.dimension =
        get_or<std::size_t>(p, "dimension", 64, "config.provider");
    cfg.provider.api_key_env =
        get_string(p, "api_key_env", "ADRET_API_KEY", "config.provider");
    cfg.provider.batch_size =
        get_or<int>(p, "batch_size", 64, "config.provider");
    cfg.provider.max_attempts =
        get_or<int>(p, "max_attempts", 5, "config.provider");
    cfg.provider.timeout_ms =
        get_or<int>(p, "timeout_ms", 30000, "config.provider");
    cfg.provider.backoff_base_ms =
        get_or<int>(p, "backoff_base_ms", 1000, "config.provider");
    cfg.provider.truncate_chars =
        get_or<std::size_t>(p, "truncate_chars", 8000, "config.provider");
    if (p.contains("stub")) {
      const auto& s = p.at("stub");
      expect_keys(s, {"mode", "seed", "domain_tag", "offset_seed",
                      "offset_norm"},
                  "config.provider.stub");
      std::string mode =
          get_string(s, "mode", "hashed", "config.provider.stub");
      if (mode == "hashed")
        cfg.provider.stub.mode = StubMode::hashed;
      else if (mode == "offset")
        cfg.provider.stub.mode = StubMode::offset;
      else
        throw ConfigError("config.provider.stub.mode: unknown mode \"" +
                          mode + "\"");
      cfg.provider.stub.seed =
          get_or<std::uint64_t>(s, "seed", 0, "config.provider.stub");
      cfg.provider.stub.domain_tag =
          get_string(s, "domain_tag", "", "config.provider.stub");
      cfg.provider.stub.offset_seed =
          get_or<std::uint64_t>(s, "offset_seed", 0, "config.provider.stub");
      cfg.provider.stub.offset_norm =
          get_or<double>(s, "offset_norm", 4.0, "config.provider.stub");
    }
  }
  if (cfg.provider.kind == ProviderSpec::Kind::remote) {
    if (cfg.provider.endpoint_url.empty())
      throw ConfigError("config.provider.endpoint_url: required for remote");
    if (cfg.provider.model_name.empty())
      throw ConfigError("config.provider.model_name: required for remote");
    if (cfg.provider.dimension == 0)
      throw ConfigError("config.provider.dimension: required for remote");
  }
  if (cfg.provider.dimension == 0)
    throw ConfigError("config.provider.dimension: must be positive");

  if (j.contains("train")) {
    const auto& t = j.at("train");
    expect_keys(t,
                {"mode", "h", "temperature", "init_key_scale", "base_lr",
                 "gamma", "step_every_epochs", "max_epochs", "batch_size",
                 "margin", "validation_fraction", "selection",
                 "refresh_every_batches", "divergence_factor", "sweep_h"},
                "config.train");
    cfg.train.mode = parse_train_mode(
        get_string(t, "mode", "adr", "config.train"));
    cfg.train.h = get_or<std::size_t>(t, "h", 64, "config.train");
    cfg.train.temperature =
        get_or<double>(t, "temperature", 1.0, "config.train");
    cfg.train.init_key_scale =
        get_or<double>(t, "init_key_scale", 1.0, "config.train");
    cfg.train.base_lr = get_or<double>(t, "base_lr", 0.0, "config.train");
    cfg.train.gamma = get_or<double>(t, "gamma", 0.5, "config.train");
    cfg.train.step_every_epochs =
        get_or<int>(t, "step_every_epochs", 0, "config.train");
    cfg.train.max_epochs = get_or<int>(t, "max_epochs", 500, "config.train");
    cfg.train.batch_size =
        get_or<std::size_t>(t, "batch_size", 32, "config.train");
    cfg.train.margin = get_or<double>(t, "margin", 0.1, "config.train");
    cfg.train.validation_fraction =
        get_or<double>(t, "validation_fraction", 0.1, "config.train");
    std::string selection =
        get_string(t, "selection", "ndcg_at_10", "config.train");
    if (selection == "ndcg_at_10")
      cfg.train.selection = SelectionMetric::ndcg_at_10;
    else if (selection == "loss")
      cfg.train.selection = SelectionMetric::loss;
    else
      throw ConfigError("config.train.selection: unknown metric \"" +
                        selection + "\"");
    cfg.train.refresh_every_batches =
        get_or<int>(t, "refresh_every_batches", 1, "config.train");
    cfg.train.divergence_factor =
        get_or<double>(t, "divergence_factor", 10.0, "config.train");
    cfg.sweep_h = get_or<std::vector<std::size_t>>(t, "sweep_h", {},
                                                   "config.train");
  }
  cfg.train.seed = cfg.seed;

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    expect_keys(e, {"partition", "ks", "gain"}, "config.eval");
    std::string partition = get_string(e, "partition", "test", "config.eval");
    try {
      cfg.eval.partition = parse_partition(partition);
    } catch (const IngestionError& err) {
      throw ConfigError(std::string("config.eval.partition: ") + err.what());
    }
    cfg.eval.ks = get_or<std::vector<int>>(e, "ks", {10}, "config.eval");
    if (cfg.eval.ks.empty())
      throw ConfigError("config.eval.ks: must list at least one cutoff");
    for (int k : cfg.eval.ks)
      if (k < 1) throw ConfigError("config.eval.ks: cutoffs must be >= 1");
    cfg.eval.gain =
        parse_gain(get_string(e, "gain", "exponential", "config.eval"));
  }
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  return parse_run_config(j);
}

// Canonical re-serialization of the effective settings (every field, with
// defaults applied). Used for config echoes and manifest hashing, so it
// must be deterministic.
inline nlohmann::json config_to_json(const RunConfig& cfg) {
  nlohmann::json stub = {
      {"mode", cfg.provider.stub.mode == StubMode::hashed ? "hashed"
                                                          : "offset"},
      {"seed", cfg.provider.stub.seed},
      {"domain_tag", cfg.provider.stub.domain_tag},
      {"offset_seed", cfg.provider.stub.offset_seed},
      {"offset_norm", cfg.provider.stub.offset_norm},
  };
  nlohmann::json train = {
      {"mode", train_mode_name(cfg.train.mode)},
      {"h", cfg.train.h},
      {"temperature", cfg.train.temperature},
      {"init_key_scale", cfg.train.init_key_scale},
      {"base_lr", cfg.train.base_lr},
      {"gamma", cfg.train.gamma},
      {"step_every_epochs", cfg.train.step_every_epochs},
      {"max_epochs", cfg.train.max_epochs},
      {"batch_size", cfg.train.batch_size},
      {"margin", cfg.train.margin},
      {"validation_fraction", cfg.train.validation_fraction},
      {"selection", cfg.train.selection == SelectionMetric::ndcg_at_10
                        ? "ndcg_at_10"
                        : "loss"},
      {"refresh_every_batches", cfg.train.refresh_every_batches},
      {"divergence_factor", cfg.train.divergence_factor},
      {"sweep_h", cfg.sweep_h},
  };
  return {
      {"seed", cfg.seed},
      {"out_dir", cfg.out_dir},
      {"cache_dir", cfg.cache_dir},
      {"dataset",
       {
           {"format", format_name(cfg.dataset.format)},
           {"path", cfg.dataset.path},
           {"name", cfg.dataset.name},
           {"dev_as_train", cfg.dataset.dev_as_train},
           {"split",
            {
                {"enabled", cfg.dataset.split_enabled},
                {"train_fraction", cfg.dataset.split.train_fraction},
                {"seed", cfg.dataset.split.seed},
            }},
       }},
      {"provider",
       {
           {"kind", cfg.provider.kind == ProviderSpec::Kind::stub ? "stub"
                                                                  : "remote"},
           {"endpoint_url", cfg.provider.endpoint_url},
           {"model_name", cfg.provider.model_name},
           {"dimension", cfg.provider.dimension},
           {"api_key_env", cfg.provider.api_key_env},
           {"batch_size", cfg.provider.batch_size},
           {"max_attempts", cfg.provider.max_attempts},
           {"timeout_ms", cfg.provider.timeout_ms},
           {"backoff_base_ms", cfg.provider.backoff_base_ms},
           {"truncate_chars", cfg.provider.truncate_chars},
           {"stub", std::move(stub)},
       }},
      {"train", std::move(train)},
      {"eval",
       {
           {"partition", partition_name(cfg.eval.partition)},
           {"ks", cfg.eval.ks},
           {"gain",
            cfg.eval.gain == GainScheme::exponential ? "exponential"
                                                     : "linear"},
       }},
  };
}

}  // namespace adret
