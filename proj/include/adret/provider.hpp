#pragma once

#include <cctype>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "adret/errors.hpp"
#include "adret/io.hpp"
#include "adret/numerics.hpp"
#include "adret/rng.hpp"

namespace adret {

// --- text canonicalization -------------------------------------------------

// Trims and collapses whitespace runs to single spaces. Applied to every
// text before hashing, caching, or sending to a provider, so trivially
// different spellings share one cache entry.
inline std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
    } else {
      if (pending_space) out.push_back(' ');
      pending_space = false;
      out.push_back(c);
    }
  }
  return out;
}

// --- deterministic stub embeddings ------------------------------------------

enum class StubMode { hashed, offset };

// Offline stand-in for a remote embedding service. `hashed` maps each
// whitespace token to a signed coordinate via FNV-1a and L2-normalizes the
// bag-of-words sum. `offset` additionally shifts texts whose first token
// equals `domain_tag` by a fixed vector (then renormalizes), emulating the
// systematic query/document mismatch the adapter is meant to absorb.
struct StubSpec {
  StubMode mode = StubMode::hashed;
  std::size_t dimension = 64;
  std::uint64_t seed = 0;
  std::string domain_tag;  // first-token marker for the offset mode
  Vec offset;              // added before renormalizing

  bool operator==(const StubSpec&) const = default;
};

// A unit vector along a seeded random direction, scaled to `target_norm`.
inline Vec make_offset(std::size_t dimension, std::uint64_t seed,
                       double target_norm) {
  Rng rng(seed);
  Vec v(dimension);
  for (double& x : v) x = rng.gaussian();
  return scale(l2_normalize(v), target_norm);
}

inline Vec hashed_embedding(std::string_view text, std::size_t dimension,
                            std::uint64_t seed) {
  Vec v(dimension, 0.0);
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    std::size_t start = i;
    while (i < text.size() && text[i] != ' ') ++i;
    if (i == start) break;
    std::uint64_t h = fnv1a64(text.substr(start, i - start), seed,
                              /*mix_seed=*/true);
    v[(h >> 1) % dimension] += ((h & 1) == 0) ? 1.0 : -1.0;
  }
  if (norm(v) == 0.0)
    throw DegenerateVectorError(
        "hashed embedding collapsed to zero (token collisions)");
  return l2_normalize(v);
}

inline Vec stub_embed(std::string_view raw_text, const StubSpec& spec) {
  std::string text = normalize_text(raw_text);
  if (text.empty()) throw IngestionError("stub_embed: empty text");
  if (spec.mode == StubMode::offset && !spec.domain_tag.empty()) {
    std::string_view view = text;
    if (view.substr(0, spec.domain_tag.size()) == spec.domain_tag &&
        (view.size() == spec.domain_tag.size() ||
         view[spec.domain_tag.size()] == ' ')) {
      std::string_view content = view.substr(spec.domain_tag.size());
      if (!content.empty()) content.remove_prefix(1);
      if (content.empty())
        throw IngestionError("stub_embed: text is only the domain tag");
      if (spec.offset.size() != spec.dimension)
        throw ConfigError("stub_embed: offset dimension mismatch");
      Vec base = hashed_embedding(content, spec.dimension, spec.seed);
      Vec shifted = add(base, spec.offset);
      return l2_normalize(shifted);
    }
  }
  return hashed_embedding(text, spec.dimension, spec.seed);
}

// --- provider interface ------------------------------------------------------

struct ProviderSpec {
  enum class Kind { remote, stub };
  Kind kind = Kind::stub;
  std::string endpoint_url;  // remote only, e.g. https://host/v1/embeddings
  std::string model_name = "stub";
  std::size_t dimension = 0;
  std::string api_key_env = "ADRET_API_KEY";
  std::size_t batch_size = 64;
  int max_attempts = 5;  // total tries per request, including the first
  int timeout_ms = 30000;
  int backoff_base_ms = 1000;
  std::size_t truncate_chars = 8000;  // bytes of normalized text kept
  StubSpec stub;                      // stub only
};

// One embedding backend. `embed` issues a single logical request for the
// given texts (callers batch; see embed_batch). `cache_identity` must pin
// every knob that changes the produced vectors, since it namespaces cache
// keys.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::vector<Vec> embed(const std::vector<std::string>& texts) = 0;
  virtual std::size_t dimension() const = 0;
  virtual std::string cache_identity() const = 0;
};

class StubProvider final : public EmbeddingProvider {
 public:
  explicit StubProvider(StubSpec spec) : spec_(std::move(spec)) {
    if (spec_.dimension == 0)
      throw ConfigError("StubProvider: dimension must be positive");
  }

  std::vector<Vec> embed(const std::vector<std::string>& texts) override {
    std::vector<Vec> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(stub_embed(t, spec_));
    return out;
  }

  std::size_t dimension() const override { return spec_.dimension; }

  std::string cache_identity() const override {
    std::string id = "stub:";
    id += spec_.mode == StubMode::hashed ? "hashed" : "offset";
    id += ":d" + std::to_string(spec_.dimension);
    id += ":s" + std::to_string(spec_.seed);
    if (spec_.mode == StubMode::offset) {
      id += ":tag=" + spec_.domain_tag;
      std::uint64_t off = fnv1a64_accum(
          kFnvOffsetBasis, spec_.offset.data(),
          spec_.offset.size() * sizeof(double));
      id += ":off=" + std::to_string(off);
    }
    return id;
  }

  const StubSpec& spec() const { return spec_; }

 private:
  StubSpec spec_;
};

// --- remote provider ---------------------------------------------------------

struct HttpResponse {
  int status = 0;
  std::string body;
};

// Minimal POST-only transport seam so the remote wire logic is testable
// without a network.
class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  virtual HttpResponse post(
      const std::string& url,
      const std::vector<std::pair<std::string, std::string>>& headers,
      const std::string& body, std::chrono::milliseconds timeout) = 0;
};

inline int backoff_delay_ms(int attempt, int base_ms) {
  // attempt 1 failed -> wait base, then 2*base, 4*base, ...
  return base_ms * (1 << std::min(attempt - 1, 16));
}

// Speaks the common embeddings wire format:
//   POST {"model": ..., "input": [texts...]}
//   -> {"data": [{"index": i, "embedding": [floats...]}, ...]}
// Results are matched by their `index` field, not array position. Retries
// 429/5xx with exponential backoff; other errors fail fast.
class RemoteProvider final : public EmbeddingProvider {
 public:
  RemoteProvider(ProviderSpec spec, std::shared_ptr<HttpTransport> transport)
      : spec_(std::move(spec)), transport_(std::move(transport)) {
    if (spec_.dimension == 0)
      throw ConfigError("RemoteProvider: dimension must be configured");
    if (spec_.endpoint_url.empty())
      throw ConfigError("RemoteProvider: endpoint_url must be configured");
    if (spec_.max_attempts < 1)
      throw ConfigError("RemoteProvider: max_attempts must be at least 1");
  }

  std::vector<Vec> embed(const std::vector<std::string>& texts) override {
    if (texts.empty()) return {};
    const char* key = std::getenv(spec_.api_key_env.c_str());
    if (key == nullptr || *key == '\0')
      throw ProviderError("api key environment variable not set: " +
                          spec_.api_key_env);

    nlohmann::json payload = {{"model", spec_.model_name}, {"input", texts}};
    std::vector<std::pair<std::string, std::string>> headers = {
        {"Authorization", std::string("Bearer ") + key},
        {"Content-Type", "application/json"}};
    std::string body = payload.dump();

    HttpResponse resp;
    std::string transport_failure;
    for (int attempt = 1; attempt <= spec_.max_attempts; ++attempt) {
      if (attempt > 1)
        std::this_thread::sleep_for(std::chrono::milliseconds(
            backoff_delay_ms(attempt - 1, spec_.backoff_base_ms)));
      ++attempts_made_;
      transport_failure.clear();
      try {
        resp = transport_->post(spec_.endpoint_url, headers, body,
                                std::chrono::milliseconds(spec_.timeout_ms));
      } catch (const ProviderError& e) {
        transport_failure = e.what();  // connection errors are retryable
        continue;
      }
      if (resp.status == 200) return parse_response(resp.body, texts.size());
      if (resp.status != 429 && resp.status < 500)
        throw ProviderError("embedding request rejected with status " +
                            std::to_string(resp.status) + ": " + resp.body);
    }
    if (!transport_failure.empty())
      throw ProviderError("embedding request failed after " +
                          std::to_string(spec_.max_attempts) +
                          " attempts: " + transport_failure);
    throw ProviderError("embedding request failed after " +
                        std::to_string(spec_.max_attempts) +
                        " attempts, last status " +
                        std::to_string(resp.status));
  }

  std::size_t dimension() const override { return spec_.dimension; }

  std::string cache_identity() const override {
    return "remote:" + spec_.model_name + ":d" +
           std::to_string(spec_.dimension);
  }

  std::uint64_t attempts_made() const { return attempts_made_; }

 private:
  std::vector<Vec> parse_response(const std::string& body,
                                  std::size_t expected) const {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw ProviderError(std::string("malformed provider response: ") +
                          e.what());
    }
    if (!doc.contains("data") || !doc["data"].is_array())
      throw ProviderError("provider response missing data array");
    std::vector<Vec> out(expected);
    std::vector<bool> seen(expected, false);
    try {
      for (const auto& item : doc["data"]) {
        if (!item.contains("index") || !item["index"].is_number_integer())
          throw ProviderError("provider response item missing index");
        auto idx = item["index"].get<std::int64_t>();
        if (idx < 0 || static_cast<std::size_t>(idx) >= expected ||
            seen[static_cast<std::size_t>(idx)])
          throw ProviderError(
              "provider response has out-of-range or duplicate index " +
              std::to_string(idx));
        if (!item.contains("embedding") || !item["embedding"].is_array())
          throw ProviderError("provider response item missing embedding");
        Vec v = item["embedding"].get<Vec>();
        if (v.size() != spec_.dimension)
          throw ProviderError("provider returned dimension " +
                              std::to_string(v.size()) + ", expected " +
                              std::to_string(spec_.dimension));
        if (!all_finite(v))
          throw ProviderError("provider returned non-finite values");
        seen[static_cast<std::size_t>(idx)] = true;
        out[static_cast<std::size_t>(idx)] = std::move(v);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ProviderError(std::string("malformed provider response: ") +
                          e.what());
    }
    for (std::size_t i = 0; i < expected; ++i)
      if (!seen[i])
        throw ProviderError("provider response missing index " +
                            std::to_string(i));
    return out;
  }

  ProviderSpec spec_;
  std::shared_ptr<HttpTransport> transport_;
  std::uint64_t attempts_made_ = 0;
};

// --- on-disk embedding cache --------------------------------------------------

// Append-only cache keyed by sha256(identity \n text). Layout:
//   data.bin     self-describing records:
//                u32 magic | length-prefixed key | u64 count | count f64
//   manifest.tsv "key <TAB> byte-offset <TAB> count" per record
// The manifest only accelerates opening; it is rebuilt from data.bin when
// missing or inconsistent, and a truncated data.bin salvages every intact
// record before the cut.
class EmbeddingCache {
 public:
  static constexpr std::uint32_t kRecordMagic = 0xadca17e0u;

  explicit EmbeddingCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
    if (!load_manifest()) rebuild_manifest();
  }

  std::filesystem::path data_path() const { return dir_ / "data.bin"; }
  std::filesystem::path manifest_path() const { return dir_ / "manifest.tsv"; }
  std::size_t size() const { return entries_.size(); }
  bool contains(const std::string& key) const { return entries_.count(key); }

  std::optional<Vec> lookup(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    std::ifstream in(data_path(), std::ios::binary);
    if (!in) return std::nullopt;
    in.seekg(static_cast<std::streamoff>(it->second.offset));
    try {
      auto [stored_key, values] = read_record(in);
      if (stored_key != key)
        throw SerializationError("cache manifest out of sync");
      return values;
    } catch (const SerializationError&) {
      throw SerializationError("cache record for key " + key +
                               " is corrupt; delete " +
                               manifest_path().string() + " to rebuild");
    }
  }

  void store(const std::string& key, std::span<const double> values) {
    if (entries_.count(key)) return;  // idempotent
    std::uint64_t offset = std::filesystem::exists(data_path())
                               ? std::filesystem::file_size(data_path())
                               : 0;
    {
      std::ofstream out(data_path(), std::ios::binary | std::ios::app);
      if (!out) throw Error("cannot append to " + data_path().string());
      write_record(out, key, values);
      out.flush();
      if (!out) throw Error("write failed: " + data_path().string());
    }
    {
      std::ofstream out(manifest_path(), std::ios::app);
      out << key << '\t' << offset << '\t' << values.size() << '\n';
    }
    entries_[key] = {offset, values.size()};
  }

 private:
  struct Entry {
    std::uint64_t offset = 0;
    std::size_t count = 0;
  };

  static void write_record(std::ostream& out, const std::string& key,
                           std::span<const double> values) {
    write_le<std::uint32_t>(out, kRecordMagic);
    write_string(out, key);
    write_le<std::uint64_t>(out, values.size());
    for (double v : values) write_le<double>(out, v);
  }

  static std::pair<std::string, Vec> read_record(std::istream& in) {
    auto magic = read_le<std::uint32_t>(in);
    if (magic != kRecordMagic)
      throw SerializationError("bad cache record magic");
    std::string key = read_string(in);
    auto count = read_le<std::uint64_t>(in);
    if (count > (1ull << 32)) throw SerializationError("implausible count");
    Vec values(count);
    for (double& v : values) v = read_le<double>(in);
    return {std::move(key), std::move(values)};
  }

  bool load_manifest() {
    std::ifstream in(manifest_path());
    if (!in) return false;
    std::uint64_t data_size = std::filesystem::exists(data_path())
                                  ? std::filesystem::file_size(data_path())
                                  : 0;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto tab1 = line.find('\t');
      auto tab2 = line.find('\t', tab1 + 1);
      if (tab1 == std::string::npos || tab2 == std::string::npos) return false;
      Entry e;
      try {
        e.offset = std::stoull(line.substr(tab1 + 1, tab2 - tab1 - 1));
        e.count = std::stoull(line.substr(tab2 + 1));
      } catch (const std::exception&) {
        return false;
      }
      if (e.offset >= data_size && !(e.offset == 0 && data_size == 0))
        return false;
      entries_[line.substr(0, tab1)] = e;
    }
    return true;
  }

  // Scans data.bin, keeping every record that parses cleanly; stops at the
  // first corrupt/truncated one and rewrites the manifest to match.
  void rebuild_manifest() {
    entries_.clear();
    std::ifstream in(data_path(), std::ios::binary);
    if (in) {
      while (true) {
        std::uint64_t offset = static_cast<std::uint64_t>(in.tellg());
        if (in.peek() == std::char_traits<char>::eof()) break;
        try {
          auto [key, values] = read_record(in);
          entries_[key] = {offset, values.size()};
        } catch (const SerializationError&) {
          break;
        }
      }
    }
    atomic_write(manifest_path(), [&](std::ostream& out) {
      for (const auto& [key, e] : std::map<std::string, Entry>(
               entries_.begin(), entries_.end()))
        out << key << '\t' << e.offset << '\t' << e.count << '\n';
    });
  }

  std::filesystem::path dir_;
  std::unordered_map<std::string, Entry> entries_;
};

// --- batched, cached embedding ------------------------------------------------

struct EmbedStats {
  std::size_t texts = 0;
  std::size_t cache_hits = 0;
  std::size_t cache_misses = 0;
  std::size_t truncated = 0;
  std::size_t requests = 0;  // provider calls issued (one per batch slice)
};

struct EmbedOptions {
  std::size_t batch_size = 64;
  std::size_t truncate_chars = 8000;
  std::ostream* log = nullptr;  // truncation notes, one line each
};

inline std::string cache_key(const EmbeddingProvider& provider,
                             std::string_view prepared_text) {
  return sha256_hex(provider.cache_identity() + "\n" +
                    std::string(prepared_text));
}

// Embeds `texts` in input order: normalizes, truncates over-long texts,
// serves what it can from the cache, fetches the rest in batch-size slices
// (each distinct text once), and writes fetched vectors through the cache.
inline std::vector<Vec> embed_batch(const std::vector<std::string>& texts,
                                    EmbeddingProvider& provider,
                                    EmbeddingCache* cache,
                                    const EmbedOptions& opts = {},
                                    EmbedStats* stats_out = nullptr) {
  if (opts.batch_size == 0) throw ConfigError("embed_batch: batch_size 0");
  EmbedStats stats;
  stats.texts = texts.size();

  std::vector<std::string> prepared(texts.size());
  std::vector<std::string> keys(texts.size());
  std::vector<Vec> out(texts.size());
  std::vector<char> resolved(texts.size(), 0);

  std::vector<std::string> to_fetch;           // distinct texts, first-seen order
  std::vector<std::vector<std::size_t>> fanout;  // output slots per fetch
  std::unordered_map<std::string, std::size_t> fetch_index;

  for (std::size_t i = 0; i < texts.size(); ++i) {
    std::string text = normalize_text(texts[i]);
    if (text.empty())
      throw IngestionError("embed_batch: text " + std::to_string(i) +
                           " is empty after normalization");
    if (text.size() > opts.truncate_chars) {
      text.resize(opts.truncate_chars);
      ++stats.truncated;
      if (opts.log)
        *opts.log << "truncated text " << i << " to " << opts.truncate_chars
                  << " chars\n";
    }
    prepared[i] = std::move(text);
    keys[i] = cache_key(provider, prepared[i]);
    if (cache) {
      if (auto hit = cache->lookup(keys[i])) {
        if (hit->size() != provider.dimension())
          throw ProviderError("cached vector has dimension " +
                              std::to_string(hit->size()) + ", expected " +
                              std::to_string(provider.dimension()));
        out[i] = std::move(*hit);
        resolved[i] = 1;
        ++stats.cache_hits;
        continue;
      }
    }
    auto [it, inserted] = fetch_index.try_emplace(keys[i], to_fetch.size());
    if (inserted) {
      to_fetch.push_back(prepared[i]);
      fanout.emplace_back();
      ++stats.cache_misses;
    }
    fanout[it->second].push_back(i);
  }

  for (std::size_t start = 0; start < to_fetch.size();
       start += opts.batch_size) {
    std::size_t count = std::min(opts.batch_size, to_fetch.size() - start);
    std::vector<std::string> slice(to_fetch.begin() + start,
                                   to_fetch.begin() + start + count);
    ++stats.requests;
    std::vector<Vec> vecs = provider.embed(slice);
    if (vecs.size() != slice.size())
      throw ProviderError("provider returned " + std::to_string(vecs.size()) +
                          " vectors for " + std::to_string(slice.size()) +
                          " texts");
    for (std::size_t j = 0; j < count; ++j) {
      Vec& v = vecs[j];
      if (v.size() != provider.dimension())
        throw ProviderError("provider returned dimension " +
                            std::to_string(v.size()) + ", expected " +
                            std::to_string(provider.dimension()));
      if (!all_finite(v))
        throw ProviderError("provider returned non-finite values");
      const auto& slots = fanout[start + j];
      const std::string& key = keys[slots.front()];
      if (cache) cache->store(key, v);
      for (std::size_t slot : slots) {
        out[slot] = v;
        resolved[slot] = 1;
      }
    }
  }

  for (char r : resolved)
    if (!r) throw Error("embed_batch: unresolved slot (internal bug)");
  if (stats_out) *stats_out = stats;
  return out;
}

inline std::unique_ptr<EmbeddingProvider> make_stub_provider(
    const ProviderSpec& spec) {
  StubSpec stub = spec.stub;
  if (stub.dimension == 0) stub.dimension = spec.dimension;
  return std::make_unique<StubProvider>(stub);
}

}  // namespace adret
