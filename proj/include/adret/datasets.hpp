#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "adret/errors.hpp"
#include "adret/io.hpp"
#include "adret/provider.hpp"  // normalize_text
#include "adret/rng.hpp"

namespace adret {

enum class Partition { train, dev, test };

inline std::string partition_name(Partition p) {
  switch (p) {
    case Partition::train: return "train";
    case Partition::dev: return "dev";
    case Partition::test: return "test";
  }
  throw Error("unreachable");
}

inline Partition parse_partition(std::string_view s) {
  if (s == "train") return Partition::train;
  if (s == "dev") return Partition::dev;
  if (s == "test") return Partition::test;
  throw IngestionError("unknown partition name: " + std::string(s));
}

struct RelevancePair {
  std::string query_id;
  std::string corpus_id;
  int relevance = 1;

  bool operator==(const RelevancePair&) const = default;
  auto operator<=>(const RelevancePair&) const = default;
};

// Which documents a query competes against at evaluation time. BEIR-style
// datasets search the full collection; paired datasets only ship targets,
// so each partition searches the targets of its own pairs.
enum class EvalCorpusScope { full_corpus, partition_corpus };

struct RetrievalDataset {
  std::string name;
  std::map<std::string, std::string> corpus;   // id -> text
  std::map<std::string, std::string> queries;  // id -> text
  std::vector<RelevancePair> pairs;            // sorted, unique
  std::map<std::string, Partition> partition;  // per query
  EvalCorpusScope eval_corpus_scope = EvalCorpusScope::full_corpus;

  bool operator==(const RetrievalDataset&) const = default;

  std::vector<std::string> query_ids(Partition p) const {
    std::vector<std::string> out;
    for (const auto& [id, part] : partition)
      if (part == p) out.push_back(id);
    return out;  // map order -> sorted
  }

  std::unordered_map<std::string, std::unordered_set<std::string>>
  positives_by_query() const {
    std::unordered_map<std::string, std::unordered_set<std::string>> out;
    for (const auto& p : pairs) out[p.query_id].insert(p.corpus_id);
    return out;
  }

  // Document ids a partition's queries are evaluated against.
  std::vector<std::string> eval_corpus_ids(Partition p) const {
    if (eval_corpus_scope == EvalCorpusScope::full_corpus) {
      std::vector<std::string> out;
      out.reserve(corpus.size());
      for (const auto& [id, text] : corpus) out.push_back(id);
      return out;
    }
    std::set<std::string> ids;
    for (const auto& pair : pairs) {
      auto it = partition.find(pair.query_id);
      if (it != partition.end() && it->second == p) ids.insert(pair.corpus_id);
    }
    return {ids.begin(), ids.end()};
  }
};

// Referential and structural consistency; throws IngestionError naming the
// first few offenders.
inline void check_integrity(const RetrievalDataset& ds) {
  std::vector<std::string> offenders;
  auto note = [&](std::string what) {
    if (offenders.size() < 5) offenders.push_back(std::move(what));
  };
  for (const auto& p : ds.pairs) {
    if (!ds.queries.count(p.query_id))
      note("pair references unknown query " + p.query_id);
    if (!ds.corpus.count(p.corpus_id))
      note("pair references unknown document " + p.corpus_id);
    if (p.relevance < 1)
      note("pair " + p.query_id + "/" + p.corpus_id +
           " has non-positive relevance");
  }
  for (std::size_t i = 1; i < ds.pairs.size(); ++i)
    if (ds.pairs[i - 1].query_id == ds.pairs[i].query_id &&
        ds.pairs[i - 1].corpus_id == ds.pairs[i].corpus_id)
      note("duplicate pair " + ds.pairs[i].query_id + "/" +
           ds.pairs[i].corpus_id);
  std::unordered_set<std::string> judged;
  for (const auto& p : ds.pairs) judged.insert(p.query_id);
  for (const auto& [id, text] : ds.queries) {
    if (!ds.partition.count(id)) note("query " + id + " has no partition");
    if (!judged.count(id)) note("query " + id + " has no judged documents");
    if (text.empty()) note("query " + id + " has empty text");
  }
  for (const auto& [id, part] : ds.partition)
    if (!ds.queries.count(id))
      note("partition entry for unknown query " + id);
  for (const auto& [id, text] : ds.corpus)
    if (text.empty()) note("document " + id + " has empty text");
  if (!offenders.empty()) {
    std::string msg = "dataset " + ds.name + " failed integrity checks:";
    for (const auto& o : offenders) msg += "\n  - " + o;
    throw IngestionError(msg);
  }
}

namespace detail {

inline nlohmann::json parse_jsonl_line(const std::string& line,
                                       const std::filesystem::path& file,
                                       std::size_t lineno) {
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(file.string() + ":" + std::to_string(lineno) + ": " +
                         e.what());
  }
}

inline std::string json_id(const nlohmann::json& v,
                           const std::filesystem::path& file,
                           std::size_t lineno) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  throw IngestionError(file.string() + ":" + std::to_string(lineno) +
                       ": id must be a string or integer");
}

struct QrelsRow {
  std::string query_id;
  std::string corpus_id;
  int score = 0;
};

inline std::vector<QrelsRow> read_qrels_tsv(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IngestionError("cannot open " + file.string());
  std::string line;
  std::size_t lineno = 0;
  std::vector<QrelsRow> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1) {
      if (line.rfind("query-id", 0) != 0)
        throw IngestionError(file.string() +
                             ": expected a 'query-id\\tcorpus-id\\tscore' "
                             "header");
      continue;
    }
    auto tab1 = line.find('\t');
    auto tab2 = line.find('\t', tab1 + 1);
    if (tab1 == std::string::npos || tab2 == std::string::npos ||
        line.find('\t', tab2 + 1) != std::string::npos)
      throw IngestionError(file.string() + ":" + std::to_string(lineno) +
                           ": expected exactly 3 tab-separated fields");
    QrelsRow row;
    row.query_id = line.substr(0, tab1);
    row.corpus_id = line.substr(tab1 + 1, tab2 - tab1 - 1);
    try {
      row.score = std::stoi(line.substr(tab2 + 1));
    } catch (const std::exception&) {
      throw IngestionError(file.string() + ":" + std::to_string(lineno) +
                           ": score is not an integer");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

struct BeirOptions {
  // Use the dev qrels as the training partition (and ignore train qrels).
  // Matches corpora whose official train split is unsuitable and the dev
  // split is conventionally trained on instead.
  bool dev_as_train = false;
};

// Loads the standard BEIR layout:
//   dir/corpus.jsonl   {"_id", "title", "text"}
//   dir/queries.jsonl  {"_id", "text"}
//   dir/qrels/{train,dev,test}.tsv   query-id \t corpus-id \t score
// Zero-score judgments are dropped; queries without any positive judgment
// are dropped; a query judged in two partition files is an error.
inline RetrievalDataset load_beir(const std::filesystem::path& dir,
                                  const BeirOptions& opts = {}) {
  namespace fs = std::filesystem;
  RetrievalDataset ds;
  ds.name = dir.filename().string();
  ds.eval_corpus_scope = EvalCorpusScope::full_corpus;

  fs::path corpus_file = dir / "corpus.jsonl";
  std::ifstream corpus_in(corpus_file);
  if (!corpus_in) throw IngestionError("cannot open " + corpus_file.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(corpus_in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json doc = detail::parse_jsonl_line(line, corpus_file, lineno);
    if (!doc.contains("_id"))
      throw IngestionError(corpus_file.string() + ":" +
                           std::to_string(lineno) + ": missing _id");
    std::string id = detail::json_id(doc["_id"], corpus_file, lineno);
    std::string title =
        doc.contains("title") && doc["title"].is_string() ? doc["title"] : "";
    std::string text =
        doc.contains("text") && doc["text"].is_string() ? doc["text"] : "";
    std::string joined = normalize_text(title + " " + text);
    if (joined.empty())
      throw IngestionError(corpus_file.string() + ":" +
                           std::to_string(lineno) + ": document " + id +
                           " has empty text");
    if (!ds.corpus.emplace(id, std::move(joined)).second)
      throw IngestionError(corpus_file.string() + ":" +
                           std::to_string(lineno) + ": duplicate document id " +
                           id);
  }

  fs::path queries_file = dir / "queries.jsonl";
  std::ifstream queries_in(queries_file);
  if (!queries_in)
    throw IngestionError("cannot open " + queries_file.string());
  std::map<std::string, std::string> all_queries;
  lineno = 0;
  while (std::getline(queries_in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json doc = detail::parse_jsonl_line(line, queries_file, lineno);
    if (!doc.contains("_id") || !doc.contains("text"))
      throw IngestionError(queries_file.string() + ":" +
                           std::to_string(lineno) + ": missing _id or text");
    std::string id = detail::json_id(doc["_id"], queries_file, lineno);
    std::string text = normalize_text(doc["text"].get<std::string>());
    if (text.empty())
      throw IngestionError(queries_file.string() + ":" +
                           std::to_string(lineno) + ": query " + id +
                           " has empty text");
    if (!all_queries.emplace(id, std::move(text)).second)
      throw IngestionError(queries_file.string() + ":" +
                           std::to_string(lineno) + ": duplicate query id " +
                           id);
  }

  struct PartitionFile {
    const char* file;
    Partition partition;
  };
  std::vector<PartitionFile> sources;
  if (opts.dev_as_train) {
    sources = {{"dev.tsv", Partition::train}, {"test.tsv", Partition::test}};
  } else {
    sources = {{"train.tsv", Partition::train},
               {"dev.tsv", Partition::dev},
               {"test.tsv", Partition::test}};
  }
  bool any = false;
  for (const auto& src : sources) {
    fs::path file = dir / "qrels" / src.file;
    if (!fs::exists(file)) continue;
    any = true;
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& row : detail::read_qrels_tsv(file)) {
      if (row.score <= 0) continue;  // judged non-relevant
      if (!seen.emplace(row.query_id, row.corpus_id).second)
        throw IngestionError(file.string() + ": duplicate judgment " +
                             row.query_id + "/" + row.corpus_id);
      auto q = all_queries.find(row.query_id);
      if (q == all_queries.end())
        throw IngestionError(file.string() + ": unknown query id " +
                             row.query_id);
      if (!ds.corpus.count(row.corpus_id))
        throw IngestionError(file.string() + ": unknown corpus id " +
                             row.corpus_id);
      auto [it, inserted] =
          ds.partition.emplace(row.query_id, src.partition);
      if (!inserted && it->second != src.partition)
        throw IngestionError("query " + row.query_id +
                             " appears in multiple partitions");
      ds.queries.emplace(row.query_id, q->second);
      ds.pairs.push_back({row.query_id, row.corpus_id, row.score});
    }
  }
  if (!any)
    throw IngestionError("no qrels files found under " +
                         (dir / "qrels").string());

  std::sort(ds.pairs.begin(), ds.pairs.end());
  check_integrity(ds);
  return ds;
}

// Loads a JSONL file of {"query", "target", "split"} records, split being
// "train" or "test". Ids are content hashes: duplicate target texts merge
// into one document globally, duplicate query texts merge within a split.
inline RetrievalDataset load_pairs(const std::filesystem::path& file,
                                   const std::string& name = "") {
  RetrievalDataset ds;
  ds.name = name.empty() ? file.stem().string() : name;
  ds.eval_corpus_scope = EvalCorpusScope::partition_corpus;

  std::ifstream in(file);
  if (!in) throw IngestionError("cannot open " + file.string());
  std::string line;
  std::size_t lineno = 0;
  std::set<RelevancePair> pairs;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json doc = detail::parse_jsonl_line(line, file, lineno);
    for (const char* field : {"query", "target", "split"})
      if (!doc.contains(field) || !doc[field].is_string())
        throw IngestionError(file.string() + ":" + std::to_string(lineno) +
                             ": missing string field '" + field + "'");
    std::string split = doc["split"];
    if (split != "train" && split != "test")
      throw IngestionError(file.string() + ":" + std::to_string(lineno) +
                           ": split must be 'train' or 'test', got '" +
                           split + "'");
    std::string query = normalize_text(doc["query"].get<std::string>());
    std::string target = normalize_text(doc["target"].get<std::string>());
    if (query.empty() || target.empty())
      throw IngestionError(file.string() + ":" + std::to_string(lineno) +
                           ": empty query or target");

    std::string qid = "q" + sha256_hex(split + ":" + query).substr(0, 16);
    std::string cid = "t" + sha256_hex(target).substr(0, 16);
    ds.queries.emplace(qid, query);
    ds.corpus.emplace(cid, target);
    ds.partition.emplace(qid, parse_partition(split));
    pairs.insert({qid, cid, 1});
  }
  if (pairs.empty())
    throw IngestionError(file.string() + ": no records");
  ds.pairs.assign(pairs.begin(), pairs.end());
  check_integrity(ds);
  return ds;
}

struct SplitSpec {
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
};

// Re-partitions every query into train/test by seeded shuffle:
// floor(n * train_fraction) queries become train, the rest test.
inline RetrievalDataset split(const RetrievalDataset& ds,
                              const SplitSpec& spec) {
  if (!(spec.train_fraction > 0.0) || !(spec.train_fraction < 1.0))
    throw ConfigError("split: train_fraction must be inside (0, 1)");
  std::vector<std::string> ids;
  ids.reserve(ds.queries.size());
  for (const auto& [id, text] : ds.queries) ids.push_back(id);
  Rng rng(spec.seed);
  rng.shuffle(ids);
  auto n_train = static_cast<std::size_t>(
      static_cast<double>(ids.size()) * spec.train_fraction);
  if (n_train == 0 || n_train == ids.size())
    throw SplitError("split: a partition would be empty (n=" +
                     std::to_string(ids.size()) + ", fraction=" +
                     std::to_string(spec.train_fraction) + ")");
  RetrievalDataset out = ds;
  out.partition.clear();
  for (std::size_t i = 0; i < ids.size(); ++i)
    out.partition[ids[i]] =
        i < n_train ? Partition::train : Partition::test;
  check_integrity(out);
  return out;
}

// --- snapshot --------------------------------------------------------------

inline void save_dataset(const RetrievalDataset& ds,
                         const std::filesystem::path& path) {
  nlohmann::json doc;
  doc["name"] = ds.name;
  doc["eval_corpus_scope"] =
      ds.eval_corpus_scope == EvalCorpusScope::full_corpus ? "full_corpus"
                                                           : "partition_corpus";
  doc["corpus"] = ds.corpus;
  doc["queries"] = ds.queries;
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : ds.pairs)
    pairs.push_back({p.query_id, p.corpus_id, p.relevance});
  doc["pairs"] = std::move(pairs);
  nlohmann::json partition = nlohmann::json::object();
  for (const auto& [id, part] : ds.partition)
    partition[id] = partition_name(part);
  doc["partition"] = std::move(partition);
  atomic_write(path, [&](std::ostream& out) { out << doc.dump(2) << '\n'; });
}

inline RetrievalDataset load_dataset(const std::filesystem::path& path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw SerializationError("corrupt dataset snapshot " + path.string() +
                             ": " + e.what());
  }
  try {
    RetrievalDataset ds;
    ds.name = doc.at("name").get<std::string>();
    ds.eval_corpus_scope =
        doc.at("eval_corpus_scope").get<std::string>() == "full_corpus"
            ? EvalCorpusScope::full_corpus
            : EvalCorpusScope::partition_corpus;
    ds.corpus = doc.at("corpus").get<std::map<std::string, std::string>>();
    ds.queries = doc.at("queries").get<std::map<std::string, std::string>>();
    for (const auto& p : doc.at("pairs"))
      ds.pairs.push_back(
          {p.at(0).get<std::string>(), p.at(1).get<std::string>(),
           p.at(2).get<int>()});
    for (const auto& [id, part] : doc.at("partition").items())
      ds.partition[id] = parse_partition(part.get<std::string>());
    check_integrity(ds);
    return ds;
  } catch (const nlohmann::json::exception& e) {
    throw SerializationError("corrupt dataset snapshot " + path.string() +
                             ": " + e.what());
  }
}

}  // namespace adret
