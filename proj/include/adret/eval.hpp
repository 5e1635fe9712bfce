#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "adret/corpus_index.hpp"
#include "adret/datasets.hpp"
#include "adret/errors.hpp"

namespace adret {

// query id -> (document id -> relevance grade > 0)
using Qrels = std::map<std::string, std::map<std::string, int>>;

inline Qrels qrels_view(const RetrievalDataset& ds, Partition part) {
  Qrels out;
  for (const auto& p : ds.pairs) {
    auto it = ds.partition.find(p.query_id);
    if (it != ds.partition.end() && it->second == part)
      out[p.query_id][p.corpus_id] = p.relevance;
  }
  return out;
}

enum class GainScheme { exponential, linear };

inline double gain_of(int relevance, GainScheme scheme) {
  return scheme == GainScheme::exponential
             ? std::exp2(static_cast<double>(relevance)) - 1.0
             : static_cast<double>(relevance);
}

// Normalized discounted cumulative gain at cutoff k. The ideal ranking is
// built from all judged documents for the query, so a system is penalized
// for relevant documents it failed to retrieve.
inline double ndcg_at_k(const RankedList& ranked,
                        const std::map<std::string, int>& judged,
                        std::size_t k,
                        GainScheme scheme = GainScheme::exponential) {
  if (k == 0) throw ConfigError("ndcg_at_k: k must be at least 1");
  std::vector<int> grades;
  for (const auto& [id, rel] : judged)
    if (rel > 0) grades.push_back(rel);
  if (grades.empty())
    throw MetricError("ndcg_at_k: query has no relevant documents");

  double dcg = 0.0;
  std::size_t depth = std::min(k, ranked.entries.size());
  for (std::size_t i = 0; i < depth; ++i) {
    auto it = judged.find(ranked.entries[i].id);
    if (it == judged.end() || it->second <= 0) continue;
    dcg += gain_of(it->second, scheme) /
           std::log2(static_cast<double>(i) + 2.0);
  }
  std::sort(grades.begin(), grades.end(), std::greater<int>());
  double idcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, grades.size()); ++i)
    idcg += gain_of(grades[i], scheme) /
            std::log2(static_cast<double>(i) + 2.0);
  return dcg / idcg;
}

enum class RetrievalMode { baseline, adr, adr_full };

inline std::string mode_name(RetrievalMode m) {
  switch (m) {
    case RetrievalMode::baseline: return "baseline";
    case RetrievalMode::adr: return "adr";
    case RetrievalMode::adr_full: return "adr_full";
  }
  throw Error("unreachable");
}

struct SystemScores {
  std::string name;
  std::map<int, double> mean_ndcg;  // cutoff -> mean over queries
  std::map<std::string, std::map<int, double>> per_query;
  std::size_t query_count = 0;
};

struct MetricsTable {
  std::string dataset;
  std::string partition;
  GainScheme gain = GainScheme::exponential;
  std::vector<int> ks;
  std::vector<SystemScores> systems;
};

// Scores one retrieval configuration over a partition's queries. The
// adapters may be null for the sides a mode leaves untouched.
inline SystemScores evaluate_system(
    const RetrievalDataset& ds, Partition part,
    const std::unordered_map<std::string, Vec>& query_embeddings,
    CorpusIndex& index, RetrievalMode mode, const AdapterParams* theta,
    const AdapterParams* theta_corpus, const std::vector<int>& ks,
    GainScheme scheme = GainScheme::exponential, std::string name = "") {
  if (ks.empty()) throw ConfigError("evaluate_system: no cutoffs given");
  for (int k : ks)
    if (k < 1) throw ConfigError("evaluate_system: cutoffs must be >= 1");
  if (mode != RetrievalMode::baseline && theta == nullptr)
    throw ConfigError("evaluate_system: mode needs a query adapter");
  if (mode == RetrievalMode::adr_full && theta_corpus == nullptr)
    throw ConfigError("evaluate_system: adr_full needs a corpus adapter");

  if (mode == RetrievalMode::adr_full)
    index = refresh_adapted(index, *theta_corpus);  // once, not per query

  Qrels qrels = qrels_view(ds, part);
  std::size_t depth = static_cast<std::size_t>(
      *std::max_element(ks.begin(), ks.end()));

  SystemScores out;
  out.name = name.empty() ? mode_name(mode) : std::move(name);
  for (const auto& [qid, judged] : qrels) {
    auto emb = query_embeddings.find(qid);
    if (emb == query_embeddings.end())
      throw Error("evaluate_system: no embedding for query " + qid);
    RankedList ranked;
    switch (mode) {
      case RetrievalMode::baseline:
        ranked = retrieve_baseline(emb->second, index, depth, qid);
        break;
      case RetrievalMode::adr:
        ranked = retrieve_adr(emb->second, *theta, index, depth, qid);
        break;
      case RetrievalMode::adr_full:
        ranked = retrieve_adr_full(emb->second, *theta, *theta_corpus, index,
                                   depth, qid, /*allow_refresh=*/false);
        break;
    }
    for (int k : ks)
      out.per_query[qid][k] =
          ndcg_at_k(ranked, judged, static_cast<std::size_t>(k), scheme);
  }
  out.query_count = out.per_query.size();
  if (out.query_count == 0)
    throw MetricError("evaluate_system: partition has no judged queries");
  for (int k : ks) {
    double sum = 0.0;
    for (const auto& [qid, scores] : out.per_query) sum += scores.at(k);
    out.mean_ndcg[k] = sum / static_cast<double>(out.query_count);
  }
  return out;
}

inline std::string render_table(const MetricsTable& table) {
  std::size_t name_width = 8;
  for (const auto& s : table.systems)
    name_width = std::max(name_width, s.name.size());

  std::string out = "dataset: " + table.dataset + "  partition: " +
                    table.partition + "  gain: " +
                    (table.gain == GainScheme::exponential ? "exponential"
                                                           : "linear") +
                    "\n\n";
  out += std::string(name_width, ' ');
  char buf[64];
  for (int k : table.ks) {
    std::snprintf(buf, sizeof(buf), "  %9s",
                  ("nDCG@" + std::to_string(k)).c_str());
    out += buf;
  }
  out += '\n';
  for (const auto& s : table.systems) {
    out += s.name + std::string(name_width - s.name.size(), ' ');
    for (int k : table.ks) {
      std::snprintf(buf, sizeof(buf), "  %9.4f", s.mean_ndcg.at(k));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

inline nlohmann::json table_to_json(const MetricsTable& table) {
  nlohmann::json doc;
  doc["dataset"] = table.dataset;
  doc["partition"] = table.partition;
  doc["gain"] =
      table.gain == GainScheme::exponential ? "exponential" : "linear";
  doc["ks"] = table.ks;
  doc["systems"] = nlohmann::json::array();
  for (const auto& s : table.systems) {
    nlohmann::json sys;
    sys["name"] = s.name;
    sys["query_count"] = s.query_count;
    for (const auto& [k, v] : s.mean_ndcg)
      sys["mean_ndcg"][std::to_string(k)] = v;
    for (const auto& [qid, scores] : s.per_query)
      for (const auto& [k, v] : scores)
        sys["per_query"][qid][std::to_string(k)] = v;
    doc["systems"].push_back(std::move(sys));
  }
  return doc;
}

}  // namespace adret
