#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "adret/adapter.hpp"
#include "adret/errors.hpp"
#include "adret/numerics.hpp"

namespace adret {

struct RankedEntry {
  std::string id;
  double score;

  bool operator==(const RankedEntry&) const = default;
};

struct RankedList {
  std::string query_id;
  std::vector<RankedEntry> entries;  // score descending, ties by ascending id

  bool operator==(const RankedList&) const = default;
};

// Immutable snapshot of corpus embeddings plus, optionally, their
// adapter-transformed counterparts. Heavy members sit behind shared_ptr so
// refresh_adapted can return a new value cheaply (the raw rows are shared,
// only the adapted block is replaced) and readers of the old value are
// never disturbed.
class CorpusIndex {
 public:
  CorpusIndex(std::vector<std::string> ids, Mat raw) {
    if (ids.empty()) throw IndexError("corpus index: no documents");
    if (ids.size() != raw.rows)
      throw ShapeError("corpus index: " + std::to_string(ids.size()) +
                       " ids vs " + std::to_string(raw.rows) + " rows");
    if (raw.cols == 0) throw ShapeError("corpus index: zero dimension");
    auto rows = std::make_shared<std::unordered_map<std::string, std::size_t>>();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!rows->emplace(ids[i], i).second)
        throw IndexError("corpus index: duplicate id " + ids[i]);
      auto row = raw.row(i);
      if (!all_finite(row))
        throw NumericError("corpus index: non-finite embedding for " + ids[i]);
      if (norm(row) == 0.0)
        throw DegenerateVectorError("corpus index: zero embedding for " +
                                    ids[i]);
    }
    ids_ = std::make_shared<std::vector<std::string>>(std::move(ids));
    raw_ = std::make_shared<Mat>(std::move(raw));
    row_of_ = std::move(rows);
  }

  static CorpusIndex from_rows(
      const std::vector<std::pair<std::string, Vec>>& rows) {
    if (rows.empty()) throw IndexError("corpus index: no documents");
    Mat m(rows.size(), rows.front().second.size());
    std::vector<std::string> ids;
    ids.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].second.size() != m.cols)
        throw ShapeError("corpus index: ragged rows");
      std::copy(rows[i].second.begin(), rows[i].second.end(),
                m.row(i).begin());
      ids.push_back(rows[i].first);
    }
    return CorpusIndex(std::move(ids), std::move(m));
  }

  std::size_t size() const { return ids_->size(); }
  std::size_t dim() const { return raw_->cols; }
  const std::vector<std::string>& ids() const { return *ids_; }
  const std::string& id_of(std::size_t row) const { return (*ids_)[row]; }
  std::span<const double> raw_row(std::size_t i) const { return raw_->row(i); }

  std::size_t row_of(const std::string& id) const {
    auto it = row_of_->find(id);
    if (it == row_of_->end())
      throw IndexError("corpus index: unknown id " + id);
    return it->second;
  }
  bool contains(const std::string& id) const { return row_of_->count(id); }

  bool has_adapted() const { return adapted_ != nullptr; }
  std::uint64_t adapted_fingerprint() const { return adapted_fingerprint_; }
  std::span<const double> adapted_row(std::size_t i) const {
    if (!adapted_) throw IndexError("corpus index: no adapted embeddings");
    return adapted_->row(i);
  }

  friend CorpusIndex refresh_adapted(const CorpusIndex& index,
                                     const AdapterParams& theta_corpus);

 private:
  std::shared_ptr<const std::vector<std::string>> ids_;
  std::shared_ptr<const Mat> raw_;
  std::shared_ptr<const std::unordered_map<std::string, std::size_t>> row_of_;
  std::shared_ptr<const Mat> adapted_;
  std::uint64_t adapted_fingerprint_ = 0;
};

// New index value whose adapted rows are transform(raw_row, theta_corpus).
// Raw rows and ids are shared with the input, not copied.
inline CorpusIndex refresh_adapted(const CorpusIndex& index,
                                   const AdapterParams& theta_corpus) {
  if (theta_corpus.d != index.dim())
    throw ShapeError("refresh_adapted: adapter d " +
                     std::to_string(theta_corpus.d) + " vs index dim " +
                     std::to_string(index.dim()));
  auto adapted = std::make_shared<Mat>(index.size(), index.dim());
  for (std::size_t i = 0; i < index.size(); ++i) {
    Vec t = transform(index.raw_row(i), theta_corpus);
    std::copy(t.begin(), t.end(), adapted->row(i).begin());
  }
  CorpusIndex out = index;
  out.adapted_ = std::move(adapted);
  out.adapted_fingerprint_ = params_fingerprint(theta_corpus);
  return out;
}

namespace detail {

// Scores the query (already transformed, if applicable) against every row
// and returns the top k, ties broken by ascending document id so rankings
// are reproducible.
inline RankedList rank_rows(std::span<const double> query,
                            const CorpusIndex& index, bool use_adapted,
                            std::size_t k, const std::string& query_id) {
  if (k == 0) throw ConfigError("retrieve: k must be at least 1");
  if (!all_finite(query)) throw NumericError("retrieve: non-finite query");
  std::vector<std::pair<double, std::size_t>> scored(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    auto row = use_adapted ? index.adapted_row(i) : index.raw_row(i);
    scored[i] = {cosine(query, row), i};
  }
  k = std::min(k, index.size());
  auto better = [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return index.id_of(a.second) < index.id_of(b.second);
  };
  std::partial_sort(scored.begin(), scored.begin() + k, scored.end(), better);
  RankedList out;
  out.query_id = query_id;
  out.entries.reserve(k);
  for (std::size_t i = 0; i < k; ++i)
    out.entries.push_back({index.id_of(scored[i].second), scored[i].first});
  return out;
}

// Best-scoring row not in `excluded`; ties by ascending id.
inline std::string best_excluding(
    std::span<const double> query, const CorpusIndex& index, bool use_adapted,
    const std::unordered_set<std::string>& excluded) {
  double best_score = 0.0;
  std::size_t best_row = index.size();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (excluded.count(index.id_of(i))) continue;
    auto row = use_adapted ? index.adapted_row(i) : index.raw_row(i);
    double s = cosine(query, row);
    if (best_row == index.size() || s > best_score ||
        (s == best_score && index.id_of(i) < index.id_of(best_row))) {
      best_score = s;
      best_row = i;
    }
  }
  if (best_row == index.size())
    throw IndexError("hard_negative: every document is a positive");
  return index.id_of(best_row);
}

}  // namespace detail

inline RankedList retrieve_baseline(std::span<const double> query_emb,
                                    const CorpusIndex& index, std::size_t k,
                                    const std::string& query_id = "") {
  return detail::rank_rows(query_emb, index, /*use_adapted=*/false, k,
                           query_id);
}

inline RankedList retrieve_adr(std::span<const double> query_emb,
                               const AdapterParams& theta,
                               const CorpusIndex& index, std::size_t k,
                               const std::string& query_id = "") {
  Vec q = transform(query_emb, theta);
  return detail::rank_rows(q, index, /*use_adapted=*/false, k, query_id);
}

// Both sides adapted. The index must carry adapted rows for exactly
// `theta_corpus`; when they are missing or stale they are recomputed if
// `allow_refresh` permits, otherwise this is an error (a silent mismatch
// would score queries against embeddings from some older corpus adapter).
inline RankedList retrieve_adr_full(std::span<const double> query_emb,
                                    const AdapterParams& theta,
                                    const AdapterParams& theta_corpus,
                                    CorpusIndex& index, std::size_t k,
                                    const std::string& query_id = "",
                                    bool allow_refresh = true) {
  std::uint64_t want = params_fingerprint(theta_corpus);
  if (!index.has_adapted() || index.adapted_fingerprint() != want) {
    if (!allow_refresh)
      throw IndexError(
          "retrieve_adr_full: adapted embeddings are stale for this corpus "
          "adapter");
    index = refresh_adapted(index, theta_corpus);
  }
  Vec q = transform(query_emb, theta);
  return detail::rank_rows(q, index, /*use_adapted=*/true, k, query_id);
}

// The highest-scoring non-positive document under the current adapters:
// the global hard negative for this query. `theta`/`theta_corpus` may be
// null for the unadapted sides.
inline std::string hard_negative(
    std::span<const double> query_emb,
    const std::unordered_set<std::string>& positive_ids,
    const AdapterParams* theta, const AdapterParams* theta_corpus,
    CorpusIndex& index, bool allow_refresh = true) {
  bool use_adapted = theta_corpus != nullptr;
  if (use_adapted) {
    std::uint64_t want = params_fingerprint(*theta_corpus);
    if (!index.has_adapted() || index.adapted_fingerprint() != want) {
      if (!allow_refresh)
        throw IndexError("hard_negative: adapted embeddings are stale");
      index = refresh_adapted(index, *theta_corpus);
    }
  }
  Vec q = theta ? transform(query_emb, *theta)
                : Vec(query_emb.begin(), query_emb.end());
  return detail::best_excluding(q, index, use_adapted, positive_ids);
}

}  // namespace adret
