#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "adret/corpus_index.hpp"
#include "adret/rng.hpp"

using namespace adret;

namespace {

CorpusIndex axes_index() {
  return CorpusIndex::from_rows({{"doc_x", {1.0, 0.0, 0.0}},
                                 {"doc_y", {0.0, 1.0, 0.0}},
                                 {"doc_z", {0.0, 0.0, 1.0}}});
}

CorpusIndex random_index(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::pair<std::string, Vec>> rows;
  for (std::size_t i = 0; i < n; ++i) {
    Vec v(d);
    for (double& x : v) x = rng.gaussian();
    rows.emplace_back("doc" + std::to_string(i), l2_normalize(v));
  }
  return CorpusIndex::from_rows(rows);
}

AdapterParams trained_like_params(std::size_t h, std::size_t d,
                                  std::uint64_t seed) {
  AdapterParams p = init_adapter({h, d, 1.0, 1.0, seed});
  Rng rng(seed + 99);
  for (double& v : p.V.data) v = 0.4 * rng.gaussian();
  return p;
}

// Independent ranking oracle: score everything with the numerics cosine,
// stable-sort by (score desc, id asc), truncate.
RankedList oracle_rank(const Vec& q, const CorpusIndex& index, std::size_t k) {
  std::vector<RankedEntry> all;
  for (std::size_t i = 0; i < index.size(); ++i)
    all.push_back({index.id_of(i), cosine(q, index.raw_row(i))});
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  all.resize(std::min(k, all.size()));
  return {"", all};
}

}  // namespace

TEST_CASE("baseline retrieval ranks by cosine with hand-checked scores") {
  CorpusIndex index = axes_index();
  Vec q{2.0, 1.0, 0.0};
  RankedList r = retrieve_baseline(q, index, 3, "q1");
  REQUIRE(r.entries.size() == 3);
  CHECK(r.query_id == "q1");
  CHECK(r.entries[0].id == "doc_x");
  CHECK(r.entries[0].score == Catch::Approx(2.0 / std::sqrt(5.0)).epsilon(1e-14));
  CHECK(r.entries[1].id == "doc_y");
  CHECK(r.entries[1].score == Catch::Approx(1.0 / std::sqrt(5.0)).epsilon(1e-14));
  CHECK(r.entries[2].id == "doc_z");
  CHECK(r.entries[2].score == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("retrieval matches an independent sort oracle") {
  CorpusIndex index = random_index(40, 8, 11);
  Rng rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    Vec q(8);
    for (double& x : q) x = rng.gaussian();
    for (std::size_t k : {1u, 5u, 40u}) {
      RankedList got = retrieve_baseline(q, index, k);
      RankedList want = oracle_rank(q, index, k);
      REQUIRE(got.entries.size() == want.entries.size());
      for (std::size_t i = 0; i < got.entries.size(); ++i) {
        CHECK(got.entries[i].id == want.entries[i].id);
        CHECK(got.entries[i].score == want.entries[i].score);
      }
    }
  }
}

TEST_CASE("score ties break by ascending document id") {
  CorpusIndex index = CorpusIndex::from_rows({{"zzz", {1.0, 0.0}},
                                              {"aaa", {1.0, 0.0}},
                                              {"mmm", {2.0, 0.0}}});
  RankedList r = retrieve_baseline(Vec{1.0, 0.0}, index, 3);
  // All three have cosine exactly 1.
  CHECK(r.entries[0].id == "aaa");
  CHECK(r.entries[1].id == "mmm");
  CHECK(r.entries[2].id == "zzz");
}

TEST_CASE("k is clipped to the corpus size and must be positive") {
  CorpusIndex index = axes_index();
  CHECK(retrieve_baseline(Vec{1.0, 0.0, 0.0}, index, 10).entries.size() == 3);
  CHECK_THROWS_AS(retrieve_baseline(Vec{1.0, 0.0, 0.0}, index, 0),
                  ConfigError);
}

TEST_CASE("index construction validates its input") {
  CHECK_THROWS_AS(CorpusIndex::from_rows({}), IndexError);
  CHECK_THROWS_AS(
      CorpusIndex::from_rows({{"a", {1.0}}, {"a", {2.0}}}), IndexError);
  CHECK_THROWS_AS(
      CorpusIndex::from_rows({{"a", {1.0, 0.0}}, {"b", {1.0}}}), ShapeError);
  CHECK_THROWS_AS(CorpusIndex::from_rows({{"a", {0.0, 0.0}}}),
                  DegenerateVectorError);
  CHECK_THROWS_AS(CorpusIndex::from_rows({{"a", {std::nan(""), 1.0}}}),
                  NumericError);
}

TEST_CASE("query-side retrieval at identity equals the baseline") {
  CorpusIndex index = random_index(20, 12, 3);
  AdapterParams identity = init_adapter({4, 12, 1.0, 1.0, 8});
  Rng rng(4);
  Vec q(12);
  for (double& x : q) x = rng.gaussian();
  RankedList a = retrieve_adr(q, identity, index, 5, "q");
  RankedList b = retrieve_baseline(q, index, 5, "q");
  CHECK(a == b);
}

TEST_CASE("query-side retrieval equals baseline retrieval of the transformed query") {
  CorpusIndex index = random_index(20, 12, 5);
  AdapterParams theta = trained_like_params(4, 12, 21);
  Rng rng(6);
  Vec q(12);
  for (double& x : q) x = rng.gaussian();
  RankedList got = retrieve_adr(q, theta, index, 20);
  RankedList want = retrieve_baseline(transform(q, theta), index, 20);
  CHECK(got == want);
}

TEST_CASE("refresh produces a new value with transformed rows") {
  CorpusIndex index = random_index(10, 6, 7);
  AdapterParams theta_c = trained_like_params(3, 6, 31);
  CorpusIndex refreshed = refresh_adapted(index, theta_c);

  CHECK_FALSE(index.has_adapted());  // original untouched
  REQUIRE(refreshed.has_adapted());
  CHECK(refreshed.adapted_fingerprint() == params_fingerprint(theta_c));
  for (std::size_t i = 0; i < index.size(); ++i) {
    Vec want = transform(index.raw_row(i), theta_c);
    auto got = refreshed.adapted_row(i);
    for (std::size_t j = 0; j < want.size(); ++j) CHECK(got[j] == want[j]);
  }
}

TEST_CASE("two-sided retrieval at identity equals the baseline") {
  CorpusIndex index = random_index(15, 10, 9);
  AdapterParams id_q = init_adapter({3, 10, 1.0, 1.0, 1});
  AdapterParams id_c = init_adapter({3, 10, 1.0, 1.0, 2});
  Rng rng(10);
  Vec q(10);
  for (double& x : q) x = rng.gaussian();
  RankedList a = retrieve_adr_full(q, id_q, id_c, index, 15);
  RankedList b = retrieve_baseline(q, index, 15);
  CHECK(a == b);
}

TEST_CASE("two-sided retrieval scores against the refreshed corpus") {
  CorpusIndex index = random_index(15, 10, 13);
  AdapterParams theta = trained_like_params(3, 10, 41);
  AdapterParams theta_c = trained_like_params(3, 10, 42);
  Rng rng(12);
  Vec q(10);
  for (double& x : q) x = rng.gaussian();

  RankedList got = retrieve_adr_full(q, theta, theta_c, index, 15);

  // Oracle: transform both sides explicitly and rank with the baseline.
  std::vector<std::pair<std::string, Vec>> rows;
  for (std::size_t i = 0; i < index.size(); ++i)
    rows.emplace_back(index.id_of(i), transform(index.raw_row(i), theta_c));
  CorpusIndex transformed = CorpusIndex::from_rows(rows);
  RankedList want = retrieve_baseline(transform(q, theta), transformed, 15);
  CHECK(got.entries == want.entries);
}

TEST_CASE("stale adapted embeddings are refreshed or rejected") {
  CorpusIndex index = random_index(8, 6, 17);
  AdapterParams old_c = trained_like_params(3, 6, 51);
  AdapterParams new_c = trained_like_params(3, 6, 52);
  AdapterParams theta = trained_like_params(3, 6, 53);
  index = refresh_adapted(index, old_c);
  Vec q(6, 0.5);

  CHECK_THROWS_AS(
      retrieve_adr_full(q, theta, new_c, index, 3, "", /*allow_refresh=*/false),
      IndexError);
  CHECK(index.adapted_fingerprint() == params_fingerprint(old_c));

  RankedList r = retrieve_adr_full(q, theta, new_c, index, 3, "");
  CHECK(index.adapted_fingerprint() == params_fingerprint(new_c));
  CHECK(r.entries.size() == 3);
}

TEST_CASE("hard negative is the best-scoring non-positive document") {
  CorpusIndex index = random_index(30, 8, 19);
  AdapterParams theta = trained_like_params(4, 8, 61);
  Rng rng(14);
  for (int rep = 0; rep < 10; ++rep) {
    Vec q(8);
    for (double& x : q) x = rng.gaussian();

    RankedList full = retrieve_adr(q, theta, index, 30);
    std::unordered_set<std::string> positives{full.entries[0].id,
                                              full.entries[2].id};
    std::string neg = hard_negative(q, positives, &theta, nullptr, index);

    // Oracle: first ranked entry that is not a positive.
    std::string want;
    for (const auto& e : full.entries)
      if (!positives.count(e.id)) {
        want = e.id;
        break;
      }
    CHECK(neg == want);
    CHECK_FALSE(positives.count(neg));
  }
}

TEST_CASE("hard negative honors the corpus-side adapter") {
  CorpusIndex index = random_index(12, 6, 23);
  AdapterParams theta = trained_like_params(3, 6, 71);
  AdapterParams theta_c = trained_like_params(3, 6, 72);
  Vec q(6, 0.3);
  std::unordered_set<std::string> positives{"doc0"};

  std::string neg = hard_negative(q, positives, &theta, &theta_c, index);
  RankedList full = retrieve_adr_full(q, theta, theta_c, index, 12);
  std::string want;
  for (const auto& e : full.entries)
    if (!positives.count(e.id)) {
      want = e.id;
      break;
    }
  CHECK(neg == want);
}

TEST_CASE("hard negative fails when every document is positive") {
  CorpusIndex index = random_index(3, 4, 29);
  std::unordered_set<std::string> all{"doc0", "doc1", "doc2"};
  Vec q(4, 1.0);
  CHECK_THROWS_AS(hard_negative(q, all, nullptr, nullptr, index), IndexError);
}

TEST_CASE("retrieval is deterministic") {
  CorpusIndex index = random_index(25, 8, 31);
  Vec q(8, 0.25);
  RankedList a = retrieve_baseline(q, index, 10);
  RankedList b = retrieve_baseline(q, index, 10);
  CHECK(a == b);
}
