#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "adret/datasets.hpp"

using namespace adret;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << content;
}

// A typical small collection in the standard layout.
fs::path make_beir_fixture(const std::string& name) {
  fs::path dir = fresh_dir(name);
  write_file(dir / "corpus.jsonl",
             R"({"_id": "d1", "title": "Alpha Title", "text": "alpha body text"})"
             "\n"
             R"({"_id": "d2", "title": "", "text": "beta body"})"
             "\n"
             R"({"_id": "d3", "text": "gamma body"})"
             "\n"
             R"({"_id": "d4", "title": "Delta", "text": "delta body"})"
             "\n");
  write_file(dir / "queries.jsonl",
             R"({"_id": "q1", "text": "find alpha"})"
             "\n"
             R"({"_id": "q2", "text": "find  beta"})"
             "\n"
             R"({"_id": "q3", "text": "find gamma"})"
             "\n"
             R"({"_id": "q9", "text": "never judged"})"
             "\n");
  write_file(dir / "qrels" / "train.tsv",
             "query-id\tcorpus-id\tscore\n"
             "q1\td1\t1\n");
  write_file(dir / "qrels" / "test.tsv",
             "query-id\tcorpus-id\tscore\n"
             "q2\td2\t2\n"
             "q2\td3\t1\n"
             "q3\td1\t1\n"
             "q3\td4\t0\n");
  return dir;
}

RetrievalDataset synthetic_queries(std::size_t n) {
  RetrievalDataset ds;
  ds.name = "synthetic";
  ds.corpus["t0"] = "the shared target document";
  for (std::size_t i = 0; i < n; ++i) {
    std::string id = "q" + std::to_string(i);
    ds.queries[id] = "query number " + std::to_string(i);
    ds.partition[id] = Partition::train;
    ds.pairs.push_back({id, "t0", 1});
  }
  std::sort(ds.pairs.begin(), ds.pairs.end());
  return ds;
}

}  // namespace

TEST_CASE("standard layout loads with partitions and joined titles") {
  fs::path dir = make_beir_fixture("adret_beir_basic");
  RetrievalDataset ds = load_beir(dir);

  CHECK(ds.name == "adret_beir_basic");
  CHECK(ds.eval_corpus_scope == EvalCorpusScope::full_corpus);
  CHECK(ds.corpus.size() == 4);
  CHECK(ds.corpus.at("d1") == "Alpha Title alpha body text");
  CHECK(ds.corpus.at("d2") == "beta body");
  CHECK(ds.corpus.at("d3") == "gamma body");

  // q9 is never judged and q3/d4 has score zero.
  REQUIRE(ds.queries.size() == 3);
  CHECK(ds.queries.at("q2") == "find beta");  // whitespace normalized
  CHECK(ds.partition.at("q1") == Partition::train);
  CHECK(ds.partition.at("q2") == Partition::test);
  CHECK(ds.partition.at("q3") == Partition::test);

  std::vector<RelevancePair> want{{"q1", "d1", 1},
                                  {"q2", "d2", 2},
                                  {"q2", "d3", 1},
                                  {"q3", "d1", 1}};
  CHECK(ds.pairs == want);

  CHECK(ds.query_ids(Partition::train) == std::vector<std::string>{"q1"});
  CHECK(ds.query_ids(Partition::test) ==
        std::vector<std::string>{"q2", "q3"});
  CHECK(ds.eval_corpus_ids(Partition::test) ==
        std::vector<std::string>{"d1", "d2", "d3", "d4"});

  auto positives = ds.positives_by_query();
  CHECK(positives.at("q2") ==
        std::unordered_set<std::string>{"d2", "d3"});
}

TEST_CASE("dev qrels can serve as the training partition") {
  fs::path dir = make_beir_fixture("adret_beir_dev");
  write_file(dir / "qrels" / "dev.tsv",
             "query-id\tcorpus-id\tscore\n"
             "q9\td2\t1\n");
  RetrievalDataset ds = load_beir(dir, {.dev_as_train = true});
  // train.tsv (q1 -> d1) is ignored entirely; dev rows become train.
  CHECK(ds.partition.at("q9") == Partition::train);
  CHECK_FALSE(ds.partition.count("q1"));
  CHECK(ds.pairs == std::vector<RelevancePair>{{"q2", "d2", 2},
                                               {"q2", "d3", 1},
                                               {"q3", "d1", 1},
                                               {"q9", "d2", 1}});

  // Without the option, dev stays its own partition and train is loaded.
  RetrievalDataset plain = load_beir(dir);
  CHECK(plain.partition.at("q9") == Partition::dev);
  CHECK(plain.partition.at("q1") == Partition::train);
}

TEST_CASE("loader rejects inconsistent collections") {
  SECTION("unknown corpus id in qrels") {
    fs::path dir = make_beir_fixture("adret_beir_badref");
    write_file(dir / "qrels" / "test.tsv",
               "query-id\tcorpus-id\tscore\n"
               "q2\tno_such_doc\t1\n");
    CHECK_THROWS_WITH(load_beir(dir),
                      Catch::Matchers::ContainsSubstring("no_such_doc"));
  }
  SECTION("unknown query id in qrels") {
    fs::path dir = make_beir_fixture("adret_beir_badq");
    write_file(dir / "qrels" / "test.tsv",
               "query-id\tcorpus-id\tscore\n"
               "phantom\td1\t1\n");
    CHECK_THROWS_WITH(load_beir(dir),
                      Catch::Matchers::ContainsSubstring("phantom"));
  }
  SECTION("query in two partitions") {
    fs::path dir = make_beir_fixture("adret_beir_twopart");
    write_file(dir / "qrels" / "test.tsv",
               "query-id\tcorpus-id\tscore\n"
               "q1\td2\t1\n");
    CHECK_THROWS_WITH(load_beir(dir), Catch::Matchers::ContainsSubstring(
                                          "multiple partitions"));
  }
  SECTION("malformed corpus line carries its location") {
    fs::path dir = make_beir_fixture("adret_beir_badjson");
    write_file(dir / "corpus.jsonl",
               R"({"_id": "d1", "text": "fine"})"
               "\n"
               "{not json\n");
    CHECK_THROWS_WITH(load_beir(dir),
                      Catch::Matchers::ContainsSubstring(":2:"));
  }
  SECTION("missing qrels header") {
    fs::path dir = make_beir_fixture("adret_beir_nohdr");
    write_file(dir / "qrels" / "test.tsv", "q2\td2\t1\n");
    CHECK_THROWS_WITH(load_beir(dir),
                      Catch::Matchers::ContainsSubstring("header"));
  }
  SECTION("non-integer score") {
    fs::path dir = make_beir_fixture("adret_beir_badscore");
    write_file(dir / "qrels" / "test.tsv",
               "query-id\tcorpus-id\tscore\n"
               "q2\td2\thigh\n");
    CHECK_THROWS_WITH(load_beir(dir),
                      Catch::Matchers::ContainsSubstring("integer"));
  }
  SECTION("duplicate judgment") {
    fs::path dir = make_beir_fixture("adret_beir_dupqrel");
    write_file(dir / "qrels" / "test.tsv",
               "query-id\tcorpus-id\tscore\n"
               "q2\td2\t1\n"
               "q2\td2\t2\n");
    CHECK_THROWS_WITH(load_beir(dir),
                      Catch::Matchers::ContainsSubstring("duplicate"));
  }
  SECTION("no qrels at all") {
    fs::path dir = make_beir_fixture("adret_beir_noqrels");
    fs::remove_all(dir / "qrels");
    CHECK_THROWS_AS(load_beir(dir), IngestionError);
  }
}

TEST_CASE("paired records load with content-hash ids") {
  fs::path dir = fresh_dir("adret_pairs");
  write_file(dir / "pairs.jsonl",
             R"({"query": "how to foo", "target": "foo doc", "split": "train"})"
             "\n"
             R"({"query": "how to bar", "target": "bar doc", "split": "train"})"
             "\n"
             R"({"query": "how  to foo", "target": "foo  doc", "split": "train"})"
             "\n"
             R"({"query": "how to baz", "target": "foo doc", "split": "test"})"
             "\n"
             R"({"query": "how to foo", "target": "qux doc", "split": "test"})"
             "\n");
  RetrievalDataset ds = load_pairs(dir / "pairs.jsonl", "demo");

  CHECK(ds.name == "demo");
  CHECK(ds.eval_corpus_scope == EvalCorpusScope::partition_corpus);
  // Line 3 collapses into line 1; "foo doc" is shared across splits.
  CHECK(ds.corpus.size() == 3);
  // "how to foo" appears in both splits and must stay two distinct queries.
  CHECK(ds.queries.size() == 4);
  CHECK(ds.pairs.size() == 4);
  CHECK(ds.query_ids(Partition::train).size() == 2);
  CHECK(ds.query_ids(Partition::test).size() == 2);

  // Per-partition corpora: train sees {foo, bar}, test sees {foo, qux}.
  std::string foo_id = "t" + sha256_hex("foo doc").substr(0, 16);
  std::string bar_id = "t" + sha256_hex("bar doc").substr(0, 16);
  std::string qux_id = "t" + sha256_hex("qux doc").substr(0, 16);
  auto train_ids = ds.eval_corpus_ids(Partition::train);
  auto test_ids = ds.eval_corpus_ids(Partition::test);
  CHECK(std::set<std::string>(train_ids.begin(), train_ids.end()) ==
        std::set<std::string>{foo_id, bar_id});
  CHECK(std::set<std::string>(test_ids.begin(), test_ids.end()) ==
        std::set<std::string>{foo_id, qux_id});
}

TEST_CASE("paired loader rejects malformed records with line numbers") {
  fs::path dir = fresh_dir("adret_pairs_bad");
  auto expect_throw = [&](const std::string& name, const std::string& content,
                          const std::string& needle) {
    write_file(dir / name, content);
    CHECK_THROWS_WITH(load_pairs(dir / name),
                      Catch::Matchers::ContainsSubstring(needle));
  };
  expect_throw("missing.jsonl",
               R"({"query": "a", "split": "train"})"
               "\n",
               "target");
  expect_throw("badsplit.jsonl",
               R"({"query": "a", "target": "b", "split": "dev"})"
               "\n",
               "'train' or 'test'");
  expect_throw("empty.jsonl",
               R"({"query": "  ", "target": "b", "split": "train"})"
               "\n",
               "empty");
  expect_throw("notjson.jsonl", "zorp\n", ":1:");
  expect_throw("norecords.jsonl", "\n", "no records");
}

TEST_CASE("query split uses floor for the train side") {
  RetrievalDataset ds = synthetic_queries(1406);
  RetrievalDataset out = split(ds, {.train_fraction = 0.8, .seed = 3});
  CHECK(out.query_ids(Partition::train).size() == 1124);
  CHECK(out.query_ids(Partition::test).size() == 282);
  // Everything except the partition map is untouched.
  CHECK(out.corpus == ds.corpus);
  CHECK(out.queries == ds.queries);
  CHECK(out.pairs == ds.pairs);
}

TEST_CASE("query split is deterministic per seed") {
  RetrievalDataset ds = synthetic_queries(50);
  RetrievalDataset a = split(ds, {.train_fraction = 0.5, .seed = 7});
  RetrievalDataset b = split(ds, {.train_fraction = 0.5, .seed = 7});
  RetrievalDataset c = split(ds, {.train_fraction = 0.5, .seed = 8});
  CHECK(a.partition == b.partition);
  CHECK(a.partition != c.partition);
}

TEST_CASE("degenerate splits are rejected") {
  RetrievalDataset one = synthetic_queries(1);
  CHECK_THROWS_AS(split(one, {.train_fraction = 0.5, .seed = 0}), SplitError);
  RetrievalDataset ds = synthetic_queries(10);
  CHECK_THROWS_AS(split(ds, {.train_fraction = 0.0, .seed = 0}), ConfigError);
  CHECK_THROWS_AS(split(ds, {.train_fraction = 1.0, .seed = 0}), ConfigError);
  CHECK_THROWS_AS(split(ds, {.train_fraction = -2.0, .seed = 0}), ConfigError);
  // floor(10 * 0.05) == 0 -> empty train side
  CHECK_THROWS_AS(split(ds, {.train_fraction = 0.05, .seed = 0}), SplitError);
}

TEST_CASE("dataset snapshot round-trips") {
  fs::path dir = make_beir_fixture("adret_beir_snapshot");
  RetrievalDataset ds = load_beir(dir);
  fs::path snap = dir / "snapshot.json";
  save_dataset(ds, snap);
  RetrievalDataset back = load_dataset(snap);
  CHECK(back == ds);

  write_file(snap, "{broken");
  CHECK_THROWS_AS(load_dataset(snap), SerializationError);
}

TEST_CASE("integrity checker names offenders") {
  RetrievalDataset ds = synthetic_queries(3);
  ds.pairs.push_back({"q1", "missing_doc", 1});
  std::sort(ds.pairs.begin(), ds.pairs.end());
  CHECK_THROWS_WITH(check_integrity(ds),
                    Catch::Matchers::ContainsSubstring("missing_doc"));

  RetrievalDataset no_part = synthetic_queries(3);
  no_part.partition.erase("q1");
  CHECK_THROWS_WITH(check_integrity(no_part),
                    Catch::Matchers::ContainsSubstring("no partition"));

  RetrievalDataset unjudged = synthetic_queries(3);
  unjudged.queries["q99"] = "floating query";
  unjudged.partition["q99"] = Partition::train;
  CHECK_THROWS_WITH(check_integrity(unjudged),
                    Catch::Matchers::ContainsSubstring("no judged"));
}
