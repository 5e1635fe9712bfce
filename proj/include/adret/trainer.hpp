#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "adret/adapter.hpp"
#include "adret/corpus_index.hpp"
#include "adret/datasets.hpp"
#include "adret/errors.hpp"
#include "adret/eval.hpp"
#include "adret/numerics.hpp"
#include "adret/provider.hpp"
#include "adret/rng.hpp"

namespace adret {

// --- margin ranking loss over cosine similarities ----------------------------

struct TripletLossSpec {
  double margin = 0.1;
};

struct TripletGrads {
  Vec d_query;
  Vec d_pos;
  Vec d_neg;
};

// max(0, margin - cos(q, pos) + cos(q, neg)). Gradients are zero when the
// hinge is inactive.
inline double triplet_loss(std::span<const double> query,
                           std::span<const double> pos,
                           std::span<const double> neg,
                           const TripletLossSpec& spec,
                           TripletGrads* grads = nullptr) {
  if (!(spec.margin >= 0.0) || !std::isfinite(spec.margin))
    throw ConfigError("triplet_loss: margin must be finite and >= 0");
  double cos_pos = cosine(query, pos);
  double cos_neg = cosine(query, neg);
  double raw = spec.margin - cos_pos + cos_neg;
  double loss = std::max(0.0, raw);
  if (grads) {
    grads->d_query.assign(query.size(), 0.0);
    grads->d_pos.assign(pos.size(), 0.0);
    grads->d_neg.assign(neg.size(), 0.0);
    if (raw > 0.0) {
      Vec dq_pos = cosine_grad_a(query, pos);
      Vec dq_neg = cosine_grad_a(query, neg);
      for (std::size_t i = 0; i < query.size(); ++i)
        grads->d_query[i] = -dq_pos[i] + dq_neg[i];
      grads->d_pos = scale(cosine_grad_a(pos, query), -1.0);
      grads->d_neg = cosine_grad_a(neg, query);
    }
  }
  return loss;
}

// --- configuration ------------------------------------------------------------

enum class TrainMode { adr, adr_full };

inline std::string train_mode_name(TrainMode m) {
  return m == TrainMode::adr ? "adr" : "adr_full";
}

enum class SelectionMetric { ndcg_at_10, loss };

struct TrainConfig {
  TrainMode mode = TrainMode::adr;
  std::size_t h = 64;
  double temperature = 1.0;
  double init_key_scale = 1.0;
  double base_lr = 0.0;        // 0 -> mode default: adr 1e-3, adr_full 1e-2
  double gamma = 0.5;
  int step_every_epochs = 0;   // 0 -> mode default: adr 100, adr_full 50
  int max_epochs = 500;
  std::size_t batch_size = 32;
  double margin = 0.1;
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;
  SelectionMetric selection = SelectionMetric::ndcg_at_10;
  int refresh_every_batches = 1;  // corpus-side re-embedding cadence
  double divergence_factor = 10.0;

  // Test/diagnostic hook: called with (query_id, mined_negative_id) for
  // every training pair, in processing order.
  std::function<void(const std::string&, const std::string&)>
      hard_negative_observer;

  TrainConfig resolved() const {
    TrainConfig c = *this;
    if (c.base_lr == 0.0)
      c.base_lr = c.mode == TrainMode::adr ? 1e-3 : 1e-2;
    if (c.step_every_epochs == 0)
      c.step_every_epochs = c.mode == TrainMode::adr ? 100 : 50;
    if (c.max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (c.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(c.base_lr > 0.0)) throw ConfigError("train: base_lr must be > 0");
    if (!(c.gamma > 0.0) || c.gamma > 1.0)
      throw ConfigError("train: gamma must be in (0, 1]");
    if (c.refresh_every_batches < 1)
      throw ConfigError("train: refresh_every_batches must be >= 1");
    if (!(c.divergence_factor > 1.0))
      throw ConfigError("train: divergence_factor must be > 1");
    if (c.validation_fraction < 0.0 || c.validation_fraction >= 1.0)
      throw ConfigError("train: validation_fraction must be in [0, 1)");
    return c;
  }
};

// --- training state -----------------------------------------------------------

// Everything the training loop carries across epochs. The query-side and
// (for adr_full) corpus-side dictionaries each have their own optimizer
// state per matrix.
struct TrainState {
  AdapterParams theta;
  std::optional<AdapterParams> theta_corpus;
  AdamState adam_K, adam_V;
  AdamState adam_Kc, adam_Vc;
  int epoch = 0;  // completed training epochs
  Rng rng{0};
  std::vector<double> loss_history;    // mean loss of epoch e at [e-1]
  std::vector<double> metric_history;  // validation metric, [0] = at init

  struct Snapshot {
    AdapterParams theta;
    std::optional<AdapterParams> theta_corpus;
    double metric = 0.0;
    int epoch = 0;
  };
  std::optional<Snapshot> best;
};

// Precomputed per-run inputs of the loop: embedded training pairs, the
// per-query positive sets that constrain negative mining, and the mining
// corpus. Built once by fit(); assembled directly in tests.
struct TrainContext {
  std::vector<RelevancePair> pairs;  // training pairs (validation held out)
  std::unordered_map<std::string, Vec> query_emb;
  std::unordered_map<std::string, std::unordered_set<std::string>> positives;
  CorpusIndex index;
  std::vector<std::string> validation_qids;
  Qrels validation_qrels;
};

inline TrainState init_train_state(const TrainConfig& cfg, std::size_t d) {
  TrainConfig c = cfg.resolved();
  std::size_t h = std::min(c.h, d - 1);  // dictionary must stay smaller than d
  TrainState st;
  st.theta = init_adapter({h, d, c.init_key_scale, c.temperature, c.seed});
  st.adam_K = AdamState::for_param(st.theta.K, c.base_lr, c.gamma,
                                   c.step_every_epochs);
  st.adam_V = AdamState::for_param(st.theta.V, c.base_lr, c.gamma,
                                   c.step_every_epochs);
  if (c.mode == TrainMode::adr_full) {
    st.theta_corpus =
        init_adapter({h, d, c.init_key_scale, c.temperature, c.seed + 1});
    st.adam_Kc = AdamState::for_param(st.theta_corpus->K, c.base_lr, c.gamma,
                                      c.step_every_epochs);
    st.adam_Vc = AdamState::for_param(st.theta_corpus->V, c.base_lr, c.gamma,
                                      c.step_every_epochs);
  }
  st.rng = Rng(c.seed);
  return st;
}

// One pass over the training pairs: shuffled batches, per-pair global hard
// negatives mined under the current parameters, per-batch Adam steps at
// the epoch's scheduled rate. For adr_full the mining corpus is re-embedded
// with the current corpus adapter every `refresh_every_batches` batches.
inline void train_epoch(TrainState& st, TrainContext& ctx,
                        const TrainConfig& cfg_in) {
  TrainConfig cfg = cfg_in.resolved();
  if (ctx.pairs.empty()) throw ConfigError("train_epoch: no training pairs");
  const bool full = cfg.mode == TrainMode::adr_full;
  const int epoch = st.epoch;  // schedule position for this pass

  std::vector<std::size_t> order(ctx.pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  st.rng.shuffle(order);

  Mat grad_K(st.theta.h, st.theta.d), grad_V(st.theta.h, st.theta.d);
  Mat grad_Kc, grad_Vc;
  if (full) {
    grad_Kc = Mat(st.theta_corpus->h, st.theta_corpus->d);
    grad_Vc = Mat(st.theta_corpus->h, st.theta_corpus->d);
  }

  double loss_sum = 0.0;
  std::size_t batch_index = 0;
  for (std::size_t start = 0; start < order.size();
       start += cfg.batch_size, ++batch_index) {
    std::size_t count = std::min(cfg.batch_size, order.size() - start);
    if (full && batch_index % cfg.refresh_every_batches == 0)
      ctx.index = refresh_adapted(ctx.index, *st.theta_corpus);

    std::fill(grad_K.data.begin(), grad_K.data.end(), 0.0);
    std::fill(grad_V.data.begin(), grad_V.data.end(), 0.0);
    if (full) {
      std::fill(grad_Kc.data.begin(), grad_Kc.data.end(), 0.0);
      std::fill(grad_Vc.data.begin(), grad_Vc.data.end(), 0.0);
    }

    for (std::size_t b = 0; b < count; ++b) {
      const RelevancePair& pair = ctx.pairs[order[start + b]];
      auto emb_it = ctx.query_emb.find(pair.query_id);
      if (emb_it == ctx.query_emb.end())
        throw Error("train_epoch: no embedding for query " + pair.query_id);
      const auto& positives = ctx.positives.at(pair.query_id);
      try {
        ForwardTape tape_q;
        Vec q = transform(emb_it->second, st.theta, &tape_q);

        // Mine the hardest negative under the current adapters, against
        // the whole mining corpus (not just this batch).
        std::string neg_id = detail::best_excluding(
            q, ctx.index, /*use_adapted=*/full, positives);
        if (positives.count(neg_id))
          throw Error("train_epoch: mined negative is a positive (bug)");
        if (cfg.hard_negative_observer)
          cfg.hard_negative_observer(pair.query_id, neg_id);

        std::size_t pos_row = ctx.index.row_of(pair.corpus_id);
        std::size_t neg_row = ctx.index.row_of(neg_id);

        Vec pos_vec, neg_vec;
        ForwardTape tape_p, tape_n;
        if (full) {
          // Fresh transforms for the loss, even if the mining rows were a
          // few batches stale.
          pos_vec = transform(ctx.index.raw_row(pos_row), *st.theta_corpus,
                              &tape_p);
          neg_vec = transform(ctx.index.raw_row(neg_row), *st.theta_corpus,
                              &tape_n);
        } else {
          auto p = ctx.index.raw_row(pos_row);
          auto n = ctx.index.raw_row(neg_row);
          pos_vec.assign(p.begin(), p.end());
          neg_vec.assign(n.begin(), n.end());
        }

        TripletGrads g;
        double loss = triplet_loss(q, pos_vec, neg_vec, {cfg.margin}, &g);
        if (!std::isfinite(loss))
          throw DivergenceError("non-finite loss at epoch " +
                                std::to_string(epoch + 1) + ", batch " +
                                std::to_string(batch_index) + ", query " +
                                pair.query_id);
        loss_sum += loss;
        if (loss > 0.0) {
          AdapterGrads gq = transform_grad(tape_q, st.theta, g.d_query);
          for (std::size_t i = 0; i < grad_K.data.size(); ++i) {
            grad_K.data[i] += gq.dK.data[i];
            grad_V.data[i] += gq.dV.data[i];
          }
          if (full) {
            AdapterGrads gp =
                transform_grad(tape_p, *st.theta_corpus, g.d_pos);
            AdapterGrads gn =
                transform_grad(tape_n, *st.theta_corpus, g.d_neg);
            for (std::size_t i = 0; i < grad_Kc.data.size(); ++i) {
              grad_Kc.data[i] += gp.dK.data[i] + gn.dK.data[i];
              grad_Vc.data[i] += gp.dV.data[i] + gn.dV.data[i];
            }
          }
        }
      } catch (const NumericError& e) {
        // Numerical breakdown mid-training means the parameters ran away,
        // which is a divergence as far as the caller is concerned.
        throw DivergenceError("training diverged at epoch " +
                              std::to_string(epoch + 1) + ", batch " +
                              std::to_string(batch_index) + ", query " +
                              pair.query_id + ": " + e.what());
      }
    }

    double inv = 1.0 / static_cast<double>(count);
    for (double& v : grad_K.data) v *= inv;
    for (double& v : grad_V.data) v *= inv;
    adam_update(st.theta.K, grad_K, st.adam_K, epoch, "theta.K");
    adam_update(st.theta.V, grad_V, st.adam_V, epoch, "theta.V");
    if (full) {
      for (double& v : grad_Kc.data) v *= inv;
      for (double& v : grad_Vc.data) v *= inv;
      adam_update(st.theta_corpus->K, grad_Kc, st.adam_Kc, epoch,
                  "theta_corpus.K");
      adam_update(st.theta_corpus->V, grad_Vc, st.adam_Vc, epoch,
                  "theta_corpus.V");
    }
  }

  st.epoch += 1;
  st.loss_history.push_back(loss_sum /
                            static_cast<double>(ctx.pairs.size()));
}

// Mean nDCG@10 of the validation queries under the current parameters,
// evaluated against the mining corpus.
inline double validation_metric(const TrainState& st, const TrainContext& ctx,
                                const TrainConfig& cfg) {
  if (ctx.validation_qids.empty())
    throw ConfigError("validation_metric: no validation queries");
  CorpusIndex scratch = ctx.index;
  double sum = 0.0;
  for (const auto& qid : ctx.validation_qids) {
    const Vec& emb = ctx.query_emb.at(qid);
    RankedList ranked =
        cfg.mode == TrainMode::adr_full
            ? retrieve_adr_full(emb, st.theta, *st.theta_corpus, scratch, 10,
                                qid)
            : retrieve_adr(emb, st.theta, scratch, 10, qid);
    sum += ndcg_at_k(ranked, ctx.validation_qrels.at(qid), 10);
  }
  return sum / static_cast<double>(ctx.validation_qids.size());
}

// Splits the train partition into training and validation queries, embeds
// everything through the provider, and assembles the loop inputs.
inline TrainContext build_train_context(const RetrievalDataset& ds,
                                        EmbeddingProvider& provider,
                                        EmbeddingCache* cache,
                                        const TrainConfig& cfg_in,
                                        const EmbedOptions& embed_opts = {}) {
  TrainConfig cfg = cfg_in.resolved();
  std::vector<std::string> train_qids = ds.query_ids(Partition::train);
  if (train_qids.empty())
    throw ConfigError("train: dataset has no train-partition queries");

  std::vector<std::string> corpus_ids = ds.eval_corpus_ids(Partition::train);
  if (corpus_ids.empty()) throw ConfigError("train: empty mining corpus");

  // Hold out validation queries (never trained on). ceil keeps at least
  // one whenever a fraction was requested; tiny sets fall back to none.
  std::vector<std::string> shuffled = train_qids;
  Rng rng(cfg.seed ^ 0x76616c69ull);  // decoupled from the shuffle stream
  rng.shuffle(shuffled);
  std::size_t n_val =
      cfg.validation_fraction > 0.0
          ? static_cast<std::size_t>(std::ceil(
                cfg.validation_fraction *
                static_cast<double>(shuffled.size())))
          : 0;
  if (n_val >= shuffled.size()) n_val = shuffled.size() - 1;

  TrainContext ctx{.pairs = {},
                   .query_emb = {},
                   .positives = {},
                   .index = [&] {
                     std::vector<std::string> texts;
                     texts.reserve(corpus_ids.size());
                     for (const auto& id : corpus_ids)
                       texts.push_back(ds.corpus.at(id));
                     std::vector<Vec> vecs =
                         embed_batch(texts, provider, cache, embed_opts);
                     Mat rows(vecs.size(), provider.dimension());
                     for (std::size_t i = 0; i < vecs.size(); ++i)
                       std::copy(vecs[i].begin(), vecs[i].end(),
                                 rows.row(i).begin());
                     return CorpusIndex(corpus_ids, std::move(rows));
                   }(),
                   .validation_qids = {},
                   .validation_qrels = {}};

  ctx.validation_qids.assign(shuffled.begin(),
                             shuffled.begin() + static_cast<long>(n_val));
  std::sort(ctx.validation_qids.begin(), ctx.validation_qids.end());
  std::unordered_set<std::string> val_set(ctx.validation_qids.begin(),
                                          ctx.validation_qids.end());

  std::vector<std::string> texts;
  texts.reserve(train_qids.size());
  for (const auto& id : train_qids) texts.push_back(ds.queries.at(id));
  std::vector<Vec> qvecs = embed_batch(texts, provider, cache, embed_opts);
  for (std::size_t i = 0; i < train_qids.size(); ++i)
    ctx.query_emb[train_qids[i]] = std::move(qvecs[i]);

  auto positives = ds.positives_by_query();
  Qrels train_qrels = qrels_view(ds, Partition::train);
  for (const auto& qid : train_qids) {
    auto pit = positives.find(qid);
    if (pit == positives.end())
      throw IngestionError("train: query " + qid + " has no judged positives");
    if (val_set.count(qid)) {
      ctx.validation_qrels[qid] = train_qrels.at(qid);
      continue;
    }
    ctx.positives[qid] = pit->second;
  }
  for (const auto& p : ds.pairs) {
    auto it = ds.partition.find(p.query_id);
    if (it == ds.partition.end() || it->second != Partition::train) continue;
    if (val_set.count(p.query_id)) continue;
    if (!ctx.index.contains(p.corpus_id))
      throw IngestionError("train: positive " + p.corpus_id +
                           " is outside the mining corpus");
    ctx.pairs.push_back(p);
  }
  if (ctx.pairs.empty())
    throw ConfigError("train: no training pairs after the validation split");
  return ctx;
}

struct FitResult {
  AdapterParams theta;
  std::optional<AdapterParams> theta_corpus;
  nlohmann::json report;
};

// Full training run: initialize at the identity, record the pre-training
// validation metric, train up to max_epochs with per-epoch validation, and
// return the snapshot that scored best (by validation nDCG@10, or lowest
// epoch loss when no validation is possible or requested).
inline FitResult fit(const RetrievalDataset& ds, EmbeddingProvider& provider,
                     EmbeddingCache* cache, const TrainConfig& cfg_in,
                     const EmbedOptions& embed_opts = {}) {
  TrainConfig cfg = cfg_in.resolved();
  auto t0 = std::chrono::steady_clock::now();
  TrainContext ctx = build_train_context(ds, provider, cache, cfg, embed_opts);
  std::size_t d = ctx.index.dim();
  TrainState st = init_train_state(cfg, d);

  bool use_validation = cfg.selection == SelectionMetric::ndcg_at_10 &&
                        !ctx.validation_qids.empty();
  std::vector<std::string> notes;
  if (cfg.selection == SelectionMetric::ndcg_at_10 && !use_validation)
    notes.push_back(
        "validation split is empty; selecting by training loss instead");

  auto snapshot = [&](double metric) {
    st.best = TrainState::Snapshot{st.theta, st.theta_corpus, metric,
                                   st.epoch};
  };
  if (use_validation) {
    double m0 = validation_metric(st, ctx, cfg);
    st.metric_history.push_back(m0);
    snapshot(m0);
  }

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    train_epoch(st, ctx, cfg);
    double epoch_loss = st.loss_history.back();
    if (!std::isfinite(epoch_loss) || !all_finite(st.theta.K) ||
        !all_finite(st.theta.V))
      throw DivergenceError("training diverged at epoch " +
                            std::to_string(epoch) + " (non-finite values)");
    if (st.loss_history.front() > 0.0 &&
        epoch_loss > cfg.divergence_factor * st.loss_history.front())
      throw DivergenceError(
          "training diverged at epoch " + std::to_string(epoch) + ": loss " +
          std::to_string(epoch_loss) + " exceeds " +
          std::to_string(cfg.divergence_factor) + "x the first epoch's " +
          std::to_string(st.loss_history.front()));

    if (use_validation) {
      double m = validation_metric(st, ctx, cfg);
      st.metric_history.push_back(m);
      if (!st.best || m > st.best->metric) snapshot(m);
    } else {
      if (!st.best || epoch_loss < st.best->metric) snapshot(epoch_loss);
    }
  }

  auto wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                     std::chrono::steady_clock::now() - t0)
                     .count();

  FitResult out;
  out.theta = st.best->theta;
  out.theta_corpus = st.best->theta_corpus;
  out.report = {
      {"mode", train_mode_name(cfg.mode)},
      {"h", out.theta.h},
      {"h_requested", cfg.h},
      {"d", d},
      {"temperature", cfg.temperature},
      {"init_key_scale", cfg.init_key_scale},
      {"base_lr", cfg.base_lr},
      {"gamma", cfg.gamma},
      {"step_every_epochs", cfg.step_every_epochs},
      {"max_epochs", cfg.max_epochs},
      {"batch_size", cfg.batch_size},
      {"margin", cfg.margin},
      {"seed", cfg.seed},
      {"validation_fraction", cfg.validation_fraction},
      {"selection_metric", use_validation ? "ndcg_at_10" : "loss"},
      {"n_train_pairs", ctx.pairs.size()},
      {"n_validation_queries", ctx.validation_qids.size()},
      {"mining_corpus_size", ctx.index.size()},
      {"loss_history", st.loss_history},
      {"metric_history", st.metric_history},
      {"best_epoch", st.best->epoch},
      {"best_metric", st.best->metric},
      {"baseline_metric",
       use_validation ? nlohmann::json(st.metric_history.front())
                      : nlohmann::json()},
      {"wall_ms", wall_ms},
      {"notes", notes},
  };
  return out;
}

// --- dictionary-size sweep ----------------------------------------------------

struct SweepCell {
  std::size_t h_requested = 0;
  bool ok = false;
  std::string error;
  double best_metric = 0.0;
  int best_epoch = 0;
  std::optional<FitResult> result;
};

struct SweepResult {
  std::size_t best_cell = 0;  // index into cells
  std::vector<SweepCell> cells;
  nlohmann::json report;
};

// Fits once per dictionary size, continuing past failed cells, and picks
// the best cell by metric (ties to the smaller h).
inline SweepResult sweep(const RetrievalDataset& ds,
                         EmbeddingProvider& provider, EmbeddingCache* cache,
                         const TrainConfig& base_cfg,
                         const std::vector<std::size_t>& h_values,
                         const EmbedOptions& embed_opts = {}) {
  if (h_values.empty()) throw ConfigError("sweep: no dictionary sizes given");
  SweepResult out;
  for (std::size_t h : h_values) {
    SweepCell cell;
    cell.h_requested = h;
    TrainConfig cfg = base_cfg;
    cfg.h = h;
    try {
      FitResult fitted = fit(ds, provider, cache, cfg, embed_opts);
      cell.ok = true;
      cell.best_metric = fitted.report.at("best_metric").get<double>();
      cell.best_epoch = fitted.report.at("best_epoch").get<int>();
      cell.result = std::move(fitted);
    } catch (const Error& e) {
      cell.error = e.what();
    }
    out.cells.push_back(std::move(cell));
  }

  bool any_ok = false;
  for (std::size_t i = 0; i < out.cells.size(); ++i) {
    const SweepCell& c = out.cells[i];
    if (!c.ok) continue;
    const SweepCell& best = out.cells[out.best_cell];
    bool better = !any_ok || c.best_metric > best.best_metric ||
                  (c.best_metric == best.best_metric &&
                   c.result->theta.h < best.result->theta.h);
    if (better) out.best_cell = i;
    any_ok = true;
  }
  if (!any_ok) throw Error("sweep: every configuration failed");

  out.report = nlohmann::json::array();
  for (const auto& c : out.cells) {
    nlohmann::json cell = {{"h_requested", c.h_requested}, {"ok", c.ok}};
    if (c.ok) {
      cell["best_metric"] = c.best_metric;
      cell["best_epoch"] = c.best_epoch;
      cell["h"] = c.result->theta.h;
    } else {
      cell["error"] = c.error;
    }
    out.report.push_back(std::move(cell));
  }
  return out;
}

}  // namespace adret
