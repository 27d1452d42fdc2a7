#include "mtret/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "mtret/batches.hpp"
#include "mtret/metrics.hpp"
#include "mtret/model.hpp"
#include "mtret/serve.hpp"

namespace mtret {

namespace {

void accumulate_probe(ProbeStats& probe, const Mat& user_embs) {
  const Eigen::Index k = user_embs.rows();
  for (Eigen::Index a = 0; a < k; ++a) {
    for (Eigen::Index b = a + 1; b < k; ++b) {
      const double na = user_embs.row(a).norm();
      const double nb = user_embs.row(b).norm();
      if (na == 0.0 || nb == 0.0) continue;
      const double cos = user_embs.row(a).dot(user_embs.row(b)) / (na * nb);
      probe.mean += cos;
      probe.stddev += cos * cos;
      ++probe.pairs;
      const int bin = std::clamp(
          static_cast<int>((cos + 1.0) / 2.0 * ProbeStats::kBins), 0,
          ProbeStats::kBins - 1);
      ++probe.histogram[static_cast<std::size_t>(bin)];
    }
  }
}

void finalize_probe(ProbeStats& probe) {
  if (probe.pairs == 0) return;
  const double n = static_cast<double>(probe.pairs);
  const double mean = probe.mean / n;
  const double var = std::max(0.0, probe.stddev / n - mean * mean);
  probe.mean = mean;
  probe.stddev = std::sqrt(var);
}

// Ranked item ids by descending score, ties to the lower id.
std::vector<std::int64_t> rank_items(const std::vector<std::int64_t>& ids,
                                     const Eigen::VectorXd& scores,
                                     std::int64_t top) {
  std::vector<std::int64_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  top = std::min<std::int64_t>(top, static_cast<std::int64_t>(order.size()));
  std::partial_sort(order.begin(), order.begin() + top, order.end(),
                    [&](std::int64_t a, std::int64_t b) {
                      if (scores(a) != scores(b)) return scores(a) > scores(b);
                      return ids[static_cast<std::size_t>(a)] <
                             ids[static_cast<std::size_t>(b)];
                    });
  std::vector<std::int64_t> ranked;
  ranked.reserve(static_cast<std::size_t>(top));
  for (std::int64_t i = 0; i < top; ++i) {
    ranked.push_back(ids[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
  }
  return ranked;
}

}  // namespace

EvalReport evaluate(const RunConfig& cfg, const ParamStore& store,
                    const Dataset& ds, const std::string& universe,
                    const IndexBuild* index_build) {
  if (universe != "full" && universe != "index") {
    throw std::invalid_argument("evaluate: universe must be 'full' or 'index'");
  }
  if (universe == "index" && index_build == nullptr) {
    throw std::invalid_argument("evaluate: index universe needs an index build");
  }
  const auto k_obj = static_cast<std::size_t>(cfg.model.n_objectives);
  Model model(cfg);

  DatasetSplit split = split_by_time(ds.examples, cfg.train.holdout_fraction);

  // Held-out relevant sets per user per objective.
  std::unordered_map<std::int64_t,
                     std::vector<std::unordered_set<std::int64_t>>>
      relevant;
  for (const auto& ex : split.test) {
    auto& sets = relevant.try_emplace(ex.user).first->second;
    if (sets.empty()) sets.resize(k_obj);
    for (std::size_t k = 0; k < k_obj; ++k) {
      if (ex.labels[k]) sets[k].insert(ex.event.item);
    }
  }

  // Full-catalog embeddings once; index mode ranks within each index instead.
  std::vector<Mat> item_embs;
  std::vector<std::int64_t> catalog_ids;
  if (universe == "full") {
    item_embs = model.infer_item_embeddings(store, ds.items);
    catalog_ids.reserve(ds.items.size());
    for (const auto& it : ds.items) catalog_ids.push_back(it.item);
  }

  EvalReport report;
  report.universe = universe;
  report.per_objective.assign(k_obj, {});
  report.probe.histogram.assign(ProbeStats::kBins, 0);
  const std::int64_t max_cut =
      *std::max_element(kRecallCutoffs.begin(), kRecallCutoffs.end());

  for (std::int64_t u = 0; u < cfg.world.n_users; ++u) {
    auto rel_it = relevant.find(u);
    if (rel_it == relevant.end()) continue;  // nothing held out for this user
    const auto& stream = ds.events[static_cast<std::size_t>(u)];
    std::vector<BehaviorEvent> history =
        history_before(stream, split.split_ts, cfg.model.n_max);
    if (history.empty()) {
      ++report.users_skipped_no_history;
      continue;
    }
    const Mat user_embs = model.infer_user_embeddings(
        store, ds.users[static_cast<std::size_t>(u)], history);
    accumulate_probe(report.probe, user_embs);

    for (std::size_t k = 0; k < k_obj; ++k) {
      const auto& rel = rel_it->second[k];
      if (rel.empty()) continue;
      const Eigen::VectorXd query = user_embs.row(static_cast<Eigen::Index>(k));
      std::vector<std::int64_t> ranked;
      if (universe == "full") {
        Eigen::VectorXd scores = item_embs[k] * query;
        ranked = rank_items(catalog_ids, scores, max_cut);
      } else {
        const auto& index = index_build->indices[k];
        if (index.empty()) continue;
        SearchResult found = index.search_exact(query, max_cut);
        ranked.reserve(found.hits.size());
        for (const auto& hit : found.hits) ranked.push_back(hit.item);
      }
      auto& agg = report.per_objective[k];
      for (std::size_t c = 0; c < kRecallCutoffs.size(); ++c) {
        agg.recall[c] += recall_at_k(ranked, rel, kRecallCutoffs[c]);
      }
      for (std::size_t c = 0; c < kNdcgCutoffs.size(); ++c) {
        agg.ndcg[c] += ndcg_at_k(ranked, rel, kNdcgCutoffs[c]);
      }
      ++agg.users_evaluated;
    }
  }

  for (auto& agg : report.per_objective) {
    if (agg.users_evaluated == 0) continue;
    const double n = static_cast<double>(agg.users_evaluated);
    for (auto& r : agg.recall) r /= n;
    for (auto& g : agg.ndcg) g /= n;
  }
  finalize_probe(report.probe);
  return report;
}

ProbeStats similarity_probe(const RunConfig& cfg, const ParamStore& store,
                            const Dataset& ds, std::int64_t max_users) {
  Model model(cfg);
  DatasetSplit split = split_by_time(ds.examples, cfg.train.holdout_fraction);
  ProbeStats probe;
  probe.histogram.assign(ProbeStats::kBins, 0);
  std::int64_t used = 0;
  for (std::int64_t u = 0; u < cfg.world.n_users && used < max_users; ++u) {
    const auto& stream = ds.events[static_cast<std::size_t>(u)];
    std::vector<BehaviorEvent> history =
        history_before(stream, split.split_ts, cfg.model.n_max);
    if (history.empty()) continue;
    const Mat user_embs = model.infer_user_embeddings(
        store, ds.users[static_cast<std::size_t>(u)], history);
    accumulate_probe(probe, user_embs);
    ++used;
  }
  finalize_probe(probe);
  return probe;
}

void write_report(const EvalReport& report, const RunConfig& cfg,
                  const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "# universe " << report.universe << "\n";
  out << "# config " << to_json(cfg).dump() << "\n";
  out << "# users_skipped_no_history " << report.users_skipped_no_history
      << "\n";
  for (std::size_t k = 0; k < report.per_objective.size(); ++k) {
    const auto& agg = report.per_objective[k];
    const std::string name = objective_name(static_cast<int>(k));
    for (std::size_t c = 0; c < kRecallCutoffs.size(); ++c) {
      out << name << " recall " << kRecallCutoffs[c] << " " << agg.recall[c]
          << "\n";
    }
    for (std::size_t c = 0; c < kNdcgCutoffs.size(); ++c) {
      out << name << " ndcg " << kNdcgCutoffs[c] << " " << agg.ndcg[c] << "\n";
    }
    out << name << " users " << 0 << " " << agg.users_evaluated << "\n";
  }
  out << "probe cosine_mean 0 " << report.probe.mean << "\n";
  out << "probe cosine_std 0 " << report.probe.stddev << "\n";
}

void write_histogram_csv(const ProbeStats& probe, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "bin_lo,bin_hi,count\n";
  for (int b = 0; b < ProbeStats::kBins; ++b) {
    const double lo = -1.0 + 2.0 * b / ProbeStats::kBins;
    const double hi = -1.0 + 2.0 * (b + 1) / ProbeStats::kBins;
    out << lo << "," << hi << "," << probe.histogram[static_cast<std::size_t>(b)]
        << "\n";
  }
}

}  // namespace mtret
