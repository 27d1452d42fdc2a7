#include "mtret/index.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

#include "mtret/io.hpp"
#include "mtret/model.hpp"
#include "mtret/rng.hpp"

namespace mtret {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_invariants(const std::vector<std::int64_t>& ids,
                      const Mat& embeddings) {
  if (static_cast<Eigen::Index>(ids.size()) != embeddings.rows()) {
    throw std::invalid_argument("index: ids/embeddings length mismatch");
  }
  std::set<std::int64_t> unique(ids.begin(), ids.end());
  if (unique.size() != ids.size()) {
    throw std::invalid_argument("index: duplicate item ids");
  }
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    if (std::abs(embeddings.row(i).norm() - 1.0) > 1e-5) {
      throw std::invalid_argument("index: embeddings must be unit norm");
    }
  }
}

// Top-q by score descending, ties broken by ascending item id.
SearchResult select_top(const std::vector<std::int64_t>& ids,
                        const Eigen::VectorXd& scores,
                        const std::vector<std::int64_t>& rows, std::int64_t q) {
  SearchResult result;
  if (q < 0) throw std::invalid_argument("search: Q must be >= 0");
  if (q > static_cast<std::int64_t>(rows.size())) {
    result.truncated = true;
    q = static_cast<std::int64_t>(rows.size());
  }
  std::vector<std::int64_t> order = rows;
  auto better = [&](std::int64_t a, std::int64_t b) {
    const double sa = scores(a), sb = scores(b);
    if (sa != sb) return sa > sb;
    return ids[static_cast<std::size_t>(a)] < ids[static_cast<std::size_t>(b)];
  };
  std::partial_sort(order.begin(), order.begin() + q, order.end(), better);
  result.hits.reserve(static_cast<std::size_t>(q));
  for (std::int64_t i = 0; i < q; ++i) {
    const std::int64_t row = order[static_cast<std::size_t>(i)];
    result.hits.push_back({ids[static_cast<std::size_t>(row)], scores(row)});
  }
  return result;
}

}  // namespace

ObjectiveIndex ObjectiveIndex::build(int objective,
                                     std::vector<std::int64_t> ids,
                                     Mat embeddings, bool build_ivf,
                                     std::int64_t nlist, std::uint64_t seed,
                                     std::string checkpoint_hash) {
  check_invariants(ids, embeddings);
  ObjectiveIndex index;
  index.objective_ = objective;
  index.ids_ = std::move(ids);
  index.embeddings_ = std::move(embeddings);
  index.checkpoint_hash_ = std::move(checkpoint_hash);

  const auto n = static_cast<std::int64_t>(index.ids_.size());
  if (!build_ivf || n == 0) return index;

  std::int64_t lists = nlist > 0
                           ? std::min(nlist, n)
                           : std::max<std::int64_t>(
                                 1, static_cast<std::int64_t>(std::llround(
                                        std::sqrt(static_cast<double>(n)))));

  // Seeded k-means, fixed iteration count; empty lists keep their centroid.
  Rng rng(seed ^ 0xd1b54a32d192ed03ULL);
  std::vector<std::int64_t> init(static_cast<std::size_t>(n));
  std::iota(init.begin(), init.end(), 0);
  rng.shuffle(init);
  Mat centroids(lists, index.embeddings_.cols());
  for (std::int64_t c = 0; c < lists; ++c) {
    centroids.row(c) = index.embeddings_.row(init[static_cast<std::size_t>(c)]);
  }
  std::vector<std::int64_t> assign(static_cast<std::size_t>(n), 0);
  for (int iter = 0; iter < 10; ++iter) {
    for (std::int64_t i = 0; i < n; ++i) {
      std::int64_t best = 0;
      double best_d = (index.embeddings_.row(i) - centroids.row(0)).squaredNorm();
      for (std::int64_t c = 1; c < lists; ++c) {
        const double d =
            (index.embeddings_.row(i) - centroids.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      assign[static_cast<std::size_t>(i)] = best;
    }
    Mat sums = Mat::Zero(lists, index.embeddings_.cols());
    std::vector<std::int64_t> counts(static_cast<std::size_t>(lists), 0);
    for (std::int64_t i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += index.embeddings_.row(i);
      ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    for (std::int64_t c = 0; c < lists; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        centroids.row(c) =
            sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
      }
    }
  }

  index.centroids_ = std::move(centroids);
  index.list_offsets_.assign(static_cast<std::size_t>(lists) + 1, 0);
  for (std::int64_t i = 0; i < n; ++i) {
    ++index.list_offsets_[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)]) + 1];
  }
  for (std::size_t c = 1; c < index.list_offsets_.size(); ++c) {
    index.list_offsets_[c] += index.list_offsets_[c - 1];
  }
  index.list_rows_.assign(static_cast<std::size_t>(n), 0);
  std::vector<std::int64_t> cursor(index.list_offsets_.begin(),
                                   index.list_offsets_.end() - 1);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::size_t>(assign[static_cast<std::size_t>(i)]);
    index.list_rows_[static_cast<std::size_t>(cursor[c]++)] = i;
  }
  return index;
}

SearchResult ObjectiveIndex::search_exact(const Eigen::VectorXd& query,
                                          std::int64_t q) const {
  if (query.size() != embeddings_.cols()) {
    throw std::invalid_argument("search: query dimension mismatch");
  }
  Eigen::VectorXd scores = embeddings_ * query;
  std::vector<std::int64_t> rows(ids_.size());
  std::iota(rows.begin(), rows.end(), 0);
  return select_top(ids_, scores, rows, q);
}

SearchResult ObjectiveIndex::search_approx(const Eigen::VectorXd& query,
                                           std::int64_t q,
                                           std::int64_t nprobe) const {
  if (!has_ivf()) {
    SearchResult result = search_exact(query, q);
    result.fell_back_exact = true;
    return result;
  }
  if (query.size() != embeddings_.cols()) {
    throw std::invalid_argument("search: query dimension mismatch");
  }
  const std::int64_t lists = centroids_.rows();
  nprobe = std::clamp<std::int64_t>(nprobe, 1, lists);

  Eigen::VectorXd centroid_scores = centroids_ * query;
  std::vector<std::int64_t> list_order(static_cast<std::size_t>(lists));
  std::iota(list_order.begin(), list_order.end(), 0);
  std::partial_sort(list_order.begin(), list_order.begin() + nprobe,
                    list_order.end(), [&](std::int64_t a, std::int64_t b) {
                      if (centroid_scores(a) != centroid_scores(b)) {
                        return centroid_scores(a) > centroid_scores(b);
                      }
                      return a < b;
                    });

  std::vector<std::int64_t> rows;
  for (std::int64_t p = 0; p < nprobe; ++p) {
    const auto c = static_cast<std::size_t>(list_order[static_cast<std::size_t>(p)]);
    for (std::int64_t o = list_offsets_[c]; o < list_offsets_[c + 1]; ++o) {
      rows.push_back(list_rows_[static_cast<std::size_t>(o)]);
    }
  }
  Eigen::VectorXd scores = embeddings_ * query;
  return select_top(ids_, scores, rows, q);
}

void ObjectiveIndex::save(const std::string& prefix) const {
  json manifest{{"version", 1},
                {"objective", objective_},
                {"count", ids_.size()},
                {"dim", embeddings_.cols()},
                {"checkpoint_hash", checkpoint_hash_},
                {"nlist", centroids_.rows()}};
  write_text_file(prefix + ".json", manifest.dump(2) + "\n");

  std::ofstream blob(prefix + ".bin", std::ios::binary | std::ios::trunc);
  if (!blob) throw std::runtime_error("cannot write " + prefix + ".bin");
  write_i64s(blob, ids_.data(), ids_.size());
  write_doubles(blob, embeddings_.data(),
                static_cast<std::size_t>(embeddings_.size()));
  if (has_ivf()) {
    write_doubles(blob, centroids_.data(),
                  static_cast<std::size_t>(centroids_.size()));
    write_i64s(blob, list_offsets_.data(), list_offsets_.size());
    write_i64s(blob, list_rows_.data(), list_rows_.size());
  }
  if (!blob) throw std::runtime_error("write failed: " + prefix + ".bin");
}

ObjectiveIndex ObjectiveIndex::load(const std::string& prefix) {
  json manifest = json::parse(read_text_file(prefix + ".json"));
  ObjectiveIndex index;
  index.objective_ = manifest.at("objective").get<int>();
  index.checkpoint_hash_ = manifest.at("checkpoint_hash").get<std::string>();
  const auto count = manifest.at("count").get<std::int64_t>();
  const auto dim = manifest.at("dim").get<Eigen::Index>();
  const auto nlist = manifest.at("nlist").get<std::int64_t>();

  std::ifstream blob(prefix + ".bin", std::ios::binary);
  if (!blob) throw std::runtime_error("cannot open " + prefix + ".bin");
  index.ids_.resize(static_cast<std::size_t>(count));
  if (count > 0) read_i64s(blob, index.ids_.data(), index.ids_.size());
  index.embeddings_.resize(count, dim);
  if (count > 0) {
    read_doubles(blob, index.embeddings_.data(),
                 static_cast<std::size_t>(index.embeddings_.size()));
  }
  if (nlist > 0) {
    index.centroids_.resize(nlist, dim);
    read_doubles(blob, index.centroids_.data(),
                 static_cast<std::size_t>(index.centroids_.size()));
    index.list_offsets_.resize(static_cast<std::size_t>(nlist) + 1);
    read_i64s(blob, index.list_offsets_.data(), index.list_offsets_.size());
    index.list_rows_.resize(static_cast<std::size_t>(count));
    if (count > 0) read_i64s(blob, index.list_rows_.data(), index.list_rows_.size());
  }
  check_invariants(index.ids_, index.embeddings_);
  return index;
}

IndexBuild build_indices(const RunConfig& cfg, const ParamStore& store,
                         const std::vector<ItemFeatures>& catalog,
                         const std::vector<LabeledExample>& labeled,
                         const std::string& checkpoint_hash) {
  const auto k_obj = static_cast<std::size_t>(cfg.model.n_objectives);
  Model model(cfg);

  std::vector<std::set<std::int64_t>> positives(k_obj);
  for (const auto& ex : labeled) {
    for (std::size_t k = 0; k < k_obj && k < ex.labels.size(); ++k) {
      if (ex.labels[k]) positives[k].insert(ex.event.item);
    }
  }

  std::vector<Mat> item_embs = model.infer_item_embeddings(store, catalog);
  Mat quota = model.infer_quota_weights(store, catalog);

  IndexBuild build;
  build.weights = ItemWeightStore(cfg.model.n_objectives);
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    build.weights.add(catalog[i].item,
                      quota.row(static_cast<Eigen::Index>(i)).transpose());
  }

  for (std::size_t k = 0; k < k_obj; ++k) {
    std::vector<std::int64_t> ids;
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < catalog.size(); ++i) {
      if (positives[k].count(catalog[i].item)) {
        ids.push_back(catalog[i].item);
        rows.push_back(static_cast<Eigen::Index>(i));
      }
    }
    Mat embs(static_cast<Eigen::Index>(rows.size()), cfg.model.d);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      embs.row(static_cast<Eigen::Index>(r)) = item_embs[k].row(rows[r]);
    }
    if (ids.empty()) build.empty_objectives.push_back(static_cast<int>(k));
    build.indices.push_back(ObjectiveIndex::build(
        static_cast<int>(k), std::move(ids), std::move(embs),
        /*build_ivf=*/true, cfg.serve.nlist,
        cfg.seed + 0x517cc1b7u + static_cast<std::uint64_t>(k),
        checkpoint_hash));
  }
  return build;
}

void save_index_build(const IndexBuild& build, const std::string& dir,
                      const RunConfig& cfg) {
  fs::create_directories(dir);
  for (const auto& index : build.indices) {
    index.save((fs::path(dir) / ("index_" + std::to_string(index.objective())))
                   .string());
  }
  build.weights.save((fs::path(dir) / "weights.jsonl").string());
  json meta{{"version", 1},
            {"n_objectives", build.indices.size()},
            {"config", to_json(cfg)},
            {"empty_objectives", build.empty_objectives}};
  write_text_file((fs::path(dir) / "index_meta.json").string(),
                  meta.dump(2) + "\n");
}

IndexBuild load_index_build(const std::string& dir, std::int64_t n_objectives) {
  IndexBuild build;
  for (std::int64_t k = 0; k < n_objectives; ++k) {
    build.indices.push_back(ObjectiveIndex::load(
        (fs::path(dir) / ("index_" + std::to_string(k))).string()));
    if (build.indices.back().empty()) {
      build.empty_objectives.push_back(static_cast<int>(k));
    }
  }
  build.weights =
      ItemWeightStore::load((fs::path(dir) / "weights.jsonl").string());
  return build;
}

std::string checkpoint_hash(const std::string& prefix) {
  const std::uint64_t a = fnv1a_file(prefix + ".json");
  const std::uint64_t b = fnv1a_file(prefix + ".bin");
  return hex_u64(a * 0x100000001b3ULL ^ b);
}

}  // namespace mtret
