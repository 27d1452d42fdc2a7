#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtret/params.hpp"
#include "mtret/quota.hpp"
#include "mtret/world.hpp"

namespace mtret {

struct SearchHit {
  std::int64_t item = 0;
  double score = 0.0;
};

struct SearchResult {
  std::vector<SearchHit> hits;      // score descending, ties by ascending id
  bool truncated = false;           // Q exceeded the index size
  bool fell_back_exact = false;     // approx requested without a structure
};

// Immutable per-objective collection of unit-norm item embeddings with an
// optional inverted-file structure for approximate search.
class ObjectiveIndex {
 public:
  // Builds from parallel ids/embeddings; when build_ivf is set, items are
  // clustered with seeded k-means into round(sqrt(n)) lists (or nlist when
  // positive).
  static ObjectiveIndex build(int objective, std::vector<std::int64_t> ids,
                              Mat embeddings, bool build_ivf,
                              std::int64_t nlist, std::uint64_t seed,
                              std::string checkpoint_hash);

  int objective() const { return objective_; }
  std::int64_t size() const { return static_cast<std::int64_t>(ids_.size()); }
  Eigen::Index dim() const { return embeddings_.cols(); }
  bool empty() const { return ids_.empty(); }
  bool has_ivf() const { return centroids_.size() > 0; }
  const std::string& checkpoint_hash() const { return checkpoint_hash_; }
  std::int64_t nlist() const { return centroids_.rows(); }
  const std::vector<std::int64_t>& ids() const { return ids_; }
  const Mat& embeddings() const { return embeddings_; }

  // Exhaustive inner-product top-Q scan.
  SearchResult search_exact(const Eigen::VectorXd& query, std::int64_t q) const;

  // Probes the nprobe closest lists; falls back to exact when no structure
  // was built.
  SearchResult search_approx(const Eigen::VectorXd& query, std::int64_t q,
                             std::int64_t nprobe) const;

  void save(const std::string& prefix) const;
  static ObjectiveIndex load(const std::string& prefix);

 private:
  int objective_ = 0;
  std::vector<std::int64_t> ids_;
  Mat embeddings_;  // n x d
  std::string checkpoint_hash_;

  Mat centroids_;                          // nlist x d, empty = no structure
  std::vector<std::int64_t> list_offsets_; // nlist + 1
  std::vector<std::int64_t> list_rows_;    // row indices grouped by list
};

struct IndexBuild {
  std::vector<ObjectiveIndex> indices;  // one per objective
  ItemWeightStore weights;              // full catalog
  std::vector<int> empty_objectives;    // objectives with zero positives
};

// Index k holds exactly the catalog items positive for objective k anywhere
// in `labeled` (the training window); the weight store covers the whole
// catalog.
IndexBuild build_indices(const RunConfig& cfg, const ParamStore& store,
                         const std::vector<ItemFeatures>& catalog,
                         const std::vector<LabeledExample>& labeled,
                         const std::string& checkpoint_hash);

void save_index_build(const IndexBuild& build, const std::string& dir,
                      const RunConfig& cfg);
IndexBuild load_index_build(const std::string& dir, std::int64_t n_objectives);

// Combined hash over a checkpoint's manifest and blob.
std::string checkpoint_hash(const std::string& prefix);

}  // namespace mtret
