#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace mtret {

// Materialized per-item objective weights (quota head output at index-build
// time; the head depends only on item features, so weights are
// request-invariant).
class ItemWeightStore {
 public:
  ItemWeightStore() = default;
  explicit ItemWeightStore(std::int64_t n_objectives) : k_(n_objectives) {}

  std::int64_t n_objectives() const { return k_; }
  std::int64_t size() const { return static_cast<std::int64_t>(weights_.size()); }

  // Rejects vectors that are not a probability simplex (sum within 1e-9).
  void add(std::int64_t item, Eigen::VectorXd w);
  bool contains(std::int64_t item) const { return weights_.count(item) != 0; }
  const Eigen::VectorXd& get(std::int64_t item) const;

  void save(const std::string& path) const;
  static ItemWeightStore load(const std::string& path);

  const std::unordered_map<std::int64_t, Eigen::VectorXd>& entries() const {
    return weights_;
  }

 private:
  std::int64_t k_ = 0;
  std::unordered_map<std::int64_t, Eigen::VectorXd> weights_;
};

// softmax of the component-wise sum of the history items' weight vectors;
// items missing from the store contribute nothing and an empty history gives
// the uniform vector.
Eigen::VectorXd aggregate_user_weights(std::span<const std::int64_t> history,
                                       const ItemWeightStore& store);

// Proportional floor allocation: Q_k = floor(w_k * q_total), leftover handed
// out by largest fractional remainder, ties to the lower objective, so the
// parts always sum to q_total exactly.
std::vector<std::int64_t> allocate_quota(const Eigen::VectorXd& weights,
                                         std::int64_t q_total);

}  // namespace mtret
