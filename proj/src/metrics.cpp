#include "mtret/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mtret {

double recall_at_k(const std::vector<std::int64_t>& ranked,
                   const std::unordered_set<std::int64_t>& relevant,
                   std::int64_t k, bool* empty_relevant) {
  if (k < 0) throw std::invalid_argument("recall_at_k: K must be >= 0");
  if (empty_relevant) *empty_relevant = relevant.empty();
  if (relevant.empty()) return 0.0;
  const auto top = std::min<std::int64_t>(k, static_cast<std::int64_t>(ranked.size()));
  std::int64_t found = 0;
  for (std::int64_t i = 0; i < top; ++i) {
    if (relevant.count(ranked[static_cast<std::size_t>(i)])) ++found;
  }
  const auto denom =
      std::min<std::int64_t>(static_cast<std::int64_t>(relevant.size()), k);
  return denom == 0 ? 0.0
                    : static_cast<double>(found) / static_cast<double>(denom);
}

double ndcg_at_k(const std::vector<std::int64_t>& ranked,
                 const std::unordered_set<std::int64_t>& relevant,
                 std::int64_t k, bool* empty_relevant) {
  if (k < 0) throw std::invalid_argument("ndcg_at_k: K must be >= 0");
  if (empty_relevant) *empty_relevant = relevant.empty();
  if (relevant.empty()) return 0.0;
  const auto top = std::min<std::int64_t>(k, static_cast<std::int64_t>(ranked.size()));
  double dcg = 0.0;
  for (std::int64_t p = 0; p < top; ++p) {
    if (relevant.count(ranked[static_cast<std::size_t>(p)])) {
      dcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
    }
  }
  const auto ideal_positions =
      std::min<std::int64_t>(static_cast<std::int64_t>(relevant.size()), k);
  double idcg = 0.0;
  for (std::int64_t p = 0; p < ideal_positions; ++p) {
    idcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
  }
  return idcg == 0.0 ? 0.0 : dcg / idcg;
}

std::uint64_t qkv_cost(const CostModelInput& input, QkvMode mode) {
  if (input.n < 1 || input.d < 1 || input.k < 1 || input.layers < 1) {
    throw std::invalid_argument("qkv_cost: all extents must be >= 1");
  }
  const auto n = static_cast<std::uint64_t>(input.n);
  const auto d = static_cast<std::uint64_t>(input.d);
  const auto k = static_cast<std::uint64_t>(input.k);
  const auto layers = static_cast<std::uint64_t>(input.layers);
  if (mode == QkvMode::kIndependent) {
    const std::uint64_t len = n + 1;
    return layers * k * (len * d * d + len * len * d);
  }
  const std::uint64_t len = n + k;
  return layers * (len * d * d + len * len * d);
}

}  // namespace mtret
