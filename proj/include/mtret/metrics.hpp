#pragma once

#include <cstdint>
#include <unordered_set>
#include <vector>

namespace mtret {

// |top-K ∩ relevant| / min(|relevant|, K); 0 (flagged) when relevant is
// empty. `ranked` must already be deduplicated.
double recall_at_k(const std::vector<std::int64_t>& ranked,
                   const std::unordered_set<std::int64_t>& relevant,
                   std::int64_t k, bool* empty_relevant = nullptr);

// Binary-relevance NDCG: DCG over the top K normalized by the ideal DCG over
// min(|relevant|, K) positions; 0 (flagged) when relevant is empty.
double ndcg_at_k(const std::vector<std::int64_t>& ranked,
                 const std::unordered_set<std::int64_t>& relevant,
                 std::int64_t k, bool* empty_relevant = nullptr);

// Attention-block operation counts for a decoder over n behaviors and K
// objectives: per-objective towers cost K * ((n+1)d^2 + (n+1)^2 d); a shared
// stack runs once over the n+K sequence, (n+K)d^2 + (n+K)^2 d. Counts are
// exact integers, scaled by the layer multiplier.
struct CostModelInput {
  std::int64_t n = 1;
  std::int64_t d = 1;
  std::int64_t k = 1;
  std::int64_t layers = 1;
};

enum class QkvMode { kIndependent, kShared };

std::uint64_t qkv_cost(const CostModelInput& input, QkvMode mode);

}  // namespace mtret
