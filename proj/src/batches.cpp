#include "mtret/batches.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

#include "mtret/rng.hpp"

namespace mtret {

DatasetSplit split_by_time(const std::vector<LabeledExample>& examples,
                           double holdout_fraction) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
    throw std::invalid_argument("holdout_fraction must lie in (0, 1)");
  }
  DatasetSplit split;
  if (examples.empty()) return split;
  std::int64_t mn = std::numeric_limits<std::int64_t>::max();
  std::int64_t mx = std::numeric_limits<std::int64_t>::min();
  for (const auto& ex : examples) {
    mn = std::min(mn, ex.event.ts);
    mx = std::max(mx, ex.event.ts);
  }
  split.split_ts =
      mn + static_cast<std::int64_t>(std::llround(
               (1.0 - holdout_fraction) * static_cast<double>(mx - mn)));
  for (const auto& ex : examples) {
    (ex.event.ts < split.split_ts ? split.train : split.test).push_back(ex);
  }
  return split;
}

std::vector<std::size_t> trainable_indices(
    const std::vector<LabeledExample>& examples) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& l = examples[i].labels;
    if (l[0] || l[1] || l[2]) idx.push_back(i);
  }
  return idx;
}

std::vector<std::vector<std::size_t>> plan_batches(std::vector<std::size_t> pool,
                                                   std::int64_t batch_size,
                                                   std::uint64_t seed) {
  if (batch_size < 2) throw std::invalid_argument("batch_size must be >= 2");
  Rng rng(seed ^ 0x8ebc6af09c88c6e3ULL);
  rng.shuffle(pool);
  std::vector<std::vector<std::size_t>> batches;
  const std::size_t n = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start + n <= pool.size(); start += n) {
    batches.emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(start),
                         pool.begin() + static_cast<std::ptrdiff_t>(start + n));
  }
  return batches;
}

std::vector<BehaviorEvent> history_before(
    const std::vector<BehaviorEvent>& stream, std::int64_t ts,
    std::int64_t n_max) {
  auto end = std::lower_bound(
      stream.begin(), stream.end(), ts,
      [](const BehaviorEvent& e, std::int64_t t) { return e.ts < t; });
  auto begin = end;
  for (std::int64_t taken = 0; taken < n_max && begin != stream.begin();
       ++taken) {
    --begin;
  }
  return std::vector<BehaviorEvent>(begin, end);
}

TrainingBatch materialize_batch(const Dataset& ds,
                                const std::vector<LabeledExample>& examples,
                                std::span<const std::size_t> indices,
                                std::int64_t n_max) {
  TrainingBatch batch;
  batch.rows.reserve(indices.size());
  for (std::size_t idx : indices) {
    const LabeledExample& ex = examples.at(idx);
    BatchRow row;
    row.profile = ds.users.at(static_cast<std::size_t>(ex.user));
    row.history = history_before(ds.events.at(static_cast<std::size_t>(ex.user)),
                                 ex.event.ts, n_max);
    row.item = ds.items.at(static_cast<std::size_t>(ex.event.item));
    row.labels.assign(ex.labels.begin(), ex.labels.end());
    row.pscore = ex.pscore;
    batch.rows.push_back(std::move(row));
  }
  return batch;
}

}  // namespace mtret
