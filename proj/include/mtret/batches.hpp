#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mtret/losses.hpp"
#include "mtret/world.hpp"

namespace mtret {

struct DatasetSplit {
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> test;
  std::int64_t split_ts = 0;  // first timestamp of the held-out slice
};

// Trailing time slice held out: examples with ts >= split_ts form the test
// set, where split_ts cuts the observed time range at 1 - holdout_fraction.
DatasetSplit split_by_time(const std::vector<LabeledExample>& examples,
                           double holdout_fraction);

// Indices of examples positive for at least one objective; all-zero rows
// cannot anchor a contrastive pair and are excluded from training.
std::vector<std::size_t> trainable_indices(
    const std::vector<LabeledExample>& examples);

// Deterministic shuffle + chunk into groups of N; a final partial group is
// dropped.
std::vector<std::vector<std::size_t>> plan_batches(
    std::vector<std::size_t> pool, std::int64_t batch_size, std::uint64_t seed);

// Resolves example indices into a TrainingBatch: profile, the last n_max
// events strictly before the exposure, item features, labels, pscore.
TrainingBatch materialize_batch(const Dataset& ds,
                                const std::vector<LabeledExample>& examples,
                                std::span<const std::size_t> indices,
                                std::int64_t n_max);

// History visible at time `ts` for a user: events strictly earlier, last
// `n_max` of them.
std::vector<BehaviorEvent> history_before(const std::vector<BehaviorEvent>& stream,
                                          std::int64_t ts, std::int64_t n_max);

}  // namespace mtret
