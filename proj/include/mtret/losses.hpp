#pragma once

#include <cstdint>
#include <vector>

#include "mtret/model.hpp"
#include "mtret/tape.hpp"

namespace mtret {

// One positive user-item pair with its per-objective labels and the fused
// fine-rank score used as quota supervision.
struct BatchRow {
  UserProfile profile;
  std::vector<BehaviorEvent> history;  // events strictly before this exposure
  ItemFeatures item;
  std::vector<int> labels;  // K entries in {0, 1}
  double pscore = 0.0;
};

struct TrainingBatch {
  std::vector<BatchRow> rows;
};

struct LossBreakdown {
  double total = 0.0;  // sum_k alpha_k * L_k
  double quota = 0.0;
  std::vector<double> per_objective;
  std::vector<double> alpha;
  std::vector<bool> objective_active;  // false when a batch had no positives
  bool clamped_zero_count = false;     // alpha saw a zero count substituted by 1
};

// Temperature-scaled contrastive loss for one objective; every other in-batch
// item serves as a shared negative. Batches with no positives contribute an
// exact zero (has_positives reports it).
Var infonce_loss(Var user_embs, Var item_embs, const std::vector<int>& labels,
                 double tau, bool* has_positives = nullptr);

// Skew-adaptive objective weights: alpha_k proportional to
// log(1 + gamma / count_k), normalized onto the simplex.
std::vector<double> alpha_weights(const std::vector<std::int64_t>& positive_counts,
                                  double gamma);

// Mean squared gap between the fused fine-rank score and the weight-mixed
// per-objective scores. `scores` is detached: gradients reach only `weights`.
Var quota_loss(Tape& tape, Var weights, const Mat& scores,
               const std::vector<double>& pscores, bool* has_rows = nullptr);

struct BatchLoss {
  Var objective;  // total + lambda_quota * quota, the optimizer target
  Var total;
  Var quota;
  LossBreakdown breakdown;
};

// Weighted multi-objective loss over precomputed tower outputs. The quota
// regression sees detached per-objective scores; `frozen_scores`, when given,
// supplies them externally (the finite-difference checker freezes them so the
// numeric derivative matches the stop-gradient analytic one).
BatchLoss total_loss(Tape& tape, const std::vector<Var>& user_embs_per_k,
                     const std::vector<Var>& item_embs_per_k,
                     const std::vector<std::vector<int>>& labels_per_row,
                     Var quota_weights, const std::vector<double>& pscores,
                     const RunConfig& cfg, const Mat* frozen_scores = nullptr);

// Runs both towers and the quota head over a batch and assembles the loss.
BatchLoss compute_batch_loss(const Model& model, LeafSet& params,
                             const TrainingBatch& batch,
                             const Mat* frozen_scores = nullptr);

}  // namespace mtret
