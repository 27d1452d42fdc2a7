#include "mtret/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace mtret {

Var infonce_loss(Var user_embs, Var item_embs, const std::vector<int>& labels,
                 double tau, bool* has_positives) {
  Tape& tape = *user_embs.tape();
  const Eigen::Index n = user_embs.rows();
  if (n < 2) throw std::invalid_argument("infonce_loss: batch must have N >= 2");
  if (item_embs.rows() != n || item_embs.cols() != user_embs.cols()) {
    throw std::invalid_argument("infonce_loss: tower output shapes differ");
  }
  if (static_cast<Eigen::Index>(labels.size()) != n) {
    throw std::invalid_argument("infonce_loss: labels must have N entries");
  }
  if (!(tau > 0.0)) {
    throw std::invalid_argument("infonce_loss: temperature must be > 0");
  }

  double n_pos = 0.0;
  Mat weight(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    weight(i, 0) = labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    n_pos += weight(i, 0);
  }
  if (has_positives) *has_positives = n_pos > 0.0;
  if (n_pos == 0.0) return tape.scalar_constant(0.0);

  Var logits = mtret::scale(
      mtret::matmul(user_embs, mtret::transpose(item_embs)), 1.0 / tau);
  Var lse = mtret::logsumexp_rows(logits);       // N x 1
  Var diag = mtret::diag_as_col(logits);         // N x 1
  Var nll = mtret::sub(lse, diag);               // -log softmax at the pair
  Var weighted = mtret::matmul(mtret::transpose(nll), tape.constant(weight));
  return mtret::scale(weighted, 1.0 / n_pos);
}

std::vector<double> alpha_weights(
    const std::vector<std::int64_t>& positive_counts, double gamma) {
  if (positive_counts.empty()) {
    throw std::invalid_argument("alpha_weights: need at least one objective");
  }
  if (!(gamma > 0.0)) {
    throw std::invalid_argument("alpha_weights: gamma must be > 0");
  }
  std::vector<double> terms;
  terms.reserve(positive_counts.size());
  for (std::int64_t c : positive_counts) {
    if (c < 1) {
      throw std::invalid_argument(
          "alpha_weights: positive counts must be >= 1");
    }
    terms.push_back(std::log1p(gamma / static_cast<double>(c)));
  }
  // alpha_k = term_k / sum(terms), written as 1 / sum(term_j / term_k) so
  // equal counts yield exactly 1/K.
  std::vector<double> alpha(terms.size());
  for (std::size_t k = 0; k < terms.size(); ++k) {
    double denom = 0.0;
    for (double t : terms) denom += t / terms[k];
    alpha[k] = 1.0 / denom;
  }
  return alpha;
}

Var quota_loss(Tape& tape, Var weights, const Mat& scores,
               const std::vector<double>& pscores, bool* has_rows) {
  const Eigen::Index n = weights.rows();
  if (has_rows) *has_rows = n > 0;
  if (n == 0) return tape.scalar_constant(0.0);
  if (scores.rows() != n || scores.cols() != weights.cols()) {
    throw std::invalid_argument("quota_loss: score shape mismatch");
  }
  if (static_cast<Eigen::Index>(pscores.size()) != n) {
    throw std::invalid_argument("quota_loss: pscore count mismatch");
  }
  Mat target(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    target(i, 0) = pscores[static_cast<std::size_t>(i)];
  }
  Var pred = mtret::rowwise_dot(weights, tape.constant(scores));
  Var resid = mtret::sub(tape.constant(target), pred);
  return mtret::scale(mtret::sum_all(mtret::hadamard(resid, resid)),
                      1.0 / static_cast<double>(n));
}

BatchLoss total_loss(Tape& tape, const std::vector<Var>& user_embs_per_k,
                     const std::vector<Var>& item_embs_per_k,
                     const std::vector<std::vector<int>>& labels_per_row,
                     Var quota_weights, const std::vector<double>& pscores,
                     const RunConfig& cfg, const Mat* frozen_scores) {
  const std::size_t k_obj = static_cast<std::size_t>(cfg.model.n_objectives);
  if (user_embs_per_k.size() != k_obj || item_embs_per_k.size() != k_obj) {
    throw std::invalid_argument("total_loss: need K tower outputs per side");
  }
  const std::size_t n = labels_per_row.size();

  std::vector<std::int64_t> counts(k_obj, 0);
  for (const auto& row : labels_per_row) {
    if (row.size() != k_obj) {
      throw std::invalid_argument("total_loss: label width must be K");
    }
    for (std::size_t k = 0; k < k_obj; ++k) counts[k] += row[k] ? 1 : 0;
  }

  BatchLoss out;
  out.breakdown.per_objective.assign(k_obj, 0.0);
  out.breakdown.objective_active.assign(k_obj, true);

  std::vector<std::int64_t> alpha_counts = counts;
  for (auto& c : alpha_counts) {
    if (c == 0) {
      c = 1;
      out.breakdown.clamped_zero_count = true;
    }
  }
  out.breakdown.alpha = alpha_weights(alpha_counts, cfg.model.gamma);

  Var total = tape.scalar_constant(0.0);
  for (std::size_t k = 0; k < k_obj; ++k) {
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = labels_per_row[i][k];
    bool active = false;
    Var lk = infonce_loss(user_embs_per_k[k], item_embs_per_k[k], labels,
                          cfg.model.tau, &active);
    out.breakdown.objective_active[k] = active;
    out.breakdown.per_objective[k] = lk.value()(0, 0);
    total = mtret::add(total, mtret::scale(lk, out.breakdown.alpha[k]));
  }
  out.total = total;
  out.breakdown.total = total.value()(0, 0);

  // Detached per-objective scores for the quota regression.
  Mat scores(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k_obj));
  if (frozen_scores != nullptr) {
    scores = *frozen_scores;
  } else {
    for (std::size_t k = 0; k < k_obj; ++k) {
      const Mat& u = user_embs_per_k[k].value();
      const Mat& v = item_embs_per_k[k].value();
      for (std::size_t i = 0; i < n; ++i) {
        const auto idx = static_cast<Eigen::Index>(i);
        scores(idx, static_cast<Eigen::Index>(k)) = u.row(idx).dot(v.row(idx));
      }
    }
  }
  out.quota = quota_loss(tape, quota_weights, scores, pscores);
  out.breakdown.quota = out.quota.value()(0, 0);

  out.objective = mtret::add(
      total, mtret::scale(out.quota, cfg.train.lambda_quota));
  return out;
}

BatchLoss compute_batch_loss(const Model& model, LeafSet& params,
                             const TrainingBatch& batch,
                             const Mat* frozen_scores) {
  const RunConfig& cfg = model.config();
  const std::size_t n = batch.rows.size();
  if (n < 2) throw std::invalid_argument("batch must hold at least 2 pairs");
  const std::size_t k_obj = static_cast<std::size_t>(cfg.model.n_objectives);

  std::vector<std::vector<Var>> user_rows(k_obj);
  std::vector<ItemFeatures> items;
  std::vector<std::vector<int>> labels;
  std::vector<double> pscores;
  items.reserve(n);
  labels.reserve(n);
  pscores.reserve(n);

  for (const auto& row : batch.rows) {
    if (row.labels.size() != k_obj) {
      throw std::invalid_argument("batch row label width must be K");
    }
    bool any = false;
    for (int l : row.labels) any = any || l;
    if (!any) {
      throw std::invalid_argument(
          "batch row must be positive for at least one objective");
    }
    UserTowerOutput tower = model.user_tower(params, row.profile, row.history);
    for (std::size_t k = 0; k < k_obj; ++k) {
      user_rows[k].push_back(tower.embeddings[k]);
    }
    items.push_back(row.item);
    labels.push_back(row.labels);
    pscores.push_back(row.pscore);
  }

  std::vector<Var> user_embs;
  user_embs.reserve(k_obj);
  for (std::size_t k = 0; k < k_obj; ++k) {
    user_embs.push_back(mtret::concat_rows(user_rows[k]));
  }
  std::vector<Var> item_embs = model.item_tower(params, items);
  Var quota_w = model.quota_forward(params, items);

  Tape& tape = *quota_w.tape();
  return total_loss(tape, user_embs, item_embs, labels, quota_w, pscores, cfg,
                    frozen_scores);
}

}  // namespace mtret
