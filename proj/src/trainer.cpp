#include "mtret/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include <json.hpp>

#include "mtret/model.hpp"

namespace mtret {

using nlohmann::json;

TrainOutcome train_model(
    const RunConfig& cfg, const Dataset& ds, ParamStore& store,
    std::int64_t start_step, const std::string& log_path,
    const std::function<void(std::int64_t, const LossBreakdown&)>& on_step) {
  Model model(cfg);
  DatasetSplit split = split_by_time(ds.examples, cfg.train.holdout_fraction);
  std::vector<std::size_t> pool = trainable_indices(split.train);
  if (pool.size() < static_cast<std::size_t>(cfg.train.batch_size)) {
    throw std::runtime_error("training pool smaller than one batch");
  }

  const std::int64_t bpe = static_cast<std::int64_t>(pool.size()) /
                           cfg.train.batch_size;
  std::int64_t target = cfg.train.epochs * bpe;
  if (cfg.train.max_steps > 0) target = std::min(target, cfg.train.max_steps);

  std::ofstream log;
  if (!log_path.empty()) {
    log.open(log_path, start_step > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("cannot open training log " + log_path);
  }

  TrainOutcome outcome;
  outcome.batches_per_epoch = bpe;
  std::int64_t step = start_step;
  std::vector<std::vector<std::size_t>> plan;
  std::int64_t plan_epoch = -1;

  while (step < target) {
    const std::int64_t epoch = step / bpe;
    if (epoch != plan_epoch) {
      plan = plan_batches(pool, cfg.train.batch_size,
                          cfg.seed + static_cast<std::uint64_t>(epoch) * 0x51ed);
      plan_epoch = epoch;
    }
    const auto& indices = plan[static_cast<std::size_t>(step % bpe)];
    TrainingBatch batch =
        materialize_batch(ds, split.train, indices, cfg.model.n_max);

    Tape tape;
    LeafSet leaves(tape, store);
    BatchLoss loss = compute_batch_loss(model, leaves, batch);
    if (!std::isfinite(loss.breakdown.total) ||
        !std::isfinite(loss.breakdown.quota)) {
      throw std::runtime_error("training diverged: non-finite loss at step " +
                               std::to_string(step + 1));
    }
    tape.backward(loss.objective);
    store.adam_step(leaves.gradients(), cfg.train);
    ++step;

    if (log.is_open()) {
      json rec{{"step", step},
               {"loss", loss.breakdown.total},
               {"loss_k", loss.breakdown.per_objective},
               {"alpha", loss.breakdown.alpha},
               {"quota_loss", loss.breakdown.quota}};
      log << rec.dump() << "\n";
    }
    if (on_step) on_step(step, loss.breakdown);
    if (step % cfg.train.log_every == 0 || step == target) {
      std::cerr << "step " << step << "/" << target << " loss "
                << loss.breakdown.total << " quota " << loss.breakdown.quota
                << "\n";
    }
  }
  outcome.final_step = step;
  return outcome;
}

GradCheckReport grad_check_model(const RunConfig& cfg, const Dataset& ds,
                                 ParamStore& store, std::int64_t batch_size,
                                 double h, double tol) {
  Model model(cfg);
  DatasetSplit split = split_by_time(ds.examples, cfg.train.holdout_fraction);
  std::vector<std::size_t> pool = trainable_indices(split.train);
  if (pool.size() < static_cast<std::size_t>(batch_size)) {
    throw std::runtime_error("dataset too small for the grad-check batch");
  }
  auto plan = plan_batches(pool, batch_size, cfg.seed);
  TrainingBatch batch =
      materialize_batch(ds, split.train, plan.front(), cfg.model.n_max);

  ParamList params = store.as_param_list();
  std::vector<std::string> names;
  names.reserve(params.size());
  for (const auto& [name, value] : params) {
    (void)value;
    names.push_back(name);
  }

  // The quota regression treats the per-objective scores as data (stop
  // gradient), so the numeric oracle must hold them at their unperturbed
  // values; otherwise it would differentiate a different function than the
  // one the reverse pass is defined over.
  Mat frozen_scores;
  {
    const auto n = static_cast<Eigen::Index>(batch.rows.size());
    const auto k = static_cast<Eigen::Index>(cfg.model.n_objectives);
    frozen_scores.resize(n, k);
    std::vector<ItemFeatures> items;
    for (const auto& row : batch.rows) items.push_back(row.item);
    Tape tape;
    LeafSet bound(tape, store, /*requires_grad=*/false);
    std::vector<Var> item_embs = model.item_tower(bound, items);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& row = batch.rows[static_cast<std::size_t>(i)];
      UserTowerOutput tower = model.user_tower(bound, row.profile, row.history);
      for (Eigen::Index kk = 0; kk < k; ++kk) {
        frozen_scores(i, kk) =
            tower.embeddings[static_cast<std::size_t>(kk)].value().row(0).dot(
                item_embs[static_cast<std::size_t>(kk)].value().row(i));
      }
    }
  }

  auto builder = [&model, &batch, &names, &frozen_scores](
                     Tape& tape, const std::vector<Var>& leaves) {
    LeafSet bound(tape, names, leaves);
    return compute_batch_loss(model, bound, batch, &frozen_scores).objective;
  };
  return grad_check(builder, std::move(params), h, tol);
}

}  // namespace mtret
