#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "mtret/batches.hpp"
#include "mtret/grad_check.hpp"
#include "mtret/losses.hpp"
#include "mtret/params.hpp"
#include "mtret/world.hpp"

namespace mtret {

struct TrainOutcome {
  std::int64_t final_step = 0;
  std::int64_t batches_per_epoch = 0;
};

// Single-threaded training loop over the dataset's in-time slice. `store`
// must already hold the model parameters (freshly registered or restored
// from a checkpoint whose step becomes start_step). Writes one log record
// per step to log_path when given. Aborts with an exception on a non-finite
// loss.
TrainOutcome train_model(
    const RunConfig& cfg, const Dataset& ds, ParamStore& store,
    std::int64_t start_step, const std::string& log_path = "",
    const std::function<void(std::int64_t, const LossBreakdown&)>& on_step = {});

// Finite-difference check of the full training objective (weighted InfoNCE
// plus the quota regression) over every registered parameter, on one batch
// drawn from the dataset.
GradCheckReport grad_check_model(const RunConfig& cfg, const Dataset& ds,
                                 ParamStore& store, std::int64_t batch_size,
                                 double h, double tol);

}  // namespace mtret
