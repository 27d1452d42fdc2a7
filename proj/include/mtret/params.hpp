#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "mtret/config.hpp"
#include "mtret/grad_check.hpp"
#include "mtret/rng.hpp"
#include "mtret/tape.hpp"

namespace mtret {

// All learnable tensors, addressed by a stable dotted name. Insertion order
// is the canonical order for initialization, checkpointing and the optimizer,
// so identical registration sequences give identical bytes.
class ParamStore {
 public:
  Mat& add(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  bool contains(const std::string& name) const;
  Mat& get(const std::string& name);
  const Mat& get(const std::string& name) const;
  const std::vector<std::string>& names() const { return names_; }

  std::int64_t scalar_count() const;

  ParamList as_param_list() const;
  void load_param_list(const ParamList& params);

  // One Adam update over every parameter present in `grads` (missing entries
  // are treated as zero gradient and still advance the moment estimates).
  void adam_step(const std::map<std::string, Mat>& grads, const TrainConfig& t);
  std::int64_t adam_t() const { return adam_t_; }

  void save_checkpoint(const std::string& prefix, const RunConfig& cfg,
                       std::int64_t step) const;

  struct Loaded {
    RunConfig config;
    std::int64_t step = 0;
  };
  // Restores tensors and optimizer state from `prefix`.json / `prefix`.bin.
  Loaded load_checkpoint(const std::string& prefix);

 private:
  struct Entry {
    Mat value;
    Mat m;  // Adam first moment
    Mat v;  // Adam second moment
  };

  std::vector<std::string> names_;
  std::unordered_map<std::string, Entry> entries_;
  std::int64_t adam_t_ = 0;
};

// Creates every tensor of the twin towers and the quota head for the given
// configuration, with seeded initialization. The quota head's output layer
// starts at zero so its softmax is exactly uniform.
void register_model_params(ParamStore& store, const RunConfig& cfg,
                           std::uint64_t seed);

// Per-tape cache of leaves over the store, so each parameter becomes exactly
// one node per step regardless of how many ops consume it.
class LeafSet {
 public:
  LeafSet(Tape& tape, const ParamStore& store, bool requires_grad = true)
      : tape_(&tape), store_(&store), requires_grad_(requires_grad) {}

  // Pre-bound variant: leaves already live on the tape (used by the
  // finite-difference checker, which owns the leaf construction).
  LeafSet(Tape& tape, const std::vector<std::string>& names,
          const std::vector<Var>& leaves);

  Var operator[](const std::string& name);

  // Gradients of every touched leaf after tape.backward().
  std::map<std::string, Mat> gradients();

 private:
  Tape* tape_;
  const ParamStore* store_;
  bool requires_grad_;
  std::unordered_map<std::string, Var> cache_;
};

}  // namespace mtret
