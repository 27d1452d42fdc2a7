#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mtret/config.hpp"
#include "mtret/params.hpp"
#include "mtret/tape.hpp"

namespace mtret {

// One user-item exposure, as logged.
struct BehaviorEvent {
  std::int64_t item = 0;
  double watch_ratio = 0.0;
  int like = 0;
  int comment = 0;
  int share = 0;
  std::int64_t author = 0;
  std::int64_t tag = 0;
  std::int64_t ts = 0;
};

struct UserProfile {
  std::int64_t age = 0;
  std::int64_t gender = 0;
  std::int64_t region = 0;
  std::int64_t user_id = 0;
  std::int64_t device_id = 0;
};

struct ItemFeatures {
  std::int64_t item = 0;
  std::int64_t author = 0;
  std::int64_t tag = 0;
  double popularity = 0.0;
};

struct UserTowerOutput {
  std::vector<Var> embeddings;  // K rows of width d, one per objective
  Var hidden;                   // final decoder states, when requested
  bool has_hidden = false;
};

// The three pooled context sequences feeding the personalized query.
struct QuerySequences {
  std::vector<BehaviorEvent> real_show;
  std::vector<BehaviorEvent> click;
  std::vector<BehaviorEvent> long_view;
};

// Twin towers plus the quota head. Stateless over a config; parameters come
// in through a per-tape LeafSet so forward passes over distinct inputs can
// share one read-only store.
class Model {
 public:
  explicit Model(const RunConfig& cfg) : cfg_(cfg) {}

  const RunConfig& config() const { return cfg_; }

  QuerySequences derive_query_sequences(
      std::span<const BehaviorEvent> history) const;

  // K objective query tokens (K x d). User/device ids participate only when
  // include_user_ids_in_query is set.
  Var build_query_tokens(LeafSet& params, const UserProfile& profile,
                         const QuerySequences& seqs) const;

  // Behavior events -> d-wide tokens (n x d, n >= 1).
  Var encode_behaviors(LeafSet& params,
                       std::span<const BehaviorEvent> events) const;
  Var encode_behavior(LeafSet& params, const BehaviorEvent& event) const;

  // Gate conditioning vector: user-id and device-id embedding halves
  // concatenated; zeros when gate_use_ids is off.
  Var gate_user_embedding(LeafSet& params, const UserProfile& profile) const;

  // Runs the decoder stack over n behavior tokens followed by K objective
  // tokens under a causal mask. tokens must be (n + K) x d.
  Var decoder_forward(LeafSet& params, Var tokens, Var gate_eu,
                      Eigen::Index n_behaviors) const;

  // Gated expert feed-forward used at pformer_layer. layer is 0-based.
  Var pformer_ffn(LeafSet& params, Var x, Var gate_eu,
                  Eigen::Index layer) const;

  UserTowerOutput user_tower(LeafSet& params, const UserProfile& profile,
                             std::span<const BehaviorEvent> history,
                             bool with_hidden = false) const;

  // K matrices of N x d objective-specific item embeddings.
  std::vector<Var> item_tower(LeafSet& params,
                              std::span<const ItemFeatures> items) const;

  // Shared pre-objective feature block consumed by both the item MLPs and
  // the quota head: [id emb ; author emb ; tag emb ; popularity].
  Var item_shared_features(LeafSet& params,
                           std::span<const ItemFeatures> items) const;

  // Per-item weight simplex over the K objectives (N x K).
  Var quota_forward(LeafSet& params, std::span<const ItemFeatures> items) const;

  // Inference wrappers returning plain matrices (no gradients recorded).
  Mat infer_user_embeddings(const ParamStore& store, const UserProfile& profile,
                            std::span<const BehaviorEvent> history) const;
  std::vector<Mat> infer_item_embeddings(
      const ParamStore& store, std::span<const ItemFeatures> items) const;
  Mat infer_quota_weights(const ParamStore& store,
                          std::span<const ItemFeatures> items) const;

  // Vocabulary mapping with a reserved out-of-vocabulary row per table.
  Eigen::Index item_row(std::int64_t id) const;
  Eigen::Index author_row(std::int64_t id) const;
  Eigen::Index tag_row(std::int64_t id) const;
  Eigen::Index user_row(std::int64_t id) const;
  Eigen::Index device_row(std::int64_t id) const;

  static constexpr double kRmsEps = 1e-6;

 private:
  Var ffn_block(LeafSet& params, Var x, const std::string& prefix) const;
  void check_profile(const UserProfile& profile) const;

  RunConfig cfg_;
};

}  // namespace mtret
