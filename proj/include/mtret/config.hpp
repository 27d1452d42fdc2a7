#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace mtret {

// Synthetic interaction world: sizes, label rules, quota supervision oracle.
struct WorldConfig {
  std::int64_t n_users = 500;
  std::int64_t n_items = 2000;
  std::int64_t n_authors = 50;
  std::int64_t n_tags = 32;
  std::int64_t latent_dim = 4;
  std::int64_t events_per_user = 60;
  std::int64_t n_age_buckets = 8;
  std::int64_t n_genders = 3;
  std::int64_t n_regions = 16;

  // Label rules.
  double percentile_p = 0.75;        // long-view threshold quantile
  std::int64_t window_w = 100;       // exposures in the quantile window
  std::int64_t maxtime_lookback_k = 10;
  double maxtime_multiplier_m = 2.0;
  double vtr_threshold = 0.4;

  // Quota supervision oracle: pscore = sum_k coeff_k * affinity_k + noise,
  // min-max scaled to [-1, 1] over the generated set.
  std::vector<double> pscore_coeffs = {0.4, 0.2, 0.4};
  double pscore_noise_sigma = 0.01;
};

// Twin-tower architecture knobs.
struct ModelConfig {
  std::int64_t d = 32;           // embedding width
  std::int64_t n_max = 32;       // behavior window fed to the decoder
  std::int64_t n_objectives = 3; // K
  std::int64_t layers = 4;
  std::int64_t pformer_layer = 3;  // 1-based; which layer gets the gated experts
  std::int64_t n_experts = 4;
  std::int64_t expert_cut = 2;
  std::int64_t ffn_hidden = 0;   // 0 = 4 * d
  std::int64_t head_count = 1;

  bool share_item_embeddings = true;  // one id/author/tag table for both towers
  bool include_user_ids_in_query = false;
  bool gate_use_ids = true;       // zero the gate's id embedding when false
  bool normalize_embeddings = true;
  bool item_shared_mlp = false;   // ablation: one item MLP for every objective
  bool mutually_masked_objectives = false;
  bool use_positional_embedding = false;

  double tau = 0.1;    // InfoNCE temperature
  double gamma = 32.0; // objective-weight rebalancing intensity
  double long_view_threshold = 0.7;

  std::int64_t ffn_hidden_or_default() const {
    return ffn_hidden > 0 ? ffn_hidden : 4 * d;
  }
};

struct TrainConfig {
  std::int64_t batch_size = 64;
  std::int64_t epochs = 3;
  std::int64_t max_steps = 0;  // 0 = bounded by epochs only
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda_quota = 1.0;
  std::int64_t log_every = 10;
  double holdout_fraction = 1.0 / 6.0;  // trailing time slice kept for eval
};

struct ServeConfig {
  std::int64_t port = 7871;
  std::int64_t nlist = 0;   // 0 = round(sqrt(index size))
  std::int64_t nprobe = 0;  // 0 = max(1, nlist / 4)
  std::string default_mode = "exact";  // exact | approx
};

struct RunConfig {
  std::uint64_t seed = 1;
  WorldConfig world;
  ModelConfig model;
  TrainConfig train;
  ServeConfig serve;

  void validate() const;  // throws std::invalid_argument naming the field
};

nlohmann::json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);

// Loads a JSON config file, applies `key.path=value` overrides, validates.
RunConfig load_run_config(const std::string& path,
                          const std::vector<std::string>& overrides);
RunConfig default_run_config(const std::vector<std::string>& overrides = {});

}  // namespace mtret
