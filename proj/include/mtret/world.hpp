#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mtret/config.hpp"
#include "mtret/model.hpp"

namespace mtret {

inline constexpr int kNumObjectives = 3;
inline const char* const kObjectiveNames[kNumObjectives] = {"pro_lvr",
                                                            "max_time", "vtr"};

// One exposure with its derived objective labels and quota supervision score.
struct LabeledExample {
  std::int64_t user = 0;
  BehaviorEvent event;
  std::array<int, kNumObjectives> labels{};
  double pscore = 0.0;
};

// Latent preference structure behind the simulated logs. Each objective has
// its own latent channel; the watch-ratio process mixes them so the derived
// labels correlate without collapsing into one signal.
struct SyntheticWorld {
  WorldConfig cfg;
  std::array<Mat, kNumObjectives> user_latents;  // n_users x latent_dim
  std::array<Mat, kNumObjectives> item_latents;  // n_items x latent_dim
  std::vector<ItemFeatures> items;
  std::vector<UserProfile> users;

  // Standardized channel affinity (roughly unit normal over random pairs).
  double affinity(int channel, std::int64_t user, std::int64_t item) const;

  // Expected logit of the watch-ratio distribution; the decile contract on
  // watch ratios is stated against this quantity.
  double mean_affinity(std::int64_t user, std::int64_t item) const;
};

SyntheticWorld generate_world(const WorldConfig& cfg, std::uint64_t seed);

// Per-user chronological exposure streams with sampled watch ratios,
// interaction flags and strictly increasing timestamps.
std::vector<std::vector<BehaviorEvent>> simulate_events(
    const SyntheticWorld& world, std::uint64_t seed);

// Label rules. Each takes one user's chronological stream and returns one
// label per event, using only that event's past.
std::vector<int> derive_pro_lvr(const std::vector<BehaviorEvent>& stream,
                                double percentile_p, std::int64_t window_w);
std::vector<int> derive_max_time(const std::vector<BehaviorEvent>& stream,
                                 std::int64_t lookback_k, double multiplier_m);
std::vector<int> derive_vtr(const std::vector<BehaviorEvent>& stream,
                            double threshold);

struct Dataset {
  RunConfig config;
  std::vector<std::vector<BehaviorEvent>> events;  // indexed by user id
  std::vector<LabeledExample> examples;
  std::vector<ItemFeatures> items;
  std::vector<UserProfile> users;
};

// World + events + labels + pscore oracle, fully determined by cfg.seed.
Dataset build_dataset(const RunConfig& cfg);

// events.jsonl, examples.jsonl, items.jsonl, users.jsonl, meta.json.
void write_dataset(const Dataset& ds, const std::string& dir, bool force);
Dataset read_dataset(const std::string& dir);

}  // namespace mtret
