#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mtret/index.hpp"
#include "mtret/params.hpp"
#include "mtret/world.hpp"

namespace mtret {

inline constexpr std::array<std::int64_t, 3> kRecallCutoffs = {10, 50, 100};
inline constexpr std::array<std::int64_t, 3> kNdcgCutoffs = {1, 10, 100};

struct ObjectiveEval {
  std::array<double, 3> recall{};  // at kRecallCutoffs
  std::array<double, 3> ndcg{};    // at kNdcgCutoffs
  std::int64_t users_evaluated = 0;
};

struct ProbeStats {
  double mean = 0.0;
  double stddev = 0.0;
  std::int64_t pairs = 0;
  std::vector<std::int64_t> histogram;  // cosine bins over [-1, 1]
  static constexpr int kBins = 40;
};

struct EvalReport {
  std::string universe;  // "full" | "index"
  std::vector<ObjectiveEval> per_objective;
  std::int64_t users_skipped_no_history = 0;
  ProbeStats probe;
};

// Offline metrics over the trailing time slice: per user, the relevant set
// for objective k is the held-out items positive for k, candidates ranked by
// exact inner-product search with that objective's user embedding over the
// full catalog ("full") or within its objective index ("index").
EvalReport evaluate(const RunConfig& cfg, const ParamStore& store,
                    const Dataset& ds, const std::string& universe,
                    const IndexBuild* index_build = nullptr);

// Cross-objective cosine statistics of user embeddings over up to max_users
// users (their in-time history).
ProbeStats similarity_probe(const RunConfig& cfg, const ParamStore& store,
                            const Dataset& ds, std::int64_t max_users);

// One metric per line: objective, metric name, cutoff, value. The config is
// echoed in '#' comment lines for reproducibility.
void write_report(const EvalReport& report, const RunConfig& cfg,
                  const std::string& path);
void write_histogram_csv(const ProbeStats& probe, const std::string& path);

}  // namespace mtret
