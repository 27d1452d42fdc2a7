#pragma once

#include <atomic>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtret/index.hpp"
#include "mtret/model.hpp"

namespace mtret {

struct RetrievalRequest {
  UserProfile profile;
  std::vector<BehaviorEvent> history;
  std::int64_t q_total = 0;
  std::string mode;  // "exact" | "approx"; empty uses the serve default
};

struct FusedCandidate {
  std::int64_t item = 0;
  double score = 0.0;             // best score across contributing objectives
  std::vector<int> objectives;    // every objective that returned the item
};

struct FusedResult {
  std::vector<FusedCandidate> candidates;  // score desc, ties by item id
  std::vector<std::int64_t> quotas;        // realized Q_k, sums to q_total
  Eigen::VectorXd weights;                 // aggregated user allocation
};

std::string objective_name(int k);

// Read-only bundle of checkpoint, indices and weight store; safe to share
// across concurrent request threads.
class ServingState {
 public:
  // Loads checkpoint + index directory and verifies the index was built from
  // exactly this checkpoint (hash match), refusing to serve otherwise.
  static ServingState load(const std::string& index_dir,
                           const std::string& checkpoint_prefix);

  FusedResult retrieve(const RetrievalRequest& request) const;

  const RunConfig& config() const { return cfg_; }
  const ParamStore& params() const { return store_; }
  const IndexBuild& index_build() const { return build_; }

 private:
  RunConfig cfg_;
  ParamStore store_;
  IndexBuild build_;
};

// Serving pipeline over explicit parts (used directly by tests).
FusedResult retrieve(const RunConfig& cfg, const ParamStore& store,
                     const IndexBuild& build, const RetrievalRequest& request);

RetrievalRequest parse_request(const nlohmann::json& j);
nlohmann::json result_to_json(const FusedResult& result);

// One request line -> one response line; malformed input yields {"error": ...}.
std::string handle_request_line(const ServingState& state,
                                const std::string& line);

// Line-delimited protocol over stdin/stdout.
void serve_stdio(const ServingState& state, std::istream& in, std::ostream& out);

// Same protocol over TCP; one thread per connection, shared read-only state.
// Returns after `stop` becomes true (checked between accepts) or runs forever
// when stop is null.
void serve_tcp(const ServingState& state, int port,
               std::atomic<bool>* stop = nullptr);

}  // namespace mtret
