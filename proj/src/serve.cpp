#include "mtret/serve.hpp"

#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cstring>
#include <iostream>
#include <map>
#include <stdexcept>
#include <thread>

#include "mtret/quota.hpp"

namespace mtret {

using nlohmann::json;

std::string objective_name(int k) {
  if (k >= 0 && k < kNumObjectives) return kObjectiveNames[k];
  return "obj" + std::to_string(k);
}

ServingState ServingState::load(const std::string& index_dir,
                                const std::string& checkpoint_prefix) {
  ServingState state;
  ParamStore::Loaded loaded = state.store_.load_checkpoint(checkpoint_prefix);
  state.cfg_ = loaded.config;
  state.build_ =
      load_index_build(index_dir, state.cfg_.model.n_objectives);
  const std::string have = checkpoint_hash(checkpoint_prefix);
  for (const auto& index : state.build_.indices) {
    if (index.checkpoint_hash() != have) {
      throw std::runtime_error(
          "index/checkpoint mismatch: index " +
          std::to_string(index.objective()) + " was built from " +
          index.checkpoint_hash() + ", checkpoint hashes to " + have);
    }
  }
  return state;
}

FusedResult retrieve(const RunConfig& cfg, const ParamStore& store,
                     const IndexBuild& build, const RetrievalRequest& request) {
  const std::int64_t k_obj = cfg.model.n_objectives;
  if (request.q_total < k_obj) {
    throw std::invalid_argument("q_total must be >= the objective count");
  }
  const std::string mode =
      request.mode.empty() ? cfg.serve.default_mode : request.mode;
  if (mode != "exact" && mode != "approx") {
    throw std::invalid_argument("mode must be 'exact' or 'approx'");
  }

  Model model(cfg);
  std::span<const BehaviorEvent> history(request.history);
  if (static_cast<std::int64_t>(history.size()) > cfg.model.n_max) {
    history = history.subspan(history.size() -
                              static_cast<std::size_t>(cfg.model.n_max));
  }
  Mat user_embs = model.infer_user_embeddings(store, request.profile, history);

  std::vector<std::int64_t> recent_items;
  recent_items.reserve(history.size());
  for (const auto& e : history) recent_items.push_back(e.item);
  Eigen::VectorXd agg = aggregate_user_weights(recent_items, build.weights);

  // Quotas over the non-empty indices; empty objectives hand their share to
  // the rest through renormalized weights.
  std::vector<std::int64_t> quotas(static_cast<std::size_t>(k_obj), 0);
  std::vector<Eigen::Index> live;
  for (Eigen::Index k = 0; k < k_obj; ++k) {
    if (!build.indices[static_cast<std::size_t>(k)].empty()) live.push_back(k);
  }
  if (!live.empty()) {
    if (static_cast<std::int64_t>(live.size()) == k_obj) {
      quotas = allocate_quota(agg, request.q_total);
    } else {
      Eigen::VectorXd reduced(static_cast<Eigen::Index>(live.size()));
      for (std::size_t i = 0; i < live.size(); ++i) reduced(static_cast<Eigen::Index>(i)) = agg(live[i]);
      const double total = reduced.sum();
      if (total > 0.0) {
        reduced /= total;
      } else {
        reduced.setConstant(1.0 / static_cast<double>(live.size()));
      }
      std::vector<std::int64_t> sub = allocate_quota(reduced, request.q_total);
      for (std::size_t i = 0; i < live.size(); ++i) {
        quotas[static_cast<std::size_t>(live[i])] = sub[i];
      }
    }
  }

  // Per-item best score with every contributing objective recorded.
  std::map<std::int64_t, FusedCandidate> merged;
  for (Eigen::Index k = 0; k < k_obj; ++k) {
    const auto& index = build.indices[static_cast<std::size_t>(k)];
    const std::int64_t q = quotas[static_cast<std::size_t>(k)];
    if (index.empty() || q == 0) continue;
    const Eigen::VectorXd query = user_embs.row(k).transpose();
    SearchResult found = mode == "exact"
                             ? index.search_exact(query, q)
                             : index.search_approx(query, q, cfg.serve.nprobe);
    for (const auto& hit : found.hits) {
      auto [it, fresh] = merged.try_emplace(hit.item);
      if (fresh) {
        it->second.item = hit.item;
        it->second.score = hit.score;
      } else {
        it->second.score = std::max(it->second.score, hit.score);
      }
      it->second.objectives.push_back(static_cast<int>(k));
    }
  }

  FusedResult result;
  result.quotas = quotas;
  result.weights = agg;
  result.candidates.reserve(merged.size());
  for (auto& [item, cand] : merged) result.candidates.push_back(std::move(cand));
  std::sort(result.candidates.begin(), result.candidates.end(),
            [](const FusedCandidate& a, const FusedCandidate& b) {
              if (a.score != b.score) return a.score > b.score;
              return a.item < b.item;
            });
  return result;
}

FusedResult ServingState::retrieve(const RetrievalRequest& request) const {
  return mtret::retrieve(cfg_, store_, build_, request);
}

RetrievalRequest parse_request(const json& j) {
  RetrievalRequest req;
  const json& user = j.at("user");
  req.profile.age = user.at("age").get<std::int64_t>();
  req.profile.gender = user.at("gender").get<std::int64_t>();
  req.profile.region = user.at("region").get<std::int64_t>();
  req.profile.user_id = user.value("user_id", std::int64_t{-1});
  req.profile.device_id = user.value("device_id", std::int64_t{-1});
  if (j.contains("history")) {
    for (const json& h : j.at("history")) {
      BehaviorEvent e;
      e.item = h.at("item").get<std::int64_t>();
      e.watch_ratio = h.value("watch_ratio", 0.0);
      e.like = h.value("like", 0);
      e.comment = h.value("comment", 0);
      e.share = h.value("share", 0);
      e.author = h.value("author", std::int64_t{-1});
      e.tag = h.value("tag", std::int64_t{-1});
      e.ts = h.value("ts", std::int64_t{0});
      req.history.push_back(e);
    }
  }
  req.q_total = j.at("q_total").get<std::int64_t>();
  req.mode = j.value("mode", std::string{});
  return req;
}

json result_to_json(const FusedResult& result) {
  json candidates = json::array();
  for (const auto& c : result.candidates) {
    json objectives = json::array();
    for (int k : c.objectives) objectives.push_back(objective_name(k));
    candidates.push_back(
        json{{"item", c.item}, {"score", c.score}, {"objectives", objectives}});
  }
  std::vector<double> weights(result.weights.data(),
                              result.weights.data() + result.weights.size());
  return json{{"candidates", candidates},
              {"quota", result.quotas},
              {"weights", weights}};
}

std::string handle_request_line(const ServingState& state,
                                const std::string& line) {
  json parsed = json::parse(line, nullptr, false);
  if (parsed.is_discarded()) {
    return json{{"error", "malformed request line"}}.dump();
  }
  try {
    return result_to_json(state.retrieve(parse_request(parsed))).dump();
  } catch (const std::exception& e) {
    return json{{"error", e.what()}}.dump();
  }
}

void serve_stdio(const ServingState& state, std::istream& in,
                 std::ostream& out) {
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out << handle_request_line(state, line) << "\n";
    out.flush();
  }
}

namespace {

void serve_connection(const ServingState& state, int fd) {
  std::string buffer;
  char chunk[4096];
  for (;;) {
    const ssize_t n = ::read(fd, chunk, sizeof(chunk));
    if (n <= 0) break;
    buffer.append(chunk, static_cast<std::size_t>(n));
    std::size_t pos;
    while ((pos = buffer.find('\n')) != std::string::npos) {
      const std::string line = buffer.substr(0, pos);
      buffer.erase(0, pos + 1);
      if (line.empty()) continue;
      const std::string response = handle_request_line(state, line) + "\n";
      std::size_t sent = 0;
      while (sent < response.size()) {
        const ssize_t w =
            ::write(fd, response.data() + sent, response.size() - sent);
        if (w <= 0) {
          ::close(fd);
          return;
        }
        sent += static_cast<std::size_t>(w);
      }
    }
  }
  ::close(fd);
}

}  // namespace

void serve_tcp(const ServingState& state, int port, std::atomic<bool>* stop) {
  const int listener = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listener < 0) throw std::runtime_error("socket() failed");
  const int on = 1;
  ::setsockopt(listener, SOL_SOCKET, SO_REUSEADDR, &on, sizeof(on));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(listener);
    throw std::runtime_error("bind() failed on port " + std::to_string(port));
  }
  if (::listen(listener, 16) != 0) {
    ::close(listener);
    throw std::runtime_error("listen() failed");
  }
  std::cerr << "serving on 127.0.0.1:" << port << "\n";

  std::vector<std::thread> workers;
  for (;;) {
    pollfd pfd{listener, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, 200);
    if (stop && stop->load()) break;
    if (ready <= 0) continue;
    const int fd = ::accept(listener, nullptr, nullptr);
    if (fd < 0) continue;
    workers.emplace_back(
        [&state, fd]() { serve_connection(state, fd); });
  }
  ::close(listener);
  for (auto& w : workers) {
    if (w.joinable()) w.join();
  }
}

}  // namespace mtret
