#include "mtret/world.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "mtret/io.hpp"
#include "mtret/rng.hpp"

namespace mtret {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Watch-ratio process. The logit mixes the vtr channel (absolute level), the
// pro_lvr channel (within-user relative level) and rare spikes driven by the
// max_time channel, so each label rule keys off its own latent.
constexpr double kBaseLogit = -2.0;
constexpr double kVtrSlope = 1.3;
constexpr double kProLvrSlope = 0.55;
constexpr double kNoiseSd = 0.35;
constexpr double kSpikeSlope = 2.2;
constexpr double kSpikeBias = 3.8;
constexpr double kSpikeBoost = 3.4;
constexpr double kSpikeBoostSd = 0.6;
constexpr double kUniformExposureFrac = 0.40;

constexpr int kChProLvr = 0;
constexpr int kChMaxTime = 1;
constexpr int kChVtr = 2;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Linear-interpolation empirical quantile of an unsorted sample.
double interpolated_quantile(std::vector<double> values, double p) {
  std::sort(values.begin(), values.end());
  const auto m = static_cast<std::ptrdiff_t>(values.size());
  const double h = static_cast<double>(m - 1) * p;
  const auto lo = static_cast<std::ptrdiff_t>(std::floor(h));
  const auto hi = std::min(lo + 1, m - 1);
  const double frac = h - static_cast<double>(lo);
  return values[static_cast<std::size_t>(lo)] +
         frac * (values[static_cast<std::size_t>(hi)] -
                 values[static_cast<std::size_t>(lo)]);
}

}  // namespace

double SyntheticWorld::affinity(int channel, std::int64_t user,
                                std::int64_t item) const {
  const auto& zu = user_latents[static_cast<std::size_t>(channel)];
  const auto& zi = item_latents[static_cast<std::size_t>(channel)];
  return zu.row(user).dot(zi.row(item)) /
         std::sqrt(static_cast<double>(cfg.latent_dim));
}

double SyntheticWorld::mean_affinity(std::int64_t user,
                                     std::int64_t item) const {
  return kBaseLogit + kVtrSlope * affinity(kChVtr, user, item) +
         kProLvrSlope * affinity(kChProLvr, user, item);
}

SyntheticWorld generate_world(const WorldConfig& cfg, std::uint64_t seed) {
  SyntheticWorld world;
  world.cfg = cfg;
  Rng rng(seed ^ 0xc2b2ae3d27d4eb4fULL);

  for (int c = 0; c < kNumObjectives; ++c) {
    Mat& zu = world.user_latents[static_cast<std::size_t>(c)];
    zu.resize(cfg.n_users, cfg.latent_dim);
    for (Eigen::Index i = 0; i < zu.rows(); ++i)
      for (Eigen::Index j = 0; j < zu.cols(); ++j) zu(i, j) = rng.normal();
    Mat& zi = world.item_latents[static_cast<std::size_t>(c)];
    zi.resize(cfg.n_items, cfg.latent_dim);
    for (Eigen::Index i = 0; i < zi.rows(); ++i)
      for (Eigen::Index j = 0; j < zi.cols(); ++j) zi(i, j) = rng.normal();
  }

  world.items.reserve(static_cast<std::size_t>(cfg.n_items));
  for (std::int64_t i = 0; i < cfg.n_items; ++i) {
    ItemFeatures f;
    f.item = i;
    f.author = rng.uniform_int(cfg.n_authors);
    f.tag = rng.uniform_int(cfg.n_tags);
    f.popularity = rng.uniform();
    world.items.push_back(f);
  }

  world.users.reserve(static_cast<std::size_t>(cfg.n_users));
  for (std::int64_t u = 0; u < cfg.n_users; ++u) {
    UserProfile p;
    p.user_id = u;
    p.device_id = rng.uniform_int(cfg.n_users);
    p.age = rng.uniform_int(cfg.n_age_buckets);
    p.gender = rng.uniform_int(cfg.n_genders);
    p.region = rng.uniform_int(cfg.n_regions);
    world.users.push_back(p);
  }
  return world;
}

std::vector<std::vector<BehaviorEvent>> simulate_events(
    const SyntheticWorld& world, std::uint64_t seed) {
  const WorldConfig& cfg = world.cfg;
  Rng rng(seed ^ 0xa0761d6478bd642fULL);

  // Exposure: a uniform slice of the catalog plus, per latent channel, the
  // user's top-affinity neighborhood, mimicking a feedback-driven log.
  const std::int64_t nbhd =
      std::clamp<std::int64_t>(cfg.n_items / 16, 1, cfg.n_items);

  std::vector<std::vector<BehaviorEvent>> streams(
      static_cast<std::size_t>(cfg.n_users));
  std::vector<std::int64_t> order(static_cast<std::size_t>(cfg.n_items));

  for (std::int64_t u = 0; u < cfg.n_users; ++u) {
    std::array<std::vector<std::int64_t>, kNumObjectives> neighborhoods;
    for (int c = 0; c < kNumObjectives; ++c) {
      for (std::int64_t i = 0; i < cfg.n_items; ++i) {
        order[static_cast<std::size_t>(i)] = i;
      }
      std::nth_element(order.begin(), order.begin() + nbhd - 1, order.end(),
                       [&](std::int64_t a, std::int64_t b) {
                         return world.affinity(c, u, a) >
                                world.affinity(c, u, b);
                       });
      neighborhoods[static_cast<std::size_t>(c)].assign(order.begin(),
                                                        order.begin() + nbhd);
      std::sort(neighborhoods[static_cast<std::size_t>(c)].begin(),
                neighborhoods[static_cast<std::size_t>(c)].end());
    }

    auto& stream = streams[static_cast<std::size_t>(u)];
    stream.reserve(static_cast<std::size_t>(cfg.events_per_user));
    std::int64_t ts = rng.uniform_int(5);
    for (std::int64_t e = 0; e < cfg.events_per_user; ++e) {
      std::int64_t item;
      const double pick = rng.uniform();
      if (pick < kUniformExposureFrac || cfg.n_items == 1) {
        item = rng.uniform_int(cfg.n_items);
      } else {
        const auto c = static_cast<std::size_t>(rng.uniform_int(kNumObjectives));
        item = neighborhoods[c][static_cast<std::size_t>(
            rng.uniform_int(nbhd))];
      }

      double logit = kBaseLogit + kVtrSlope * world.affinity(kChVtr, u, item) +
                     kProLvrSlope * world.affinity(kChProLvr, u, item) +
                     kNoiseSd * rng.normal();
      const double spike_p =
          sigmoid(kSpikeSlope * world.affinity(kChMaxTime, u, item) -
                  kSpikeBias);
      if (rng.uniform() < spike_p) {
        logit += kSpikeBoost + std::abs(kSpikeBoostSd * rng.normal());
      }
      const double wr = sigmoid(logit);

      BehaviorEvent ev;
      ev.item = item;
      ev.watch_ratio = wr;
      ev.like = rng.uniform() < 0.02 + 0.30 * wr ? 1 : 0;
      ev.comment = rng.uniform() < 0.01 + 0.10 * wr ? 1 : 0;
      ev.share = rng.uniform() < 0.005 + 0.06 * wr ? 1 : 0;
      ev.author = world.items[static_cast<std::size_t>(item)].author;
      ev.tag = world.items[static_cast<std::size_t>(item)].tag;
      ts += 1 + rng.uniform_int(10);
      ev.ts = ts;
      stream.push_back(ev);
    }
  }
  return streams;
}

std::vector<int> derive_pro_lvr(const std::vector<BehaviorEvent>& stream,
                                double percentile_p, std::int64_t window_w) {
  std::vector<int> labels(stream.size(), 0);
  std::deque<double> window;
  for (std::size_t i = 0; i < stream.size(); ++i) {
    if (!window.empty()) {
      const double threshold = interpolated_quantile(
          std::vector<double>(window.begin(), window.end()), percentile_p);
      labels[i] = stream[i].watch_ratio > threshold ? 1 : 0;
    }
    window.push_back(stream[i].watch_ratio);
    if (static_cast<std::int64_t>(window.size()) > window_w) {
      window.pop_front();
    }
  }
  return labels;
}

std::vector<int> derive_max_time(const std::vector<BehaviorEvent>& stream,
                                 std::int64_t lookback_k, double multiplier_m) {
  std::vector<int> labels(stream.size(), 0);
  for (std::size_t i = 0; i < stream.size(); ++i) {
    if (static_cast<std::int64_t>(i) < lookback_k) continue;
    double mean = 0.0;
    for (std::int64_t j = 1; j <= lookback_k; ++j) {
      mean += stream[i - static_cast<std::size_t>(j)].watch_ratio;
    }
    mean /= static_cast<double>(lookback_k);
    labels[i] = stream[i].watch_ratio > multiplier_m * mean ? 1 : 0;
  }
  return labels;
}

std::vector<int> derive_vtr(const std::vector<BehaviorEvent>& stream,
                            double threshold) {
  std::vector<int> labels(stream.size(), 0);
  for (std::size_t i = 0; i < stream.size(); ++i) {
    labels[i] = stream[i].watch_ratio >= threshold ? 1 : 0;
  }
  return labels;
}

Dataset build_dataset(const RunConfig& cfg) {
  Dataset ds;
  ds.config = cfg;
  SyntheticWorld world = generate_world(cfg.world, cfg.seed);
  ds.events = simulate_events(world, cfg.seed + 1);
  ds.items = world.items;
  ds.users = world.users;

  Rng noise_rng(cfg.seed ^ 0xe7037ed1a0b428dbULL);
  std::vector<double> raw_pscores;
  for (std::int64_t u = 0; u < cfg.world.n_users; ++u) {
    const auto& stream = ds.events[static_cast<std::size_t>(u)];
    const auto pro_lvr =
        derive_pro_lvr(stream, cfg.world.percentile_p, cfg.world.window_w);
    const auto max_time = derive_max_time(stream, cfg.world.maxtime_lookback_k,
                                          cfg.world.maxtime_multiplier_m);
    const auto vtr = derive_vtr(stream, cfg.world.vtr_threshold);
    for (std::size_t i = 0; i < stream.size(); ++i) {
      LabeledExample ex;
      ex.user = u;
      ex.event = stream[i];
      ex.labels = {pro_lvr[i], max_time[i], vtr[i]};
      double p = 0.0;
      for (int c = 0; c < kNumObjectives; ++c) {
        p += cfg.world.pscore_coeffs[static_cast<std::size_t>(c)] *
             world.affinity(c, u, stream[i].item);
      }
      p += cfg.world.pscore_noise_sigma * noise_rng.normal();
      ex.pscore = p;
      raw_pscores.push_back(p);
      ds.examples.push_back(ex);
    }
  }

  // Min-max scale pscore to [-1, 1]; it stands in for a fine-rank fused score
  // whose absolute range is arbitrary.
  const auto [mn_it, mx_it] =
      std::minmax_element(raw_pscores.begin(), raw_pscores.end());
  const double mn = *mn_it, mx = *mx_it;
  const double span = mx > mn ? mx - mn : 1.0;
  for (auto& ex : ds.examples) {
    ex.pscore = 2.0 * (ex.pscore - mn) / span - 1.0;
  }
  return ds;
}

namespace {

json event_to_json(std::int64_t user, const BehaviorEvent& e) {
  return json{{"user", user},         {"item", e.item},
              {"ts", e.ts},           {"watch_ratio", e.watch_ratio},
              {"like", e.like},       {"comment", e.comment},
              {"share", e.share},     {"author", e.author},
              {"tag", e.tag}};
}

BehaviorEvent event_from_json(const json& j) {
  BehaviorEvent e;
  e.item = j.at("item").get<std::int64_t>();
  e.ts = j.at("ts").get<std::int64_t>();
  e.watch_ratio = j.at("watch_ratio").get<double>();
  e.like = j.at("like").get<int>();
  e.comment = j.at("comment").get<int>();
  e.share = j.at("share").get<int>();
  e.author = j.at("author").get<std::int64_t>();
  e.tag = j.at("tag").get<std::int64_t>();
  return e;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& dir, bool force) {
  fs::create_directories(dir);
  const std::array<std::string, 5> files = {"events.jsonl", "examples.jsonl",
                                            "items.jsonl", "users.jsonl",
                                            "meta.json"};
  if (!force) {
    for (const auto& f : files) {
      if (fs::exists(fs::path(dir) / f)) {
        throw std::runtime_error("refusing to overwrite " +
                                 (fs::path(dir) / f).string() +
                                 " (pass --force to allow)");
      }
    }
  }

  {
    std::ofstream out(fs::path(dir) / "events.jsonl",
                      std::ios::binary | std::ios::trunc);
    for (std::size_t u = 0; u < ds.events.size(); ++u) {
      for (const auto& e : ds.events[u]) {
        out << event_to_json(static_cast<std::int64_t>(u), e).dump() << "\n";
      }
    }
  }
  {
    std::ofstream out(fs::path(dir) / "examples.jsonl",
                      std::ios::binary | std::ios::trunc);
    std::array<std::int64_t, kNumObjectives> positives{};
    for (const auto& ex : ds.examples) {
      json j = event_to_json(ex.user, ex.event);
      j["l_pro_lvr"] = ex.labels[0];
      j["l_max_time"] = ex.labels[1];
      j["l_vtr"] = ex.labels[2];
      j["pscore"] = ex.pscore;
      out << j.dump() << "\n";
      for (int c = 0; c < kNumObjectives; ++c) {
        positives[static_cast<std::size_t>(c)] += ex.labels[static_cast<std::size_t>(c)];
      }
    }
  }
  {
    std::ofstream out(fs::path(dir) / "items.jsonl",
                      std::ios::binary | std::ios::trunc);
    for (const auto& it : ds.items) {
      out << json{{"item", it.item},
                  {"author", it.author},
                  {"tag", it.tag},
                  {"popularity", it.popularity}}
                 .dump()
          << "\n";
    }
  }
  {
    std::ofstream out(fs::path(dir) / "users.jsonl",
                      std::ios::binary | std::ios::trunc);
    for (const auto& u : ds.users) {
      out << json{{"user", u.user_id},
                  {"age", u.age},
                  {"gender", u.gender},
                  {"region", u.region},
                  {"device", u.device_id}}
                 .dump()
          << "\n";
    }
  }
  {
    std::array<std::int64_t, kNumObjectives> counts{};
    for (const auto& ex : ds.examples) {
      for (int c = 0; c < kNumObjectives; ++c) {
        counts[static_cast<std::size_t>(c)] +=
            ex.labels[static_cast<std::size_t>(c)];
      }
    }
    json shares = json::object();
    for (int c = 0; c < kNumObjectives; ++c) {
      shares[kObjectiveNames[c]] =
          ds.examples.empty()
              ? 0.0
              : static_cast<double>(counts[static_cast<std::size_t>(c)]) /
                    static_cast<double>(ds.examples.size());
    }
    json meta{{"version", 1},
              {"config", to_json(ds.config)},
              {"n_events", ds.examples.size()},
              {"label_shares", shares}};
    write_text_file((fs::path(dir) / "meta.json").string(), meta.dump(2) + "\n");
  }
}

Dataset read_dataset(const std::string& dir) {
  Dataset ds;
  json meta = json::parse(read_text_file((fs::path(dir) / "meta.json").string()));
  ds.config = run_config_from_json(meta.at("config"));

  ds.events.assign(static_cast<std::size_t>(ds.config.world.n_users), {});
  for_each_jsonl((fs::path(dir) / "events.jsonl").string(), [&](const json& j) {
    const auto user = j.at("user").get<std::int64_t>();
    if (user < 0 || user >= ds.config.world.n_users) {
      throw std::runtime_error("events.jsonl: user id outside configured range");
    }
    ds.events[static_cast<std::size_t>(user)].push_back(event_from_json(j));
  });

  for_each_jsonl((fs::path(dir) / "examples.jsonl").string(),
                 [&](const json& j) {
                   LabeledExample ex;
                   ex.user = j.at("user").get<std::int64_t>();
                   ex.event = event_from_json(j);
                   ex.labels = {j.at("l_pro_lvr").get<int>(),
                                j.at("l_max_time").get<int>(),
                                j.at("l_vtr").get<int>()};
                   ex.pscore = j.at("pscore").get<double>();
                   ds.examples.push_back(ex);
                 });

  for_each_jsonl((fs::path(dir) / "items.jsonl").string(), [&](const json& j) {
    ItemFeatures f;
    f.item = j.at("item").get<std::int64_t>();
    f.author = j.at("author").get<std::int64_t>();
    f.tag = j.at("tag").get<std::int64_t>();
    f.popularity = j.at("popularity").get<double>();
    ds.items.push_back(f);
  });

  for_each_jsonl((fs::path(dir) / "users.jsonl").string(), [&](const json& j) {
    UserProfile p;
    p.user_id = j.at("user").get<std::int64_t>();
    p.age = j.at("age").get<std::int64_t>();
    p.gender = j.at("gender").get<std::int64_t>();
    p.region = j.at("region").get<std::int64_t>();
    p.device_id = j.at("device").get<std::int64_t>();
    ds.users.push_back(p);
  });
  return ds;
}

}  // namespace mtret
