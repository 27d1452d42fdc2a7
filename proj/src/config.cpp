#include "mtret/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mtret {

using nlohmann::json;

namespace {

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw std::invalid_argument("config field '" + field + "': " + why);
}

// Reads known keys from `j` into fields; any unknown key is an error naming
// the offending field.
class StrictReader {
 public:
  StrictReader(const json& j, std::string scope)
      : j_(j), scope_(std::move(scope)) {
    if (!j_.is_object()) {
      throw std::invalid_argument("config section '" + scope_ +
                                  "' must be an object");
    }
  }

  template <typename T>
  void field(const char* name, T& out) {
    known_.insert(name);
    if (!j_.contains(name)) return;
    try {
      out = j_.at(name).get<T>();
    } catch (const json::exception&) {
      throw std::invalid_argument("config field '" + scope_ + name +
                                  "': wrong type");
    }
  }

  const json* section(const char* name) {
    known_.insert(name);
    if (!j_.contains(name)) return nullptr;
    return &j_.at(name);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      (void)value;
      if (!known_.count(key)) {
        throw std::invalid_argument("unknown config field '" + scope_ + key +
                                    "'");
      }
    }
  }

 private:
  const json& j_;
  std::string scope_;
  std::set<std::string> known_;
};

WorldConfig world_from_json(const json& j) {
  WorldConfig w;
  StrictReader r(j, "world.");
  r.field("n_users", w.n_users);
  r.field("n_items", w.n_items);
  r.field("n_authors", w.n_authors);
  r.field("n_tags", w.n_tags);
  r.field("latent_dim", w.latent_dim);
  r.field("events_per_user", w.events_per_user);
  r.field("n_age_buckets", w.n_age_buckets);
  r.field("n_genders", w.n_genders);
  r.field("n_regions", w.n_regions);
  r.field("percentile_p", w.percentile_p);
  r.field("window_w", w.window_w);
  r.field("maxtime_lookback_k", w.maxtime_lookback_k);
  r.field("maxtime_multiplier_m", w.maxtime_multiplier_m);
  r.field("vtr_threshold", w.vtr_threshold);
  r.field("pscore_coeffs", w.pscore_coeffs);
  r.field("pscore_noise_sigma", w.pscore_noise_sigma);
  r.finish();
  return w;
}

json world_to_json(const WorldConfig& w) {
  return json{{"n_users", w.n_users},
              {"n_items", w.n_items},
              {"n_authors", w.n_authors},
              {"n_tags", w.n_tags},
              {"latent_dim", w.latent_dim},
              {"events_per_user", w.events_per_user},
              {"n_age_buckets", w.n_age_buckets},
              {"n_genders", w.n_genders},
              {"n_regions", w.n_regions},
              {"percentile_p", w.percentile_p},
              {"window_w", w.window_w},
              {"maxtime_lookback_k", w.maxtime_lookback_k},
              {"maxtime_multiplier_m", w.maxtime_multiplier_m},
              {"vtr_threshold", w.vtr_threshold},
              {"pscore_coeffs", w.pscore_coeffs},
              {"pscore_noise_sigma", w.pscore_noise_sigma}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  StrictReader r(j, "model.");
  r.field("d", m.d);
  r.field("n_max", m.n_max);
  r.field("n_objectives", m.n_objectives);
  r.field("layers", m.layers);
  r.field("pformer_layer", m.pformer_layer);
  r.field("n_experts", m.n_experts);
  r.field("expert_cut", m.expert_cut);
  r.field("ffn_hidden", m.ffn_hidden);
  r.field("head_count", m.head_count);
  r.field("share_item_embeddings", m.share_item_embeddings);
  r.field("include_user_ids_in_query", m.include_user_ids_in_query);
  r.field("gate_use_ids", m.gate_use_ids);
  r.field("normalize_embeddings", m.normalize_embeddings);
  r.field("item_shared_mlp", m.item_shared_mlp);
  r.field("mutually_masked_objectives", m.mutually_masked_objectives);
  r.field("use_positional_embedding", m.use_positional_embedding);
  r.field("tau", m.tau);
  r.field("gamma", m.gamma);
  r.field("long_view_threshold", m.long_view_threshold);
  r.finish();
  return m;
}

json model_to_json(const ModelConfig& m) {
  return json{{"d", m.d},
              {"n_max", m.n_max},
              {"n_objectives", m.n_objectives},
              {"layers", m.layers},
              {"pformer_layer", m.pformer_layer},
              {"n_experts", m.n_experts},
              {"expert_cut", m.expert_cut},
              {"ffn_hidden", m.ffn_hidden},
              {"head_count", m.head_count},
              {"share_item_embeddings", m.share_item_embeddings},
              {"include_user_ids_in_query", m.include_user_ids_in_query},
              {"gate_use_ids", m.gate_use_ids},
              {"normalize_embeddings", m.normalize_embeddings},
              {"item_shared_mlp", m.item_shared_mlp},
              {"mutually_masked_objectives", m.mutually_masked_objectives},
              {"use_positional_embedding", m.use_positional_embedding},
              {"tau", m.tau},
              {"gamma", m.gamma},
              {"long_view_threshold", m.long_view_threshold}};
}

TrainConfig train_from_json(const json& j) {
  TrainConfig t;
  StrictReader r(j, "train.");
  r.field("batch_size", t.batch_size);
  r.field("epochs", t.epochs);
  r.field("max_steps", t.max_steps);
  r.field("lr", t.lr);
  r.field("beta1", t.beta1);
  r.field("beta2", t.beta2);
  r.field("adam_eps", t.adam_eps);
  r.field("lambda_quota", t.lambda_quota);
  r.field("log_every", t.log_every);
  r.field("holdout_fraction", t.holdout_fraction);
  r.finish();
  return t;
}

json train_to_json(const TrainConfig& t) {
  return json{{"batch_size", t.batch_size},
              {"epochs", t.epochs},
              {"max_steps", t.max_steps},
              {"lr", t.lr},
              {"beta1", t.beta1},
              {"beta2", t.beta2},
              {"adam_eps", t.adam_eps},
              {"lambda_quota", t.lambda_quota},
              {"log_every", t.log_every},
              {"holdout_fraction", t.holdout_fraction}};
}

ServeConfig serve_from_json(const json& j) {
  ServeConfig s;
  StrictReader r(j, "serve.");
  r.field("port", s.port);
  r.field("nlist", s.nlist);
  r.field("nprobe", s.nprobe);
  r.field("default_mode", s.default_mode);
  r.finish();
  return s;
}

json serve_to_json(const ServeConfig& s) {
  return json{{"port", s.port},
              {"nlist", s.nlist},
              {"nprobe", s.nprobe},
              {"default_mode", s.default_mode}};
}

json parse_override_value(const std::string& text) {
  json v = json::parse(text, nullptr, false);
  if (v.is_discarded()) return json(text);  // treat as a plain string
  return v;
}

void apply_override(json& root, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos) {
    throw std::invalid_argument("override '" + spec +
                                "' must look like key.path=value");
  }
  const std::string path = spec.substr(0, eq);
  json* cursor = &root;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw std::invalid_argument("override path is empty");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    cursor = &(*cursor)[parts[i]];
  }
  (*cursor)[parts.back()] = parse_override_value(spec.substr(eq + 1));
}

}  // namespace

void RunConfig::validate() const {
  require(world.n_users >= 1, "world.n_users", "must be >= 1");
  require(world.n_items >= 1, "world.n_items", "must be >= 1");
  require(world.n_authors >= 1, "world.n_authors", "must be >= 1");
  require(world.n_tags >= 1, "world.n_tags", "must be >= 1");
  require(world.latent_dim >= 1, "world.latent_dim", "must be >= 1");
  require(world.events_per_user >= 1, "world.events_per_user", "must be >= 1");
  require(world.n_age_buckets >= 1, "world.n_age_buckets", "must be >= 1");
  require(world.n_genders >= 1, "world.n_genders", "must be >= 1");
  require(world.n_regions >= 1, "world.n_regions", "must be >= 1");
  require(world.percentile_p > 0.0 && world.percentile_p < 1.0,
          "world.percentile_p", "must lie in (0, 1)");
  require(world.window_w >= 1, "world.window_w", "must be >= 1");
  require(world.maxtime_lookback_k >= 1, "world.maxtime_lookback_k",
          "must be >= 1");
  require(world.maxtime_multiplier_m > 1.0, "world.maxtime_multiplier_m",
          "must be > 1");
  require(world.vtr_threshold > 0.0 && world.vtr_threshold < 1.0,
          "world.vtr_threshold", "must lie in (0, 1)");
  require(world.pscore_coeffs.size() == 3, "world.pscore_coeffs",
          "must have 3 entries");
  for (double c : world.pscore_coeffs) {
    require(c >= 0.0, "world.pscore_coeffs", "entries must be >= 0");
  }
  require(world.pscore_noise_sigma >= 0.0, "world.pscore_noise_sigma",
          "must be >= 0");

  require(model.d >= 2 && model.d % 2 == 0, "model.d",
          "must be even and >= 2 (id embeddings use two d/2 halves)");
  require(model.n_max >= 0, "model.n_max", "must be >= 0");
  require(model.n_objectives >= 1, "model.n_objectives", "must be >= 1");
  require(model.layers >= 1, "model.layers", "must be >= 1");
  require(model.pformer_layer >= 1 && model.pformer_layer <= model.layers,
          "model.pformer_layer", "must lie in [1, layers]");
  require(model.n_experts >= 1, "model.n_experts", "must be >= 1");
  require(model.expert_cut >= 1 && model.expert_cut <= model.n_experts,
          "model.expert_cut", "must lie in [1, n_experts]");
  require(model.head_count >= 1, "model.head_count", "must be >= 1");
  require(model.d % model.head_count == 0, "model.head_count",
          "must divide d");
  require(model.tau > 0.0, "model.tau", "must be > 0");
  require(model.gamma > 0.0, "model.gamma", "must be > 0");
  require(model.long_view_threshold > 0.0 && model.long_view_threshold <= 1.0,
          "model.long_view_threshold", "must lie in (0, 1]");

  require(train.batch_size >= 2, "train.batch_size", "must be >= 2");
  require(train.epochs >= 0, "train.epochs", "must be >= 0");
  require(train.max_steps >= 0, "train.max_steps", "must be >= 0");
  require(train.lr > 0.0, "train.lr", "must be > 0");
  require(train.beta1 >= 0.0 && train.beta1 < 1.0, "train.beta1",
          "must lie in [0, 1)");
  require(train.beta2 >= 0.0 && train.beta2 < 1.0, "train.beta2",
          "must lie in [0, 1)");
  require(train.adam_eps > 0.0, "train.adam_eps", "must be > 0");
  require(train.lambda_quota >= 0.0, "train.lambda_quota", "must be >= 0");
  require(train.log_every >= 1, "train.log_every", "must be >= 1");
  require(train.holdout_fraction > 0.0 && train.holdout_fraction < 1.0,
          "train.holdout_fraction", "must lie in (0, 1)");

  require(serve.port > 0 && serve.port < 65536, "serve.port",
          "must be a valid TCP port");
  require(serve.nlist >= 0, "serve.nlist", "must be >= 0");
  require(serve.nprobe >= 0, "serve.nprobe", "must be >= 0");
  require(serve.default_mode == "exact" || serve.default_mode == "approx",
          "serve.default_mode", "must be 'exact' or 'approx'");
}

json to_json(const RunConfig& cfg) {
  return json{{"seed", cfg.seed},
              {"world", world_to_json(cfg.world)},
              {"model", model_to_json(cfg.model)},
              {"train", train_to_json(cfg.train)},
              {"serve", serve_to_json(cfg.serve)}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig cfg;
  StrictReader r(j, "");
  r.field("seed", cfg.seed);
  if (const json* w = r.section("world")) cfg.world = world_from_json(*w);
  if (const json* m = r.section("model")) cfg.model = model_from_json(*m);
  if (const json* t = r.section("train")) cfg.train = train_from_json(*t);
  if (const json* s = r.section("serve")) cfg.serve = serve_from_json(*s);
  r.finish();
  return cfg;
}

RunConfig load_run_config(const std::string& path,
                          const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("config file " + path + ": " + e.what());
  }
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig cfg = run_config_from_json(j);
  cfg.validate();
  return cfg;
}

RunConfig default_run_config(const std::vector<std::string>& overrides) {
  json j = json::object();
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig cfg = run_config_from_json(j);
  cfg.validate();
  return cfg;
}

}  // namespace mtret
