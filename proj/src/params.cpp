#include "mtret/params.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "mtret/io.hpp"

namespace mtret {

using nlohmann::json;

Mat& ParamStore::add(const std::string& name, Eigen::Index rows,
                     Eigen::Index cols) {
  if (entries_.count(name)) {
    throw std::logic_error("parameter registered twice: " + name);
  }
  names_.push_back(name);
  Entry entry;
  entry.value = Mat::Zero(rows, cols);
  entry.m = Mat::Zero(rows, cols);
  entry.v = Mat::Zero(rows, cols);
  return entries_.emplace(name, std::move(entry)).first->second.value;
}

bool ParamStore::contains(const std::string& name) const {
  return entries_.count(name) != 0;
}

Mat& ParamStore::get(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw std::out_of_range("unknown parameter: " + name);
  }
  return it->second.value;
}

const Mat& ParamStore::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw std::out_of_range("unknown parameter: " + name);
  }
  return it->second.value;
}

std::int64_t ParamStore::scalar_count() const {
  std::int64_t n = 0;
  for (const auto& name : names_) n += entries_.at(name).value.size();
  return n;
}

ParamList ParamStore::as_param_list() const {
  ParamList out;
  out.reserve(names_.size());
  for (const auto& name : names_) out.emplace_back(name, entries_.at(name).value);
  return out;
}

void ParamStore::load_param_list(const ParamList& params) {
  for (const auto& [name, value] : params) {
    Mat& dst = get(name);
    if (dst.rows() != value.rows() || dst.cols() != value.cols()) {
      throw std::invalid_argument("shape mismatch loading parameter " + name);
    }
    dst = value;
  }
}

void ParamStore::adam_step(const std::map<std::string, Mat>& grads,
                           const TrainConfig& t) {
  ++adam_t_;
  const double bc1 = 1.0 - std::pow(t.beta1, static_cast<double>(adam_t_));
  const double bc2 = 1.0 - std::pow(t.beta2, static_cast<double>(adam_t_));
  for (const auto& name : names_) {
    Entry& e = entries_.at(name);
    auto it = grads.find(name);
    if (it == grads.end()) {
      e.m *= t.beta1;
      e.v *= t.beta2;
    } else {
      const Mat& g = it->second;
      e.m = t.beta1 * e.m + (1.0 - t.beta1) * g;
      e.v = t.beta2 * e.v + (1.0 - t.beta2) * g.cwiseProduct(g);
    }
    const Mat m_hat = e.m / bc1;
    const Mat v_hat = e.v / bc2;
    e.value.array() -=
        t.lr * m_hat.array() / (v_hat.array().sqrt() + t.adam_eps);
  }
}

void ParamStore::save_checkpoint(const std::string& prefix,
                                 const RunConfig& cfg, std::int64_t step) const {
  json tensors = json::array();
  json opt_tensors = json::array();
  std::uint64_t offset = 0;
  auto describe = [&offset](const std::string& name, const Mat& m) {
    json d{{"name", name},
           {"rows", m.rows()},
           {"cols", m.cols()},
           {"dtype", "f64"},
           {"offset", offset}};
    offset += static_cast<std::uint64_t>(m.size()) * sizeof(double);
    return d;
  };
  for (const auto& name : names_) {
    tensors.push_back(describe(name, entries_.at(name).value));
  }
  for (const auto& name : names_) {
    opt_tensors.push_back(describe("adam_m/" + name, entries_.at(name).m));
    opt_tensors.push_back(describe("adam_v/" + name, entries_.at(name).v));
  }
  json manifest{{"version", 1},
                {"step", step},
                {"adam_t", adam_t_},
                {"config", to_json(cfg)},
                {"tensors", tensors},
                {"opt_tensors", opt_tensors}};
  write_text_file(prefix + ".json", manifest.dump(2) + "\n");

  std::ofstream blob(prefix + ".bin", std::ios::binary | std::ios::trunc);
  if (!blob) throw std::runtime_error("cannot write " + prefix + ".bin");
  for (const auto& name : names_) {
    const Mat& m = entries_.at(name).value;
    write_doubles(blob, m.data(), static_cast<std::size_t>(m.size()));
  }
  for (const auto& name : names_) {
    const Entry& e = entries_.at(name);
    write_doubles(blob, e.m.data(), static_cast<std::size_t>(e.m.size()));
    write_doubles(blob, e.v.data(), static_cast<std::size_t>(e.v.size()));
  }
  if (!blob) throw std::runtime_error("write failed: " + prefix + ".bin");
}

ParamStore::Loaded ParamStore::load_checkpoint(const std::string& prefix) {
  json manifest = json::parse(read_text_file(prefix + ".json"));
  if (!manifest.contains("version") || manifest.at("version").get<int>() != 1) {
    throw std::runtime_error("checkpoint " + prefix + ": unsupported version");
  }
  Loaded loaded;
  loaded.config = run_config_from_json(manifest.at("config"));
  loaded.step = manifest.at("step").get<std::int64_t>();
  adam_t_ = manifest.at("adam_t").get<std::int64_t>();

  names_.clear();
  entries_.clear();
  std::ifstream blob(prefix + ".bin", std::ios::binary);
  if (!blob) throw std::runtime_error("cannot open " + prefix + ".bin");

  auto read_into = [&blob, prefix](Mat& dst, const json& desc) {
    const auto rows = desc.at("rows").get<Eigen::Index>();
    const auto cols = desc.at("cols").get<Eigen::Index>();
    if (desc.at("dtype").get<std::string>() != "f64") {
      throw std::runtime_error("checkpoint " + prefix + ": unsupported dtype");
    }
    dst.resize(rows, cols);
    blob.seekg(static_cast<std::streamoff>(desc.at("offset").get<std::uint64_t>()));
    read_doubles(blob, dst.data(), static_cast<std::size_t>(dst.size()));
  };

  for (const auto& desc : manifest.at("tensors")) {
    const std::string name = desc.at("name").get<std::string>();
    names_.push_back(name);
    Entry entry;
    read_into(entry.value, desc);
    entry.m = Mat::Zero(entry.value.rows(), entry.value.cols());
    entry.v = Mat::Zero(entry.value.rows(), entry.value.cols());
    entries_.emplace(name, std::move(entry));
  }
  for (const auto& desc : manifest.at("opt_tensors")) {
    const std::string full = desc.at("name").get<std::string>();
    const auto slash = full.find('/');
    const std::string kind = full.substr(0, slash);
    const std::string name = full.substr(slash + 1);
    Entry& entry = entries_.at(name);
    if (kind == "adam_m") {
      read_into(entry.m, desc);
    } else if (kind == "adam_v") {
      read_into(entry.v, desc);
    } else {
      throw std::runtime_error("checkpoint " + prefix +
                               ": unknown optimizer tensor " + full);
    }
  }
  return loaded;
}

namespace {

void fill_normal(Mat& m, Rng& rng, double sd) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = sd * rng.normal();
  }
}

void add_mlp2(ParamStore& store, Rng& rng, const std::string& prefix,
              Eigen::Index in, Eigen::Index hidden, Eigen::Index out) {
  fill_normal(store.add(prefix + ".w1", in, hidden), rng,
              1.0 / std::sqrt(static_cast<double>(in)));
  store.add(prefix + ".b1", 1, hidden);
  fill_normal(store.add(prefix + ".w2", hidden, out), rng,
              1.0 / std::sqrt(static_cast<double>(hidden)));
  store.add(prefix + ".b2", 1, out);
}

}  // namespace

void register_model_params(ParamStore& store, const RunConfig& cfg,
                           std::uint64_t seed) {
  Rng rng(seed ^ 0x9d5c0f2b3e81a76dULL);
  const auto& m = cfg.model;
  const auto& w = cfg.world;
  const Eigen::Index d = m.d;
  const Eigen::Index h = m.ffn_hidden_or_default();
  const Eigen::Index half = d / 2;
  const double emb_sd = 0.1;

  auto add_table = [&](const std::string& name, Eigen::Index rows,
                       Eigen::Index cols) {
    fill_normal(store.add(name, rows, cols), rng, emb_sd);
  };

  // Item/author/tag vocabularies reserve one out-of-vocabulary row at the
  // end. With share_item_embeddings both towers read the same tables;
  // otherwise the user side gets its own copies.
  add_table("emb.item_id", w.n_items + 1, d);
  add_table("emb.item_author", w.n_authors + 1, d);
  add_table("emb.item_tag", w.n_tags + 1, d);
  if (!m.share_item_embeddings) {
    add_table("emb.user_item", w.n_items + 1, d);
    add_table("emb.user_author", w.n_authors + 1, d);
    add_table("emb.user_tag", w.n_tags + 1, d);
  }
  add_table("emb.age", w.n_age_buckets, d);
  add_table("emb.gender", w.n_genders, d);
  add_table("emb.region", w.n_regions, d);
  add_table("emb.user_id", w.n_users + 1, half);
  add_table("emb.device_id", w.n_users + 1, half);

  add_mlp2(store, rng, "user.behavior", 3 * d + 4, d, d);

  const Eigen::Index query_width = m.include_user_ids_in_query ? 5 * d : 4 * d;
  for (Eigen::Index k = 0; k < m.n_objectives; ++k) {
    add_mlp2(store, rng, "user.query.k" + std::to_string(k), query_width, d, d);
  }

  if (m.use_positional_embedding) {
    add_table("user.pos", m.n_max + m.n_objectives, d);
  }

  for (Eigen::Index l = 0; l < m.layers; ++l) {
    const std::string lp = "user.layer" + std::to_string(l);
    store.add(lp + ".attn_norm.gain", 1, d).setOnes();
    fill_normal(store.add(lp + ".attn.wq", d, d), rng,
                1.0 / std::sqrt(static_cast<double>(d)));
    fill_normal(store.add(lp + ".attn.wk", d, d), rng,
                1.0 / std::sqrt(static_cast<double>(d)));
    fill_normal(store.add(lp + ".attn.wv", d, d), rng,
                1.0 / std::sqrt(static_cast<double>(d)));
    if (l + 1 == m.pformer_layer) {
      add_mlp2(store, rng, lp + ".pffn.gate_ffn", d, h, d);
      fill_normal(store.add(lp + ".pffn.gate.w", 2 * d, m.n_experts), rng,
                  1.0 / std::sqrt(static_cast<double>(2 * d)));
      store.add(lp + ".pffn.gate.b", 1, m.n_experts);
      for (Eigen::Index e = 0; e < m.n_experts; ++e) {
        add_mlp2(store, rng, lp + ".pffn.expert" + std::to_string(e), d, h, d);
      }
    } else {
      add_mlp2(store, rng, lp + ".ffn", d, h, d);
    }
  }

  for (Eigen::Index k = 0; k < m.n_objectives; ++k) {
    add_mlp2(store, rng, "user.readout.k" + std::to_string(k), d, d, d);
  }

  // Item tower MLPs.
  const Eigen::Index item_width = 3 * d + 1;
  if (m.item_shared_mlp) {
    add_mlp2(store, rng, "item.shared", item_width, d, d);
  } else {
    for (Eigen::Index k = 0; k < m.n_objectives; ++k) {
      add_mlp2(store, rng, "item.k" + std::to_string(k), item_width, d, d);
    }
  }

  // Quota head: hidden layer random, output layer zero so the initial weight
  // vector is exactly uniform.
  fill_normal(store.add("quota.w1", item_width, d), rng,
              1.0 / std::sqrt(static_cast<double>(item_width)));
  store.add("quota.b1", 1, d);
  store.add("quota.w2", d, m.n_objectives);
  store.add("quota.b2", 1, m.n_objectives);
}

LeafSet::LeafSet(Tape& tape, const std::vector<std::string>& names,
                 const std::vector<Var>& leaves)
    : tape_(&tape), store_(nullptr), requires_grad_(false) {
  if (names.size() != leaves.size()) {
    throw std::invalid_argument("LeafSet: names/leaves size mismatch");
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    cache_.emplace(names[i], leaves[i]);
  }
}

Var LeafSet::operator[](const std::string& name) {
  auto it = cache_.find(name);
  if (it != cache_.end()) return it->second;
  if (store_ == nullptr) {
    throw std::out_of_range("LeafSet: unbound parameter " + name);
  }
  Var v = tape_->leaf(store_->get(name), requires_grad_);
  cache_.emplace(name, v);
  return v;
}

std::map<std::string, Mat> LeafSet::gradients() {
  std::map<std::string, Mat> out;
  for (auto& [name, var] : cache_) out[name] = tape_->grad(var);
  return out;
}

}  // namespace mtret
