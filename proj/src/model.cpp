#include "mtret/model.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mtret {

namespace {

Eigen::Index map_or_oov(std::int64_t id, std::int64_t vocab) {
  return (id >= 0 && id < vocab) ? static_cast<Eigen::Index>(id)
                                 : static_cast<Eigen::Index>(vocab);
}

std::vector<Eigen::Index> iota_rows(Eigen::Index n) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  return idx;
}

}  // namespace

Eigen::Index Model::item_row(std::int64_t id) const {
  return map_or_oov(id, cfg_.world.n_items);
}
Eigen::Index Model::author_row(std::int64_t id) const {
  return map_or_oov(id, cfg_.world.n_authors);
}
Eigen::Index Model::tag_row(std::int64_t id) const {
  return map_or_oov(id, cfg_.world.n_tags);
}
Eigen::Index Model::user_row(std::int64_t id) const {
  return map_or_oov(id, cfg_.world.n_users);
}
Eigen::Index Model::device_row(std::int64_t id) const {
  return map_or_oov(id, cfg_.world.n_users);
}

void Model::check_profile(const UserProfile& p) const {
  const auto& w = cfg_.world;
  if (p.age < 0 || p.age >= w.n_age_buckets) {
    throw std::invalid_argument("profile.age outside vocabulary");
  }
  if (p.gender < 0 || p.gender >= w.n_genders) {
    throw std::invalid_argument("profile.gender outside vocabulary");
  }
  if (p.region < 0 || p.region >= w.n_regions) {
    throw std::invalid_argument("profile.region outside vocabulary");
  }
}

QuerySequences Model::derive_query_sequences(
    std::span<const BehaviorEvent> history) const {
  QuerySequences seqs;
  for (const auto& e : history) {
    seqs.real_show.push_back(e);
    if (e.like || e.comment || e.share) seqs.click.push_back(e);
    if (e.watch_ratio >= cfg_.model.long_view_threshold) {
      seqs.long_view.push_back(e);
    }
  }
  return seqs;
}

Var Model::build_query_tokens(LeafSet& params, const UserProfile& profile,
                              const QuerySequences& seqs) const {
  check_profile(profile);
  Tape& tape = *params["emb.age"].tape();
  const Eigen::Index d = cfg_.model.d;

  Var u = mtret::add(
      mtret::add(mtret::select_rows(params["emb.age"], {profile.age}),
                 mtret::select_rows(params["emb.gender"], {profile.gender})),
      mtret::select_rows(params["emb.region"], {profile.region}));

  const std::string item_table =
      cfg_.model.share_item_embeddings ? "emb.item_id" : "emb.user_item";
  auto pool = [&](const std::vector<BehaviorEvent>& seq) {
    if (seq.empty()) return tape.constant(Mat::Zero(1, d));
    std::vector<Eigen::Index> rows;
    rows.reserve(seq.size());
    for (const auto& e : seq) rows.push_back(item_row(e.item));
    return mtret::colwise_sum(
        mtret::select_rows(params[item_table], std::move(rows)));
  };

  std::vector<Var> parts = {u, pool(seqs.real_show), pool(seqs.click),
                            pool(seqs.long_view)};
  if (cfg_.model.include_user_ids_in_query) {
    parts.push_back(
        mtret::select_rows(params["emb.user_id"], {user_row(profile.user_id)}));
    parts.push_back(mtret::select_rows(params["emb.device_id"],
                                       {device_row(profile.device_id)}));
  }
  Var query_input = mtret::concat_cols(parts);

  std::vector<Var> tokens;
  tokens.reserve(static_cast<std::size_t>(cfg_.model.n_objectives));
  for (Eigen::Index k = 0; k < cfg_.model.n_objectives; ++k) {
    const std::string p = "user.query.k" + std::to_string(k);
    tokens.push_back(mtret::mlp2(query_input, params[p + ".w1"],
                                 params[p + ".b1"], params[p + ".w2"],
                                 params[p + ".b2"]));
  }
  return mtret::concat_rows(tokens);
}

Var Model::encode_behaviors(LeafSet& params,
                            std::span<const BehaviorEvent> events) const {
  if (events.empty()) {
    throw std::invalid_argument("encode_behaviors: empty sequence");
  }
  const bool shared = cfg_.model.share_item_embeddings;
  Tape& tape = *params[shared ? "emb.item_id" : "emb.user_item"].tape();
  const Eigen::Index n = static_cast<Eigen::Index>(events.size());

  std::vector<Eigen::Index> item_rows, author_rows, tag_rows;
  Mat feats(n, 4);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& e = events[static_cast<std::size_t>(i)];
    item_rows.push_back(item_row(e.item));
    author_rows.push_back(author_row(e.author));
    tag_rows.push_back(tag_row(e.tag));
    feats(i, 0) = e.watch_ratio;
    feats(i, 1) = e.like;
    feats(i, 2) = e.comment;
    feats(i, 3) = e.share;
  }
  Var x = mtret::concat_cols(
      {mtret::select_rows(params[shared ? "emb.item_id" : "emb.user_item"],
                          std::move(item_rows)),
       tape.constant(std::move(feats)),
       mtret::select_rows(
           params[shared ? "emb.item_author" : "emb.user_author"],
           std::move(author_rows)),
       mtret::select_rows(params[shared ? "emb.item_tag" : "emb.user_tag"],
                          std::move(tag_rows))});
  return mtret::mlp2(x, params["user.behavior.w1"], params["user.behavior.b1"],
                     params["user.behavior.w2"], params["user.behavior.b2"]);
}

Var Model::encode_behavior(LeafSet& params, const BehaviorEvent& event) const {
  const BehaviorEvent one[] = {event};
  return encode_behaviors(params, one);
}

Var Model::gate_user_embedding(LeafSet& params,
                               const UserProfile& profile) const {
  Tape& tape = *params["emb.user_id"].tape();
  if (!cfg_.model.gate_use_ids) {
    return tape.constant(Mat::Zero(1, cfg_.model.d));
  }
  return mtret::concat_cols(
      {mtret::select_rows(params["emb.user_id"], {user_row(profile.user_id)}),
       mtret::select_rows(params["emb.device_id"],
                          {device_row(profile.device_id)})});
}

Var Model::ffn_block(LeafSet& params, Var x, const std::string& prefix) const {
  return mtret::mlp2(x, params[prefix + ".w1"], params[prefix + ".b1"],
                     params[prefix + ".w2"], params[prefix + ".b2"]);
}

Var Model::pformer_ffn(LeafSet& params, Var x, Var gate_eu,
                       Eigen::Index layer) const {
  const std::string lp = "user.layer" + std::to_string(layer) + ".pffn";
  const Eigen::Index m = x.rows();

  Var gate_feat = ffn_block(params, x, lp + ".gate_ffn");
  Var gate_in = mtret::concat_cols({mtret::tile_rows(gate_eu, m), gate_feat});
  Var logits =
      mtret::linear(gate_in, params[lp + ".gate.w"], params[lp + ".gate.b"]);
  Var scores = mtret::softmax_rows(logits, 1.0);
  Var kept = mtret::topk_renorm_rows(scores, cfg_.model.expert_cut);

  Var out;
  for (Eigen::Index e = 0; e < cfg_.model.n_experts; ++e) {
    Var expert = ffn_block(params, x, lp + ".expert" + std::to_string(e));
    Var weighted =
        mtret::mul_col_broadcast(expert, mtret::slice_cols(kept, e, 1));
    out = (e == 0) ? weighted : mtret::add(out, weighted);
  }
  return out;
}

Var Model::decoder_forward(LeafSet& params, Var tokens, Var gate_eu,
                           Eigen::Index n_behaviors) const {
  const auto& m = cfg_.model;
  const Eigen::Index k_obj = m.n_objectives;
  const Eigen::Index seq = n_behaviors + k_obj;
  if (n_behaviors < 0 || n_behaviors > m.n_max) {
    throw std::invalid_argument("decoder_forward: sequence longer than n_max");
  }
  if (tokens.rows() != seq || tokens.cols() != m.d) {
    throw std::invalid_argument("decoder_forward: tokens must be (n+K) x d");
  }

  MaskX allowed(seq, seq);
  for (Eigen::Index i = 0; i < seq; ++i) {
    for (Eigen::Index j = 0; j < seq; ++j) {
      bool ok = j <= i;
      if (ok && m.mutually_masked_objectives && i >= n_behaviors &&
          j >= n_behaviors && j != i) {
        ok = false;  // objective tokens see behaviors and themselves only
      }
      allowed(i, j) = ok;
    }
  }

  Var h = tokens;
  if (m.use_positional_embedding) {
    h = mtret::add(h, mtret::select_rows(params["user.pos"], iota_rows(seq)));
  }

  const Eigen::Index heads = m.head_count;
  const Eigen::Index dh = m.d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  for (Eigen::Index l = 0; l < m.layers; ++l) {
    const std::string lp = "user.layer" + std::to_string(l);
    Var normed = mtret::rmsnorm(h, params[lp + ".attn_norm.gain"], kRmsEps);
    Var q = mtret::matmul(normed, params[lp + ".attn.wq"]);
    Var k = mtret::matmul(normed, params[lp + ".attn.wk"]);
    Var v = mtret::matmul(normed, params[lp + ".attn.wv"]);

    std::vector<Var> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (Eigen::Index hh = 0; hh < heads; ++hh) {
      Var qh = heads == 1 ? q : mtret::slice_cols(q, hh * dh, dh);
      Var kh = heads == 1 ? k : mtret::slice_cols(k, hh * dh, dh);
      Var vh = heads == 1 ? v : mtret::slice_cols(v, hh * dh, dh);
      Var logits = mtret::scale(mtret::matmul(qh, mtret::transpose(kh)),
                                inv_sqrt_dh);
      Var attn = mtret::masked_softmax_rows(logits, allowed);
      head_outs.push_back(mtret::matmul(attn, vh));
    }
    Var attn_out = heads == 1 ? head_outs[0] : mtret::concat_cols(head_outs);

    Var x = mtret::add(attn_out, h);
    Var f = (l + 1 == m.pformer_layer) ? pformer_ffn(params, x, gate_eu, l)
                                       : ffn_block(params, x, lp + ".ffn");
    h = mtret::add(f, x);
  }
  return h;
}

UserTowerOutput Model::user_tower(LeafSet& params, const UserProfile& profile,
                                  std::span<const BehaviorEvent> history,
                                  bool with_hidden) const {
  const auto& m = cfg_.model;
  // Only the most recent n_max events enter the tower.
  if (static_cast<Eigen::Index>(history.size()) > m.n_max) {
    history = history.subspan(history.size() - static_cast<std::size_t>(m.n_max));
  }
  const Eigen::Index n = static_cast<Eigen::Index>(history.size());

  Var queries = build_query_tokens(params, profile,
                                   derive_query_sequences(history));
  Var tokens = n > 0
                   ? mtret::concat_rows({encode_behaviors(params, history),
                                         queries})
                   : queries;
  Var gate_eu = gate_user_embedding(params, profile);
  Var hidden = decoder_forward(params, tokens, gate_eu, n);

  UserTowerOutput out;
  out.embeddings.reserve(static_cast<std::size_t>(m.n_objectives));
  for (Eigen::Index k = 0; k < m.n_objectives; ++k) {
    Var row = mtret::slice_rows(hidden, n + k, 1);
    const std::string p = "user.readout.k" + std::to_string(k);
    Var emb = mtret::mlp2(row, params[p + ".w1"], params[p + ".b1"],
                          params[p + ".w2"], params[p + ".b2"]);
    if (m.normalize_embeddings) emb = mtret::l2normalize_rows(emb);
    out.embeddings.push_back(emb);
  }
  if (with_hidden) {
    out.hidden = hidden;
    out.has_hidden = true;
  }
  return out;
}

Var Model::item_shared_features(LeafSet& params,
                                std::span<const ItemFeatures> items) const {
  if (items.empty()) {
    throw std::invalid_argument("item_shared_features: empty item list");
  }
  Tape& tape = *params["emb.item_id"].tape();
  const Eigen::Index n = static_cast<Eigen::Index>(items.size());
  std::vector<Eigen::Index> id_rows, author_rows, tag_rows;
  Mat pop(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& it = items[static_cast<std::size_t>(i)];
    id_rows.push_back(item_row(it.item));
    author_rows.push_back(author_row(it.author));
    tag_rows.push_back(tag_row(it.tag));
    pop(i, 0) = it.popularity;
  }
  return mtret::concat_cols(
      {mtret::select_rows(params["emb.item_id"], std::move(id_rows)),
       mtret::select_rows(params["emb.item_author"], std::move(author_rows)),
       mtret::select_rows(params["emb.item_tag"], std::move(tag_rows)),
       tape.constant(std::move(pop))});
}

std::vector<Var> Model::item_tower(LeafSet& params,
                                   std::span<const ItemFeatures> items) const {
  Var x = item_shared_features(params, items);
  std::vector<Var> out;
  out.reserve(static_cast<std::size_t>(cfg_.model.n_objectives));
  for (Eigen::Index k = 0; k < cfg_.model.n_objectives; ++k) {
    const std::string p = cfg_.model.item_shared_mlp
                              ? std::string("item.shared")
                              : "item.k" + std::to_string(k);
    Var emb = mtret::mlp2(x, params[p + ".w1"], params[p + ".b1"],
                          params[p + ".w2"], params[p + ".b2"]);
    if (cfg_.model.normalize_embeddings) emb = mtret::l2normalize_rows(emb);
    out.push_back(emb);
  }
  return out;
}

Var Model::quota_forward(LeafSet& params,
                         std::span<const ItemFeatures> items) const {
  Var x = item_shared_features(params, items);
  // The quota head trains against fine-rank scores; its input features are
  // detached so that loss reaches the head's own parameters only.
  Var x_detached = x.tape()->constant(x.value());
  Var logits = mtret::mlp2(x_detached, params["quota.w1"], params["quota.b1"],
                           params["quota.w2"], params["quota.b2"]);
  return mtret::softmax_rows(logits, 1.0);
}

Mat Model::infer_user_embeddings(const ParamStore& store, const UserProfile& profile,
                                 std::span<const BehaviorEvent> history) const {
  Tape tape;
  LeafSet params(tape, store, /*requires_grad=*/false);
  UserTowerOutput out = user_tower(params, profile, history);
  Mat embs(cfg_.model.n_objectives, cfg_.model.d);
  for (Eigen::Index k = 0; k < cfg_.model.n_objectives; ++k) {
    embs.row(k) = out.embeddings[static_cast<std::size_t>(k)].value().row(0);
  }
  return embs;
}

std::vector<Mat> Model::infer_item_embeddings(
    const ParamStore& store, std::span<const ItemFeatures> items) const {
  Tape tape;
  LeafSet params(tape, store, /*requires_grad=*/false);
  std::vector<Var> vars = item_tower(params, items);
  std::vector<Mat> out;
  out.reserve(vars.size());
  for (const Var& v : vars) out.push_back(v.value());
  return out;
}

Mat Model::infer_quota_weights(const ParamStore& store,
                               std::span<const ItemFeatures> items) const {
  Tape tape;
  LeafSet params(tape, store, /*requires_grad=*/false);
  return quota_forward(params, items).value();
}

}  // namespace mtret
