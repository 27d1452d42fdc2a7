#include "mtret/quota.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "mtret/io.hpp"

namespace mtret {

using nlohmann::json;

void ItemWeightStore::add(std::int64_t item, Eigen::VectorXd w) {
  if (w.size() != k_) {
    throw std::invalid_argument("weight store: wrong objective count");
  }
  if (w.minCoeff() < 0.0 || std::abs(w.sum() - 1.0) > 1e-9) {
    throw std::invalid_argument(
        "weight store: vector is not a probability simplex");
  }
  weights_[item] = std::move(w);
}

const Eigen::VectorXd& ItemWeightStore::get(std::int64_t item) const {
  auto it = weights_.find(item);
  if (it == weights_.end()) {
    throw std::out_of_range("weight store: unknown item " +
                            std::to_string(item));
  }
  return it->second;
}

void ItemWeightStore::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  // Sorted by item id so saves are byte-stable.
  std::vector<std::int64_t> items;
  items.reserve(weights_.size());
  for (const auto& [item, w] : weights_) items.push_back(item);
  std::sort(items.begin(), items.end());
  for (std::int64_t item : items) {
    const Eigen::VectorXd& w = weights_.at(item);
    std::vector<double> vals(w.data(), w.data() + w.size());
    out << json{{"item", item}, {"w", vals}}.dump() << "\n";
  }
}

ItemWeightStore ItemWeightStore::load(const std::string& path) {
  ItemWeightStore store;
  bool first = true;
  for_each_jsonl(path, [&](const json& j) {
    const auto vals = j.at("w").get<std::vector<double>>();
    if (first) {
      store.k_ = static_cast<std::int64_t>(vals.size());
      first = false;
    }
    Eigen::VectorXd w(vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i) {
      w(static_cast<Eigen::Index>(i)) = vals[i];
    }
    store.add(j.at("item").get<std::int64_t>(), std::move(w));
  });
  return store;
}

Eigen::VectorXd aggregate_user_weights(std::span<const std::int64_t> history,
                                       const ItemWeightStore& store) {
  const Eigen::Index k = store.n_objectives();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(k);
  for (std::int64_t item : history) {
    if (store.contains(item)) sum += store.get(item);
  }
  const double mx = sum.maxCoeff();
  Eigen::VectorXd e = (sum.array() - mx).exp();
  return e / e.sum();
}

std::vector<std::int64_t> allocate_quota(const Eigen::VectorXd& weights,
                                         std::int64_t q_total) {
  const Eigen::Index k = weights.size();
  if (k < 1) throw std::invalid_argument("allocate_quota: empty weights");
  if (q_total < 0) throw std::invalid_argument("allocate_quota: q_total < 0");
  if (weights.minCoeff() < 0.0 || std::abs(weights.sum() - 1.0) > 1e-6) {
    throw std::invalid_argument("allocate_quota: weights must be a simplex");
  }
  std::vector<std::int64_t> quota(static_cast<std::size_t>(k), 0);
  std::vector<double> frac(static_cast<std::size_t>(k), 0.0);
  std::int64_t assigned = 0;
  for (Eigen::Index i = 0; i < k; ++i) {
    const double share = weights(i) * static_cast<double>(q_total);
    const double fl = std::floor(share);
    quota[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(fl);
    frac[static_cast<std::size_t>(i)] = share - fl;
    assigned += quota[static_cast<std::size_t>(i)];
  }
  std::int64_t leftover = q_total - assigned;
  std::vector<std::size_t> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return frac[a] > frac[b];
  });
  for (std::size_t i = 0; leftover > 0; i = (i + 1) % order.size()) {
    ++quota[order[i]];
    --leftover;
  }
  return quota;
}

}  // namespace mtret
