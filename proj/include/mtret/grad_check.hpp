#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mtret/tape.hpp"

namespace mtret {

// Ordered set of named parameter matrices, the unit the checker perturbs.
using ParamList = std::vector<std::pair<std::string, Mat>>;

// Builds a 1x1 loss on the given tape from one leaf per parameter, in the
// same order as the ParamList it was handed.
using LossBuilder =
    std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  Eigen::Index worst_row = 0;
  Eigen::Index worst_col = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  double tol = 0.0;

  bool pass() const { return max_rel_err <= tol; }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

inline double evaluate_loss(const LossBuilder& build, const ParamList& params) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& [name, value] : params) {
    (void)name;
    leaves.push_back(tape.constant(value));
  }
  return build(tape, leaves).value()(0, 0);
}

inline std::map<std::string, Mat> analytic_gradients(const LossBuilder& build,
                                                     const ParamList& params) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& [name, value] : params) {
    (void)name;
    leaves.push_back(tape.leaf(value, /*requires_grad=*/true));
  }
  Var loss = build(tape, leaves);
  tape.backward(loss);
  std::map<std::string, Mat> grads;
  for (std::size_t i = 0; i < params.size(); ++i) {
    grads[params[i].first] = tape.grad(leaves[i]);
  }
  return grads;
}

// Central-difference check of every scalar parameter against reverse-mode
// gradients. An explicit analytic map can be supplied (e.g. to verify that a
// corrupted gradient is flagged); by default it is computed from the builder.
inline GradCheckReport grad_check(
    const LossBuilder& build, ParamList params, double h, double tol,
    const std::map<std::string, Mat>* analytic_override = nullptr) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: h must be > 0");
  std::map<std::string, Mat> analytic =
      analytic_override ? *analytic_override : analytic_gradients(build, params);

  GradCheckReport report;
  report.tol = tol;
  for (std::size_t p = 0; p < params.size(); ++p) {
    GradCheckEntry entry;
    entry.name = params[p].first;
    Mat& value = params[p].second;
    const Mat& grad = analytic.at(entry.name);
    for (Eigen::Index r = 0; r < value.rows(); ++r) {
      for (Eigen::Index c = 0; c < value.cols(); ++c) {
        const double saved = value(r, c);
        value(r, c) = saved + h;
        const double f_plus = evaluate_loss(build, params);
        value(r, c) = saved - h;
        const double f_minus = evaluate_loss(build, params);
        value(r, c) = saved;
        const double numeric = (f_plus - f_minus) / (2.0 * h);
        const double rel = relative_error(grad(r, c), numeric);
        if (rel >= entry.max_rel_err) {
          entry.max_rel_err = rel;
          entry.worst_row = r;
          entry.worst_col = c;
          entry.analytic_at_worst = grad(r, c);
          entry.numeric_at_worst = numeric;
        }
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace mtret
