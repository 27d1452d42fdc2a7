#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "mtret/grad_check.hpp"
#include "mtret/rng.hpp"
#include "mtret/tape.hpp"

using mtret::Mat;
using mtret::Rng;
using mtret::Tape;
using mtret::Var;

namespace {

Mat random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double sd = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = sd * rng.normal();
  return m;
}

}  // namespace

TEST_CASE("matmul forward matches hand arithmetic") {
  Tape tape;
  Var i2 = tape.constant(Mat::Identity(2, 2));
  Var j2 = tape.constant(Mat::Identity(2, 2));
  CHECK(mtret::matmul(i2, j2).value().isApprox(Mat::Identity(2, 2)));

  Mat a(2, 2);
  a << 1, 2, 3, 4;
  Mat b(2, 1);
  b << 1, 1;
  Var prod = mtret::matmul(tape.constant(a), tape.constant(b));
  CHECK(prod.value()(0, 0) == doctest::Approx(3));
  CHECK(prod.value()(1, 0) == doctest::Approx(7));

  Var z = mtret::matmul(tape.constant(a), tape.constant(Mat::Zero(2, 3)));
  CHECK(z.value().isZero(0.0));
}

TEST_CASE("matmul rejects mismatched inner extents") {
  Tape tape;
  Var a = tape.constant(Mat::Zero(2, 3));
  Var b = tape.constant(Mat::Zero(2, 3));
  CHECK_THROWS_AS(mtret::matmul(a, b), std::invalid_argument);
}

TEST_CASE("matmul gradient rule") {
  Rng rng(7);
  Tape tape;
  Var a = tape.leaf(random_mat(rng, 3, 4));
  Var b = tape.leaf(random_mat(rng, 4, 2));
  Var loss = mtret::sum_all(mtret::matmul(a, b));
  tape.backward(loss);
  // d/da sum(a b) = ones * b^T, d/db = a^T * ones
  Mat ga = Mat::Ones(3, 2) * b.value().transpose();
  Mat gb = a.value().transpose() * Mat::Ones(3, 2);
  CHECK(tape.grad(a).isApprox(ga, 1e-12));
  CHECK(tape.grad(b).isApprox(gb, 1e-12));
}

TEST_CASE("rmsnorm closed forms") {
  Tape tape;
  Mat x(1, 3);
  x << 2, 2, 2;
  Var gain = tape.constant(Mat::Ones(1, 3));
  Var y = mtret::rmsnorm(tape.constant(x), gain, 1e-15);
  CHECK(y.value()(0, 0) == doctest::Approx(1.0).epsilon(1e-7));
  CHECK(y.value()(0, 2) == doctest::Approx(1.0).epsilon(1e-7));

  Mat x2(1, 2);
  x2 << 3, 4;
  Var g2 = tape.constant(Mat::Ones(1, 2));
  Var y2 = mtret::rmsnorm(tape.constant(x2), g2, 1e-15);
  CHECK(y2.value()(0, 0) == doctest::Approx(3.0 / std::sqrt(12.5)).epsilon(1e-9));
  CHECK(y2.value()(0, 1) == doctest::Approx(4.0 / std::sqrt(12.5)).epsilon(1e-9));

  Var y3 = mtret::rmsnorm(tape.constant(Mat::Zero(1, 4)),
                          tape.constant(Mat::Ones(1, 4)), 1e-6);
  CHECK(y3.value().isZero(0.0));
}

TEST_CASE("rmsnorm of a constant positive vector recovers the gain") {
  Tape tape;
  Mat x = Mat::Constant(2, 5, 3.7);
  Mat gain(1, 5);
  gain << 0.5, 1.0, 1.5, 2.0, 2.5;
  Var y = mtret::rmsnorm(tape.constant(x), tape.constant(gain), 1e-12);
  for (Eigen::Index i = 0; i < 2; ++i)
    for (Eigen::Index j = 0; j < 5; ++j)
      CHECK(std::abs(y.value()(i, j) - gain(0, j)) < 1e-8);
}

TEST_CASE("rmsnorm validates eps") {
  Tape tape;
  Var x = tape.constant(Mat::Ones(1, 3));
  Var g = tape.constant(Mat::Ones(1, 3));
  CHECK_THROWS_AS(mtret::rmsnorm(x, g, 0.0), std::invalid_argument);
}

TEST_CASE("softmax closed forms and shift invariance") {
  Tape tape;
  Mat x(1, 2);
  x << 0, 0;
  Var p = mtret::softmax_rows(tape.constant(x), 1.0);
  CHECK(p.value()(0, 0) == doctest::Approx(0.5).epsilon(1e-14));

  Mat x2(1, 2);
  x2 << 1, 0;
  Var p2 = mtret::softmax_rows(tape.constant(x2), 1.0);
  const double e = std::exp(1.0);
  CHECK(p2.value()(0, 0) == doctest::Approx(e / (e + 1)).epsilon(1e-14));
  CHECK(p2.value()(0, 1) == doctest::Approx(1 / (e + 1)).epsilon(1e-14));

  Rng rng(11);
  Mat z = random_mat(rng, 4, 6, 10.0);
  Mat shifted = z;
  for (Eigen::Index i = 0; i < z.rows(); ++i) shifted.row(i).array() += 123.25;
  Var pz = mtret::softmax_rows(tape.constant(z), 2.5);
  Var ps = mtret::softmax_rows(tape.constant(shifted), 2.5);
  CHECK(pz.value().isApprox(ps.value(), 1e-12));
}

TEST_CASE("softmax rejects non-positive temperature") {
  Tape tape;
  Var x = tape.constant(Mat::Zero(1, 3));
  CHECK_THROWS_AS(mtret::softmax_rows(x, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(mtret::softmax_rows(x, -1.0), std::invalid_argument);
}

TEST_CASE("softmax rows sum to one for large random logits") {
  Rng rng(13);
  Tape tape;
  for (int rep = 0; rep < 20; ++rep) {
    Mat x(5, 9);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < x.cols(); ++j)
        x(i, j) = 100.0 * rng.uniform() - 50.0;
    Var p = mtret::softmax_rows(tape.constant(x), 1.0);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      CHECK(std::abs(p.value().row(i).sum() - 1.0) < 1e-12);
      CHECK(p.value().row(i).minCoeff() >= 0.0);
    }
  }
}

TEST_CASE("gelu values and asymptotes") {
  Tape tape;
  Mat x(1, 4);
  x << 0.0, 1.0, 30.0, -30.0;
  Var y = mtret::gelu(tape.constant(x));
  CHECK(y.value()(0, 0) == 0.0);
  // Phi(1) frozen from the Gaussian CDF
  CHECK(y.value()(0, 1) == doctest::Approx(0.8413447460685429).epsilon(1e-12));
  CHECK(y.value()(0, 2) == doctest::Approx(30.0).epsilon(1e-12));
  CHECK(std::abs(y.value()(0, 3)) < 1e-12);
}

TEST_CASE("masked softmax ignores disallowed entries entirely") {
  Tape tape;
  Mat x(2, 3);
  x << 1.0, 5000.0, 2.0,  // huge disallowed logit must not overflow the row
      0.0, 0.0, 0.0;
  mtret::MaskX allowed(2, 3);
  allowed << true, false, true, true, true, false;
  Var p = mtret::masked_softmax_rows(tape.constant(x), allowed);
  CHECK(p.value()(0, 1) == 0.0);
  const double e1 = std::exp(1.0), e2 = std::exp(2.0);
  CHECK(p.value()(0, 0) == doctest::Approx(e1 / (e1 + e2)).epsilon(1e-14));
  CHECK(p.value()(1, 0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(p.value()(1, 2) == 0.0);
}

TEST_CASE("logsumexp matches direct evaluation") {
  Rng rng(17);
  Tape tape;
  Mat x = random_mat(rng, 3, 5, 3.0);
  Var l = mtret::logsumexp_rows(tape.constant(x));
  for (Eigen::Index i = 0; i < 3; ++i) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < 5; ++j) s += std::exp(x(i, j));
    CHECK(l.value()(i, 0) == doctest::Approx(std::log(s)).epsilon(1e-12));
  }
}

TEST_CASE("select_rows accumulates duplicate gradient") {
  Tape tape;
  Var table = tape.leaf(Mat::Ones(4, 2));
  Var rows = mtret::select_rows(table, {1, 1, 3});
  tape.backward(mtret::sum_all(rows));
  Mat g = tape.grad(table);
  CHECK(g(1, 0) == 2.0);
  CHECK(g(3, 0) == 1.0);
  CHECK(g(0, 0) == 0.0);
}

TEST_CASE("topk renorm degenerate mixtures") {
  Tape tape;
  Mat p(1, 4);
  p << 0.1, 0.4, 0.2, 0.3;
  // keep == n: unchanged (already sums to one)
  Var full = mtret::topk_renorm_rows(tape.constant(p), 4);
  CHECK(full.value().isApprox(p, 1e-14));
  // keep == 1: argmax entry becomes exactly 1
  Var one = mtret::topk_renorm_rows(tape.constant(p), 1);
  CHECK(one.value()(0, 1) == 1.0);
  CHECK(one.value().sum() == 1.0);
  // keep == 2: the two largest renormalized
  Var two = mtret::topk_renorm_rows(tape.constant(p), 2);
  CHECK(two.value()(0, 1) == doctest::Approx(0.4 / 0.7).epsilon(1e-14));
  CHECK(two.value()(0, 3) == doctest::Approx(0.3 / 0.7).epsilon(1e-14));
  CHECK(two.value()(0, 0) == 0.0);
  CHECK(std::abs(two.value().sum() - 1.0) < 1e-12);
}

TEST_CASE("backward of sum gives ones and of <x,x> gives 2x") {
  Rng rng(19);
  {
    Tape tape;
    Var x = tape.leaf(random_mat(rng, 3, 4));
    tape.backward(mtret::sum_all(x));
    CHECK(tape.grad(x).isApprox(Mat::Ones(3, 4), 1e-15));
  }
  {
    Tape tape;
    Var x = tape.leaf(random_mat(rng, 2, 5));
    tape.backward(mtret::sum_all(mtret::hadamard(x, x)));
    CHECK(tape.grad(x).isApprox(Mat(2.0 * x.value()), 1e-13));
  }
}

TEST_CASE("backward rejects non-scalar loss and repeated replay") {
  Tape tape;
  Var x = tape.leaf(Mat::Ones(2, 2));
  CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
  Var s = mtret::sum_all(x);
  tape.backward(s);
  CHECK_THROWS_AS(tape.backward(s), std::logic_error);
}

TEST_CASE("gradient accumulates across shared uses") {
  Tape tape;
  Var x = tape.leaf(Mat::Constant(1, 1, 3.0));
  Var y = mtret::add(x, x);  // y = 2x
  tape.backward(mtret::sum_all(y));
  CHECK(tape.grad(x)(0, 0) == 2.0);
}

namespace {

// Composes most primitives into one scalar; used for the per-op
// finite-difference sweep below.
mtret::Var composed_loss(Tape& tape, const std::vector<Var>& leaves) {
  Var x = leaves[0];       // 4 x 6
  Var w = leaves[1];       // 6 x 6
  Var bias = leaves[2];    // 1 x 6
  Var gain = leaves[3];    // 1 x 6
  Var table = leaves[4];   // 5 x 6
  Var gate = leaves[5];    // 4 x 3

  Var h = mtret::linear(x, w, bias);
  h = mtret::gelu(h);
  h = mtret::rmsnorm(h, gain, 1e-6);
  Var picked = mtret::select_rows(table, {0, 2, 2, 4});
  h = mtret::add(h, picked);
  Var att = mtret::matmul(h, mtret::transpose(h));
  mtret::MaskX causal(4, 4);
  for (Eigen::Index i = 0; i < 4; ++i)
    for (Eigen::Index j = 0; j < 4; ++j) causal(i, j) = j <= i;
  Var a = mtret::masked_softmax_rows(mtret::scale(att, 0.5), causal);
  Var mixed = mtret::matmul(a, h);
  Var nrm = mtret::l2normalize_rows(mixed);
  Var scores = mtret::softmax_rows(gate, 1.7);
  Var kept = mtret::topk_renorm_rows(scores, 2);
  Var lse = mtret::logsumexp_rows(mixed);
  Var pooled = mtret::colwise_sum(nrm);
  Var parts = mtret::concat_cols({pooled, mtret::colwise_sum(kept)});
  Var d = mtret::rowwise_dot(mtret::slice_cols(parts, 0, 3),
                             mtret::slice_cols(parts, 3, 3));
  return mtret::sum_all(
      mtret::concat_rows({d, lse, mtret::diag_as_col(a)}));
}

}  // namespace

TEST_CASE("every differentiable op matches central finite differences") {
  Rng rng(23);
  mtret::ParamList params;
  params.emplace_back("x", random_mat(rng, 4, 6, 0.7));
  params.emplace_back("w", random_mat(rng, 6, 6, 0.5));
  params.emplace_back("bias", random_mat(rng, 1, 6, 0.3));
  params.emplace_back("gain", Mat(Mat::Ones(1, 6) + random_mat(rng, 1, 6, 0.1)));
  params.emplace_back("table", random_mat(rng, 5, 6, 0.6));
  params.emplace_back("gate", random_mat(rng, 4, 3, 0.8));
  auto report = mtret::grad_check(composed_loss, params, 1e-5, 1e-6);
  for (const auto& entry : report.entries) {
    INFO(entry.name, " rel err ", entry.max_rel_err);
    CHECK(entry.max_rel_err <= 1e-6);
  }
}

TEST_CASE("grad_check on a linear form is exact to 1e-10") {
  Rng rng(29);
  Mat w = random_mat(rng, 1, 8);
  mtret::ParamList params;
  params.emplace_back("x", random_mat(rng, 1, 8));
  auto build = [&w](Tape& tape, const std::vector<Var>& leaves) {
    Var wv = tape.constant(w);
    return mtret::sum_all(mtret::hadamard(leaves[0], wv));
  };
  auto report = mtret::grad_check(build, params, 1e-5, 1e-10);
  CHECK(report.pass());
  CHECK(report.max_rel_err <= 1e-10);
}

TEST_CASE("grad_check flags a corrupted gradient rule") {
  Rng rng(31);
  mtret::ParamList params;
  params.emplace_back("x", random_mat(rng, 2, 3));
  auto build = [](Tape& tape, const std::vector<Var>& leaves) {
    return mtret::sum_all(mtret::hadamard(leaves[0], leaves[0]));
  };
  auto analytic = mtret::analytic_gradients(build, params);
  analytic["x"](0, 0) += 0.5;  // deliberate corruption
  auto report = mtret::grad_check(build, params, 1e-5, 1e-6, &analytic);
  CHECK_FALSE(report.pass());
}

TEST_CASE("identical tapes give bitwise identical gradients") {
  Rng rng(37);
  Mat xs = random_mat(rng, 4, 6, 0.7);
  Mat ws = random_mat(rng, 6, 6, 0.5);
  Mat bs = random_mat(rng, 1, 6, 0.3);
  Mat gs = Mat::Ones(1, 6);
  Mat ts = random_mat(rng, 5, 6, 0.6);
  Mat gates = random_mat(rng, 4, 3, 0.8);
  auto run = [&]() {
    Tape tape;
    std::vector<Var> leaves = {tape.leaf(xs),  tape.leaf(ws), tape.leaf(bs),
                               tape.leaf(gs), tape.leaf(ts), tape.leaf(gates)};
    Var loss = composed_loss(tape, leaves);
    tape.backward(loss);
    std::vector<Mat> grads;
    for (Var v : leaves) grads.push_back(tape.grad(v));
    return grads;
  };
  auto g1 = run();
  auto g2 = run();
  REQUIRE(g1.size() == g2.size());
  for (std::size_t i = 0; i < g1.size(); ++i) {
    REQUIRE(g1[i].size() == g2[i].size());
    CHECK(std::memcmp(g1[i].data(), g2[i].data(),
                      sizeof(double) * static_cast<std::size_t>(g1[i].size())) == 0);
  }
}

TEST_CASE("float instantiation works for the elementwise kernels") {
  mtret::TapeT<float> tape;
  mtret::MatX<float> x(1, 3);
  x << 1.0f, -2.0f, 0.5f;
  auto p = mtret::softmax_rows(tape.constant(x), 1.0f);
  CHECK(std::abs(p.value().sum() - 1.0f) < 1e-6f);
  auto g = mtret::gelu(tape.constant(x));
  CHECK(g.value()(0, 0) == doctest::Approx(0.8413447f).epsilon(1e-5));
}
