#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dygrasp/nn/layers.hpp"
#include "dygrasp/nn/tape.hpp"
#include "support.hpp"

using namespace dygrasp::nn;
using testing_support::grad_check;

namespace {

Mat random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Random linear readout so that every output entry carries gradient.
Var readout(Tape& t, Var out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return t.sum(t.mul(out, t.constant(random_mat(out.rows(), out.cols(), rng))));
}

constexpr double kTol = 1e-4;
constexpr std::size_t kPoints = 30;

}  // namespace

class OpGradient : public ::testing::Test {
 protected:
  void SetUp() override {
    rng_.seed(42);
    a_ = &ps_.add("a", random_mat(5, 4, rng_));
    b_ = &ps_.add("b", random_mat(4, 3, rng_));
    c_ = &ps_.add("c", random_mat(5, 4, rng_));
    row_ = &ps_.add("row", random_mat(1, 4, rng_));
  }
  void check(const std::function<Var(Tape&)>& out, std::vector<Param*> params) {
    auto r = grad_check(params, [&](Tape& t) { return readout(t, out(t), 77); }, kPoints, 5);
    EXPECT_LE(r.max_rel_err, kTol) << r.worst;
    EXPECT_GE(r.points, 20u);
  }
  std::mt19937_64 rng_;
  ParamSet ps_;
  Param *a_, *b_, *c_, *row_;
};

TEST_F(OpGradient, MatmulFamily) {
  check([&](Tape& t) { return t.matmul(t.param(*a_), t.param(*b_)); }, {a_, b_});
  check([&](Tape& t) { return t.matmul_nt(t.param(*a_), t.param(*c_)); }, {a_, c_});
}

TEST_F(OpGradient, Elementwise) {
  check([&](Tape& t) { return t.add(t.param(*a_), t.param(*c_)); }, {a_, c_});
  check([&](Tape& t) { return t.add_row(t.param(*a_), t.param(*row_)); }, {a_, row_});
  check([&](Tape& t) { return t.scale(t.param(*a_), -1.7); }, {a_});
  check([&](Tape& t) { return t.mul(t.param(*a_), t.param(*c_)); }, {a_, c_});
  check([&](Tape& t) { return t.gelu(t.param(*a_)); }, {a_});
  check([&](Tape& t) { return t.cos(t.param(*a_)); }, {a_});
  check([&](Tape& t) { return t.softmax_rows(t.param(*a_)); }, {a_});
}

TEST_F(OpGradient, Shapes) {
  check([&](Tape& t) { return t.concat_cols({t.param(*a_), t.param(*c_)}); }, {a_, c_});
  check([&](Tape& t) { return t.concat_rows({t.param(*a_), t.param(*row_)}); }, {a_, row_});
  check([&](Tape& t) { return t.slice_cols(t.param(*a_), 1, 2); }, {a_});
  check([&](Tape& t) { return t.slice_rows(t.param(*a_), 2, 3); }, {a_});
  check([&](Tape& t) { return t.mean_rows(t.param(*a_)); }, {a_});
  check([&](Tape& t) { return t.gather_rows(t.param(*a_), {4, 0, 4, 2}); }, {a_});
  check([&](Tape& t) { return t.segment_mean(t.param(*a_), {{0, 2}, {2, 0}, {2, 3}}); }, {a_});
}

TEST_F(OpGradient, LayerNormAndLoss) {
  auto& gamma = ps_.add("gamma", random_mat(1, 4, rng_));
  auto& beta = ps_.add("beta", random_mat(1, 4, rng_));
  check([&](Tape& t) { return t.layer_norm(t.param(*a_), t.param(gamma), t.param(beta)); },
        {a_, &gamma, &beta});
  Eigen::VectorXd labels(5);
  labels << 1, 0, 1, 1, 0;
  auto& logits = ps_.add("logits", random_mat(5, 1, rng_, 2.0));
  auto r = grad_check({&logits}, [&](Tape& t) { return t.bce_with_logits(t.param(logits), labels); },
                      kPoints, 6);
  EXPECT_LE(r.max_rel_err, kTol) << r.worst;
}

TEST_F(OpGradient, DropoutWithFixedMask) {
  check([&](Tape& t) {
    std::mt19937_64 mask_rng(3);
    return t.dropout(t.param(*a_), 0.3, mask_rng);
  }, {a_});
}

TEST_F(OpGradient, SegmentAttention) {
  auto& q = ps_.add("q", random_mat(6, 4, rng_));
  auto& k = ps_.add("k", random_mat(7, 4, rng_));
  auto& v = ps_.add("v", random_mat(7, 3, rng_));
  std::vector<RowRange> qr{{0, 2}, {2, 1}, {3, 3}};
  std::vector<RowRange> kr{{0, 3}, {3, 0}, {3, 4}};
  check([&](Tape& t) {
    return t.segment_attention(t.param(q), t.param(k), t.param(v), qr, kr, 0.5);
  }, {&q, &k, &v});
}

TEST(SegmentAttention, MatchesDenseAttentionPerSegment) {
  std::mt19937_64 rng(1);
  Mat q = random_mat(5, 3, rng), k = random_mat(6, 3, rng), v = random_mat(6, 2, rng);
  Tape t(false);
  auto out = t.segment_attention(t.constant(q), t.constant(k), t.constant(v),
                                 {{0, 2}, {2, 1}, {3, 2}}, {{0, 4}, {4, 2}, {6, 0}}, 0.7);
  auto dense = [&](Mat qs, Mat ks, Mat vs) {
    Mat s = 0.7 * qs * ks.transpose();
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      s.row(r) = (s.row(r).array() - s.row(r).maxCoeff()).exp();
      s.row(r) /= s.row(r).sum();
    }
    return Mat(s * vs);
  };
  Mat expect(5, 2);
  expect.topRows(2) = dense(q.topRows(2), k.topRows(4), v.topRows(4));
  expect.row(2) = dense(q.middleRows(2, 1), k.middleRows(4, 2), v.middleRows(4, 2));
  expect.bottomRows(2).setZero();  // empty key range
  EXPECT_TRUE(out.value().isApprox(expect, 1e-12));
}

TEST(Layers, SingletonAttentionReturnsItsValue) {
  std::mt19937_64 rng(2);
  ParamSet ps;
  auto mha = MultiHeadAttention::make(ps, "mha", 4, 6, 4, 2, rng);
  Mat q = random_mat(1, 4, rng), kv = random_mat(1, 6, rng);
  Tape t(false);
  auto out = mha(t, t.constant(q), t.constant(kv));
  // With one key every head puts weight 1 on it.
  Mat value = kv * mha.value.weight->value;
  value.rowwise() += mha.value.bias->value.row(0);
  Mat expect = value * mha.output.weight->value;
  expect.rowwise() += mha.output.bias->value.row(0);
  EXPECT_TRUE(out.value().isApprox(expect, 1e-12));
}

TEST(Layers, TransformerBlockIsPermutationEquivariant) {
  std::mt19937_64 rng(3);
  ParamSet ps;
  auto block = TransformerBlock::make(ps, "blk", 6, 2, 2, 0.0, rng);
  Mat x = random_mat(5, 6, rng);
  std::vector<int> perm{3, 0, 4, 1, 2};
  Mat px(5, 6);
  for (int i = 0; i < 5; ++i) px.row(i) = x.row(perm[i]);
  Tape t(false);
  Mat y = block(t, t.constant(x), nullptr).value();
  Mat py = block(t, t.constant(px), nullptr).value();
  for (int i = 0; i < 5; ++i) EXPECT_TRUE(py.row(i).isApprox(y.row(perm[i]), 1e-12));

  Mat one = random_mat(1, 6, rng);
  Mat y1 = block(t, t.constant(one), nullptr).value();
  EXPECT_TRUE(y1.allFinite());
  EXPECT_EQ(y1.rows(), 1);
}

TEST(Layers, StackedSequencesMatchSeparateCalls) {
  std::mt19937_64 rng(4);
  ParamSet ps;
  auto block = TransformerBlock::make(ps, "blk", 4, 2, 2, 0.0, rng);
  Mat a = random_mat(3, 4, rng), b = random_mat(2, 4, rng);
  Mat stacked(5, 4);
  stacked << a, b;
  Tape t(false);
  Mat joint = block(t, t.constant(stacked), {{0, 3}, {3, 2}}, nullptr).value();
  Mat ya = block(t, t.constant(a), nullptr).value();
  Mat yb = block(t, t.constant(b), nullptr).value();
  EXPECT_TRUE(joint.topRows(3).isApprox(ya, 1e-12));
  EXPECT_TRUE(joint.bottomRows(2).isApprox(yb, 1e-12));
}

TEST(Layers, BlockGradients) {
  std::mt19937_64 rng(5);
  ParamSet ps;
  auto block = TransformerBlock::make(ps, "blk", 4, 2, 2, 0.0, rng);
  auto mlp = Mlp::make(ps, "mlp", 4, 6, 3, rng);
  auto& x = ps.add("x", random_mat(4, 4, rng));
  std::vector<Param*> all;
  for (auto& p : ps.params()) all.push_back(&p);
  auto r = grad_check(all, [&](Tape& t) {
    auto h = block(t, t.param(x), {{0, 3}, {3, 1}}, nullptr);
    return readout(t, mlp(t, h, nullptr), 9);
  }, 60, 10);
  EXPECT_LE(r.max_rel_err, kTol) << r.worst;
}

TEST(Adam, MatchesHandComputedStep) {
  ParamSet ps;
  auto& p = ps.add("p", Mat::Constant(1, 2, 1.0));
  p.grad = Mat(1, 2);
  p.grad << 0.5, -2.0;
  Adam adam({.learning_rate = 0.1});
  adam.step(ps);
  // First step: m̂ = g, v̂ = g², update = lr * g / (|g| + eps).
  EXPECT_NEAR(p.value(0, 0), 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_NEAR(p.value(0, 1), 1.0 + 0.1 * 2.0 / (2.0 + 1e-8), 1e-12);
  EXPECT_EQ(adam.steps(), 1u);
}

TEST(Glorot, WithinBound) {
  std::mt19937_64 rng(6);
  Mat w = glorot(30, 20, rng);
  double bound = std::sqrt(6.0 / 50.0);
  EXPECT_LE(w.cwiseAbs().maxCoeff(), bound);
  EXPECT_GT(w.cwiseAbs().maxCoeff(), 0.5 * bound);
}

TEST(Tape, GradientsAccumulateAcrossUses) {
  ParamSet ps;
  auto& p = ps.add("p", Mat::Constant(1, 1, 3.0));
  ps.zero_grad();
  Tape t;
  auto x = t.param(p);
  auto y = t.sum(t.add(t.mul(x, x), x));  // x² + x
  t.backward(y);
  EXPECT_DOUBLE_EQ(p.grad(0, 0), 7.0);
}
