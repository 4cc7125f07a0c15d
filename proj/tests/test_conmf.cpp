#include "support.hpp"

#include "fedcourse/trainer.hpp"

#include <gtest/gtest.h>

using namespace fedcourse;
using fctest::random_matrix;

namespace {

ConMFState random_state(Rng& rng, Index m, Index n, Index d, double observed = 0.6) {
  ConMFState s;
  s.student_factors = random_matrix(rng, m, d, 0.7);
  s.course_factors = random_matrix(rng, n, d, 0.7);
  s.ratings = fctest::random_ratings(rng, m, n, observed);
  s.course_average = course_average_vector(s.ratings);
  return s;
}

double oracle(const ConMFState& s, const ConMFConfig& c) {
  return fctest::loss_oracle(s.student_factors, s.course_factors, s.ratings.values, s.ratings.mask,
                             s.course_average, c.beta, c.gamma, c.masked);
}

// Random orthogonal matrix from Gram-Schmidt.
Matrix random_rotation(Rng& rng, Index d) {
  Matrix q = random_matrix(rng, d, d);
  for (Index j = 0; j < d; ++j) {
    for (Index k = 0; k < j; ++k) q.col(j) -= q.col(k).dot(q.col(j)) * q.col(k);
    q.col(j).normalize();
  }
  return q;
}

}  // namespace

TEST(Predict, Examples) {
  Matrix e(1, 3);
  e << 1, 0, 0;
  EXPECT_EQ(predict(e, e)(0, 0), 1.0);
  Rng rng(1);
  const Matrix ec = random_matrix(rng, 4, 3);
  EXPECT_EQ(predict(Matrix::Zero(2, 3), ec), Matrix::Zero(2, 4));
  EXPECT_THROW(predict(Matrix::Zero(2, 3), Matrix::Zero(2, 2)), DimensionError);
}

TEST(Predict, MatchesTripleLoop) {
  Rng rng(2);
  const Matrix es = random_matrix(rng, 3, 2), ec = random_matrix(rng, 4, 2);
  const Matrix p = predict(es, ec);
  for (Index s = 0; s < 3; ++s)
    for (Index c = 0; c < 4; ++c) {
      double want = 0;
      for (Index k = 0; k < 2; ++k) want += es(s, k) * ec(c, k);
      EXPECT_NEAR(p(s, c), want, 1e-12);
    }
}

TEST(Predict, Bilinear) {
  Rng rng(3);
  const Matrix es = random_matrix(rng, 3, 4), ec = random_matrix(rng, 5, 4);
  EXPECT_LT((predict(2.5 * es, ec) - 2.5 * predict(es, ec)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((predict(es, -3.0 * ec) + 3.0 * predict(es, ec)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Loss, ExactFactorizationIsZero) {
  Rng rng(4);
  ConMFState s;
  s.student_factors = random_matrix(rng, 3, 2);
  s.course_factors = random_matrix(rng, 4, 2);
  s.ratings.values = predict(s.student_factors, s.course_factors);
  s.ratings.mask = BoolMatrix::Constant(3, 4, true);
  s.course_average = course_average_vector(s.ratings);
  EXPECT_NEAR(loss(s, {0.0, 0.0, true}), 0.0, 1e-24);
  const auto g = grad(s, {0.0, 0.0, true});
  EXPECT_LT(g.student.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(g.course.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Loss, ZeroFactorsGiveSquaredSum) {
  Rng rng(5);
  auto s = random_state(rng, 3, 4, 2);
  s.student_factors.setZero();
  s.course_factors.setZero();
  double want = 0;
  for (Index i = 0; i < s.ratings.values.size(); ++i)
    if (s.ratings.mask.data()[i]) want += s.ratings.values.data()[i] * s.ratings.values.data()[i];
  EXPECT_NEAR(loss(s, {0.0, 0.0, true}), want, 1e-14);
}

TEST(Loss, MatchesIndependentOracle) {
  Rng rng(6);
  for (bool masked : {true, false}) {
    const auto s = random_state(rng, 3, 3, 2);
    const ConMFConfig c{0.5, 0.1, masked};
    EXPECT_NEAR(loss(s, c), oracle(s, c), 1e-10);
  }
  for (int t = 0; t < 10; ++t) {
    const auto s = random_state(rng, 5, 7, 3);
    const ConMFConfig c{rng.uniform(0, 2), rng.uniform(0, 1), true};
    EXPECT_NEAR(loss(s, c), oracle(s, c), 1e-10 * std::max(1.0, oracle(s, c)));
  }
}

TEST(Loss, OrthogonalRotationInvariance) {
  Rng rng(7);
  for (int t = 0; t < 5; ++t) {
    auto s = random_state(rng, 4, 5, 3);
    const ConMFConfig c{0.3, 0.05, true};
    const double before = loss(s, c);
    const Matrix q = random_rotation(rng, 3);
    s.student_factors = s.student_factors * q;
    s.course_factors = s.course_factors * q;
    EXPECT_NEAR(loss(s, c), before, 1e-8);
  }
}

TEST(Loss, CoerciveWithRegularizer) {
  Rng rng(8);
  const auto base = random_state(rng, 4, 5, 3);
  const ConMFConfig c{0.1, 0.01, true};
  double prev = -1.0;
  for (double scale : {1.0, 2.0, 4.0, 8.0}) {
    auto s = base;
    s.student_factors *= scale;
    s.course_factors *= scale;
    const double l = loss(s, c);
    EXPECT_GT(l, prev) << "scale " << scale;
    prev = l;
  }
}

TEST(Loss, NonFiniteRejected) {
  Rng rng(9);
  auto s = random_state(rng, 2, 2, 2);
  s.student_factors(0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(loss(s, {}), NumericError);
}

TEST(Loss, RejectsBadConfigAndShapes) {
  EXPECT_THROW((ConMFConfig{-1.0, 0.0, true}.validate()), ConfigError);
  EXPECT_THROW((ConMFConfig{0.0, std::nan(""), true}.validate()), ConfigError);
  Rng rng(10);
  auto s = random_state(rng, 2, 3, 2);
  s.course_average = Vector::Zero(2);
  EXPECT_THROW(loss(s, {}), DimensionError);
}

TEST(Grad, RegularizerOnly) {
  Rng rng(11);
  auto s = random_state(rng, 3, 4, 2);
  s.ratings.mask.setConstant(false);
  const auto g = grad(s, {0.0, 0.3, true});
  EXPECT_LT((g.student - 0.6 * s.student_factors).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((g.course - 0.6 * s.course_factors).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Grad, MatchesFiniteDifferences) {
  Rng rng(12);
  for (bool masked : {true, false}) {
    auto s = random_state(rng, 4, 5, 3);
    const ConMFConfig c{0.5, 0.1, masked};
    const auto g = grad(s, c);
    auto f = [&] { return loss(s, c); };
    EXPECT_LT(fctest::relative_error(g.student, fctest::numeric_gradient(s.student_factors, f, 1e-5)), 1e-5);
    EXPECT_LT(fctest::relative_error(g.course, fctest::numeric_gradient(s.course_factors, f, 1e-5)), 1e-5);
  }
}

TEST(Grad, BatchesSumToFullGradient) {
  Rng rng(13);
  const auto s = random_state(rng, 4, 5, 3);
  const ConMFConfig c{0.4, 0.2, true};
  std::vector<std::pair<Index, Index>> cells;
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 5; ++j)
      if (s.ratings.mask(i, j)) cells.emplace_back(i, j);
  Matrix gs = Matrix::Zero(4, 3), gc = Matrix::Zero(5, 3);
  double total = 0;
  for (std::size_t lo = 0; lo < cells.size(); lo += 3) {
    Matrix w = Matrix::Zero(4, 5);
    const std::size_t hi = std::min(cells.size(), lo + 3);
    for (std::size_t k = lo; k < hi; ++k) w(cells[k].first, cells[k].second) = 1.0;
    const CellSelection sel{&w, static_cast<double>(hi - lo) / static_cast<double>(cells.size())};
    const auto g = grad(s, c, sel);
    gs += g.student;
    gc += g.course;
    total += loss(s, c, sel);
  }
  const auto full = grad(s, c);
  EXPECT_LT((gs - full.student).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((gc - full.course).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(total, loss(s, c), 1e-12);
}

TEST(Sgd, Examples) {
  Matrix x = Matrix::Constant(1, 1, 1.0);
  sgd_step(x, 2.0 * x, 0.25);  // gradient of x^2
  EXPECT_DOUBLE_EQ(x(0, 0), 0.5);
  Matrix y = Matrix::Constant(2, 2, 3.0);
  sgd_step(y, Matrix::Ones(2, 2), 0.0);
  EXPECT_EQ(y, Matrix::Constant(2, 2, 3.0));
  EXPECT_THROW(sgd_step(y, Matrix::Ones(1, 2), 0.1), DimensionError);
}

TEST(Sgd, SmallStepDescends) {
  Rng rng(14);
  for (int t = 0; t < 10; ++t) {
    auto s = random_state(rng, 5, 6, 3);
    const ConMFConfig c{0.1, 0.01, true};
    const double before = loss(s, c);
    const auto g = grad(s, c);
    sgd_step(s.student_factors, g.student, 1e-3);
    sgd_step(s.course_factors, g.course, 1e-3);
    EXPECT_LT(loss(s, c), before);
  }
}

TEST(BackpropThroughEncoder, ZeroUpstreamAndDetached) {
  Rng rng(15);
  const auto cfg = fctest::tiny_encoder(3, 2);
  const auto p = init_shared_params(cfg, 15);
  const Matrix table = random_matrix(rng, 3, 4);
  const auto g = fctest::random_graph(rng, 3, 3, 2, 0.7);
  const auto raw = fctest::random_raw(rng, 3, 2, 5);
  const auto f = encode_forward(cfg, p, table, g, raw);
  const ConMFGradients zero{Matrix::Zero(3, 4), Matrix::Zero(3, 4)};
  const auto a = backprop_through_encoder(zero, f, p, g);
  EXPECT_TRUE(a.shared.same_manifest(p));
  EXPECT_EQ(max_abs(a.shared), 0.0);
  EXPECT_EQ(a.student_table.cwiseAbs().maxCoeff(), 0.0);

  const ConMFGradients up{random_matrix(rng, 3, 4), random_matrix(rng, 3, 4)};
  const auto live = backprop_through_encoder(up, f, p, g);
  EXPECT_GT(max_abs(live.shared), 0.0);
  const auto det = backprop_through_encoder(up, f, p, g, true);
  EXPECT_EQ(max_abs(det.shared), 0.0);
  EXPECT_EQ(det.student_table.cwiseAbs().maxCoeff(), 0.0);
}

TEST(BackpropThroughEncoder, MissingCacheRejected) {
  Rng rng(16);
  const auto cfg = fctest::tiny_encoder(2, 0);
  const auto p = init_shared_params(cfg, 1);
  const auto g = HeteroGraph::assemble(1, 2, {}, {{0, 1, EdgeType::StudentCourse}});
  EncoderForward empty;
  EXPECT_THROW(backprop_through_encoder({Matrix::Zero(1, 4), Matrix::Zero(2, 4)}, empty, p, g), std::logic_error);
}

class ModelGradient : public ::testing::TestWithParam<Coupling> {};

// Full local objective (encoder + ConMF) against finite differences on a
// school with at most six nodes.
TEST_P(ModelGradient, MatchesFiniteDifferences) {
  const auto cat = fctest::small_catalog(3, 1);
  const auto ds = fctest::make_school(
      0, 2, cat,
      {fctest::enroll(0, 0, 0.8), fctest::enroll(0, 1, 0.3), fctest::enroll(1, 2, 1.1), fctest::participate(1, 0)});
  ModelOptions opts;
  opts.encoder = fctest::tiny_encoder(3, 1);
  opts.conmf = {0.5, 0.1, true};
  opts.coupling = GetParam();
  HashingEncoder text(5, 2, 1);
  SchoolModel model(ds, opts, text, 3);
  ASSERT_LE(model.graph().node_count(), 6u);
  auto shared = init_model_params(model.options(), model.raw_content(), 4);
  Matrix local = model.initial_local(shared);
  const auto g = model.gradients(shared, local);
  auto f = [&] { return model.objective(shared, local); };
  EXPECT_NEAR(g.loss, f(), 1e-12);
  for (auto& [name, t] : shared) {
    const Matrix numeric = fctest::numeric_gradient(t, f, 1e-5);
    EXPECT_LT(fctest::relative_error(g.shared.at(name), numeric), 1e-4) << name;
  }
  EXPECT_LT(fctest::relative_error(g.local, fctest::numeric_gradient(local, f, 1e-5)), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Coupling, ModelGradient, ::testing::Values(Coupling::EndToEnd, Coupling::WarmStart));
