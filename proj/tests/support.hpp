#pragma once

// Shared fixtures: tiny configurations, random graphs and datasets, and a
// central finite-difference oracle.

#include "fedcourse/conmf.hpp"
#include "fedcourse/dataset.hpp"
#include "fedcourse/encoder.hpp"
#include "fedcourse/graph.hpp"
#include "fedcourse/rng.hpp"
#include "fedcourse/tensor.hpp"
#include "fedcourse/textenc.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <vector>

namespace fctest {

using namespace fedcourse;

inline Matrix random_matrix(Rng& rng, Index r, Index c, double scale = 1.0) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, scale);
  return m;
}

inline EncoderConfig tiny_encoder(std::size_t n_courses, std::size_t n_activities, std::size_t dim = 4,
                                  std::size_t heads = 2, std::size_t raw_dim = 5) {
  EncoderConfig c;
  c.dim = dim;
  c.heads = heads;
  c.ffn_dim = 2 * dim;
  c.raw_dim = raw_dim;
  c.dropout = 0.0;
  c.output_gain = 1.0;
  c.n_courses = n_courses;
  c.n_activities = n_activities;
  return c;
}

inline RawContent random_raw(Rng& rng, std::size_t n_courses, std::size_t n_activities, std::size_t raw_dim) {
  RawContent r;
  r.course = random_matrix(rng, static_cast<Index>(n_courses), static_cast<Index>(raw_dim));
  r.activity = random_matrix(rng, static_cast<Index>(n_activities), static_cast<Index>(raw_dim));
  return r;
}

// Random typed graph over m students, n courses and up to a activities.
inline HeteroGraph random_graph(Rng& rng, std::size_t m, std::size_t n, std::size_t a, double density = 0.5) {
  std::vector<std::size_t> act_ids;
  for (std::size_t i = 0; i < a; ++i)
    if (rng.bernoulli(0.8)) act_ids.push_back(i);
  const std::size_t A = act_ids.size();
  std::vector<Edge> edges;
  for (std::size_t s = 0; s < m; ++s) {
    for (std::size_t c = 0; c < n; ++c)
      if (rng.bernoulli(density)) edges.push_back({s, m + c, EdgeType::StudentCourse});
    for (std::size_t k = 0; k < A; ++k)
      if (rng.bernoulli(density)) edges.push_back({s, m + n + k, EdgeType::StudentActivity});
  }
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t k = 0; k < A; ++k)
      if (rng.bernoulli(density * 0.5)) edges.push_back({m + c, m + n + k, EdgeType::CourseActivity});
  return HeteroGraph::assemble(m, n, act_ids, edges);
}

inline Catalog small_catalog(std::size_t n_courses, std::size_t n_activities) {
  Catalog cat;
  for (std::size_t c = 0; c < n_courses; ++c) {
    cat.course_labels.push_back(static_cast<std::int64_t>(100 + c));
    cat.course_text.push_back("course " + std::to_string(c) + " topic words");
  }
  for (std::size_t a = 0; a < n_activities; ++a) {
    cat.activity_labels.push_back(static_cast<std::int64_t>(500 + a));
    cat.activity_text.push_back("activity " + std::to_string(a));
  }
  return cat;
}

inline InteractionRecord enroll(std::size_t s, std::size_t c, double rating) {
  InteractionRecord r;
  r.student = StudentId{s};
  r.event = Enrollment{CourseId{c}, Duration{rating * 100.0, 100.0}};
  return r;
}

inline InteractionRecord participate(std::size_t s, std::size_t a) {
  InteractionRecord r;
  r.student = StudentId{s};
  r.event = Participation{ActivityId{a}, std::nullopt};
  return r;
}

inline SchoolDataset make_school(std::uint32_t id, std::size_t m, const Catalog& cat,
                                 std::vector<InteractionRecord> recs) {
  SchoolDataset ds;
  ds.school_id = id;
  for (std::size_t s = 0; s < m; ++s) ds.student_labels.push_back(static_cast<std::int64_t>(s));
  ds.catalog = cat;
  ds.interactions = std::move(recs);
  ds.validate();
  return ds;
}

// Relative error of one tensor: max-norm of the difference over the larger
// max-norm of the two (floored so all-zero gradients compare absolutely).
inline double relative_error(const Matrix& analytic, const Matrix& numeric) {
  if (analytic.size() == 0 && numeric.size() == 0) return 0.0;
  const double scale = std::max({analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), 1e-8});
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

// Central differences of f with respect to every entry of x.
inline Matrix numeric_gradient(Matrix& x, const std::function<double()>& f, double h) {
  Matrix g(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + h;
    const double up = f();
    x.data()[i] = orig - h;
    const double down = f();
    x.data()[i] = orig;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Independent loss oracle: explicit loops over every cell.
inline double loss_oracle(const Matrix& es, const Matrix& ec, const Matrix& r, const BoolMatrix& mask,
                          const Vector& avg, double beta, double gamma, bool masked) {
  const Index m = es.rows(), n = ec.rows(), d = es.cols();
  double rec = 0.0, con = 0.0, reg = 0.0;
  std::vector<double> colmean(static_cast<std::size_t>(n), 0.0);
  for (Index s = 0; s < m; ++s)
    for (Index c = 0; c < n; ++c) {
      double p = 0.0;
      for (Index k = 0; k < d; ++k) p += es(s, k) * ec(c, k);
      if (!masked || mask(s, c)) rec += (r(s, c) - p) * (r(s, c) - p);
      colmean[static_cast<std::size_t>(c)] += p / static_cast<double>(m);
    }
  if (m > 0)
    for (Index c = 0; c < n; ++c) con += (avg(c) - colmean[static_cast<std::size_t>(c)]) * (avg(c) - colmean[static_cast<std::size_t>(c)]);
  for (Index i = 0; i < es.size(); ++i) reg += es.data()[i] * es.data()[i];
  for (Index i = 0; i < ec.size(); ++i) reg += ec.data()[i] * ec.data()[i];
  return rec + beta * con + gamma * reg;
}

inline RatingMatrix random_ratings(Rng& rng, Index m, Index n, double observed = 0.6) {
  RatingMatrix rm;
  rm.values = Matrix::Zero(m, n);
  rm.mask = BoolMatrix::Constant(m, n, false);
  for (Index s = 0; s < m; ++s)
    for (Index c = 0; c < n; ++c)
      if (rng.bernoulli(observed)) {
        rm.mask(s, c) = true;
        rm.values(s, c) = rng.uniform(0.0, 1.5);
      }
  return rm;
}

}  // namespace fctest
