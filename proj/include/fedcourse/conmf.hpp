#pragma once

#include "fedcourse/dataset.hpp"
#include "fedcourse/encoder.hpp"
#include "fedcourse/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

namespace fedcourse {

// Constrained matrix factorization:
//
//   L = sum_{cells} w (R - P)^2 + beta * |r - sigma P|^2 + gamma * (|E_s|^2 + |E_c|^2)
//
// with P = E_s E_c^T (one row per student / course), sigma the uniform 1/m row
// vector, and w the observation mask (or all ones when unmasked).
struct ConMFConfig {
  double beta = 0.1;
  double gamma = 0.01;
  bool masked = true;

  void validate() const {
    if (!(std::isfinite(beta) && beta >= 0.0)) throw ConfigError("conmf: beta must be finite and >= 0");
    if (!(std::isfinite(gamma) && gamma >= 0.0)) throw ConfigError("conmf: gamma must be finite and >= 0");
  }
};

struct ConMFState {
  Matrix student_factors;  // m x d
  Matrix course_factors;   // n x d
  RatingMatrix ratings;    // m x n
  Vector course_average;   // n

  std::size_t n_students() const { return static_cast<std::size_t>(student_factors.rows()); }
  Vector sigma() const {
    const auto m = student_factors.rows();
    return Vector::Constant(m, m > 0 ? 1.0 / static_cast<double>(m) : 0.0);
  }

  void validate() const {
    if (student_factors.cols() != course_factors.cols()) throw DimensionError("conmf: factor widths differ");
    if (ratings.values.rows() != student_factors.rows() || ratings.values.cols() != course_factors.rows())
      throw DimensionError("conmf: rating matrix does not match factors");
    if (course_average.size() != course_factors.rows()) throw DimensionError("conmf: course average length mismatch");
  }
};

inline Matrix predict(const Matrix& student_factors, const Matrix& course_factors) {
  if (student_factors.cols() != course_factors.cols())
    throw DimensionError("predict: factor widths " + std::to_string(student_factors.cols()) + " and " +
                         std::to_string(course_factors.cols()) + " differ");
  return student_factors * course_factors.transpose();
}

// Selection of reconstruction cells and scaling of the whole-matrix terms for
// mini-batches. Default: every cell allowed by the mask, full weight.
struct CellSelection {
  const Matrix* weight = nullptr;  // m x n multiplier applied on top of the mask
  double aux_scale = 1.0;          // multiplies the constraint and regularizer terms
};

struct ConMFGradients {
  Matrix student;  // dL/dE_s
  Matrix course;   // dL/dE_c
};

namespace detail {

inline Matrix reconstruction_weight(const ConMFState& s, const ConMFConfig& cfg, const CellSelection& sel) {
  Matrix w = cfg.masked ? s.ratings.mask_as_double()
                        : Matrix::Ones(s.ratings.values.rows(), s.ratings.values.cols());
  if (sel.weight) w = w.cwiseProduct(*sel.weight);
  return w;
}

}  // namespace detail

inline double loss(const ConMFState& s, const ConMFConfig& cfg, const CellSelection& sel = {}) {
  s.validate();
  const Matrix p = predict(s.student_factors, s.course_factors);
  const Matrix w = detail::reconstruction_weight(s, cfg, sel);
  double total = (w.array() * (s.ratings.values - p).array().square()).sum();
  if (s.student_factors.rows() > 0 && cfg.beta != 0.0) {
    const Vector col_mean = p.colwise().mean().transpose();
    total += sel.aux_scale * cfg.beta * (s.course_average - col_mean).squaredNorm();
  }
  if (cfg.gamma != 0.0)
    total += sel.aux_scale * cfg.gamma * (s.student_factors.squaredNorm() + s.course_factors.squaredNorm());
  if (!std::isfinite(total)) throw NumericError("conmf: non-finite loss");
  return total;
}

inline ConMFGradients grad(const ConMFState& s, const ConMFConfig& cfg, const CellSelection& sel = {}) {
  s.validate();
  const Matrix p = predict(s.student_factors, s.course_factors);
  const Matrix w = detail::reconstruction_weight(s, cfg, sel);
  Matrix d_p = 2.0 * w.cwiseProduct(p - s.ratings.values);
  const auto m = s.student_factors.rows();
  if (m > 0 && cfg.beta != 0.0) {
    const RowVector excess = p.colwise().mean() - s.course_average.transpose();
    d_p.rowwise() += (2.0 * sel.aux_scale * cfg.beta / static_cast<double>(m)) * excess;
  }
  ConMFGradients g;
  g.student = d_p * s.course_factors + (2.0 * sel.aux_scale * cfg.gamma) * s.student_factors;
  g.course = d_p.transpose() * s.student_factors + (2.0 * sel.aux_scale * cfg.gamma) * s.course_factors;
  return g;
}

inline void sgd_step(Matrix& params, const Matrix& grads, double lr) {
  if (params.rows() != grads.rows() || params.cols() != grads.cols())
    throw DimensionError("sgd_step: gradient shape mismatch");
  params -= lr * grads;
}

inline void sgd_step(ParamSet& params, const ParamSet& grads, double lr) { axpy(params, -lr, grads); }

enum class Coupling {
  EndToEnd,   // factors are encoder outputs; gradients reach every encoder tensor
  WarmStart,  // encoder outputs seed free factor matrices, updated directly
};

// Chain rule from factor gradients into the encoder. In detached mode the
// encoder receives zeros.
inline EncoderGradients backprop_through_encoder(const ConMFGradients& upstream, const EncoderForward& forward,
                                                 const ParamSet& shared, const HeteroGraph& g,
                                                 bool detached = false) {
  if (forward.output.rows() == 0 && g.node_count() > 0)
    throw std::logic_error("backprop_through_encoder: missing forward cache");
  if (forward.output.rows() != static_cast<Index>(g.node_count()))
    throw std::logic_error("backprop_through_encoder: forward cache does not match graph");
  const auto m = static_cast<Index>(forward.n_students);
  const auto n = static_cast<Index>(forward.n_courses);
  if (upstream.student.rows() != m || upstream.course.rows() != n)
    throw DimensionError("backprop_through_encoder: upstream shape mismatch");
  if (detached) {
    EncoderGradients z;
    z.shared = shared.zeros_like();
    z.student_table = Matrix::Zero(m, forward.output.cols());
    return z;
  }
  Matrix d_out = Matrix::Zero(forward.output.rows(), forward.output.cols());
  d_out.topRows(m) = upstream.student;
  d_out.middleRows(m, n) = upstream.course;
  return encode_backward(forward, shared, g, d_out);
}

}  // namespace fedcourse
