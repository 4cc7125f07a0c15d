#pragma once

#include "fedcourse/conmf.hpp"
#include "fedcourse/dataset.hpp"
#include "fedcourse/encoder.hpp"
#include "fedcourse/graph.hpp"
#include "fedcourse/rng.hpp"
#include "fedcourse/tensor.hpp"
#include "fedcourse/textenc.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace fedcourse {

struct ModelOptions {
  EncoderConfig encoder;
  ConMFConfig conmf;
  Coupling coupling = Coupling::EndToEnd;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 0;  // reconstruction cells per step; 0 = full batch

  void validate() const {
    encoder.validate();
    conmf.validate();
    if (local_epochs == 0) throw ConfigError("model: local_epochs must be positive");
  }
};

// Shared course factors, present only in warm-start coupling.
inline const std::string kCourseFactors = "factor.course";

// Catalog-only encoding: every course as an isolated node. Needs nothing but
// the public catalog, so the coordinator can compute it.
inline Matrix catalog_course_factors(const EncoderConfig& cfg, const ParamSet& shared, const RawContent& raw) {
  const auto g = HeteroGraph::assemble(0, static_cast<std::size_t>(raw.course.rows()), {}, {});
  const Matrix no_students(0, static_cast<Index>(cfg.dim));
  return encode(cfg, shared, no_students, g, raw).courses;
}

inline ParamSet init_model_params(const ModelOptions& opts, const RawContent& catalog_raw, std::uint64_t seed) {
  opts.validate();
  ParamSet p = init_shared_params(opts.encoder, seed);
  if (opts.coupling == Coupling::WarmStart)
    p.add(kCourseFactors, catalog_course_factors(opts.encoder, p, catalog_raw));
  return p;
}

// One school's local objective: graph, ratings, raw content, and the
// encode -> ConMF -> backprop pipeline. Stateless with respect to parameters;
// callers own the shared and local tensors.
class SchoolModel {
 public:
  SchoolModel(SchoolDataset train, ModelOptions opts, const TextEncoder& text_encoder, std::uint64_t seed)
      : data_(std::move(train)), opts_(std::move(opts)), seed_(seed) {
    opts_.validate();
    opts_.encoder.n_courses = data_.n_courses();
    opts_.encoder.n_activities = data_.n_activities();
    if (text_encoder.dim() != opts_.encoder.raw_dim)
      throw ConfigError("model: text encoder dim does not match encoder raw_dim");
    graph_ = build_graph(data_);
    ratings_ = build_rating_matrix(data_);
    course_average_ = course_average_vector(ratings_);
    raw_ = encode_catalog(text_encoder, data_.catalog);
  }

  std::uint32_t school_id() const { return data_.school_id; }
  std::size_t n_u() const { return data_.n_u(); }
  std::size_t n_students() const { return data_.n_students(); }
  const SchoolDataset& data() const { return data_; }
  const HeteroGraph& graph() const { return graph_; }
  const RatingMatrix& ratings() const { return ratings_; }
  const Vector& course_average() const { return course_average_; }
  const RawContent& raw_content() const { return raw_; }
  const ModelOptions& options() const { return opts_; }

  // Student tables (end-to-end) or free student factors (warm start).
  Matrix initial_local(const ParamSet& shared) const {
    Matrix table = init_student_embedding(data_.n_students(), opts_.encoder.dim, seed_, data_.school_id);
    if (opts_.coupling == Coupling::EndToEnd) return table;
    return encode(opts_.encoder, shared, table, graph_, raw_).students;
  }

  struct Gradients {
    double loss = 0.0;
    ParamSet shared;
    Matrix local;
  };

  Gradients gradients(const ParamSet& shared, const Matrix& local, const CellSelection& sel = {},
                      Rng* dropout = nullptr) const {
    Gradients out;
    if (opts_.coupling == Coupling::WarmStart) {
      ConMFState st{local, shared.at(kCourseFactors), ratings_, course_average_};
      out.loss = loss(st, opts_.conmf, sel);
      auto g = grad(st, opts_.conmf, sel);
      out.shared = shared.zeros_like();
      out.shared.at(kCourseFactors) = std::move(g.course);
      out.local = std::move(g.student);
      return out;
    }
    const auto fwd = encode_forward(opts_.encoder, shared, local, graph_, raw_, dropout);
    ConMFState st{fwd.students(), fwd.courses(), ratings_, course_average_};
    out.loss = loss(st, opts_.conmf, sel);
    const auto g = grad(st, opts_.conmf, sel);
    auto eg = backprop_through_encoder(g, fwd, shared, graph_);
    out.shared = std::move(eg.shared);
    out.local = std::move(eg.student_table);
    return out;
  }

  ConMFState factors(const ParamSet& shared, const Matrix& local) const {
    if (opts_.coupling == Coupling::WarmStart) return {local, shared.at(kCourseFactors), ratings_, course_average_};
    const auto reps = encode(opts_.encoder, shared, local, graph_, raw_);
    return {reps.students, reps.courses, ratings_, course_average_};
  }

  double objective(const ParamSet& shared, const Matrix& local) const {
    return loss(factors(shared, local), opts_.conmf);
  }

  Matrix predictions(const ParamSet& shared, const Matrix& local) const {
    const auto st = factors(shared, local);
    return predict(st.student_factors, st.course_factors);
  }

  struct RoundResult {
    double loss = 0.0;       // objective at the round's starting point, dropout off
    ParamSet shared_grad;    // summed over local passes, evaluated at fixed shared params
    Matrix local;            // student state after the local passes
  };

  // local_epochs passes over the observed cells. Student state moves with `lr`
  // after every step; shared gradients accumulate.
  RoundResult local_round(const ParamSet& shared, const Matrix& local, std::uint64_t round, double lr) const {
    RoundResult res;
    res.shared_grad = shared.zeros_like();
    res.local = local;
    if (data_.n_u() == 0) return res;
    res.loss = objective(shared, local);

    const auto cells = candidate_cells();
    for (std::size_t epoch = 0; epoch < opts_.local_epochs; ++epoch) {
      std::vector<std::vector<std::pair<Index, Index>>> batches;
      if (opts_.batch_size == 0 || opts_.batch_size >= cells.size()) {
        batches.emplace_back();  // empty = full selection
      } else {
        auto order = cells;
        auto rng = derive_rng(seed_, "batch", {data_.school_id, round, epoch});
        rng.shuffle(order);
        for (std::size_t i = 0; i < order.size(); i += opts_.batch_size)
          batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                               order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + opts_.batch_size)));
      }
      for (std::size_t b = 0; b < batches.size(); ++b) {
        CellSelection sel;
        Matrix weight;
        if (!batches[b].empty()) {
          weight = Matrix::Zero(ratings_.values.rows(), ratings_.values.cols());
          for (auto [s, c] : batches[b]) weight(s, c) = 1.0;
          sel.weight = &weight;
          sel.aux_scale = static_cast<double>(batches[b].size()) / static_cast<double>(cells.size());
        }
        Rng dropout = derive_rng(seed_, "dropout", {data_.school_id, round, epoch, b});
        auto g = gradients(shared, res.local, sel, opts_.encoder.dropout > 0.0 ? &dropout : nullptr);
        axpy(res.shared_grad, 1.0, g.shared);
        sgd_step(res.local, g.local, lr);
        if (!res.local.allFinite())
          throw NumericError("school " + std::to_string(data_.school_id) + ": non-finite student state");
      }
    }
    for (const auto& [name, m] : res.shared_grad)
      if (!m.allFinite())
        throw NumericError("school " + std::to_string(data_.school_id) + ": non-finite gradient in " + name);
    return res;
  }

 private:
  std::vector<std::pair<Index, Index>> candidate_cells() const {
    std::vector<std::pair<Index, Index>> cells;
    for (Index s = 0; s < ratings_.values.rows(); ++s)
      for (Index c = 0; c < ratings_.values.cols(); ++c)
        if (!opts_.conmf.masked || ratings_.mask(s, c)) cells.emplace_back(s, c);
    return cells;
  }

  SchoolDataset data_;
  ModelOptions opts_;
  std::uint64_t seed_;
  HeteroGraph graph_;
  RatingMatrix ratings_;
  Vector course_average_;
  RawContent raw_;
};

// Plain single-school training loop with no federation layer in between:
// shared -= lr * g, student state updated inside local_round.
class CentralizedTrainer {
 public:
  CentralizedTrainer(const SchoolModel& model, ParamSet shared, double lr)
      : model_(model), shared_(std::move(shared)), lr_(lr) {
    local_ = model_.initial_local(shared_);
  }

  double step() {
    auto res = model_.local_round(shared_, local_, round_, lr_);
    sgd_step(shared_, res.shared_grad, lr_);
    local_ = std::move(res.local);
    ++round_;
    return res.loss;
  }

  const ParamSet& shared() const { return shared_; }
  const Matrix& local() const { return local_; }
  std::uint64_t round() const { return round_; }

 private:
  const SchoolModel& model_;
  ParamSet shared_;
  Matrix local_;
  double lr_;
  std::uint64_t round_ = 0;
};

}  // namespace fedcourse
