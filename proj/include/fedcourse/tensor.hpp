#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fedcourse {

// All numeric state is row-major float64 so that serialized payloads are a
// straight walk over data().
using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline Shape shape_of(const Matrix& m) {
  return {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
}

// Named collection of tensors. Ordered by name, which fixes iteration order
// for reductions and serialization.
class ParamSet {
 public:
  using Map = std::map<std::string, Matrix>;

  ParamSet() = default;

  Matrix& add(const std::string& name, Matrix value) {
    auto [it, inserted] = tensors_.insert_or_assign(name, std::move(value));
    return it->second;
  }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  Matrix& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown tensor '" + name + "'");
    return it->second;
  }
  const Matrix& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown tensor '" + name + "'");
    return it->second;
  }

  std::size_t size() const { return tensors_.size(); }
  bool empty() const { return tensors_.empty(); }

  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  std::vector<std::pair<std::string, Shape>> manifest() const {
    std::vector<std::pair<std::string, Shape>> out;
    out.reserve(tensors_.size());
    for (const auto& [name, m] : tensors_) out.emplace_back(name, shape_of(m));
    return out;
  }

  bool same_manifest(const ParamSet& other) const { return manifest() == other.manifest(); }

  // Same names and shapes, all zeros.
  ParamSet zeros_like() const {
    ParamSet out;
    for (const auto& [name, m] : tensors_) out.add(name, Matrix::Zero(m.rows(), m.cols()));
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : tensors_) n += static_cast<std::size_t>(m.size());
    return n;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.tensors_.size() != b.tensors_.size()) return false;
    auto ia = a.tensors_.begin();
    auto ib = b.tensors_.begin();
    for (; ia != a.tensors_.end(); ++ia, ++ib) {
      if (ia->first != ib->first) return false;
      if (ia->second.rows() != ib->second.rows() || ia->second.cols() != ib->second.cols())
        return false;
      if (!(ia->second.array() == ib->second.array()).all()) return false;
    }
    return true;
  }

 private:
  Map tensors_;
};

inline void require_same_manifest(const ParamSet& a, const ParamSet& b, const char* what) {
  if (!a.same_manifest(b)) throw DimensionError(std::string(what) + ": tensor manifest mismatch");
}

// a += scale * b, tensor-wise.
inline void axpy(ParamSet& a, double scale, const ParamSet& b) {
  require_same_manifest(a, b, "axpy");
  auto ib = b.begin();
  for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib) ia->second += scale * ib->second;
}

inline double max_abs(const ParamSet& p) {
  double v = 0.0;
  for (const auto& [name, m] : p)
    if (m.size() > 0) v = std::max(v, m.cwiseAbs().maxCoeff());
  return v;
}

inline Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

}  // namespace fedcourse
