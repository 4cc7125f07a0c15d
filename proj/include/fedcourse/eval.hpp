#pragma once

#include "fedcourse/dataset.hpp"
#include "fedcourse/rng.hpp"
#include "fedcourse/tensor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedcourse {

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// One held-out positive against sampled negatives. Course ids are dense
// catalog indices.
struct RankedInstance {
  std::size_t positive = 0;
  std::vector<std::size_t> negatives;
  std::map<std::size_t, double> scores;

  void validate() const {
    if (negatives.empty()) throw EvalError("instance has no negatives");
    std::set<std::size_t> seen;
    for (auto c : negatives) {
      if (c == positive) throw EvalError("positive course " + std::to_string(c) + " listed as negative");
      if (!seen.insert(c).second) throw EvalError("duplicate negative " + std::to_string(c));
    }
    auto score_of = [&](std::size_t c) {
      auto it = scores.find(c);
      if (it == scores.end()) throw EvalError("course " + std::to_string(c) + " has no score");
      if (std::isnan(it->second)) throw EvalError("course " + std::to_string(c) + " scored NaN");
    };
    score_of(positive);
    for (auto c : negatives) score_of(c);
  }
};

// 1-based; equal scores rank ahead of the positive.
inline std::size_t rank_of_positive(const RankedInstance& inst) {
  inst.validate();
  const double p = inst.scores.at(inst.positive);
  std::size_t rank = 1;
  for (auto c : inst.negatives)
    if (inst.scores.at(c) >= p) ++rank;
  return rank;
}

namespace detail {
inline void require_nonempty(const std::vector<std::size_t>& ranks, const char* what) {
  if (ranks.empty()) throw EvalError(std::string(what) + ": empty instance set");
}
}  // namespace detail

inline double hr_at_k(const std::vector<std::size_t>& ranks, std::size_t k) {
  detail::require_nonempty(ranks, "hr_at_k");
  if (k == 0) throw EvalError("hr_at_k: K must be >= 1");
  std::size_t hits = 0;
  for (auto r : ranks) hits += r <= k ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

inline double ndcg_at_k(const std::vector<std::size_t>& ranks, std::size_t k) {
  detail::require_nonempty(ranks, "ndcg_at_k");
  if (k == 0) throw EvalError("ndcg_at_k: K must be >= 1");
  double total = 0.0;
  for (auto r : ranks)
    if (r <= k) total += 1.0 / std::log2(static_cast<double>(r) + 1.0);
  return total / static_cast<double>(ranks.size());
}

inline double mrr(const std::vector<std::size_t>& ranks) {
  detail::require_nonempty(ranks, "mrr");
  double total = 0.0;
  for (auto r : ranks) total += 1.0 / static_cast<double>(r);
  return total / static_cast<double>(ranks.size());
}

// Mean over instances of the fraction of negatives scored below the
// positive, ties counted half.
inline double auc(const std::vector<RankedInstance>& instances) {
  if (instances.empty()) throw EvalError("auc: empty instance set");
  double total = 0.0;
  for (const auto& inst : instances) {
    inst.validate();
    const double p = inst.scores.at(inst.positive);
    double below = 0.0;
    for (auto c : inst.negatives) {
      const double s = inst.scores.at(c);
      if (s < p) below += 1.0;
      else if (s == p) below += 0.5;
    }
    total += below / static_cast<double>(inst.negatives.size());
  }
  return total / static_cast<double>(instances.size());
}

struct MetricReport {
  double hr1 = 0, hr5 = 0, hr10 = 0, hr20 = 0;
  double ndcg5 = 0, ndcg10 = 0, ndcg20 = 0;
  double mrr = 0, auc = 0;
  std::size_t n_instances = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["hr1"] = hr1;
    j["hr5"] = hr5;
    j["hr10"] = hr10;
    j["hr20"] = hr20;
    j["ndcg5"] = ndcg5;
    j["ndcg10"] = ndcg10;
    j["ndcg20"] = ndcg20;
    j["mrr"] = mrr;
    j["auc"] = auc;
    j["n_instances"] = n_instances;
    return j;
  }
};

inline MetricReport evaluate(const std::vector<RankedInstance>& instances) {
  if (instances.empty()) throw EvalError("evaluate: no test instances");
  std::vector<std::size_t> ranks;
  ranks.reserve(instances.size());
  for (const auto& inst : instances) ranks.push_back(rank_of_positive(inst));
  MetricReport r;
  r.hr1 = hr_at_k(ranks, 1);
  r.hr5 = hr_at_k(ranks, 5);
  r.hr10 = hr_at_k(ranks, 10);
  r.hr20 = hr_at_k(ranks, 20);
  r.ndcg5 = ndcg_at_k(ranks, 5);
  r.ndcg10 = ndcg_at_k(ranks, 10);
  r.ndcg20 = ndcg_at_k(ranks, 20);
  r.mrr = mrr(ranks);
  r.auc = auc(instances);
  r.n_instances = instances.size();
  return r;
}

// ---------------------------------------------------------------------------
// Splitting

struct TrainTestSplit {
  std::vector<SchoolDataset> train;
  std::vector<SchoolDataset> test;  // held-out enrollment records only
  std::vector<std::string> warnings;
};

namespace detail {

inline SchoolDataset empty_like(const SchoolDataset& ds) {
  SchoolDataset out;
  out.school_id = ds.school_id;
  out.student_labels = ds.student_labels;
  out.catalog = ds.catalog;
  return out;
}

inline std::string student_name(const SchoolDataset& ds, std::size_t s) {
  return "school " + std::to_string(ds.school_id) + " student " + std::to_string(ds.student_labels[s]);
}

// Latest enrollment per student: largest date, later record on ties or when
// undated. Students with fewer than two distinct courses get none.
inline TrainTestSplit leave_latest_out(const std::vector<SchoolDataset>& schools) {
  TrainTestSplit out;
  for (const auto& ds : schools) {
    ds.validate();
    const std::size_t m = ds.n_students();
    std::vector<std::optional<std::size_t>> latest(m);
    std::vector<std::set<std::size_t>> distinct(m);
    for (std::size_t i = 0; i < ds.interactions.size(); ++i) {
      const auto& rec = ds.interactions[i];
      if (!rec.is_enrollment()) continue;
      const auto s = rec.student.value;
      distinct[s].insert(rec.enrollment().course.value);
      if (!latest[s] || rec.date.value_or(0) >= ds.interactions[*latest[s]].date.value_or(0)) latest[s] = i;
    }
    std::vector<std::optional<std::size_t>> held(m);
    for (std::size_t s = 0; s < m; ++s) {
      if (distinct[s].size() < 2) {
        out.warnings.push_back(student_name(ds, s) + ": fewer than two enrollments, kept out of the test set");
        continue;
      }
      held[s] = ds.interactions[*latest[s]].enrollment().course.value;
    }
    SchoolDataset train = empty_like(ds), test = empty_like(ds);
    for (std::size_t i = 0; i < ds.interactions.size(); ++i) {
      const auto& rec = ds.interactions[i];
      const auto s = rec.student.value;
      if (rec.is_enrollment() && held[s] && rec.enrollment().course.value == *held[s]) {
        if (i == *latest[s]) test.interactions.push_back(rec);
        continue;
      }
      train.interactions.push_back(rec);
    }
    out.train.push_back(std::move(train));
    out.test.push_back(std::move(test));
  }
  return out;
}

// Records dated at or after the boundary are test material. Undated records
// stay in train. Test positives are courses the student has no train record
// for; activities after the boundary are dropped.
inline TrainTestSplit date_split(const std::vector<SchoolDataset>& schools, std::int64_t boundary) {
  TrainTestSplit out;
  for (const auto& ds : schools) {
    ds.validate();
    SchoolDataset train = empty_like(ds), test = empty_like(ds);
    std::vector<InteractionRecord> later;
    std::vector<bool> in_train(ds.n_students(), false);
    std::set<std::pair<std::size_t, std::size_t>> train_pairs;
    for (const auto& rec : ds.interactions) {
      if (rec.date && *rec.date >= boundary) {
        if (rec.is_enrollment()) later.push_back(rec);
        continue;
      }
      in_train[rec.student.value] = true;
      if (rec.is_enrollment()) train_pairs.insert({rec.student.value, rec.enrollment().course.value});
      train.interactions.push_back(rec);
    }
    std::set<std::pair<std::size_t, std::size_t>> emitted;
    std::set<std::size_t> warned;
    for (const auto& rec : later) {
      const auto s = rec.student.value;
      const auto c = rec.enrollment().course.value;
      if (!in_train[s]) {
        if (warned.insert(s).second)
          out.warnings.push_back(student_name(ds, s) + ": no records before the boundary, kept out of the test set");
        continue;
      }
      if (train_pairs.count({s, c}) || !emitted.insert({s, c}).second) continue;
      test.interactions.push_back(rec);
    }
    out.train.push_back(std::move(train));
    out.test.push_back(std::move(test));
  }
  return out;
}

}  // namespace detail

// Without a boundary: per-student leave-latest-out. With one: calendar split.
inline TrainTestSplit split_train_test(const std::vector<SchoolDataset>& schools,
                                       std::optional<std::int64_t> boundary = std::nullopt) {
  return boundary ? detail::date_split(schools, *boundary) : detail::leave_latest_out(schools);
}

// ---------------------------------------------------------------------------
// Negatives

// `count` distinct courses outside `positives`, uniformly without replacement.
inline std::vector<std::size_t> sample_negatives(std::size_t n_courses, const std::set<std::size_t>& positives,
                                                 std::size_t count, Rng& rng) {
  std::vector<std::size_t> pool;
  for (std::size_t c = 0; c < n_courses; ++c)
    if (!positives.count(c)) pool.push_back(c);
  if (pool.size() < count)
    throw EvalError("sample_negatives: catalog of " + std::to_string(n_courses) + " courses has only " +
                    std::to_string(pool.size()) + " candidates for " + std::to_string(count) + " negatives");
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

inline std::set<std::size_t> known_courses(const SchoolDataset& train, const SchoolDataset& test, std::size_t s) {
  std::set<std::size_t> out;
  for (const auto* ds : {&train, &test})
    for (const auto& rec : ds->interactions)
      if (rec.is_enrollment() && rec.student.value == s) out.insert(rec.enrollment().course.value);
  return out;
}

// Instances for one school in test-record order. Negatives come from the
// stream ("negatives", school, student, course) of `seed`.
inline std::vector<RankedInstance> build_instances(const SchoolDataset& train, const SchoolDataset& test,
                                                   const Matrix& predictions, std::size_t n_negatives,
                                                   std::uint64_t seed) {
  if (predictions.rows() != static_cast<Index>(train.n_students()) ||
      predictions.cols() != static_cast<Index>(train.n_courses()))
    throw DimensionError("build_instances: prediction matrix does not match school");
  std::vector<RankedInstance> out;
  std::map<std::size_t, std::set<std::size_t>> known;
  for (const auto& rec : test.interactions) {
    if (!rec.is_enrollment()) continue;
    const auto s = rec.student.value;
    const auto c = rec.enrollment().course.value;
    if (!known.count(s)) known[s] = known_courses(train, test, s);
    auto rng = derive_rng(seed, "negatives", {train.school_id, s, c});
    RankedInstance inst;
    inst.positive = c;
    inst.negatives = sample_negatives(train.n_courses(), known[s], n_negatives, rng);
    inst.scores[c] = predictions(static_cast<Index>(s), static_cast<Index>(c));
    for (auto n : inst.negatives) inst.scores[n] = predictions(static_cast<Index>(s), static_cast<Index>(n));
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace fedcourse
