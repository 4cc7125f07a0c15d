#include "support.hpp"

#include "fedcourse/eval.hpp"

#include <gtest/gtest.h>

using namespace fedcourse;
using fctest::enroll;
using fctest::make_school;
using fctest::participate;
using fctest::small_catalog;

namespace {

RankedInstance instance(double positive, std::vector<double> negatives) {
  RankedInstance inst;
  inst.positive = 0;
  inst.scores[0] = positive;
  for (std::size_t i = 0; i < negatives.size(); ++i) {
    inst.negatives.push_back(i + 1);
    inst.scores[i + 1] = negatives[i];
  }
  return inst;
}

RankedInstance random_instance(Rng& rng, std::size_t n_neg, bool coarse = false) {
  std::vector<double> neg(n_neg);
  auto draw = [&] { return coarse ? std::floor(rng.uniform(0, 4)) : rng.uniform(0, 1); };
  for (auto& v : neg) v = draw();
  return instance(draw(), neg);
}

// Pairwise comparison count over every (positive, negative) pair.
double pairwise_auc(const std::vector<RankedInstance>& insts) {
  double total = 0;
  for (const auto& inst : insts) {
    const double p = inst.scores.at(inst.positive);
    double wins = 0;
    for (auto c : inst.negatives) {
      const double s = inst.scores.at(c);
      wins += p > s ? 1.0 : (p == s ? 0.5 : 0.0);
    }
    total += wins / static_cast<double>(inst.negatives.size());
  }
  return total / static_cast<double>(insts.size());
}

InteractionRecord dated(InteractionRecord r, std::int64_t date) {
  r.date = date;
  return r;
}

}  // namespace

TEST(Rank, Examples) {
  EXPECT_EQ(rank_of_positive(instance(0.9, {0.1, 0.5, 0.2})), 1u);
  EXPECT_EQ(rank_of_positive(instance(0.5, {0.5, 0.1})), 2u);  // ties go against the positive
  std::vector<double> above(99);
  for (std::size_t i = 0; i < 99; ++i) above[i] = 1.0 + static_cast<double>(i);
  EXPECT_EQ(rank_of_positive(instance(0.0, above)), 100u);
}

TEST(Rank, ConstantScorerRanksLast) {
  std::vector<double> flat(99, 0.3);
  EXPECT_EQ(rank_of_positive(instance(0.3, flat)), 100u);
}

TEST(Rank, InvalidInstancesRejected) {
  auto inst = instance(1.0, {0.5});
  inst.negatives.push_back(0);
  EXPECT_THROW(rank_of_positive(inst), EvalError);
  auto dup = instance(1.0, {0.5});
  dup.negatives.push_back(1);
  EXPECT_THROW(rank_of_positive(dup), EvalError);
  auto missing = instance(1.0, {0.5});
  missing.negatives.push_back(7);
  EXPECT_THROW(rank_of_positive(missing), EvalError);
  EXPECT_THROW(rank_of_positive(instance(1.0, {})), EvalError);
}

TEST(HitRatio, Examples) {
  EXPECT_DOUBLE_EQ(hr_at_k({1, 1, 1}, 1), 1.0);
  EXPECT_DOUBLE_EQ(hr_at_k({1, 11}, 10), 0.5);
  EXPECT_DOUBLE_EQ(hr_at_k({10}, 10), 1.0);
  EXPECT_THROW(hr_at_k({}, 10), EvalError);
  EXPECT_THROW(hr_at_k({1}, 0), EvalError);
}

TEST(Ndcg, Examples) {
  EXPECT_DOUBLE_EQ(ndcg_at_k({1}, 5), 1.0);
  EXPECT_DOUBLE_EQ(ndcg_at_k({3}, 3), 0.5);
  EXPECT_DOUBLE_EQ(ndcg_at_k({6}, 5), 0.0);
  EXPECT_THROW(ndcg_at_k({}, 5), EvalError);
}

TEST(Mrr, Examples) {
  EXPECT_DOUBLE_EQ(mrr({4}), 0.25);
  EXPECT_DOUBLE_EQ(mrr({1, 1}), 1.0);
  EXPECT_NEAR(mrr({1, 2, 4}), 1.75 / 3.0, 1e-15);
  EXPECT_THROW(mrr({}), EvalError);
}

TEST(Auc, Examples) {
  std::vector<double> low(99, 0.0), high(99, 2.0);
  EXPECT_DOUBLE_EQ(auc({instance(1.0, low)}), 1.0);
  EXPECT_DOUBLE_EQ(auc({instance(1.0, high)}), 0.0);
  EXPECT_DOUBLE_EQ(auc({instance(1.0, {1.0, 0.0})}), 0.75);
  EXPECT_THROW(auc({}), EvalError);
}

TEST(Auc, MatchesPairwiseOracle) {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    std::vector<RankedInstance> insts;
    for (int i = 0; i < 7; ++i) insts.push_back(random_instance(rng, 4, t % 2 == 0));
    EXPECT_NEAR(auc(insts), pairwise_auc(insts), 1e-12);
  }
  const std::vector<RankedInstance> one{random_instance(rng, 4)};
  EXPECT_EQ(auc(one), pairwise_auc(one));
}

TEST(Metrics, RandomScorerHitRatio) {
  Rng rng(2);
  std::vector<RankedInstance> insts;
  for (int i = 0; i < 3000; ++i) insts.push_back(random_instance(rng, 99));
  const auto r = evaluate(insts);
  EXPECT_NEAR(r.hr10, 0.1, 0.03);
  EXPECT_NEAR(r.auc, 0.5, 0.03);
}

TEST(Metrics, StructuralProperties) {
  Rng rng(3);
  for (int t = 0; t < 30; ++t) {
    std::vector<RankedInstance> insts;
    for (int i = 0; i < 40; ++i) insts.push_back(random_instance(rng, 99, t % 3 == 0));
    const auto r = evaluate(insts);
    EXPECT_LE(r.hr1, r.hr5);
    EXPECT_LE(r.hr5, r.hr10);
    EXPECT_LE(r.hr10, r.hr20);
    EXPECT_GE(r.mrr, r.hr1);
    for (double v : {r.ndcg5, r.ndcg10, r.ndcg20, r.auc, r.mrr}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    std::vector<std::size_t> ranks;
    for (const auto& i : insts) ranks.push_back(rank_of_positive(i));
    EXPECT_DOUBLE_EQ(hr_at_k(ranks, 100), 1.0);
  }
}

TEST(Metrics, InvariantUnderMonotoneTransform) {
  Rng rng(4);
  std::vector<RankedInstance> insts, mapped;
  for (int i = 0; i < 200; ++i) insts.push_back(random_instance(rng, 99, i % 2 == 0));
  for (auto inst : insts) {
    for (auto& [c, s] : inst.scores) s = std::exp(3.0 * s) - 7.0;
    mapped.push_back(inst);
  }
  EXPECT_EQ(evaluate(insts).to_json(), evaluate(mapped).to_json());
}

TEST(MetricReport, JsonKeys) {
  Rng rng(5);
  const auto j = evaluate({random_instance(rng, 99)}).to_json();
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  EXPECT_EQ(keys, (std::vector<std::string>{"hr1", "hr5", "hr10", "hr20", "ndcg5", "ndcg10", "ndcg20", "mrr", "auc",
                                            "n_instances"}));
  EXPECT_EQ(j["n_instances"], 1);
}

TEST(Split, LeaveLatestOut) {
  const auto ds = make_school(0, 1, small_catalog(4, 1),
                              {enroll(0, 0, 0.5), participate(0, 0), enroll(0, 1, 0.7), enroll(0, 2, 0.9)});
  const auto sp = split_train_test({ds});
  ASSERT_EQ(sp.test[0].interactions.size(), 1u);
  EXPECT_EQ(sp.test[0].interactions[0].enrollment().course.value, 2u);
  ASSERT_EQ(sp.train[0].interactions.size(), 3u);
  for (const auto& r : sp.train[0].interactions) {
    if (r.is_enrollment()) {
      EXPECT_NE(r.enrollment().course.value, 2u);
    }
  }
  EXPECT_TRUE(sp.warnings.empty());
}

TEST(Split, LatestByDate) {
  const auto ds = make_school(0, 1, small_catalog(4, 0),
                              {dated(enroll(0, 3, 0.5), 20210301), dated(enroll(0, 1, 0.7), 20191001),
                               dated(enroll(0, 2, 0.9), 20200101)});
  const auto sp = split_train_test({ds});
  ASSERT_EQ(sp.test[0].interactions.size(), 1u);
  EXPECT_EQ(sp.test[0].interactions[0].enrollment().course.value, 3u);
}

TEST(Split, SingleInteractionStaysInTrain) {
  const auto ds = make_school(0, 2, small_catalog(3, 0), {enroll(0, 0, 0.5), enroll(1, 1, 0.4), enroll(1, 2, 0.9)});
  const auto sp = split_train_test({ds});
  ASSERT_EQ(sp.test[0].interactions.size(), 1u);
  EXPECT_EQ(sp.test[0].interactions[0].student.value, 1u);
  EXPECT_EQ(sp.train[0].interactions.size(), 2u);
  ASSERT_EQ(sp.warnings.size(), 1u);
  EXPECT_NE(sp.warnings[0].find("student 0"), std::string::npos);
}

TEST(Split, RepeatedCourseLeavesTrain) {
  // The held-out pair must not leak back through an earlier duplicate record.
  const auto ds = make_school(0, 1, small_catalog(3, 0), {enroll(0, 1, 0.2), enroll(0, 0, 0.5), enroll(0, 1, 0.8)});
  const auto sp = split_train_test({ds});
  ASSERT_EQ(sp.test[0].interactions.size(), 1u);
  EXPECT_EQ(sp.test[0].interactions[0].enrollment().course.value, 1u);
  ASSERT_EQ(sp.train[0].interactions.size(), 1u);
  EXPECT_EQ(sp.train[0].interactions[0].enrollment().course.value, 0u);
}

TEST(Split, DateBoundary) {
  const auto ds = make_school(
      0, 3, small_catalog(5, 1),
      {dated(enroll(0, 0, 0.5), 20180101), dated(enroll(0, 1, 0.7), 20210101), dated(enroll(0, 0, 0.9), 20210601),
       dated(participate(0, 0), 20210701), enroll(1, 2, 0.3), dated(enroll(1, 3, 0.6), 20220101),
       dated(enroll(2, 4, 0.6), 20220101)});
  const auto sp = split_train_test({ds}, 20200101);
  std::vector<std::pair<std::size_t, std::size_t>> test;
  for (const auto& r : sp.test[0].interactions) test.emplace_back(r.student.value, r.enrollment().course.value);
  EXPECT_EQ(test, (std::vector<std::pair<std::size_t, std::size_t>>{{0, 1}, {1, 3}}));
  EXPECT_EQ(sp.train[0].interactions.size(), 2u);
  for (const auto& r : sp.train[0].interactions) EXPECT_TRUE(!r.date || *r.date < 20200101);
  ASSERT_EQ(sp.warnings.size(), 1u);
  EXPECT_NE(sp.warnings[0].find("student 2"), std::string::npos);
}

TEST(Split, DisjointOnSyntheticData) {
  const auto schools = generate_synthetic(SynthConfig{}, 6);
  const auto sp = split_train_test(schools);
  for (std::size_t u = 0; u < schools.size(); ++u) {
    std::set<std::pair<std::size_t, std::size_t>> train;
    for (const auto& r : sp.train[u].interactions)
      if (r.is_enrollment()) train.insert({r.student.value, r.enrollment().course.value});
    std::set<std::size_t> students;
    for (const auto& r : sp.test[u].interactions) {
      EXPECT_FALSE(train.count({r.student.value, r.enrollment().course.value}));
      EXPECT_TRUE(students.insert(r.student.value).second);
    }
    EXPECT_EQ(sp.train[u].interactions.size() + sp.test[u].interactions.size(), schools[u].interactions.size());
  }
}

TEST(Negatives, Examples) {
  Rng rng(6);
  const std::set<std::size_t> pos{3, 17, 40, 41, 199};
  const auto neg = sample_negatives(200, pos, 99, rng);
  EXPECT_EQ(neg.size(), 99u);
  EXPECT_EQ(std::set<std::size_t>(neg.begin(), neg.end()).size(), 99u);
  for (auto c : neg) {
    EXPECT_FALSE(pos.count(c));
    EXPECT_LT(c, 200u);
  }

  auto rest = sample_negatives(100, {42}, 99, rng);
  std::sort(rest.begin(), rest.end());
  std::vector<std::size_t> want;
  for (std::size_t c = 0; c < 100; ++c)
    if (c != 42) want.push_back(c);
  EXPECT_EQ(rest, want);

  EXPECT_THROW(sample_negatives(100, {1, 2}, 99, rng), EvalError);
  Rng a(9), b(9);
  EXPECT_EQ(sample_negatives(300, pos, 99, a), sample_negatives(300, pos, 99, b));
}

TEST(Negatives, InstancesExcludeKnownCourses) {
  SynthConfig sc;
  sc.n_schools = 1;
  const auto ds = generate_synthetic(sc, 7).front();
  const auto sp = split_train_test({ds});
  Rng rng(1);
  const Matrix pred = fctest::random_matrix(rng, static_cast<Index>(ds.n_students()), static_cast<Index>(ds.n_courses()));
  const auto insts = build_instances(sp.train[0], sp.test[0], pred, 99, 11);
  ASSERT_EQ(insts.size(), sp.test[0].interactions.size());
  for (std::size_t i = 0; i < insts.size(); ++i) {
    const auto s = sp.test[0].interactions[i].student.value;
    const auto known = known_courses(sp.train[0], sp.test[0], s);
    for (auto c : insts[i].negatives) EXPECT_FALSE(known.count(c));
    EXPECT_EQ(insts[i].scores.at(insts[i].positive), pred(static_cast<Index>(s), static_cast<Index>(insts[i].positive)));
  }
  const auto again = build_instances(sp.train[0], sp.test[0], pred, 99, 11);
  for (std::size_t i = 0; i < insts.size(); ++i) EXPECT_EQ(insts[i].negatives, again[i].negatives);
  EXPECT_THROW(build_instances(sp.train[0], sp.test[0], Matrix::Zero(1, 1), 99, 11), DimensionError);
}
