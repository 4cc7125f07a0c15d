#include "support.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace fedcourse;
using fctest::enroll;
using fctest::make_school;
using fctest::participate;
using fctest::small_catalog;

TEST(BuildGraph, OneEnrollment) {
  const auto g = build_graph(make_school(0, 1, small_catalog(1, 0), {enroll(0, 0, 1.0)}));
  EXPECT_EQ(g.node_count(), 2u);
  EXPECT_EQ(g.edge_count(), 1u);
  EXPECT_EQ(g.count_edges(EdgeType::StudentCourse), 1u);
}

TEST(BuildGraph, CourseAndActivityGiveTriangle) {
  const auto g = build_graph(make_school(0, 1, small_catalog(1, 1), {enroll(0, 0, 1.0), participate(0, 0)}));
  EXPECT_EQ(g.node_count(), 3u);
  EXPECT_EQ(g.edge_count(), 3u);
  for (auto t : {EdgeType::StudentCourse, EdgeType::StudentActivity, EdgeType::CourseActivity})
    EXPECT_EQ(g.count_edges(t), 1u);
}

TEST(BuildGraph, CoOccurrenceThroughAnyStudent) {
  const auto ds = make_school(0, 2, small_catalog(1, 2),
                              {enroll(0, 0, 1.0), enroll(1, 0, 0.5), participate(0, 0), participate(1, 1)});
  const auto g = build_graph(ds);
  // Brute force: (c, a) present iff some student has both.
  for (std::size_t a = 0; a < 2; ++a) {
    bool want = false;
    for (std::size_t s = 0; s < 2; ++s) {
      bool has_c = false, has_a = false;
      for (const auto& r : ds.interactions) {
        if (r.student.value != s) continue;
        if (r.is_enrollment() && r.enrollment().course.value == 0) has_c = true;
        if (!r.is_enrollment() && r.participation().activity.value == a) has_a = true;
      }
      want = want || (has_c && has_a);
    }
    const auto an = *g.activity_node(a);
    bool found = false;
    for (const auto& nb : g.neighbors(g.course_node(0)))
      if (nb.node == an && g.edge(nb.edge).type == EdgeType::CourseActivity) found = true;
    EXPECT_EQ(found, want) << "activity " << a;
  }
  EXPECT_EQ(g.count_edges(EdgeType::CourseActivity), 2u);
}

TEST(BuildGraph, NodeOrderAndUnobservedActivities) {
  const auto ds = make_school(0, 2, small_catalog(3, 4), {enroll(1, 2, 1.0), participate(0, 3), participate(1, 1)});
  const auto g = build_graph(ds);
  ASSERT_EQ(g.node_count(), 2u + 3u + 2u);
  EXPECT_EQ(g.node(0).type, NodeType::Student);
  EXPECT_EQ(g.node(2).type, NodeType::Course);
  EXPECT_EQ(g.node(4).catalog_id, 2u);
  EXPECT_EQ(g.node(5).type, NodeType::Activity);
  EXPECT_EQ(g.node(5).catalog_id, 1u);
  EXPECT_EQ(g.node(6).catalog_id, 3u);
  EXPECT_FALSE(g.activity_node(0).has_value());
  EXPECT_TRUE(g.neighbors(g.course_node(0)).empty());  // catalog course without local records
}

TEST(BuildGraph, InvariantsOnSyntheticSchools) {
  for (const auto& ds : generate_synthetic(SynthConfig{}, 21)) {
    const auto g = build_graph(ds);
    std::set<std::tuple<NodeId, NodeId, EdgeType>> triples;
    for (const auto& e : g.edges()) {
      EXPECT_NE(e.src, e.dst);
      const auto [ts, td] = endpoint_types(e.type);
      EXPECT_EQ(g.type(e.src), ts);
      EXPECT_EQ(g.type(e.dst), td);
      EXPECT_TRUE(triples.insert({e.src, e.dst, e.type}).second);
    }
    for (NodeId v = 0; v < g.node_count(); ++v) {
      const auto& nb = g.neighbors(v);
      EXPECT_TRUE(std::is_sorted(nb.begin(), nb.end(), [](auto& a, auto& b) { return a.node < b.node; }));
      for (const auto& n : nb) {
        bool back = false;
        for (const auto& m : g.neighbors(n.node)) back = back || m.node == v;
        EXPECT_TRUE(back);
      }
    }
    EXPECT_EQ(g.count_edges(EdgeType::StudentCourse), build_rating_matrix(ds).observed());
    EXPECT_EQ(build_graph(ds), g);
  }
}

TEST(Neighbors, IsolatedAndUnknown) {
  const auto g = HeteroGraph::assemble(1, 2, {}, {{0, 1, EdgeType::StudentCourse}});
  EXPECT_TRUE(neighbors(g, 2).empty());
  EXPECT_EQ(neighbors(g, 0).size(), 1u);
  EXPECT_THROW(neighbors(g, 3), GraphError);
}

TEST(Neighbors, ThreeEdges) {
  const auto g = HeteroGraph::assemble(1, 2, {0},
                                       {{0, 1, EdgeType::StudentCourse},
                                        {0, 2, EdgeType::StudentCourse},
                                        {0, 3, EdgeType::StudentActivity}});
  EXPECT_EQ(neighbors(g, 0).size(), 3u);
}

TEST(Assemble, RejectsBadEdges) {
  EXPECT_THROW(HeteroGraph::assemble(2, 1, {}, {{0, 1, EdgeType::StudentCourse}}), std::invalid_argument);
  EXPECT_THROW(HeteroGraph::assemble(1, 1, {}, {{1, 1, EdgeType::StudentCourse}}), std::invalid_argument);
  EXPECT_THROW(HeteroGraph::assemble(1, 1, {}, {{0, 7, EdgeType::StudentCourse}}), GraphError);
  const auto g = HeteroGraph::assemble(1, 1, {}, {{0, 1, EdgeType::StudentCourse}, {1, 0, EdgeType::StudentCourse}});
  EXPECT_EQ(g.edge_count(), 1u);
}

TEST(EdgeList, Dump) {
  const auto g = build_graph(make_school(0, 1, small_catalog(1, 1), {enroll(0, 0, 1.0), participate(0, 0)}));
  std::ostringstream out;
  write_edge_list(out, g);
  const auto s = out.str();
  EXPECT_NE(s.find("# nodes 3 edges 3"), std::string::npos);
  EXPECT_NE(s.find("student:0 course:0 student-course"), std::string::npos);
}
