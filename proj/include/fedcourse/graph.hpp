#pragma once

#include "fedcourse/dataset.hpp"

#include <algorithm>
#include <cstddef>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace fedcourse {

enum class NodeType { Student, Course, Activity };
enum class EdgeType { StudentCourse, StudentActivity, CourseActivity };

inline const char* to_string(NodeType t) {
  switch (t) {
    case NodeType::Student: return "student";
    case NodeType::Course: return "course";
    case NodeType::Activity: return "activity";
  }
  return "?";
}

inline const char* to_string(EdgeType t) {
  switch (t) {
    case EdgeType::StudentCourse: return "student-course";
    case EdgeType::StudentActivity: return "student-activity";
    case EdgeType::CourseActivity: return "course-activity";
  }
  return "?";
}

inline std::pair<NodeType, NodeType> endpoint_types(EdgeType t) {
  switch (t) {
    case EdgeType::StudentCourse: return {NodeType::Student, NodeType::Course};
    case EdgeType::StudentActivity: return {NodeType::Student, NodeType::Activity};
    case EdgeType::CourseActivity: return {NodeType::Course, NodeType::Activity};
  }
  throw std::logic_error("bad edge type");
}

using NodeId = std::size_t;

struct Node {
  NodeType type;
  std::size_t catalog_id;  // student / course / activity index
  friend bool operator==(const Node&, const Node&) = default;
};

// Undirected; src is always the endpoint that precedes dst in node order.
struct Edge {
  NodeId src;
  NodeId dst;
  EdgeType type;
  friend bool operator==(const Edge&, const Edge&) = default;
};

struct Neighbor {
  NodeId node;
  std::size_t edge;
  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

class GraphError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Node order: students, then every catalog course, then locally observed
// activities, each block ascending by catalog id.
class HeteroGraph {
 public:
  HeteroGraph() = default;

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t edge_count() const { return edges_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const Node& node(NodeId v) const {
    check(v);
    return nodes_[v];
  }
  NodeType type(NodeId v) const { return node(v).type; }
  const Edge& edge(std::size_t e) const { return edges_.at(e); }

  std::size_t n_students() const { return n_students_; }
  std::size_t n_courses() const { return n_courses_; }
  std::size_t n_activity_nodes() const { return nodes_.size() - n_students_ - n_courses_; }

  NodeId student_node(std::size_t s) const {
    if (s >= n_students_) throw GraphError("no student " + std::to_string(s));
    return s;
  }
  NodeId course_node(std::size_t c) const {
    if (c >= n_courses_) throw GraphError("no course " + std::to_string(c));
    return n_students_ + c;
  }
  std::optional<NodeId> activity_node(std::size_t a) const {
    auto it = std::lower_bound(activity_ids_.begin(), activity_ids_.end(), a);
    if (it == activity_ids_.end() || *it != a) return std::nullopt;
    return n_students_ + n_courses_ + static_cast<std::size_t>(it - activity_ids_.begin());
  }

  const std::vector<Neighbor>& neighbors(NodeId v) const {
    check(v);
    return adjacency_[v];
  }

  std::size_t count_edges(EdgeType t) const {
    return static_cast<std::size_t>(
        std::count_if(edges_.begin(), edges_.end(), [t](const Edge& e) { return e.type == t; }));
  }

  // Builder entry point; assumes node blocks laid out as documented.
  static HeteroGraph assemble(std::size_t n_students, std::size_t n_courses,
                              std::vector<std::size_t> activity_ids,
                              const std::vector<Edge>& edges) {
    HeteroGraph g;
    g.n_students_ = n_students;
    g.n_courses_ = n_courses;
    std::sort(activity_ids.begin(), activity_ids.end());
    activity_ids.erase(std::unique(activity_ids.begin(), activity_ids.end()), activity_ids.end());
    g.activity_ids_ = std::move(activity_ids);
    for (std::size_t s = 0; s < n_students; ++s) g.nodes_.push_back({NodeType::Student, s});
    for (std::size_t c = 0; c < n_courses; ++c) g.nodes_.push_back({NodeType::Course, c});
    for (std::size_t a : g.activity_ids_) g.nodes_.push_back({NodeType::Activity, a});

    std::set<std::tuple<NodeId, NodeId, EdgeType>> seen;
    for (Edge e : edges) {
      if (e.src > e.dst) std::swap(e.src, e.dst);
      g.check(e.src);
      g.check(e.dst);
      if (e.src == e.dst) throw std::invalid_argument("self-loop on node " + std::to_string(e.src));
      const auto [ts, td] = endpoint_types(e.type);
      if (g.nodes_[e.src].type != ts || g.nodes_[e.dst].type != td)
        throw std::invalid_argument(std::string("edge endpoints do not match type ") + to_string(e.type));
      if (!seen.insert({e.src, e.dst, e.type}).second) continue;
      g.edges_.push_back(e);
    }
    std::sort(g.edges_.begin(), g.edges_.end(), [](const Edge& a, const Edge& b) {
      return std::tie(a.src, a.dst, a.type) < std::tie(b.src, b.dst, b.type);
    });
    g.adjacency_.assign(g.nodes_.size(), {});
    for (std::size_t i = 0; i < g.edges_.size(); ++i) {
      g.adjacency_[g.edges_[i].src].push_back({g.edges_[i].dst, i});
      g.adjacency_[g.edges_[i].dst].push_back({g.edges_[i].src, i});
    }
    for (auto& adj : g.adjacency_)
      std::sort(adj.begin(), adj.end(), [](const Neighbor& a, const Neighbor& b) {
        return std::tie(a.node, a.edge) < std::tie(b.node, b.edge);
      });
    return g;
  }

  friend bool operator==(const HeteroGraph&, const HeteroGraph&) = default;

 private:
  void check(NodeId v) const {
    if (v >= nodes_.size()) throw GraphError("unknown node " + std::to_string(v));
  }

  std::size_t n_students_ = 0;
  std::size_t n_courses_ = 0;
  std::vector<std::size_t> activity_ids_;
  std::vector<Node> nodes_;
  std::vector<Edge> edges_;
  std::vector<std::vector<Neighbor>> adjacency_;
};

// Edges: one per distinct enrollment pair, one per distinct participation
// pair, and (course, activity) whenever some student has both in their history.
inline HeteroGraph build_graph(const SchoolDataset& ds) {
  ds.validate();
  const std::size_t m = ds.n_students();
  const std::size_t n = ds.n_courses();
  std::vector<std::set<std::size_t>> courses_of(m), activities_of(m);
  std::set<std::size_t> observed_activities;
  for (const auto& rec : ds.interactions) {
    if (rec.is_enrollment()) {
      courses_of[rec.student.value].insert(rec.enrollment().course.value);
    } else {
      const auto a = rec.participation().activity.value;
      activities_of[rec.student.value].insert(a);
      observed_activities.insert(a);
    }
  }
  std::vector<std::size_t> act_ids(observed_activities.begin(), observed_activities.end());
  auto act_node = [&](std::size_t a) {
    return m + n +
           static_cast<std::size_t>(std::lower_bound(act_ids.begin(), act_ids.end(), a) - act_ids.begin());
  };

  std::vector<Edge> edges;
  std::set<std::pair<std::size_t, std::size_t>> course_activity;
  for (std::size_t s = 0; s < m; ++s) {
    for (std::size_t c : courses_of[s]) edges.push_back({s, m + c, EdgeType::StudentCourse});
    for (std::size_t a : activities_of[s]) edges.push_back({s, act_node(a), EdgeType::StudentActivity});
    for (std::size_t c : courses_of[s])
      for (std::size_t a : activities_of[s]) course_activity.insert({c, a});
  }
  for (const auto& [c, a] : course_activity) edges.push_back({m + c, act_node(a), EdgeType::CourseActivity});
  return HeteroGraph::assemble(m, n, std::move(act_ids), edges);
}

inline const std::vector<Neighbor>& neighbors(const HeteroGraph& g, NodeId v) { return g.neighbors(v); }

// Debug dump: header comment, then `src_type:id dst_type:id edge_type` per edge.
inline void write_edge_list(std::ostream& out, const HeteroGraph& g) {
  out << "# nodes " << g.node_count() << " edges " << g.edge_count() << "\n";
  for (const auto& e : g.edges()) {
    const auto& a = g.node(e.src);
    const auto& b = g.node(e.dst);
    out << to_string(a.type) << ':' << a.catalog_id << ' ' << to_string(b.type) << ':' << b.catalog_id << ' '
        << to_string(e.type) << '\n';
  }
}

}  // namespace fedcourse
