#pragma once

#include "fedcourse/graph.hpp"
#include "fedcourse/rng.hpp"
#include "fedcourse/tensor.hpp"
#include "fedcourse/textenc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedcourse {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct EncoderConfig {
  std::size_t dim = 100;
  std::size_t heads = 10;
  std::size_t ffn_dim = 0;        // 0 -> 4 * dim
  std::size_t compat_hidden = 0;  // 0 -> head_dim
  std::size_t raw_dim = 512;
  double dropout = 0.2;
  double output_gain = 0.0;  // initial gain of the final layer norm; 0 -> 1/sqrt(dim)
  std::size_t n_courses = 0;
  std::size_t n_activities = 0;

  std::size_t head_dim() const { return dim / heads; }
  std::size_t ffn_width() const { return ffn_dim ? ffn_dim : 4 * dim; }
  std::size_t compat_width() const { return compat_hidden ? compat_hidden : head_dim(); }
  double initial_output_gain() const {
    return output_gain > 0.0 ? output_gain : 1.0 / std::sqrt(static_cast<double>(dim));
  }

  void validate() const {
    if (dim < 2) throw ConfigError("encoder: dim must be at least 2");
    if (heads == 0) throw ConfigError("encoder: heads must be positive");
    if (dim % heads != 0)
      throw ConfigError("encoder: heads (" + std::to_string(heads) + ") must divide dim (" +
                        std::to_string(dim) + ")");
    if (raw_dim == 0) throw ConfigError("encoder: raw_dim must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("encoder: dropout must be in [0, 1)");
    if (!(output_gain >= 0.0) || !std::isfinite(output_gain)) throw ConfigError("encoder: output_gain must be >= 0");
  }
};

// Shared tensor names.
namespace pname {
inline const std::string course_embedding = "embedding.course";
inline const std::string activity_embedding = "embedding.activity";
inline const std::string text_weight = "text.weight";
inline const std::string text_bias = "text.bias";
inline const std::string edge_student_course = "edge.student_course";
inline const std::string attn_output = "attention.output";
inline const std::string ffn_in = "ffn.in";
inline const std::string ffn_in_bias = "ffn.in_bias";
inline const std::string ffn_out = "ffn.out";
inline const std::string ffn_out_bias = "ffn.out_bias";
inline const std::string norm1_gain = "norm1.gain";
inline const std::string norm1_bias = "norm1.bias";
inline const std::string norm2_gain = "norm2.gain";
inline const std::string norm2_bias = "norm2.bias";
inline std::string head(std::size_t h, const char* part) {
  return "attention.head" + std::to_string(h) + "." + part;
}
}  // namespace pname

namespace detail {

inline Matrix xavier(Rng& rng, Index rows, Index cols) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-a, a);
  return m;
}

inline Matrix gaussian(Rng& rng, Index rows, Index cols, double sd) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, sd);
  return m;
}

}  // namespace detail

inline ParamSet init_shared_params(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto d = static_cast<Index>(cfg.dim);
  const auto dh = static_cast<Index>(cfg.head_dim());
  const auto ch = static_cast<Index>(cfg.compat_width());
  const auto df = static_cast<Index>(cfg.ffn_width());
  auto rng = [&](const std::string& name) { return derive_rng(seed, "init." + name); };

  ParamSet p;
  {
    auto r = rng(pname::course_embedding);
    p.add(pname::course_embedding, detail::gaussian(r, static_cast<Index>(cfg.n_courses), d, 0.1));
  }
  {
    auto r = rng(pname::activity_embedding);
    p.add(pname::activity_embedding, detail::gaussian(r, static_cast<Index>(cfg.n_activities), d, 0.1));
  }
  {
    auto r = rng(pname::text_weight);
    p.add(pname::text_weight, detail::xavier(r, d, static_cast<Index>(cfg.raw_dim)));
  }
  p.add(pname::text_bias, Matrix::Zero(1, d));
  {
    auto r = rng(pname::edge_student_course);
    p.add(pname::edge_student_course, detail::gaussian(r, 1, d, 0.1));
  }
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    for (const char* part : {"query", "key", "value"}) {
      auto r = rng(pname::head(h, part));
      p.add(pname::head(h, part), detail::xavier(r, d, dh));
    }
    {
      auto r = rng(pname::head(h, "compat_hidden"));
      p.add(pname::head(h, "compat_hidden"), detail::xavier(r, 3 * dh, ch));
    }
    p.add(pname::head(h, "compat_hidden_bias"), Matrix::Zero(1, ch));
    {
      auto r = rng(pname::head(h, "compat_out"));
      p.add(pname::head(h, "compat_out"), detail::xavier(r, ch, 1));
    }
  }
  {
    auto r = rng(pname::attn_output);
    p.add(pname::attn_output, detail::xavier(r, d, d));
  }
  {
    auto r = rng(pname::ffn_in);
    p.add(pname::ffn_in, detail::xavier(r, d, df));
  }
  p.add(pname::ffn_in_bias, Matrix::Zero(1, df));
  {
    auto r = rng(pname::ffn_out);
    p.add(pname::ffn_out, detail::xavier(r, df, d));
  }
  p.add(pname::ffn_out_bias, Matrix::Zero(1, d));
  p.add(pname::norm1_gain, Matrix::Ones(1, d));
  p.add(pname::norm1_bias, Matrix::Zero(1, d));
  p.add(pname::norm2_gain, Matrix::Constant(1, d, cfg.initial_output_gain()));
  p.add(pname::norm2_bias, Matrix::Zero(1, d));
  return p;
}

inline Matrix init_student_embedding(std::size_t n_students, std::size_t dim, std::uint64_t seed,
                                     std::uint32_t school_id) {
  auto r = derive_rng(seed, "init.student", {school_id});
  return detail::gaussian(r, static_cast<Index>(n_students), static_cast<Index>(dim), 0.1);
}

// ---------------------------------------------------------------------------
// Building blocks

// Content plus graph embedding. Nodes without a description (students) keep
// their graph embedding.
inline Vector fuse(const std::optional<Vector>& content, const Vector& graph_emb) {
  if (!content) return graph_emb;
  if (content->size() != graph_emb.size())
    throw DimensionError("fuse: content has " + std::to_string(content->size()) + " entries, graph embedding " +
                         std::to_string(graph_emb.size()));
  return *content + graph_emb;
}

inline constexpr double kLayerNormEps = 1e-5;

inline Vector layer_norm(const Vector& x, const Vector& gain, const Vector& bias) {
  if (x.size() < 2) throw DimensionError("layer_norm: need at least two entries");
  if (gain.size() != x.size() || bias.size() != x.size()) throw DimensionError("layer_norm: size mismatch");
  const double mean = x.mean();
  const double var = (x.array() - mean).square().mean();
  const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
  return ((x.array() - mean) * inv * gain.array() + bias.array()).matrix();
}

// Row-wise softmax(Q K^T / sqrt(d_k)) V.
inline Matrix scaled_dot_attention(const Matrix& q, const Matrix& k, const Matrix& v) {
  if (q.cols() != k.cols()) throw DimensionError("scaled_dot_attention: query/key width mismatch");
  if (k.rows() != v.rows()) throw DimensionError("scaled_dot_attention: key/value count mismatch");
  Matrix s = (q * k.transpose()) / std::sqrt(static_cast<double>(k.cols()));
  for (Index i = 0; i < s.rows(); ++i) {
    const double mx = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - mx).exp().matrix();
    s.row(i) /= s.row(i).sum();
  }
  return s * v;
}

struct AttentionHead {
  Matrix query;               // d x dh
  Matrix key;                 // d x dh
  Matrix value;               // d x dh
  Matrix compat_hidden;       // 3dh x ch
  RowVector compat_hidden_bias;  // ch
  Vector compat_out;          // ch
  std::size_t head_dim() const { return static_cast<std::size_t>(query.cols()); }
};

inline AttentionHead head_params(const ParamSet& p, std::size_t h) {
  AttentionHead a;
  a.query = p.at(pname::head(h, "query"));
  a.key = p.at(pname::head(h, "key"));
  a.value = p.at(pname::head(h, "value"));
  a.compat_hidden = p.at(pname::head(h, "compat_hidden"));
  a.compat_hidden_bias = p.at(pname::head(h, "compat_hidden_bias")).row(0);
  a.compat_out = p.at(pname::head(h, "compat_out")).col(0);
  return a;
}

// Two-layer perceptron over concat(e_i, e_j, e_edge), ReLU hidden, no output bias.
inline double compat_score(const AttentionHead& head, const Vector& e_i, const Vector& e_j,
                           const Vector& e_edge) {
  const auto dh = static_cast<Index>(head.head_dim());
  if (e_i.size() != dh || e_j.size() != dh || e_edge.size() != dh)
    throw DimensionError("compat_score: inputs must have head_dim entries");
  Vector z(3 * dh);
  z << e_i, e_j, e_edge;
  const RowVector hidden = ((z.transpose() * head.compat_hidden) + head.compat_hidden_bias).cwiseMax(0.0);
  return hidden.dot(head.compat_out.transpose());
}

// Per-node head projections used by attend_node.
struct HeadProjections {
  Matrix query;   // N x dh
  Matrix key;     // N x dh
  Matrix value;   // N x dh
  Vector student_course_edge_key;  // dh, key projection of the learned edge embedding
};

// Edge representation for the compatibility score: activity-incident edges
// use the activity endpoint, student-course edges the learned edge vector.
inline Vector edge_key(const Edge& e, const HeadProjections& proj) {
  if (e.type == EdgeType::StudentCourse) return proj.student_course_edge_key;
  return proj.key.row(static_cast<Index>(e.dst)).transpose();  // dst is the activity node
}

struct AttendResult {
  Vector output;                // dh
  std::vector<double> weights;  // one per neighbor, in neighbors() order
};

// softmax over neighbors of the compatibility scores, then the weighted sum of
// neighbor value vectors. Isolated nodes produce zeros.
inline AttendResult attend_node(const AttentionHead& head, const HeteroGraph& g, NodeId v,
                                const HeadProjections& proj) {
  const auto& nbrs = g.neighbors(v);
  AttendResult res;
  res.output = Vector::Zero(static_cast<Index>(head.head_dim()));
  if (nbrs.empty()) return res;
  std::vector<double> scores;
  scores.reserve(nbrs.size());
  const Vector qv = proj.query.row(static_cast<Index>(v)).transpose();
  for (const auto& nb : nbrs) {
    const Vector kj = proj.key.row(static_cast<Index>(nb.node)).transpose();
    scores.push_back(compat_score(head, qv, kj, edge_key(g.edge(nb.edge), proj)));
  }
  const double mx = *std::max_element(scores.begin(), scores.end());
  double total = 0.0;
  for (double& s : scores) total += (s = std::exp(s - mx));
  for (std::size_t j = 0; j < nbrs.size(); ++j) {
    const double a = scores[j] / total;
    res.weights.push_back(a);
    res.output += a * proj.value.row(static_cast<Index>(nbrs[j].node)).transpose();
  }
  return res;
}

// ---------------------------------------------------------------------------
// Full layer: fuse -> multi-head graph attention -> output projection ->
// residual + layer norm -> FFN -> residual + layer norm.

struct LayerNormCache {
  Matrix normalized;  // xhat
  Vector inv_std;
};

namespace detail {

inline Matrix layer_norm_rows(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache& cache) {
  const Index n = x.rows();
  const Index d = x.cols();
  cache.normalized.resize(n, d);
  cache.inv_std.resize(n);
  Matrix out(n, d);
  for (Index i = 0; i < n; ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std(i) = inv;
    cache.normalized.row(i) = (x.row(i).array() - mean) * inv;
    out.row(i) = cache.normalized.row(i).array() * gain.row(0).array() + bias.row(0).array();
  }
  return out;
}

inline Matrix layer_norm_rows_backward(const Matrix& dout, const Matrix& gain, const LayerNormCache& cache,
                                       Matrix& dgain, Matrix& dbias) {
  const Index n = dout.rows();
  const Index d = dout.cols();
  Matrix dx(n, d);
  for (Index i = 0; i < n; ++i) {
    const RowVector dxhat = (dout.row(i).array() * gain.row(0).array()).matrix();
    const auto& xhat = cache.normalized.row(i);
    dgain.row(0) += (dout.row(i).array() * xhat.array()).matrix();
    dbias.row(0) += dout.row(i);
    const double sum = dxhat.sum();
    const double dot = dxhat.dot(xhat);
    dx.row(i) = (cache.inv_std(i) / static_cast<double>(d)) *
                (static_cast<double>(d) * dxhat.array() - sum - xhat.array() * dot).matrix();
  }
  return dx;
}

}  // namespace detail

struct HeadForward {
  Matrix query, key, value;  // N x dh
  RowVector edge_key;        // dh
  Matrix hidden_pre;         // P x ch, one row per directed (node, neighbor) pair
  Vector score;              // P
  Vector alpha;              // P, softmax per node
  Vector keep;               // P, dropout multiplier (1 when not training)
};

struct EncoderForward {
  EncoderConfig config;
  bool training = false;
  std::vector<std::size_t> offsets;  // N + 1, pair ranges per node
  std::vector<std::size_t> pair_node;  // P, neighbor node of each pair
  std::vector<std::size_t> pair_edge;  // P
  Matrix course_raw;                 // n_courses x d_raw
  Matrix course_pre;                 // n_courses x d, W e before ReLU
  Matrix activity_raw;               // A x d_raw, observed activities in node order
  Matrix activity_pre;               // A x d
  Matrix fused;                      // N x d
  std::vector<HeadForward> heads;
  Matrix concat;                     // N x d
  LayerNormCache norm1;
  Matrix after_norm1;                // N x d
  Matrix ffn_pre;                    // N x d_ff
  Matrix ffn_keep;                   // N x d, dropout multiplier on FFN output
  Matrix ffn_hidden;                 // N x d_ff
  LayerNormCache norm2;
  Matrix output;                     // N x d

  std::size_t n_students = 0;
  std::size_t n_courses = 0;

  Matrix students() const { return output.topRows(static_cast<Index>(n_students)); }
  Matrix courses() const {
    return output.middleRows(static_cast<Index>(n_students), static_cast<Index>(n_courses));
  }
  // Attention weights of head h for the neighbors of v, in neighbors() order.
  std::vector<double> attention_weights(std::size_t h, NodeId v) const {
    std::vector<double> w;
    for (std::size_t p = offsets[v]; p < offsets[v + 1]; ++p) w.push_back(heads[h].alpha(static_cast<Index>(p)));
    return w;
  }
};

struct NodeRepresentations {
  Matrix all;       // N x d, graph node order
  Matrix students;  // m x d
  Matrix courses;   // n x d
};

inline void check_encoder_inputs(const EncoderConfig& cfg, const ParamSet& p, const Matrix& student_table,
                                 const HeteroGraph& g, const RawContent& raw) {
  cfg.validate();
  const auto d = static_cast<Index>(cfg.dim);
  if (student_table.rows() != static_cast<Index>(g.n_students()) || student_table.cols() != d)
    throw DimensionError("encode: student table shape does not match graph");
  if (p.at(pname::course_embedding).rows() != static_cast<Index>(g.n_courses()))
    throw DimensionError("encode: course table does not match graph");
  if (raw.course.rows() != static_cast<Index>(g.n_courses()) ||
      raw.course.cols() != static_cast<Index>(cfg.raw_dim))
    throw DimensionError("encode: raw course content shape mismatch");
  if (p.at(pname::text_weight).cols() != static_cast<Index>(cfg.raw_dim))
    throw DimensionError("encode: text layer width mismatch");
}

inline EncoderForward encode_forward(const EncoderConfig& cfg, const ParamSet& p, const Matrix& student_table,
                                     const HeteroGraph& g, const RawContent& raw, Rng* dropout_rng = nullptr) {
  check_encoder_inputs(cfg, p, student_table, g, raw);
  EncoderForward f;
  f.config = cfg;
  f.training = dropout_rng != nullptr && cfg.dropout > 0.0;
  f.n_students = g.n_students();
  f.n_courses = g.n_courses();
  const auto N = static_cast<Index>(g.node_count());
  const auto d = static_cast<Index>(cfg.dim);
  const auto dh = static_cast<Index>(cfg.head_dim());
  const auto m = static_cast<Index>(g.n_students());
  const auto n = static_cast<Index>(g.n_courses());
  const auto A = static_cast<Index>(g.n_activity_nodes());
  const double keep_scale = f.training ? 1.0 / (1.0 - cfg.dropout) : 1.0;

  // Fused inputs.
  const Matrix& W = p.at(pname::text_weight);
  const RowVector b = p.at(pname::text_bias).row(0);
  f.course_raw = raw.course;
  f.course_pre = f.course_raw * W.transpose();
  f.activity_raw.resize(A, raw.activity.cols());
  for (Index i = 0; i < A; ++i)
    f.activity_raw.row(i) = raw.activity.row(static_cast<Index>(g.node(static_cast<NodeId>(m + n + i)).catalog_id));
  f.activity_pre = f.activity_raw * W.transpose();

  f.fused.resize(N, d);
  f.fused.topRows(m) = student_table;
  {
    Matrix content = f.course_pre.cwiseMax(0.0);
    content.rowwise() += b;
    f.fused.middleRows(m, n) = p.at(pname::course_embedding) + content;
  }
  {
    const Matrix& table = p.at(pname::activity_embedding);
    for (Index i = 0; i < A; ++i) {
      const auto a = static_cast<Index>(g.node(static_cast<NodeId>(m + n + i)).catalog_id);
      f.fused.row(m + n + i) = table.row(a) + (f.activity_pre.row(i).cwiseMax(0.0) + b);
    }
  }

  // Directed pair layout.
  f.offsets.assign(static_cast<std::size_t>(N) + 1, 0);
  for (Index v = 0; v < N; ++v)
    f.offsets[static_cast<std::size_t>(v) + 1] = f.offsets[static_cast<std::size_t>(v)] + g.neighbors(static_cast<NodeId>(v)).size();
  const std::size_t P = f.offsets.back();
  f.pair_node.resize(P);
  f.pair_edge.resize(P);
  for (Index v = 0; v < N; ++v) {
    std::size_t p_i = f.offsets[static_cast<std::size_t>(v)];
    for (const auto& nb : g.neighbors(static_cast<NodeId>(v))) {
      f.pair_node[p_i] = nb.node;
      f.pair_edge[p_i] = nb.edge;
      ++p_i;
    }
  }

  // Attention heads.
  f.concat = Matrix::Zero(N, d);
  f.heads.resize(cfg.heads);
  const RowVector edge_sc = p.at(pname::edge_student_course).row(0);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    auto& hf = f.heads[h];
    const Matrix& Wq = p.at(pname::head(h, "query"));
    const Matrix& Wk = p.at(pname::head(h, "key"));
    const Matrix& Wv = p.at(pname::head(h, "value"));
    const Matrix& W1 = p.at(pname::head(h, "compat_hidden"));
    const RowVector b1 = p.at(pname::head(h, "compat_hidden_bias")).row(0);
    const Vector w2 = p.at(pname::head(h, "compat_out")).col(0);
    hf.query = f.fused * Wq;
    hf.key = f.fused * Wk;
    hf.value = f.fused * Wv;
    hf.edge_key = edge_sc * Wk;
    const Matrix qw = hf.query * W1.topRows(dh);
    const Matrix kw = hf.key * W1.middleRows(dh, dh);
    const Matrix ew = hf.key * W1.bottomRows(dh);
    const RowVector ew_sc = hf.edge_key * W1.bottomRows(dh);
    const auto ch = W1.cols();
    hf.hidden_pre.resize(static_cast<Index>(P), ch);
    hf.score.resize(static_cast<Index>(P));
    hf.alpha.resize(static_cast<Index>(P));
    hf.keep = Vector::Ones(static_cast<Index>(P));
    for (Index v = 0; v < N; ++v) {
      const std::size_t lo = f.offsets[static_cast<std::size_t>(v)], hi = f.offsets[static_cast<std::size_t>(v) + 1];
      if (lo == hi) continue;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t q = lo; q < hi; ++q) {
        const auto j = static_cast<Index>(f.pair_node[q]);
        const Edge& e = g.edge(f.pair_edge[q]);
        RowVector pre = qw.row(v) + kw.row(j) + b1;
        if (e.type == EdgeType::StudentCourse) pre += ew_sc;
        else pre += ew.row(static_cast<Index>(e.dst));
        hf.hidden_pre.row(static_cast<Index>(q)) = pre;
        const double s = pre.cwiseMax(0.0).dot(w2.transpose());
        hf.score(static_cast<Index>(q)) = s;
        mx = std::max(mx, s);
      }
      double total = 0.0;
      for (std::size_t q = lo; q < hi; ++q) {
        const double e = std::exp(hf.score(static_cast<Index>(q)) - mx);
        hf.alpha(static_cast<Index>(q)) = e;
        total += e;
      }
      RowVector out = RowVector::Zero(dh);
      for (std::size_t q = lo; q < hi; ++q) {
        const auto qi = static_cast<Index>(q);
        hf.alpha(qi) /= total;
        if (f.training) hf.keep(qi) = dropout_rng->bernoulli(cfg.dropout) ? 0.0 : keep_scale;
        out += hf.alpha(qi) * hf.keep(qi) * hf.value.row(static_cast<Index>(f.pair_node[q]));
      }
      f.concat.block(v, static_cast<Index>(h) * dh, 1, dh) = out;
    }
  }

  const Matrix residual1 = f.fused + f.concat * p.at(pname::attn_output);
  f.after_norm1 = detail::layer_norm_rows(residual1, p.at(pname::norm1_gain), p.at(pname::norm1_bias), f.norm1);

  f.ffn_pre = f.after_norm1 * p.at(pname::ffn_in);
  f.ffn_pre.rowwise() += p.at(pname::ffn_in_bias).row(0);
  f.ffn_hidden = f.ffn_pre.cwiseMax(0.0);
  Matrix ffn_out = f.ffn_hidden * p.at(pname::ffn_out);
  ffn_out.rowwise() += p.at(pname::ffn_out_bias).row(0);
  f.ffn_keep = Matrix::Ones(N, d);
  if (f.training)
    for (Index i = 0; i < f.ffn_keep.size(); ++i)
      f.ffn_keep.data()[i] = dropout_rng->bernoulli(cfg.dropout) ? 0.0 : keep_scale;
  const Matrix residual2 = f.after_norm1 + ffn_out.cwiseProduct(f.ffn_keep);
  f.output = detail::layer_norm_rows(residual2, p.at(pname::norm2_gain), p.at(pname::norm2_bias), f.norm2);

  for (Index v = 0; v < N; ++v)
    if (!f.output.row(v).allFinite()) {
      const auto& node = g.node(static_cast<NodeId>(v));
      throw NumericError("encode: non-finite representation at node " + std::to_string(v) + " (" +
                         to_string(node.type) + " " + std::to_string(node.catalog_id) + ")");
    }
  return f;
}

inline NodeRepresentations encode(const EncoderConfig& cfg, const ParamSet& p, const Matrix& student_table,
                                  const HeteroGraph& g, const RawContent& raw) {
  auto f = encode_forward(cfg, p, student_table, g, raw, nullptr);
  return {f.output, f.students(), f.courses()};
}

struct EncoderGradients {
  ParamSet shared;        // same manifest as the shared parameters
  Matrix student_table;   // m x d
};

// Reverse pass for a cached forward. `upstream` is dL/d(output), N x d.
inline EncoderGradients encode_backward(const EncoderForward& f, const ParamSet& p, const HeteroGraph& g,
                                        const Matrix& upstream) {
  const auto& cfg = f.config;
  const auto N = static_cast<Index>(g.node_count());
  const auto d = static_cast<Index>(cfg.dim);
  const auto dh = static_cast<Index>(cfg.head_dim());
  const auto m = static_cast<Index>(f.n_students);
  const auto n = static_cast<Index>(f.n_courses);
  const auto A = N - m - n;
  if (upstream.rows() != N || upstream.cols() != d) throw DimensionError("encode_backward: upstream shape mismatch");
  if (f.output.rows() != N) throw std::logic_error("encode_backward: forward cache does not match graph");

  EncoderGradients grads;
  grads.shared = p.zeros_like();
  ParamSet& gp = grads.shared;

  // Output layer norm.
  const Matrix d_res2 = detail::layer_norm_rows_backward(upstream, p.at(pname::norm2_gain), f.norm2,
                                                         gp.at(pname::norm2_gain), gp.at(pname::norm2_bias));
  Matrix d_y = d_res2;
  const Matrix d_ffn_out = d_res2.cwiseProduct(f.ffn_keep);
  gp.at(pname::ffn_out) += f.ffn_hidden.transpose() * d_ffn_out;
  gp.at(pname::ffn_out_bias).row(0) += d_ffn_out.colwise().sum();
  Matrix d_hidden = d_ffn_out * p.at(pname::ffn_out).transpose();
  d_hidden = d_hidden.cwiseProduct((f.ffn_pre.array() > 0.0).cast<double>().matrix());
  gp.at(pname::ffn_in) += f.after_norm1.transpose() * d_hidden;
  gp.at(pname::ffn_in_bias).row(0) += d_hidden.colwise().sum();
  d_y += d_hidden * p.at(pname::ffn_in).transpose();

  const Matrix d_res1 = detail::layer_norm_rows_backward(d_y, p.at(pname::norm1_gain), f.norm1,
                                                         gp.at(pname::norm1_gain), gp.at(pname::norm1_bias));
  Matrix d_fused = d_res1;
  gp.at(pname::attn_output) += f.concat.transpose() * d_res1;
  const Matrix d_concat = d_res1 * p.at(pname::attn_output).transpose();

  RowVector d_edge_sc = RowVector::Zero(d);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const auto& hf = f.heads[h];
    const Matrix& Wq = p.at(pname::head(h, "query"));
    const Matrix& Wk = p.at(pname::head(h, "key"));
    const Matrix& Wv = p.at(pname::head(h, "value"));
    const Matrix& W1 = p.at(pname::head(h, "compat_hidden"));
    const Vector w2 = p.at(pname::head(h, "compat_out")).col(0);
    const auto ch = W1.cols();

    Matrix d_q = Matrix::Zero(N, dh), d_k = Matrix::Zero(N, dh), d_v = Matrix::Zero(N, dh);
    Matrix d_qw = Matrix::Zero(N, ch), d_kw = Matrix::Zero(N, ch), d_ew = Matrix::Zero(N, ch);
    RowVector d_ew_sc = RowVector::Zero(ch);
    Matrix& g_w1 = gp.at(pname::head(h, "compat_hidden"));
    Matrix& g_b1 = gp.at(pname::head(h, "compat_hidden_bias"));
    Matrix& g_w2 = gp.at(pname::head(h, "compat_out"));

    for (Index v = 0; v < N; ++v) {
      const std::size_t lo = f.offsets[static_cast<std::size_t>(v)], hi = f.offsets[static_cast<std::size_t>(v) + 1];
      if (lo == hi) continue;
      const RowVector d_out = d_concat.block(v, static_cast<Index>(h) * dh, 1, dh);
      // d alpha, and weighted-mean term for the softmax Jacobian.
      double weighted = 0.0;
      std::vector<double> d_alpha(hi - lo);
      for (std::size_t q = lo; q < hi; ++q) {
        const auto qi = static_cast<Index>(q);
        const auto j = static_cast<Index>(f.pair_node[q]);
        const double scaled = hf.alpha(qi) * hf.keep(qi);
        d_v.row(j) += scaled * d_out;
        d_alpha[q - lo] = hf.keep(qi) * d_out.dot(hf.value.row(j));
        weighted += hf.alpha(qi) * d_alpha[q - lo];
      }
      for (std::size_t q = lo; q < hi; ++q) {
        const auto qi = static_cast<Index>(q);
        const double d_score = hf.alpha(qi) * (d_alpha[q - lo] - weighted);
        if (d_score == 0.0) continue;
        const RowVector hidden = hf.hidden_pre.row(qi).cwiseMax(0.0);
        g_w2.col(0) += d_score * hidden.transpose();
        RowVector d_pre = d_score * w2.transpose();
        d_pre = d_pre.cwiseProduct((hf.hidden_pre.row(qi).array() > 0.0).cast<double>().matrix());
        g_b1.row(0) += d_pre;
        d_qw.row(v) += d_pre;
        d_kw.row(static_cast<Index>(f.pair_node[q])) += d_pre;
        const Edge& e = g.edge(f.pair_edge[q]);
        if (e.type == EdgeType::StudentCourse) d_ew_sc += d_pre;
        else d_ew.row(static_cast<Index>(e.dst)) += d_pre;
      }
    }

    g_w1.topRows(dh) += hf.query.transpose() * d_qw;
    g_w1.middleRows(dh, dh) += hf.key.transpose() * d_kw;
    g_w1.bottomRows(dh) += hf.key.transpose() * d_ew + hf.edge_key.transpose() * d_ew_sc;
    d_q += d_qw * W1.topRows(dh).transpose();
    d_k += d_kw * W1.middleRows(dh, dh).transpose() + d_ew * W1.bottomRows(dh).transpose();
    const RowVector d_edge_key = d_ew_sc * W1.bottomRows(dh).transpose();

    const RowVector edge_sc = p.at(pname::edge_student_course).row(0);
    gp.at(pname::head(h, "query")) += f.fused.transpose() * d_q;
    gp.at(pname::head(h, "key")) += f.fused.transpose() * d_k + edge_sc.transpose() * d_edge_key;
    gp.at(pname::head(h, "value")) += f.fused.transpose() * d_v;
    d_edge_sc += d_edge_key * Wk.transpose();
    d_fused += d_q * Wq.transpose() + d_k * Wk.transpose() + d_v * Wv.transpose();
  }
  gp.at(pname::edge_student_course).row(0) += d_edge_sc;

  // Fusion: students -> local table; courses and activities -> shared tables
  // and the text layer.
  grads.student_table = d_fused.topRows(m);
  const Matrix d_course = d_fused.middleRows(m, n);
  gp.at(pname::course_embedding) += d_course;
  Matrix& g_tw = gp.at(pname::text_weight);
  Matrix& g_tb = gp.at(pname::text_bias);
  {
    const Matrix d_pre = d_course.cwiseProduct((f.course_pre.array() > 0.0).cast<double>().matrix());
    g_tb.row(0) += d_course.colwise().sum();
    g_tw += d_pre.transpose() * f.course_raw;
  }
  Matrix& g_act = gp.at(pname::activity_embedding);
  for (Index i = 0; i < A; ++i) {
    const auto a = static_cast<Index>(g.node(static_cast<NodeId>(m + n + i)).catalog_id);
    g_act.row(a) += d_fused.row(m + n + i);
  }
  if (A > 0) {
    const Matrix d_act = d_fused.bottomRows(A);
    g_tb.row(0) += d_act.colwise().sum();
    const Matrix d_pre = d_act.cwiseProduct((f.activity_pre.array() > 0.0).cast<double>().matrix());
    g_tw += d_pre.transpose() * f.activity_raw;
  }
  return grads;
}

}  // namespace fedcourse
