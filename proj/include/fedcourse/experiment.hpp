#pragma once

#include "fedcourse/checkpoint.hpp"
#include "fedcourse/conmf.hpp"
#include "fedcourse/dataset.hpp"
#include "fedcourse/encoder.hpp"
#include "fedcourse/eval.hpp"
#include "fedcourse/federation.hpp"
#include "fedcourse/textenc.hpp"
#include "fedcourse/trainer.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fedcourse {

using Json = nlohmann::ordered_json;

struct SchoolFiles {
  std::uint32_t id = 0;
  std::filesystem::path interactions;
  std::filesystem::path catalog;
};

struct ExperimentConfig {
  std::uint64_t seed = 42;

  // dataset
  bool synthetic = true;
  SynthConfig synth;
  std::vector<SchoolFiles> files;
  std::optional<std::int64_t> split_boundary;

  // model
  EncoderConfig encoder;
  std::size_t text_ngrams = 2;
  std::size_t batch_size = 0;

  // conmf
  ConMFConfig conmf;
  Coupling coupling = Coupling::EndToEnd;

  // federation
  FedConfig fed;
  std::size_t local_epochs = 3;

  // eval
  std::vector<std::size_t> k_list{1, 5, 10, 20};
  std::size_t negatives = 99;

  ModelOptions model_options() const {
    ModelOptions o;
    o.encoder = encoder;
    o.conmf = conmf;
    o.coupling = coupling;
    o.local_epochs = local_epochs;
    o.batch_size = batch_size;
    return o;
  }

  void validate() const {
    if (synthetic) {
      try {
        synth.validate();
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("dataset.") + e.what());
      }
    } else if (files.empty()) {
      throw ConfigError("dataset: file source needs at least one school");
    }
    model_options().validate();
    if (text_ngrams == 0) throw ConfigError("model: text_ngrams must be positive");
    fed.validate(synthetic ? synth.n_schools : files.size());
    if (negatives == 0) throw ConfigError("eval: negatives must be positive");
    for (auto k : k_list)
      if (k == 0) throw ConfigError("eval: K values must be >= 1");
  }
};

namespace detail {

inline void reject_unknown(const Json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, v] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <typename T>
void read(const Json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + where + "." + key + "' has the wrong type");
  }
}

inline std::string coupling_name(Coupling c) { return c == Coupling::EndToEnd ? "end_to_end" : "warm_start"; }
inline std::string aggregation_name(Aggregation a) { return a == Aggregation::Sum ? "sum" : "mean"; }

}  // namespace detail

inline ExperimentConfig config_from_json(const Json& j) {
  using detail::read;
  ExperimentConfig c;
  detail::reject_unknown(j, "", {"seed", "dataset", "model", "conmf", "federation", "eval"});
  read(j, "seed", c.seed, "");

  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    detail::reject_unknown(d, "dataset", {"source", "synthetic", "schools", "split_boundary"});
    std::string source = "synthetic";
    read(d, "source", source, "dataset");
    if (source != "synthetic" && source != "files")
      throw ConfigError("dataset.source must be 'synthetic' or 'files'");
    c.synthetic = source == "synthetic";
    if (d.contains("synthetic")) {
      const auto& s = d["synthetic"];
      detail::reject_unknown(s, "dataset.synthetic",
                             {"n_schools", "students_min", "students_max", "n_courses", "n_activities", "clusters",
                              "courses_per_cluster", "enrollments_per_student", "activities_per_student",
                              "in_cluster_prob", "high_rating", "low_rating", "noise", "score_fraction"});
      const std::string w = "dataset.synthetic";
      read(s, "n_schools", c.synth.n_schools, w);
      read(s, "students_min", c.synth.students_min, w);
      read(s, "students_max", c.synth.students_max, w);
      read(s, "n_courses", c.synth.n_courses, w);
      read(s, "n_activities", c.synth.n_activities, w);
      read(s, "clusters", c.synth.clusters, w);
      read(s, "courses_per_cluster", c.synth.courses_per_cluster, w);
      read(s, "enrollments_per_student", c.synth.enrollments_per_student, w);
      read(s, "activities_per_student", c.synth.activities_per_student, w);
      read(s, "in_cluster_prob", c.synth.in_cluster_prob, w);
      read(s, "high_rating", c.synth.high_rating, w);
      read(s, "low_rating", c.synth.low_rating, w);
      read(s, "noise", c.synth.noise, w);
      read(s, "score_fraction", c.synth.score_fraction, w);
    }
    if (d.contains("schools")) {
      if (!d["schools"].is_array()) throw ConfigError("dataset.schools must be an array");
      for (const auto& s : d["schools"]) {
        detail::reject_unknown(s, "dataset.schools[]", {"id", "interactions", "catalog"});
        SchoolFiles f;
        std::string inter, cat;
        read(s, "id", f.id, "dataset.schools[]");
        read(s, "interactions", inter, "dataset.schools[]");
        read(s, "catalog", cat, "dataset.schools[]");
        if (inter.empty() || cat.empty()) throw ConfigError("dataset.schools[] needs interactions and catalog paths");
        f.interactions = inter;
        f.catalog = cat;
        c.files.push_back(f);
      }
    }
    if (d.contains("split_boundary") && !d["split_boundary"].is_null()) {
      std::int64_t b = 0;
      read(d, "split_boundary", b, "dataset");
      c.split_boundary = b;
    }
  }

  if (j.contains("model")) {
    const auto& m = j["model"];
    detail::reject_unknown(m, "model", {"dim", "heads", "ffn_dim", "compat_hidden", "raw_dim", "dropout",
                                        "output_gain", "text_ngrams", "batch_size"});
    read(m, "dim", c.encoder.dim, "model");
    read(m, "heads", c.encoder.heads, "model");
    read(m, "ffn_dim", c.encoder.ffn_dim, "model");
    read(m, "compat_hidden", c.encoder.compat_hidden, "model");
    read(m, "raw_dim", c.encoder.raw_dim, "model");
    read(m, "dropout", c.encoder.dropout, "model");
    read(m, "output_gain", c.encoder.output_gain, "model");
    read(m, "text_ngrams", c.text_ngrams, "model");
    read(m, "batch_size", c.batch_size, "model");
  }

  if (j.contains("conmf")) {
    const auto& m = j["conmf"];
    detail::reject_unknown(m, "conmf", {"beta", "gamma", "masked", "mode"});
    read(m, "beta", c.conmf.beta, "conmf");
    read(m, "gamma", c.conmf.gamma, "conmf");
    read(m, "masked", c.conmf.masked, "conmf");
    std::string mode = detail::coupling_name(c.coupling);
    read(m, "mode", mode, "conmf");
    if (mode == "end_to_end") c.coupling = Coupling::EndToEnd;
    else if (mode == "warm_start") c.coupling = Coupling::WarmStart;
    else throw ConfigError("conmf.mode must be 'end_to_end' or 'warm_start'");
  }

  if (j.contains("federation")) {
    const auto& f = j["federation"];
    detail::reject_unknown(f, "federation", {"lr_global", "rounds", "subset_size", "aggregation", "local_epochs",
                                             "adaptive_lr", "redistribute_every", "patience"});
    read(f, "lr_global", c.fed.lr_global, "federation");
    read(f, "rounds", c.fed.rounds, "federation");
    read(f, "subset_size", c.fed.subset_size, "federation");
    read(f, "local_epochs", c.local_epochs, "federation");
    read(f, "adaptive_lr", c.fed.adaptive_lr, "federation");
    read(f, "redistribute_every", c.fed.redistribute_every, "federation");
    read(f, "patience", c.fed.patience, "federation");
    std::string agg = detail::aggregation_name(c.fed.aggregation);
    read(f, "aggregation", agg, "federation");
    if (agg == "sum") c.fed.aggregation = Aggregation::Sum;
    else if (agg == "mean") c.fed.aggregation = Aggregation::Mean;
    else throw ConfigError("federation.aggregation must be 'sum' or 'mean'");
  }

  if (j.contains("eval")) {
    const auto& e = j["eval"];
    detail::reject_unknown(e, "eval", {"k", "negatives"});
    read(e, "k", c.k_list, "eval");
    read(e, "negatives", c.negatives, "eval");
  }
  c.fed.selection_seed = derive_seed(c.seed, "select");
  c.validate();
  return c;
}

inline Json config_to_json(const ExperimentConfig& c) {
  Json j;
  j["seed"] = c.seed;
  Json d;
  d["source"] = c.synthetic ? "synthetic" : "files";
  if (c.synthetic) {
    const auto& s = c.synth;
    d["synthetic"] = {{"n_schools", s.n_schools},
                      {"students_min", s.students_min},
                      {"students_max", s.students_max},
                      {"n_courses", s.n_courses},
                      {"n_activities", s.n_activities},
                      {"clusters", s.clusters},
                      {"courses_per_cluster", s.courses_per_cluster},
                      {"enrollments_per_student", s.enrollments_per_student},
                      {"activities_per_student", s.activities_per_student},
                      {"in_cluster_prob", s.in_cluster_prob},
                      {"high_rating", s.high_rating},
                      {"low_rating", s.low_rating},
                      {"noise", s.noise},
                      {"score_fraction", s.score_fraction}};
  } else {
    d["schools"] = Json::array();
    for (const auto& f : c.files)
      d["schools"].push_back({{"id", f.id}, {"interactions", f.interactions.string()}, {"catalog", f.catalog.string()}});
  }
  d["split_boundary"] = c.split_boundary ? Json(*c.split_boundary) : Json(nullptr);
  j["dataset"] = d;
  j["model"] = {{"dim", c.encoder.dim},
                {"heads", c.encoder.heads},
                {"ffn_dim", c.encoder.ffn_dim},
                {"compat_hidden", c.encoder.compat_hidden},
                {"raw_dim", c.encoder.raw_dim},
                {"dropout", c.encoder.dropout},
                {"output_gain", c.encoder.output_gain},
                {"text_ngrams", c.text_ngrams},
                {"batch_size", c.batch_size}};
  j["conmf"] = {{"beta", c.conmf.beta},
                {"gamma", c.conmf.gamma},
                {"masked", c.conmf.masked},
                {"mode", detail::coupling_name(c.coupling)}};
  j["federation"] = {{"lr_global", c.fed.lr_global},
                     {"rounds", c.fed.rounds},
                     {"subset_size", c.fed.subset_size},
                     {"aggregation", detail::aggregation_name(c.fed.aggregation)},
                     {"local_epochs", c.local_epochs},
                     {"adaptive_lr", c.fed.adaptive_lr},
                     {"redistribute_every", c.fed.redistribute_every},
                     {"patience", c.fed.patience}};
  j["eval"] = {{"k", c.k_list}, {"negatives", c.negatives}};
  return j;
}

// Lenient scalar parse for command-line overrides: JSON literal if it parses,
// else a plain string.
inline void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  Json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key");
    if (!node->is_object()) *node = Json::object();
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return Json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Pipeline

inline std::vector<SchoolDataset> load_schools(const ExperimentConfig& cfg) {
  if (cfg.synthetic) return generate_synthetic(cfg.synth, derive_seed(cfg.seed, "data"));
  std::vector<SchoolDataset> out;
  for (const auto& f : cfg.files) out.push_back(load_dataset(f.interactions, f.catalog, DatasetFormat::Csv, f.id));
  for (std::size_t i = 1; i < out.size(); ++i)
    if (!(out[i].catalog == out[0].catalog))
      throw DatasetError("school " + std::to_string(out[i].school_id) + ": catalog differs from school " +
                         std::to_string(out[0].school_id));
  return out;
}

struct RunReport {
  Json config;
  std::vector<RoundLog> log;
  MetricReport metrics;
  std::map<std::size_t, double> hr_at;  // every K in eval.k
  bool early_stopped = false;
  std::size_t n_test_warnings = 0;
  double seconds_data = 0, seconds_train = 0, seconds_eval = 0;
  std::filesystem::path metrics_path, report_path, checkpoint_path;
  Checkpoint checkpoint;
};

inline Json round_json(const RoundLog& r) {
  Json j;
  j["type"] = "round";
  j["round"] = r.round;
  j["selected"] = r.selected;
  Json loss = Json::object();
  for (const auto& [id, l] : r.loss) loss[std::to_string(id)] = l;
  j["loss"] = loss;
  j["wall_seconds"] = r.wall_seconds;
  return j;
}

namespace detail {

struct TrainedFederation {
  std::vector<std::shared_ptr<const SchoolModel>> models;
  std::unique_ptr<Federation> fed;
  TrainingResult result;
};

// Metrics over every school's test set, in ascending school order.
inline std::vector<RankedInstance> collect_instances(const Federation& fed, const std::vector<SchoolDataset>& test,
                                                     std::size_t negatives, std::uint64_t seed) {
  std::vector<RankedInstance> all;
  for (std::size_t i = 0; i < fed.size(); ++i) {
    const auto& c = fed.client(i);
    const SchoolDataset* t = nullptr;
    for (const auto& ds : test)
      if (ds.school_id == c.id()) t = &ds;
    if (!t || t->interactions.empty()) continue;
    const Matrix pred = c.model().predictions(fed.canonical(), c.local());
    auto inst = build_instances(c.model().data(), *t, pred, negatives, seed);
    all.insert(all.end(), std::make_move_iterator(inst.begin()), std::make_move_iterator(inst.end()));
  }
  return all;
}

inline TrainedFederation train_federation(const ExperimentConfig& cfg, const std::vector<SchoolDataset>& train,
                                          const TextEncoder& text) {
  TrainedFederation out;
  auto opts = cfg.model_options();
  opts.encoder.n_courses = train.front().n_courses();
  opts.encoder.n_activities = train.front().n_activities();
  for (const auto& ds : train)
    out.models.push_back(std::make_shared<const SchoolModel>(ds, opts, text, derive_seed(cfg.seed, "model")));
  const auto raw = encode_catalog(text, train.front().catalog);
  ParamSet init = init_model_params(opts, raw, derive_seed(cfg.seed, "init"));
  out.fed = std::make_unique<Federation>(out.models, std::move(init), cfg.fed);

  std::function<double(const Federation&)> validate;
  std::vector<SchoolDataset> val_test;
  if (cfg.fed.patience > 0) {
    // Inner leave-latest-out on the training data; validation HR@10.
    auto inner = split_train_test(train);
    val_test = std::move(inner.test);
    validate = [&val_test, &cfg](const Federation& f) {
      auto inst = collect_instances(f, val_test, cfg.negatives, derive_seed(cfg.seed, "validation"));
      if (inst.empty()) return 0.0;
      return evaluate(inst).hr10;
    };
  }
  out.result = run_training(*out.fed, validate);
  return out;
}

inline Checkpoint make_checkpoint(const Federation& fed, const std::vector<SchoolDataset>& train,
                                  const std::vector<SchoolDataset>& test) {
  Checkpoint ck;
  ck.round = fed.round();
  ck.shared = fed.canonical();
  ck.course_labels = train.front().catalog.course_labels;
  for (std::size_t i = 0; i < fed.size(); ++i) {
    const auto& c = fed.client(i);
    SchoolSnapshot snap;
    snap.id = c.id();
    snap.student_labels = c.model().data().student_labels;
    snap.local = c.local();
    const auto st = c.model().factors(fed.canonical(), c.local());
    snap.student_factors = st.student_factors;
    snap.course_factors = st.course_factors;
    snap.history = Matrix::Zero(static_cast<Index>(c.model().n_students()), static_cast<Index>(ck.course_labels.size()));
    for (const auto& sets : {&train, &test})
      for (const auto& ds : *sets)
        if (ds.school_id == c.id())
          for (const auto& rec : ds.interactions)
            if (rec.is_enrollment())
              snap.history(static_cast<Index>(rec.student.value), static_cast<Index>(rec.enrollment().course.value)) = 1.0;
    ck.schools.push_back(std::move(snap));
  }
  return ck;
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
}

}  // namespace detail

// Full pipeline: data -> split -> federated training -> evaluation. Writes
// metrics.json, report.jsonl and checkpoint.bin into out_dir when given.
inline RunReport run(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  using clock = std::chrono::steady_clock;
  cfg.validate();
  RunReport rep;
  rep.config = config_to_json(cfg);

  auto t0 = clock::now();
  const auto schools = load_schools(cfg);
  auto split = split_train_test(schools, cfg.split_boundary);
  rep.n_test_warnings = split.warnings.size();
  const HashingEncoder text(cfg.encoder.raw_dim, cfg.text_ngrams, derive_seed(cfg.seed, "text"));
  auto t1 = clock::now();
  rep.seconds_data = std::chrono::duration<double>(t1 - t0).count();

  auto trained = detail::train_federation(cfg, split.train, text);
  rep.log = trained.result.log;
  rep.early_stopped = trained.result.early_stopped;
  auto t2 = clock::now();
  rep.seconds_train = std::chrono::duration<double>(t2 - t1).count();

  const auto inst = detail::collect_instances(*trained.fed, split.test, cfg.negatives, derive_seed(cfg.seed, "negatives"));
  rep.metrics = evaluate(inst);
  {
    std::vector<std::size_t> ranks;
    for (const auto& i : inst) ranks.push_back(rank_of_positive(i));
    for (auto k : cfg.k_list) rep.hr_at[k] = hr_at_k(ranks, k);
  }
  rep.checkpoint = detail::make_checkpoint(*trained.fed, split.train, split.test);
  rep.seconds_eval = std::chrono::duration<double>(clock::now() - t2).count();

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    rep.metrics_path = *out_dir / "metrics.json";
    rep.report_path = *out_dir / "report.jsonl";
    rep.checkpoint_path = *out_dir / "checkpoint.bin";
    detail::write_text(rep.metrics_path, rep.metrics.to_json().dump() + "\n");
    rep.checkpoint.save(rep.checkpoint_path);

    std::ostringstream lines;
    lines << Json{{"type", "config"}, {"config", rep.config}}.dump() << "\n";
    for (const auto& r : rep.log) lines << round_json(r).dump() << "\n";
    Json hr = Json::object();
    for (const auto& [k, v] : rep.hr_at) hr[std::to_string(k)] = v;
    lines << Json{{"type", "metrics"}, {"metrics", rep.metrics.to_json()}, {"hr_at", hr},
                  {"early_stopped", rep.early_stopped}, {"test_warnings", rep.n_test_warnings}}
                 .dump()
          << "\n";
    lines << Json{{"type", "timing"},
                  {"data_seconds", rep.seconds_data},
                  {"train_seconds", rep.seconds_train},
                  {"eval_seconds", rep.seconds_eval}}
                 .dump()
          << "\n";
    lines << Json{{"type", "artifacts"},
                  {"metrics", rep.metrics_path.string()},
                  {"checkpoint", rep.checkpoint_path.string()}}
                 .dump()
          << "\n";
    detail::write_text(rep.report_path, lines.str());
  }
  return rep;
}

enum class SweepAxis { EmbeddingDim, AttentionHeads };

inline SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "embedding_dim") return SweepAxis::EmbeddingDim;
  if (s == "attention_heads") return SweepAxis::AttentionHeads;
  throw ConfigError("sweep axis must be 'embedding_dim' or 'attention_heads'");
}

struct SweepCell {
  std::size_t value = 0;
  std::optional<MetricReport> metrics;
  std::string error;
};

inline const char* kSweepCsvHeader = "axis,value,status,hr1,hr5,hr10,hr20,ndcg5,ndcg10,ndcg20,mrr,auc,n_instances,error";

inline std::string sweep_csv(SweepAxis axis, const std::vector<SweepCell>& cells) {
  std::ostringstream out;
  out << kSweepCsvHeader << "\n";
  const char* name = axis == SweepAxis::EmbeddingDim ? "embedding_dim" : "attention_heads";
  for (const auto& c : cells) {
    out << name << ',' << c.value << ',' << (c.metrics ? "ok" : "error");
    if (c.metrics) {
      const auto& m = *c.metrics;
      for (double v : {m.hr1, m.hr5, m.hr10, m.hr20, m.ndcg5, m.ndcg10, m.ndcg20, m.mrr, m.auc})
        out << ',' << detail::format_double(v);
      out << ',' << m.n_instances << ",";
    } else {
      std::string msg = c.error;
      for (auto& ch : msg)
        if (ch == ',' || ch == '\n' || ch == '"') ch = ' ';
      out << ",,,,,,,,,,," << msg;
    }
    out << "\n";
  }
  return out.str();
}

// One run per value with the shared seed. A failing cell is recorded and the
// sweep moves on. Writes sweep.csv plus <axis>_<value>/ run directories.
inline std::vector<SweepCell> sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<std::size_t>& values,
                                    const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  std::vector<SweepCell> cells;
  const char* name = axis == SweepAxis::EmbeddingDim ? "embedding_dim" : "attention_heads";
  for (auto v : values) {
    SweepCell cell;
    cell.value = v;
    try {
      ExperimentConfig cfg = base;
      (axis == SweepAxis::EmbeddingDim ? cfg.encoder.dim : cfg.encoder.heads) = v;
      std::optional<std::filesystem::path> dir;
      if (out_dir) dir = *out_dir / (std::string(name) + "_" + std::to_string(v));
      cell.metrics = run(cfg, dir).metrics;
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
    cells.push_back(std::move(cell));
  }
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    detail::write_text(*out_dir / "sweep.csv", sweep_csv(axis, cells));
  }
  return cells;
}

}  // namespace fedcourse
