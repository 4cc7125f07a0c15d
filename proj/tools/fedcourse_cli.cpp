// fedcourse: experiment runner.
//
//   fedcourse run --config configs/synthetic.json --out runs/a [--set federation.rounds=10]
//   fedcourse sweep --config ... --axis embedding_dim --values 50,100,200 --out runs/sweep
//   fedcourse recommend --checkpoint runs/a/checkpoint.bin --school 0 --student 12 -k 5
//   fedcourse gen-data --config ... --out data/
//   fedcourse inspect-graph --interactions data/school_0.csv --catalog data/catalog.tsv
//
// Exit codes: 0 ok, 1 configuration error, 2 runtime error.

#include "fedcourse/experiment.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace fedcourse;

namespace {

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  Json j = path.empty() ? Json::object() : read_json_file(path);
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

void dump_graphs(const ExperimentConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  const auto split = split_train_test(load_schools(cfg), cfg.split_boundary);
  for (const auto& ds : split.train) {
    std::ofstream out(dir / ("school_" + std::to_string(ds.school_id) + ".edges"));
    write_edge_list(out, build_graph(ds));
  }
}

void print_metrics(const RunReport& rep) {
  std::cout << rep.metrics.to_json().dump() << "\n";
  std::cerr << "rounds " << rep.log.size() << (rep.early_stopped ? " (early stop)" : "") << ", train "
            << rep.seconds_train << " s\n";
  if (!rep.metrics_path.empty()) std::cerr << "wrote " << rep.report_path.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated heterogeneous-graph course recommendation"};
  app.require_subcommand(1);

  std::string config_path, out_dir, dump_dir;
  std::vector<std::string> overrides;

  auto* run_cmd = app.add_subcommand("run", "Train and evaluate one configuration");
  run_cmd->add_option("-c,--config", config_path, "JSON config file");
  run_cmd->add_option("--set", overrides, "Override a config value, e.g. model.dim=50");
  run_cmd->add_option("-o,--out", out_dir, "Output directory for metrics, report and checkpoint");
  run_cmd->add_option("--dump-graph", dump_dir, "Write per-school training graphs as edge lists");

  std::string axis;
  std::vector<std::size_t> values;
  auto* sweep_cmd = app.add_subcommand("sweep", "One run per value of a model hyperparameter");
  sweep_cmd->add_option("-c,--config", config_path, "JSON config file");
  sweep_cmd->add_option("--set", overrides, "Override a config value");
  sweep_cmd->add_option("--axis", axis, "embedding_dim or attention_heads")->required();
  sweep_cmd->add_option("--values", values, "Comma-separated values")->required()->delimiter(',');
  sweep_cmd->add_option("-o,--out", out_dir, "Output directory")->required();

  std::string checkpoint;
  std::uint32_t school = 0;
  std::int64_t student = 0;
  std::size_t k = 5;
  auto* rec_cmd = app.add_subcommand("recommend", "Top-K untaken courses for one student");
  rec_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  rec_cmd->add_option("--school", school, "School id")->required();
  rec_cmd->add_option("--student", student, "Student label as in the interaction file")->required();
  rec_cmd->add_option("-k", k, "List length");

  auto* gen_cmd = app.add_subcommand("gen-data", "Write the synthetic schools of a config as CSV files");
  gen_cmd->add_option("-c,--config", config_path, "JSON config file");
  gen_cmd->add_option("--set", overrides, "Override a config value");
  gen_cmd->add_option("-o,--out", out_dir, "Output directory")->required();

  std::string interactions, catalog, edges_out;
  auto* graph_cmd = app.add_subcommand("inspect-graph", "Summarize the graph built from one school's files");
  graph_cmd->add_option("--interactions", interactions, "Interaction CSV")->required();
  graph_cmd->add_option("--catalog", catalog, "Catalog file")->required();
  graph_cmd->add_option("--school", school, "School id");
  graph_cmd->add_option("--edges", edges_out, "Also write the edge list here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*run_cmd) {
      const auto cfg = load_config(config_path, overrides);
      if (!dump_dir.empty()) dump_graphs(cfg, dump_dir);
      const auto rep = run(cfg, out_dir.empty() ? std::nullopt : std::optional<fs::path>(out_dir));
      print_metrics(rep);
    } else if (*sweep_cmd) {
      const auto cfg = load_config(config_path, overrides);
      const auto ax = parse_sweep_axis(axis);
      const auto cells = sweep(cfg, ax, values, fs::path(out_dir));
      std::cout << sweep_csv(ax, cells);
      for (const auto& c : cells)
        if (!c.metrics) std::cerr << "value " << c.value << " failed: " << c.error << "\n";
    } else if (*rec_cmd) {
      const auto ck = Checkpoint::load(checkpoint);
      for (const auto& r : recommend(ck, school, student, k)) std::cout << r.course_label << "\t" << r.score << "\n";
    } else if (*gen_cmd) {
      const auto cfg = load_config(config_path, overrides);
      if (!cfg.synthetic) throw ConfigError("gen-data needs dataset.source = synthetic");
      const auto schools = load_schools(cfg);
      fs::create_directories(out_dir);
      for (const auto& ds : schools) {
        const fs::path csv = fs::path(out_dir) / ("school_" + std::to_string(ds.school_id) + ".csv");
        save_dataset(ds, csv, fs::path(out_dir) / "catalog.tsv");
        std::cerr << "wrote " << csv.string() << " (" << ds.n_students() << " students, " << ds.interactions.size()
                  << " records)\n";
      }
    } else if (*graph_cmd) {
      const auto ds = load_dataset(interactions, catalog, DatasetFormat::Csv, school);
      const auto g = build_graph(ds);
      std::cout << "nodes " << g.node_count() << " (students " << ds.n_students() << ", courses " << ds.n_courses()
                << ", activities " << g.node_count() - ds.n_students() - ds.n_courses() << ")\n";
      for (auto t : {EdgeType::StudentCourse, EdgeType::StudentActivity, EdgeType::CourseActivity})
        std::cout << to_string(t) << " " << g.count_edges(t) << "\n";
      if (!edges_out.empty()) {
        std::ofstream out(edges_out);
        write_edge_list(out, g);
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
