#pragma once

#include "fedcourse/tensor.hpp"
#include "fedcourse/wire.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedcourse {

// Checkpoint file:
//
//   8 bytes   magic "FCCKPT01"
//   u64       manifest length (little-endian)
//   manifest  compact JSON: {"round", "course_labels", "schools": [{"id",
//             "student_labels"}], "tensors": [{"name","rows","cols"}]}
//   payload   every tensor in manifest order, row-major little-endian f64
//
// Tensor names: shared.<param>, school.<id>.local, school.<id>.student_factors,
// school.<id>.course_factors, school.<id>.history (1 = course taken).

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SchoolSnapshot {
  std::uint32_t id = 0;
  std::vector<std::int64_t> student_labels;
  Matrix local;
  Matrix student_factors;
  Matrix course_factors;
  Matrix history;
};

struct Checkpoint {
  std::uint64_t round = 0;
  ParamSet shared;
  std::vector<std::int64_t> course_labels;
  std::vector<SchoolSnapshot> schools;

  const SchoolSnapshot& school(std::uint32_t id) const {
    for (const auto& s : schools)
      if (s.id == id) return s;
    throw CheckpointError("checkpoint has no school " + std::to_string(id));
  }

  Bytes serialize() const {
    std::vector<std::pair<std::string, const Matrix*>> tensors;
    for (const auto& [name, m] : shared) tensors.emplace_back("shared." + name, &m);
    nlohmann::ordered_json meta;
    meta["round"] = round;
    meta["course_labels"] = course_labels;
    meta["schools"] = nlohmann::ordered_json::array();
    for (const auto& s : schools) {
      meta["schools"].push_back({{"id", s.id}, {"student_labels", s.student_labels}});
      const std::string p = "school." + std::to_string(s.id) + ".";
      tensors.emplace_back(p + "local", &s.local);
      tensors.emplace_back(p + "student_factors", &s.student_factors);
      tensors.emplace_back(p + "course_factors", &s.course_factors);
      tensors.emplace_back(p + "history", &s.history);
    }
    meta["tensors"] = nlohmann::ordered_json::array();
    for (const auto& [name, m] : tensors) meta["tensors"].push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
    const std::string manifest = meta.dump();

    wire::Writer w;
    w.bytes("FCCKPT01", 8);
    w.u64(manifest.size());
    w.bytes(manifest.data(), manifest.size());
    for (const auto& [name, m] : tensors)
      for (Index i = 0; i < m->size(); ++i) w.f64(m->data()[i]);
    return std::move(w.buffer());
  }

  static Checkpoint parse(std::span<const std::uint8_t> bytes) {
    try {
      wire::Reader r(bytes);
      if (r.str(8) != "FCCKPT01") throw CheckpointError("not a checkpoint (bad magic)");
      const auto len = r.u64();
      if (len > r.remaining()) throw CheckpointError("truncated manifest");
      const auto meta = nlohmann::json::parse(r.str(static_cast<std::size_t>(len)));
      Checkpoint ck;
      ck.round = meta.at("round").get<std::uint64_t>();
      ck.course_labels = meta.at("course_labels").get<std::vector<std::int64_t>>();
      std::map<std::string, Matrix> loaded;
      for (const auto& t : meta.at("tensors")) {
        const auto rows = t.at("rows").get<Index>();
        const auto cols = t.at("cols").get<Index>();
        if (rows < 0 || cols < 0 || static_cast<std::uint64_t>(rows * cols) * 8 > r.remaining())
          throw CheckpointError("truncated tensor payload");
        Matrix m(rows, cols);
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = r.f64();
        loaded.emplace(t.at("name").get<std::string>(), std::move(m));
      }
      if (r.remaining() != 0) throw CheckpointError("trailing bytes after payload");
      auto take = [&](const std::string& name) {
        auto it = loaded.find(name);
        if (it == loaded.end()) throw CheckpointError("missing tensor " + name);
        Matrix m = std::move(it->second);
        loaded.erase(it);
        return m;
      };
      for (const auto& s : meta.at("schools")) {
        SchoolSnapshot snap;
        snap.id = s.at("id").get<std::uint32_t>();
        snap.student_labels = s.at("student_labels").get<std::vector<std::int64_t>>();
        const std::string p = "school." + std::to_string(snap.id) + ".";
        snap.local = take(p + "local");
        snap.student_factors = take(p + "student_factors");
        snap.course_factors = take(p + "course_factors");
        snap.history = take(p + "history");
        ck.schools.push_back(std::move(snap));
      }
      for (auto& [name, m] : loaded) {
        if (name.rfind("shared.", 0) != 0) throw CheckpointError("unexpected tensor " + name);
        ck.shared.add(name.substr(7), std::move(m));
      }
      return ck;
    } catch (const ProtocolError& e) {
      throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("corrupt checkpoint manifest: ") + e.what());
    }
  }

  void save(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed: " + path.string());
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path.string());
    const Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse(bytes);
  }
};

struct Recommendation {
  std::int64_t course_label = 0;
  double score = 0.0;
};

// Top-K untaken courses by predicted rating, ties by ascending course id.
inline std::vector<Recommendation> recommend(const Checkpoint& ck, std::uint32_t school, std::int64_t student_label,
                                             std::size_t k) {
  const auto& snap = ck.school(school);
  const auto it = std::find(snap.student_labels.begin(), snap.student_labels.end(), student_label);
  if (it == snap.student_labels.end())
    throw CheckpointError("school " + std::to_string(school) + " has no student " + std::to_string(student_label));
  const auto s = static_cast<Index>(it - snap.student_labels.begin());
  const RowVector scores = snap.student_factors.row(s) * snap.course_factors.transpose();
  std::vector<std::size_t> candidates;
  for (Index c = 0; c < scores.size(); ++c)
    if (snap.history(s, c) == 0.0) candidates.push_back(static_cast<std::size_t>(c));
  std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
    return scores(static_cast<Index>(a)) > scores(static_cast<Index>(b));
  });
  candidates.resize(std::min(k, candidates.size()));
  std::vector<Recommendation> out;
  for (auto c : candidates) out.push_back({ck.course_labels.at(c), scores(static_cast<Index>(c))});
  return out;
}

}  // namespace fedcourse
