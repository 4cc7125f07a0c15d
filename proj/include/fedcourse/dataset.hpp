#pragma once

#include "fedcourse/rng.hpp"
#include "fedcourse/tensor.hpp"

#include <algorithm>
#include <charconv>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <variant>
#include <vector>

namespace fedcourse {

template <typename Tag>
struct Id {
  std::size_t value = 0;
  constexpr auto operator<=>(const Id&) const = default;
};

struct StudentTag {};
struct CourseTag {};
struct ActivityTag {};
using StudentId = Id<StudentTag>;
using CourseId = Id<CourseTag>;
using ActivityId = Id<ActivityTag>;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Ratings from raw engagement

// Time spent over total course duration. Values above 1 (rewatching) are kept.
inline double derive_rating_duration(double spent_seconds, double total_seconds) {
  if (!(total_seconds > 0.0)) throw std::domain_error("course duration must be positive");
  if (!(spent_seconds >= 0.0)) throw std::domain_error("time spent must be non-negative");
  return spent_seconds / total_seconds;
}

// Student score over the course's average score.
inline double derive_rating_score(double student_score, double course_average) {
  if (!(course_average > 0.0)) throw std::domain_error("course average score must be positive");
  if (!(student_score >= 0.0)) throw std::domain_error("student score must be non-negative");
  return student_score / course_average;
}

struct Duration {
  double spent = 0.0;  // t
  double total = 0.0;  // T
  friend bool operator==(const Duration&, const Duration&) = default;
};

struct Score {
  double student = 0.0;  // A_s
  double average = 0.0;  // A_c
  friend bool operator==(const Score&, const Score&) = default;
};

using RawSignal = std::variant<Duration, Score>;

inline double derive_rating(const RawSignal& raw) {
  return std::visit(
      [](const auto& s) -> double {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Duration>)
          return derive_rating_duration(s.spent, s.total);
        else
          return derive_rating_score(s.student, s.average);
      },
      raw);
}

// ---------------------------------------------------------------------------
// Records

struct Enrollment {
  CourseId course;
  RawSignal signal;
  friend bool operator==(const Enrollment&, const Enrollment&) = default;
};

struct Participation {
  ActivityId activity;
  std::optional<CourseId> course;  // the course the activity happened in, when known
  friend bool operator==(const Participation&, const Participation&) = default;
};

struct InteractionRecord {
  StudentId student;
  std::variant<Enrollment, Participation> event;
  std::optional<std::int64_t> date;

  bool is_enrollment() const { return std::holds_alternative<Enrollment>(event); }
  const Enrollment& enrollment() const { return std::get<Enrollment>(event); }
  const Participation& participation() const { return std::get<Participation>(event); }

  friend bool operator==(const InteractionRecord&, const InteractionRecord&) = default;
};

// Course and activity catalog. Identical at every school.
struct Catalog {
  std::vector<std::int64_t> course_labels;
  std::vector<std::string> course_text;
  std::vector<std::int64_t> activity_labels;
  std::vector<std::string> activity_text;

  std::size_t n_courses() const { return course_labels.size(); }
  std::size_t n_activities() const { return activity_labels.size(); }

  friend bool operator==(const Catalog&, const Catalog&) = default;
};

struct SchoolDataset {
  std::uint32_t school_id = 0;
  std::vector<std::int64_t> student_labels;  // dense id -> label in the source file
  std::vector<InteractionRecord> interactions;
  Catalog catalog;

  std::size_t n_students() const { return student_labels.size(); }
  std::size_t n_courses() const { return catalog.n_courses(); }
  std::size_t n_activities() const { return catalog.n_activities(); }
  // Number of samples used for the adaptive learning rate.
  std::size_t n_u() const { return interactions.size(); }

  void validate() const {
    if (catalog.course_text.size() != catalog.course_labels.size() ||
        catalog.activity_text.size() != catalog.activity_labels.size())
      throw DatasetError("catalog text/label size mismatch");
    for (std::size_t i = 0; i < interactions.size(); ++i) {
      const auto& rec = interactions[i];
      auto where = [&] { return "record " + std::to_string(i) + ": "; };
      if (rec.student.value >= n_students())
        throw DatasetError(where() + "unknown student " + std::to_string(rec.student.value));
      if (rec.is_enrollment()) {
        const auto& e = rec.enrollment();
        if (e.course.value >= n_courses())
          throw DatasetError(where() + "unknown course " + std::to_string(e.course.value));
        (void)derive_rating(e.signal);
      } else {
        const auto& p = rec.participation();
        if (p.activity.value >= n_activities())
          throw DatasetError(where() + "unknown activity " + std::to_string(p.activity.value));
        if (p.course && p.course->value >= n_courses())
          throw DatasetError(where() + "unknown course " + std::to_string(p.course->value));
      }
    }
  }

  friend bool operator==(const SchoolDataset&, const SchoolDataset&) = default;
};

// ---------------------------------------------------------------------------
// Rating matrix

using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct RatingMatrix {
  Matrix values;
  BoolMatrix mask;

  std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(values.cols()); }
  std::size_t observed() const { return static_cast<std::size_t>(mask.count()); }
  Matrix mask_as_double() const { return mask.cast<double>().matrix(); }
};

// Last enrollment of (s, c) in file order wins.
inline RatingMatrix build_rating_matrix(const SchoolDataset& ds) {
  ds.validate();
  RatingMatrix rm;
  rm.values = Matrix::Zero(static_cast<Eigen::Index>(ds.n_students()),
                           static_cast<Eigen::Index>(ds.n_courses()));
  rm.mask = BoolMatrix::Constant(rm.values.rows(), rm.values.cols(), false);
  for (const auto& rec : ds.interactions) {
    if (!rec.is_enrollment()) continue;
    const auto& e = rec.enrollment();
    const auto s = static_cast<Eigen::Index>(rec.student.value);
    const auto c = static_cast<Eigen::Index>(e.course.value);
    rm.values(s, c) = derive_rating(e.signal);
    rm.mask(s, c) = true;
  }
  return rm;
}

// Column means over observed cells. Columns without observations fall back to
// the global observed mean (0 when nothing is observed).
inline Vector course_average_vector(const RatingMatrix& rm) {
  const auto n = static_cast<Eigen::Index>(rm.cols());
  Vector sum = Vector::Zero(n);
  Eigen::VectorXi count = Eigen::VectorXi::Zero(n);
  double total = 0.0;
  std::size_t total_count = 0;
  for (Eigen::Index s = 0; s < rm.values.rows(); ++s)
    for (Eigen::Index c = 0; c < n; ++c)
      if (rm.mask(s, c)) {
        sum(c) += rm.values(s, c);
        ++count(c);
        total += rm.values(s, c);
        ++total_count;
      }
  const double global = total_count ? total / static_cast<double>(total_count) : 0.0;
  Vector r(n);
  for (Eigen::Index c = 0; c < n; ++c) r(c) = count(c) ? sum(c) / count(c) : global;
  return r;
}

// ---------------------------------------------------------------------------
// Files
//
// Interactions: CSV with header `student,course,kind,activity,t_or_As,T_or_Ac`
// and an optional trailing `date` column. kind is one of
//   duration  enrollment rated by t/T
//   score     enrollment rated by A_s/A_c
//   activity  participation in an activity category (course optional)
// Catalog sidecar: one entry per line, `c<id>\t<text>` or `a<id>\t<text>`.
// Text escapes: \t, \n, \\.

namespace detail {

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
std::optional<T> parse_number(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  T value{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return value;
}

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::string escape_text(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string unescape_text(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      const char n = s[++i];
      if (n == 't') out += '\t';
      else if (n == 'n') out += '\n';
      else if (n == 'r') out += '\r';
      else out += n;
    } else {
      out += s[i];
    }
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename F>
void for_each_line(const std::string& text, F&& f) {
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    f(line_no, std::string_view(text).substr(start, end - start));
    start = end + 1;
  }
}

}  // namespace detail

inline Catalog parse_catalog(const std::string& text, const std::string& source = "catalog") {
  std::map<std::int64_t, std::string> courses, activities;
  detail::for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    if (detail::trim(line).empty()) return;
    auto err = [&](const std::string& msg) {
      return DatasetError(source + ":" + std::to_string(line_no) + ": " + msg);
    };
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) throw err("expected '<id>\\t<description>'");
    const auto key = detail::trim(line.substr(0, tab));
    if (key.size() < 2 || (key[0] != 'c' && key[0] != 'a'))
      throw err("id must look like c<number> or a<number>");
    const auto id = detail::parse_number<std::int64_t>(key.substr(1));
    if (!id || *id < 0) throw err("bad id '" + std::string(key) + "'");
    auto& target = key[0] == 'c' ? courses : activities;
    if (!target.emplace(*id, detail::unescape_text(line.substr(tab + 1))).second)
      throw err("duplicate id '" + std::string(key) + "'");
  });
  Catalog cat;
  for (auto& [id, t] : courses) {
    cat.course_labels.push_back(id);
    cat.course_text.push_back(std::move(t));
  }
  for (auto& [id, t] : activities) {
    cat.activity_labels.push_back(id);
    cat.activity_text.push_back(std::move(t));
  }
  return cat;
}

inline constexpr std::string_view kInteractionHeader = "student,course,kind,activity,t_or_As,T_or_Ac";

// Parses interaction CSV text against a catalog. Ids are reindexed densely in
// ascending label order; students are the distinct labels in the file.
inline SchoolDataset parse_interactions(const std::string& text, const Catalog& catalog,
                                        std::uint32_t school_id = 0,
                                        const std::string& source = "interactions") {
  SchoolDataset ds;
  ds.school_id = school_id;
  ds.catalog = catalog;

  std::map<std::int64_t, std::size_t> course_index, activity_index;
  for (std::size_t i = 0; i < catalog.course_labels.size(); ++i)
    course_index[catalog.course_labels[i]] = i;
  for (std::size_t i = 0; i < catalog.activity_labels.size(); ++i)
    activity_index[catalog.activity_labels[i]] = i;

  struct Raw {
    std::int64_t student;
    InteractionRecord rec;
  };
  std::vector<Raw> raws;
  bool header_seen = false;
  bool has_date = false;

  detail::for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    if (detail::trim(line).empty()) return;
    auto err = [&](const std::string& msg) {
      return DatasetError(source + ":" + std::to_string(line_no) + ": " + msg);
    };
    if (!header_seen) {
      const auto hdr = detail::trim(line);
      if (hdr == kInteractionHeader) {
        has_date = false;
      } else if (hdr == std::string(kInteractionHeader) + ",date") {
        has_date = true;
      } else {
        throw err("bad header, expected '" + std::string(kInteractionHeader) + "[,date]'");
      }
      header_seen = true;
      return;
    }
    const auto f = detail::split(line, ',');
    const std::size_t want = has_date ? 7 : 6;
    if (f.size() != want)
      throw err("expected " + std::to_string(want) + " fields, got " + std::to_string(f.size()));

    const auto student = detail::parse_number<std::int64_t>(f[0]);
    if (!student || *student < 0) throw err("bad student id '" + std::string(f[0]) + "'");

    auto lookup_course = [&](std::string_view field) -> std::optional<CourseId> {
      if (detail::trim(field).empty()) return std::nullopt;
      const auto label = detail::parse_number<std::int64_t>(field);
      if (!label) throw err("bad course id '" + std::string(field) + "'");
      auto it = course_index.find(*label);
      if (it == course_index.end()) throw err("unknown course " + std::to_string(*label));
      return CourseId{it->second};
    };

    InteractionRecord rec;
    const auto kind = detail::trim(f[2]);
    if (kind == "duration" || kind == "score") {
      const auto course = lookup_course(f[1]);
      if (!course) throw err("enrollment without course");
      const auto a = detail::parse_number<double>(f[4]);
      const auto b = detail::parse_number<double>(f[5]);
      if (!a || !b) throw err("bad rating signal");
      RawSignal sig = kind == "duration" ? RawSignal{Duration{*a, *b}} : RawSignal{Score{*a, *b}};
      try {
        (void)derive_rating(sig);
      } catch (const std::domain_error& e) {
        throw err(e.what());
      }
      if (!detail::trim(f[3]).empty()) throw err("enrollment rows must leave activity empty");
      rec.event = Enrollment{*course, sig};
    } else if (kind == "activity") {
      const auto label = detail::parse_number<std::int64_t>(f[3]);
      if (!label) throw err("bad activity id '" + std::string(f[3]) + "'");
      auto it = activity_index.find(*label);
      if (it == activity_index.end()) throw err("unknown activity " + std::to_string(*label));
      rec.event = Participation{ActivityId{it->second}, lookup_course(f[1])};
    } else {
      throw err("unknown kind '" + std::string(kind) + "'");
    }
    if (has_date) {
      const auto d = detail::parse_number<std::int64_t>(f[6]);
      if (!d && !detail::trim(f[6]).empty()) throw err("bad date '" + std::string(f[6]) + "'");
      rec.date = d;
    }
    raws.push_back({*student, std::move(rec)});
  });

  std::set<std::int64_t> students;
  for (const auto& r : raws) students.insert(r.student);
  std::map<std::int64_t, std::size_t> student_index;
  for (auto label : students) {
    student_index[label] = ds.student_labels.size();
    ds.student_labels.push_back(label);
  }
  ds.interactions.reserve(raws.size());
  for (auto& r : raws) {
    r.rec.student = StudentId{student_index.at(r.student)};
    ds.interactions.push_back(std::move(r.rec));
  }
  ds.validate();
  return ds;
}

enum class DatasetFormat { Csv };

inline SchoolDataset load_dataset(const std::filesystem::path& interactions,
                                  const std::filesystem::path& catalog,
                                  DatasetFormat format = DatasetFormat::Csv,
                                  std::uint32_t school_id = 0) {
  (void)format;
  const auto cat = parse_catalog(detail::read_file(catalog), catalog.string());
  return parse_interactions(detail::read_file(interactions), cat, school_id,
                            interactions.string());
}

inline std::string format_catalog(const Catalog& cat) {
  std::string out;
  for (std::size_t i = 0; i < cat.n_courses(); ++i)
    out += "c" + std::to_string(cat.course_labels[i]) + "\t" +
           detail::escape_text(cat.course_text[i]) + "\n";
  for (std::size_t i = 0; i < cat.n_activities(); ++i)
    out += "a" + std::to_string(cat.activity_labels[i]) + "\t" +
           detail::escape_text(cat.activity_text[i]) + "\n";
  return out;
}

inline std::string format_interactions(const SchoolDataset& ds) {
  bool has_date = std::any_of(ds.interactions.begin(), ds.interactions.end(),
                              [](const auto& r) { return r.date.has_value(); });
  std::string out(kInteractionHeader);
  out += has_date ? ",date\n" : "\n";
  for (const auto& rec : ds.interactions) {
    out += std::to_string(ds.student_labels.at(rec.student.value)) + ",";
    if (rec.is_enrollment()) {
      const auto& e = rec.enrollment();
      out += std::to_string(ds.catalog.course_labels.at(e.course.value));
      std::visit(
          [&](const auto& s) {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, Duration>)
              out += ",duration,," + detail::format_double(s.spent) + "," +
                     detail::format_double(s.total);
            else
              out += ",score,," + detail::format_double(s.student) + "," +
                     detail::format_double(s.average);
          },
          e.signal);
    } else {
      const auto& p = rec.participation();
      if (p.course) out += std::to_string(ds.catalog.course_labels.at(p.course->value));
      out += ",activity," + std::to_string(ds.catalog.activity_labels.at(p.activity.value)) + ",,";
    }
    if (has_date) out += "," + (rec.date ? std::to_string(*rec.date) : std::string());
    out += "\n";
  }
  return out;
}

inline void save_dataset(const SchoolDataset& ds, const std::filesystem::path& interactions,
                         const std::filesystem::path& catalog) {
  std::ofstream a(interactions, std::ios::binary);
  std::ofstream b(catalog, std::ios::binary);
  if (!a || !b) throw DatasetError("cannot write dataset files");
  a << format_interactions(ds);
  b << format_catalog(ds.catalog);
}

// ---------------------------------------------------------------------------
// Synthetic schools with planted interest clusters

struct SynthConfig {
  std::size_t n_schools = 5;
  std::size_t students_min = 30;
  std::size_t students_max = 60;
  std::size_t n_courses = 120;
  std::size_t n_activities = 24;
  std::size_t clusters = 2;
  std::size_t courses_per_cluster = 10;  // the rest of the catalog is unaffiliated
  std::size_t enrollments_per_student = 8;
  std::size_t activities_per_student = 3;
  double in_cluster_prob = 0.8;
  double high_rating = 0.9;
  double low_rating = 0.2;
  double noise = 0.1;
  double score_fraction = 0.5;  // share of enrollments rated by score instead of duration

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("synth: " + m); };
    if (n_schools == 0) fail("n_schools must be positive");
    if (students_min == 0 || students_max < students_min) fail("bad student range");
    if (n_courses == 0 || n_activities == 0) fail("catalog sizes must be positive");
    if (clusters == 0) fail("clusters must be positive");
    if (courses_per_cluster == 0 || clusters * courses_per_cluster > n_courses)
      fail("clusters * courses_per_cluster must be in [1, n_courses]");
    if (enrollments_per_student == 0 || enrollments_per_student > n_courses)
      fail("enrollments_per_student must be in [1, n_courses]");
    if (activities_per_student > n_activities) fail("activities_per_student exceeds catalog");
    if (!(in_cluster_prob >= 0.0 && in_cluster_prob <= 1.0)) fail("in_cluster_prob not in [0,1]");
    if (!(score_fraction >= 0.0 && score_fraction <= 1.0)) fail("score_fraction not in [0,1]");
    if (!(noise >= 0.0)) fail("noise must be non-negative");
    if (!(high_rating >= 0.0 && low_rating >= 0.0)) fail("ratings must be non-negative");
  }
};

struct SyntheticWorld {
  std::vector<SchoolDataset> schools;
  std::vector<std::vector<std::size_t>> student_cluster;  // [school][student]
  std::vector<long> course_cluster;                       // -1 = unaffiliated
  std::vector<long> activity_cluster;
};

namespace detail {

inline const std::vector<std::string>& topic_words() {
  static const std::vector<std::string> words = {
      "robotics",  "circuits",   "programming", "algebra",    "geometry",  "physics",
      "painting",  "sculpture",  "drama",       "music",      "choir",     "poetry",
      "history",   "geography",  "economics",   "civics",     "debate",    "journalism",
      "biology",   "chemistry",  "ecology",     "astronomy",  "botany",    "genetics",
      "football",  "swimming",   "athletics",   "basketball", "badminton", "fitness",
      "cooking",   "nutrition",  "textiles",    "woodwork",   "design",    "ceramics",
      "calculus",  "statistics", "logic",       "chess",      "coding",    "networks",
      "literature", "grammar",   "translation", "calligraphy", "film",     "photography"};
  return words;
}

inline const std::vector<std::string>& generic_words() {
  static const std::vector<std::string> words = {
      "introduction", "applied",  "foundations", "workshop", "seminar",   "practice",
      "studies",      "advanced", "general",     "project",  "community", "skills"};
  return words;
}

inline std::string cluster_text(Rng& rng, long cluster, std::size_t n_words) {
  const auto& topics = topic_words();
  const auto& generic = generic_words();
  std::string out;
  for (std::size_t w = 0; w < n_words; ++w) {
    if (!out.empty()) out += ' ';
    if (cluster >= 0) {
      const std::size_t block = 6;
      const std::size_t base = (static_cast<std::size_t>(cluster) * block) % topics.size();
      out += topics[(base + rng.below(block)) % topics.size()];
    } else {
      out += generic[rng.below(generic.size())];
    }
  }
  return out;
}

}  // namespace detail

inline SyntheticWorld generate_synthetic_world(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SyntheticWorld world;

  Rng cat_rng = derive_rng(seed, "synth.catalog");
  Catalog cat;
  world.course_cluster.assign(cfg.n_courses, -1);
  for (std::size_t c = 0; c < cfg.n_courses; ++c) {
    const long cl = c < cfg.clusters * cfg.courses_per_cluster
                        ? static_cast<long>(c % cfg.clusters)
                        : -1L;
    world.course_cluster[c] = cl;
    cat.course_labels.push_back(static_cast<std::int64_t>(c));
    std::string text = detail::cluster_text(cat_rng, cl, 3);
    text += " " + detail::cluster_text(cat_rng, -1, 1);
    cat.course_text.push_back(std::move(text));
  }
  world.activity_cluster.assign(cfg.n_activities, 0);
  for (std::size_t a = 0; a < cfg.n_activities; ++a) {
    const long cl = static_cast<long>(a % cfg.clusters);
    world.activity_cluster[a] = cl;
    cat.activity_labels.push_back(static_cast<std::int64_t>(a));
    cat.activity_text.push_back("participate in " + detail::cluster_text(cat_rng, cl, 2) +
                                " society");
  }

  std::vector<std::vector<std::size_t>> courses_in(cfg.clusters), courses_out(cfg.clusters),
      acts_in(cfg.clusters), acts_out(cfg.clusters);
  for (std::size_t k = 0; k < cfg.clusters; ++k) {
    for (std::size_t c = 0; c < cfg.n_courses; ++c)
      (world.course_cluster[c] == static_cast<long>(k) ? courses_in : courses_out)[k].push_back(c);
    for (std::size_t a = 0; a < cfg.n_activities; ++a)
      (world.activity_cluster[a] == static_cast<long>(k) ? acts_in : acts_out)[k].push_back(a);
  }

  // Draws `count` distinct items, each from `in` with probability p (falling
  // back to the other pool when one is exhausted).
  auto draw = [](Rng& rng, std::vector<std::size_t> in, std::vector<std::size_t> out,
                 std::size_t count, double p) {
    std::vector<std::size_t> picked;
    while (picked.size() < count && (!in.empty() || !out.empty())) {
      bool from_in = rng.bernoulli(p);
      if (in.empty()) from_in = false;
      if (out.empty()) from_in = true;
      auto& pool = from_in ? in : out;
      const auto j = static_cast<std::size_t>(rng.below(pool.size()));
      picked.push_back(pool[j]);
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
    }
    return picked;
  };

  for (std::size_t u = 0; u < cfg.n_schools; ++u) {
    Rng rng = derive_rng(seed, "synth.school", {u});
    SchoolDataset ds;
    ds.school_id = static_cast<std::uint32_t>(u);
    ds.catalog = cat;
    const std::size_t m =
        cfg.students_min + static_cast<std::size_t>(rng.below(cfg.students_max - cfg.students_min + 1));
    std::vector<std::size_t> clusters(m);
    for (std::size_t s = 0; s < m; ++s) {
      ds.student_labels.push_back(static_cast<std::int64_t>(s));
      const std::size_t k = static_cast<std::size_t>(rng.below(cfg.clusters));
      clusters[s] = k;
      const auto courses = draw(rng, courses_in[k], courses_out[k], cfg.enrollments_per_student,
                                cfg.in_cluster_prob);
      const auto acts = draw(rng, acts_in[k], acts_out[k], cfg.activities_per_student,
                             cfg.in_cluster_prob);
      for (std::size_t c : courses) {
        const bool in = world.course_cluster[c] == static_cast<long>(k);
        double rating = in ? cfg.high_rating : cfg.low_rating;
        if (cfg.noise > 0.0) rating += rng.normal(0.0, cfg.noise);
        rating = std::max(rating, 0.0);
        InteractionRecord rec;
        rec.student = StudentId{s};
        if (rng.bernoulli(cfg.score_fraction)) {
          const double average = 70.0;
          rec.event = Enrollment{CourseId{c}, Score{rating * average, average}};
        } else {
          const double total = 3600.0;
          rec.event = Enrollment{CourseId{c}, Duration{rating * total, total}};
        }
        ds.interactions.push_back(rec);
      }
      for (std::size_t a : acts) {
        InteractionRecord rec;
        rec.student = StudentId{s};
        std::optional<CourseId> course;
        if (!courses.empty()) course = CourseId{courses[rng.below(courses.size())]};
        rec.event = Participation{ActivityId{a}, course};
        ds.interactions.push_back(rec);
      }
    }
    ds.validate();
    world.schools.push_back(std::move(ds));
    world.student_cluster.push_back(std::move(clusters));
  }
  return world;
}

inline std::vector<SchoolDataset> generate_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
  return generate_synthetic_world(cfg, seed).schools;
}

}  // namespace fedcourse
