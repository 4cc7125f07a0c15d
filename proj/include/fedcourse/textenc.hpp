#pragma once

#include "fedcourse/dataset.hpp"
#include "fedcourse/rng.hpp"
#include "fedcourse/tensor.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace fedcourse {

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::size_t dim() const = 0;
  // Must be a pure function of the text.
  virtual Vector encode(std::string_view text) const = 0;
};

namespace text {

// Decodes one UTF-8 code point starting at s[i]; advances i. Invalid bytes
// decode to U+FFFD and consume one byte.
inline char32_t next_codepoint(std::string_view s, std::size_t& i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  auto cont = [&](std::size_t k) -> int {
    if (i + k >= s.size()) return -1;
    const auto b = static_cast<unsigned char>(s[i + k]);
    return (b & 0xC0) == 0x80 ? (b & 0x3F) : -1;
  };
  if (b0 < 0x80) {
    ++i;
    return b0;
  }
  int len = 0;
  char32_t cp = 0;
  if ((b0 & 0xE0) == 0xC0) len = 2, cp = b0 & 0x1F;
  else if ((b0 & 0xF0) == 0xE0) len = 3, cp = b0 & 0x0F;
  else if ((b0 & 0xF8) == 0xF0) len = 4, cp = b0 & 0x07;
  else {
    ++i;
    return 0xFFFD;
  }
  for (int k = 1; k < len; ++k) {
    const int c = cont(static_cast<std::size_t>(k));
    if (c < 0) {
      ++i;
      return 0xFFFD;
    }
    cp = (cp << 6) | static_cast<char32_t>(c);
  }
  i += static_cast<std::size_t>(len);
  return cp;
}

inline void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

inline bool is_cjk(char32_t cp) {
  return (cp >= 0x4E00 && cp <= 0x9FFF) || (cp >= 0x3400 && cp <= 0x4DBF) ||
         (cp >= 0x20000 && cp <= 0x2A6DF) || (cp >= 0xF900 && cp <= 0xFAFF) ||
         (cp >= 0x3040 && cp <= 0x30FF) || (cp >= 0xAC00 && cp <= 0xD7AF);
}

inline bool is_word_char(char32_t cp) {
  if (cp < 0x80) return (cp >= '0' && cp <= '9') || (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z');
  // Treat other non-ASCII letters (accented Latin, Greek, Cyrillic...) as word
  // characters; punctuation blocks and spaces split.
  if (cp >= 0x2000 && cp <= 0x206F) return false;  // general punctuation
  if (cp >= 0x3000 && cp <= 0x303F) return false;  // CJK punctuation
  if (cp >= 0xFF00 && cp <= 0xFF0F) return false;  // fullwidth punctuation
  if (cp == 0xA0 || cp == 0xFFFD) return false;
  return true;
}

// Lowercase, split on non-alphanumerics, and break CJK runs into character
// trigrams (runs shorter than three characters stay whole).
inline std::vector<std::string> tokenize(std::string_view s, std::size_t cjk_ngram = 3) {
  std::vector<std::string> tokens;
  std::string word;
  std::vector<char32_t> cjk_run;

  auto flush_word = [&] {
    if (!word.empty()) tokens.push_back(std::move(word));
    word.clear();
  };
  auto flush_cjk = [&] {
    if (cjk_run.empty()) return;
    if (cjk_run.size() <= cjk_ngram) {
      std::string t;
      for (char32_t c : cjk_run) append_utf8(t, c);
      tokens.push_back(std::move(t));
    } else {
      for (std::size_t i = 0; i + cjk_ngram <= cjk_run.size(); ++i) {
        std::string t;
        for (std::size_t k = 0; k < cjk_ngram; ++k) append_utf8(t, cjk_run[i + k]);
        tokens.push_back(std::move(t));
      }
    }
    cjk_run.clear();
  };

  std::size_t i = 0;
  while (i < s.size()) {
    char32_t cp = next_codepoint(s, i);
    if (is_cjk(cp)) {
      flush_word();
      cjk_run.push_back(cp);
    } else if (is_word_char(cp)) {
      flush_cjk();
      if (cp >= 'A' && cp <= 'Z') cp = cp - 'A' + 'a';
      append_utf8(word, cp);
    } else {
      flush_word();
      flush_cjk();
    }
  }
  flush_word();
  flush_cjk();
  return tokens;
}

}  // namespace text

// Signed feature hashing with coordinate-wise max pooling. Every token n-gram
// (widths 1..n_grams) lands on exactly one coordinate with a signed weight in
// [0.5, 1); a coordinate takes the maximum over the features that hit it and
// stays 0 when none does.
class HashingEncoder final : public TextEncoder {
 public:
  explicit HashingEncoder(std::size_t dim = 512, std::size_t n_grams = 2,
                          std::uint64_t seed = 0x5eedULL)
      : dim_(dim), n_grams_(n_grams), seed_(seed) {
    if (dim_ == 0) throw std::invalid_argument("hashing encoder: dim must be positive");
    if (n_grams_ == 0) throw std::invalid_argument("hashing encoder: n_grams must be positive");
  }

  std::size_t dim() const override { return dim_; }
  std::size_t n_grams() const { return n_grams_; }
  std::uint64_t seed() const { return seed_; }

  struct Feature {
    std::size_t index;
    double value;
  };

  Feature hash_feature(std::string_view feature) const {
    const std::uint64_t h = splitmix64(fnv1a(feature) ^ splitmix64(seed_));
    const std::size_t index = static_cast<std::size_t>(h % dim_);
    const double magnitude = 0.5 + 0.5 * static_cast<double>((h >> 12) & 0xFFFFF) / 1048576.0;
    const double sign = (h >> 63) ? -1.0 : 1.0;
    return {index, sign * magnitude};
  }

  std::vector<std::string> features(std::string_view text_in) const {
    const auto tokens = text::tokenize(text_in);
    std::vector<std::string> out;
    for (std::size_t n = 1; n <= n_grams_; ++n) {
      for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        std::string f = tokens[i];
        for (std::size_t k = 1; k < n; ++k) f += '\x1f' + tokens[i + k];
        out.push_back(std::move(f));
      }
    }
    return out;
  }

  Vector encode(std::string_view text_in) const override {
    Vector out = Vector::Zero(static_cast<Eigen::Index>(dim_));
    std::vector<bool> hit(dim_, false);
    for (const auto& f : features(text_in)) {
      const auto [index, value] = hash_feature(f);
      if (!hit[index] || value > out(static_cast<Eigen::Index>(index))) {
        out(static_cast<Eigen::Index>(index)) = value;
        hit[index] = true;
      }
    }
    return out;
  }

 private:
  std::size_t dim_;
  std::size_t n_grams_;
  std::uint64_t seed_;
};

inline Vector encode_text(const TextEncoder& enc, std::string_view text) { return enc.encode(text); }

// Dimension reduction relu(W e) + b, bias outside the activation.
struct DenseLayer {
  Matrix weight;  // d x d_raw
  Vector bias;    // d

  std::size_t out_dim() const { return static_cast<std::size_t>(weight.rows()); }
  std::size_t in_dim() const { return static_cast<std::size_t>(weight.cols()); }
};

inline Vector reduce_dim(const DenseLayer& layer, const Vector& e) {
  if (layer.weight.cols() != e.size())
    throw DimensionError("reduce_dim: input has " + std::to_string(e.size()) + " entries, layer expects " +
                         std::to_string(layer.weight.cols()));
  if (layer.bias.size() != layer.weight.rows()) throw DimensionError("reduce_dim: bias size mismatch");
  return (layer.weight * e).cwiseMax(0.0) + layer.bias;
}

// Batched form over rows of `raw` (k x d_raw) -> k x d.
inline Matrix reduce_dim_rows(const Matrix& weight, const RowVector& bias, const Matrix& raw) {
  if (weight.cols() != raw.cols()) throw DimensionError("reduce_dim_rows: dimension mismatch");
  Matrix pre = raw * weight.transpose();
  Matrix out = pre.cwiseMax(0.0);
  out.rowwise() += bias;
  return out;
}

// Raw encoder output for every catalog entry. Depends only on the catalog.
struct RawContent {
  Matrix course;    // n_courses x d_raw
  Matrix activity;  // n_activities x d_raw
};

inline RawContent encode_catalog(const TextEncoder& enc, const Catalog& cat) {
  RawContent rc;
  const auto dr = static_cast<Eigen::Index>(enc.dim());
  rc.course.resize(static_cast<Eigen::Index>(cat.n_courses()), dr);
  rc.activity.resize(static_cast<Eigen::Index>(cat.n_activities()), dr);
  for (std::size_t i = 0; i < cat.n_courses(); ++i)
    rc.course.row(static_cast<Eigen::Index>(i)) = enc.encode(cat.course_text[i]).transpose();
  for (std::size_t i = 0; i < cat.n_activities(); ++i)
    rc.activity.row(static_cast<Eigen::Index>(i)) = enc.encode(cat.activity_text[i]).transpose();
  return rc;
}

struct ContentEmbeddings {
  Matrix course;    // n_courses x d
  Matrix activity;  // n_activities x d
};

inline ContentEmbeddings content_embeddings(const TextEncoder& enc, const DenseLayer& layer,
                                            const SchoolDataset& ds) {
  if (layer.in_dim() != enc.dim()) throw DimensionError("content_embeddings: layer/encoder dim mismatch");
  const auto rc = encode_catalog(enc, ds.catalog);
  const RowVector b = layer.bias.transpose();
  return {reduce_dim_rows(layer.weight, b, rc.course), reduce_dim_rows(layer.weight, b, rc.activity)};
}

}  // namespace fedcourse
