#pragma once

#include "fedcourse/rng.hpp"
#include "fedcourse/tensor.hpp"
#include "fedcourse/trainer.hpp"
#include "fedcourse/wire.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <future>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedcourse {

// ---------------------------------------------------------------------------
// Adaptive learning rate: lr_u = lr_global * n_u / N.

namespace detail {

inline int bit_length(unsigned __int128 v) {
  int n = 0;
  while (v) {
    v >>= 1;
    ++n;
  }
  return n;
}

struct RoundedRatio {
  double value;
  int direction;  // sign of (exact - value): +1 exact is above, -1 below, 0 exact
};

// Correctly rounded lr * num / den, with num <= den.
inline RoundedRatio scaled_ratio(double lr, std::uint64_t num, std::uint64_t den) {
  if (num == 0 || lr == 0.0) return {0.0, 0};
  if (num == den) return {lr, 0};
  int exp2 = 0;
  const double frac = std::frexp(lr, &exp2);  // lr = frac * 2^exp2, frac in [0.5, 1)
  const auto mant = static_cast<std::uint64_t>(std::ldexp(frac, 53));  // exact, 53 bits
  using u128 = unsigned __int128;
  u128 q = static_cast<u128>(mant) * num;  // < 2^117
  // Shift so the quotient carries at least 56 significant bits.
  int shift = 56 + bit_length(den) - bit_length(q);
  if (shift < 0) shift = 0;
  if (bit_length(q) + shift > 127) shift = 127 - bit_length(q);
  q <<= shift;
  u128 quot = q / den;
  const bool sticky_rem = (q % den) != 0;
  const int qbits = bit_length(quot);
  const int drop = qbits - 53;
  std::uint64_t top;
  bool round_bit = false, sticky = sticky_rem;
  if (drop > 0) {
    top = static_cast<std::uint64_t>(quot >> drop);
    round_bit = ((quot >> (drop - 1)) & 1) != 0;
    const u128 below = quot & ((static_cast<u128>(1) << (drop - 1)) - 1);
    sticky = sticky || below != 0;
  } else {
    top = static_cast<std::uint64_t>(quot);
  }
  int direction = (round_bit || sticky) ? 1 : 0;
  if (round_bit && (sticky || (top & 1))) {
    ++top;
    direction = -1;
  }
  // value = top * 2^(drop) * 2^(exp2 - 53 - shift)
  const int scale = (drop > 0 ? drop : 0) + exp2 - 53 - shift;
  return {std::ldexp(static_cast<double>(top), scale), direction};
}

}  // namespace detail

inline double adaptive_lr(double lr_global, std::uint64_t n_u, std::uint64_t total) {
  if (total == 0) throw std::invalid_argument("adaptive_lr: total sample count is zero");
  if (n_u > total) throw std::invalid_argument("adaptive_lr: n_u exceeds total");
  if (!(lr_global >= 0.0) || !std::isfinite(lr_global)) throw std::invalid_argument("adaptive_lr: bad lr_global");
  return detail::scaled_ratio(lr_global, n_u, total).value;
}

// Correctly rounded sum: exact accumulation in non-overlapping partials
// (Shewchuk), then a single rounding of the exact total.
inline double rounded_sum(const std::vector<double>& values) {
  std::vector<double> partials;
  for (double x : values) {
    std::size_t i = 0;
    for (double y : partials) {
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials[i++] = lo;
      x = hi;
    }
    partials.resize(i);
    partials.push_back(x);
  }
  if (partials.empty()) return 0.0;
  std::size_t n = partials.size();
  double hi = partials[--n];
  double lo = 0.0;
  while (n > 0) {
    const double x = hi;
    const double y = partials[--n];
    hi = x + y;
    lo = y - (hi - x);
    if (lo != 0.0) break;
  }
  // Half-way case: the remaining partials decide the direction.
  if (n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0))) {
    const double y = lo * 2.0;
    const double x = hi + y;
    if (y == x - hi) hi = x;
  }
  return hi;
}

// Per-school rates for a whole federation. Each entry is one of the two
// doubles adjacent to the exact share lr_global * n_u / N (the correctly
// rounded one unless a switch is needed), chosen so that the correctly rounded
// sum of all entries is lr_global.
inline std::vector<double> adaptive_lrs(double lr_global, const std::vector<std::uint64_t>& counts) {
  std::uint64_t total = 0;
  for (auto c : counts) {
    if (c > std::numeric_limits<std::uint64_t>::max() - total)
      throw std::invalid_argument("adaptive_lrs: sample count overflow");
    total += c;
  }
  if (total == 0) throw std::invalid_argument("adaptive_lrs: total sample count is zero");
  if (!(lr_global >= 0.0) || !std::isfinite(lr_global)) throw std::invalid_argument("adaptive_lrs: bad lr_global");
  std::vector<double> lr(counts.size());
  std::vector<std::optional<double>> other(counts.size());  // the neighbor on the far side of the exact share
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const auto r = detail::scaled_ratio(lr_global, counts[i], total);
    lr[i] = r.value;
    if (r.direction != 0) other[i] = std::nextafter(r.value, r.direction > 0 ? HUGE_VAL : -HUGE_VAL);
  }
  // Greedy: switch the entry that brings the exact total closest to lr_global.
  auto residual = [&](const std::vector<double>& v) {
    auto w = v;
    w.push_back(-lr_global);
    return std::abs(rounded_sum(w));
  };
  for (std::size_t iter = 0; iter <= lr.size(); ++iter) {
    if (rounded_sum(lr) == lr_global) return lr;
    double best_gap = residual(lr);
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < lr.size(); ++i) {
      if (!other[i]) continue;
      auto trial = lr;
      trial[i] = *other[i];
      const double gap = residual(trial);
      if (gap < best_gap) {
        best_gap = gap;
        best = i;
      }
    }
    if (!best) break;
    lr[*best] = *other[*best];
    other[*best].reset();
  }
  throw std::runtime_error("adaptive_lrs: no one-ulp choice of rates sums to lr_global");
}

// ---------------------------------------------------------------------------
// Protocol

enum class Aggregation { Sum, Mean };

struct FedConfig {
  double lr_global = 1e-5;
  std::size_t rounds = 50;
  std::size_t subset_size = 0;  // 0 = every school
  std::uint64_t selection_seed = 0;
  Aggregation aggregation = Aggregation::Sum;
  bool adaptive_lr = true;
  std::size_t redistribute_every = 1;  // full parameter download every k rounds
  std::size_t patience = 0;            // early stopping on validation; 0 = off

  void validate(std::size_t n_schools) const {
    if (!(lr_global > 0.0) || !std::isfinite(lr_global)) throw ConfigError("federation: lr_global must be > 0");
    if (subset_size > n_schools) throw ConfigError("federation: subset_size exceeds number of schools");
    if (redistribute_every == 0) throw ConfigError("federation: redistribute_every must be positive");
  }
};

class RoundAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Reduction in ascending school-id order regardless of arrival order.
inline ParamSet aggregate(std::vector<GradientUpload> uploads, Aggregation mode) {
  if (uploads.empty()) throw ProtocolError("aggregate: no uploads");
  std::sort(uploads.begin(), uploads.end(),
            [](const GradientUpload& a, const GradientUpload& b) { return a.school_id < b.school_id; });
  for (std::size_t i = 1; i < uploads.size(); ++i) {
    if (uploads[i].round != uploads[0].round)
      throw ProtocolError("aggregate: round mismatch (" + std::to_string(uploads[i].round) + " vs " +
                          std::to_string(uploads[0].round) + ")");
    if (!uploads[i].gradients.same_manifest(uploads[0].gradients))
      throw ProtocolError("aggregate: tensor manifest mismatch from school " + std::to_string(uploads[i].school_id));
    if (uploads[i].school_id == uploads[i - 1].school_id)
      throw ProtocolError("aggregate: duplicate upload from school " + std::to_string(uploads[i].school_id));
  }
  ParamSet g = uploads[0].gradients;
  for (std::size_t i = 1; i < uploads.size(); ++i) axpy(g, 1.0, uploads[i].gradients);
  if (mode == Aggregation::Mean && uploads.size() > 1)
    for (auto& [name, m] : g) m /= static_cast<double>(uploads.size());
  return g;
}

// One school. Holds its own copy of the shared parameters and its private
// student state; talks to the coordinator only through encoded messages.
class Client {
 public:
  explicit Client(std::shared_ptr<const SchoolModel> model) : model_(std::move(model)) {}

  std::uint32_t id() const { return model_->school_id(); }
  std::size_t n_u() const { return model_->n_u(); }
  const SchoolModel& model() const { return *model_; }
  const ParamSet& shared() const { return shared_; }
  const Matrix& local() const { return local_; }
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  std::optional<double> last_loss() const { return last_loss_; }

  // Returns the reply, if the message calls for one.
  std::optional<Bytes> handle(const Bytes& incoming) {
    const auto msg = decode_message(incoming);
    if (const auto* begin = std::get_if<RoundBegin>(&msg)) {
      last_loss_.reset();
      pending_.reset();
      if (std::find(begin->selected.begin(), begin->selected.end(), id()) == begin->selected.end())
        return std::nullopt;
      if (!initialized_) throw ProtocolError("client " + std::to_string(id()) + ": no parameters yet");
      auto res = model_->local_round(shared_, local_, begin->round, lr_);
      pending_ = std::move(res.local);
      last_loss_ = res.loss;
      GradientUpload up{id(), begin->round, static_cast<std::uint64_t>(n_u()), std::move(res.shared_grad)};
      return encode_message(up);
    }
    if (const auto* bc = std::get_if<GradientBroadcast>(&msg)) {
      axpy(shared_, -lr_, bc->gradient);
      if (pending_) local_ = std::move(*pending_);
      pending_.reset();
      return std::nullopt;
    }
    if (const auto* dl = std::get_if<ParamsDownload>(&msg)) {
      shared_ = dl->params;
      if (!initialized_) {
        local_ = model_->initial_local(shared_);
        initialized_ = true;
      }
      return std::nullopt;
    }
    throw ProtocolError("client " + std::to_string(id()) + ": unexpected gradient upload");
  }

  void discard_pending() {
    pending_.reset();
    last_loss_.reset();
  }

 private:
  std::shared_ptr<const SchoolModel> model_;
  ParamSet shared_;
  Matrix local_;
  std::optional<Matrix> pending_;
  std::optional<double> last_loss_;
  double lr_ = 0.0;
  bool initialized_ = false;
};

struct RoundLog {
  std::uint64_t round = 0;
  std::vector<std::uint32_t> selected;
  std::map<std::uint32_t, double> loss;
  double wall_seconds = 0.0;
};

using MessageTap = std::function<void(const Bytes&)>;

// Coordinator plus the in-process transport to its clients.
class Federation {
 public:
  Federation(std::vector<std::shared_ptr<const SchoolModel>> models, ParamSet initial, FedConfig cfg)
      : canonical_(std::move(initial)), cfg_(cfg) {
    cfg_.validate(models.size());
    if (models.empty()) throw ConfigError("federation: need at least one school");
    std::sort(models.begin(), models.end(),
              [](const auto& a, const auto& b) { return a->school_id() < b->school_id(); });
    std::vector<std::uint64_t> counts;
    for (auto& m : models) {
      if (!clients_.empty() && clients_.back().id() == m->school_id())
        throw ConfigError("federation: duplicate school id " + std::to_string(m->school_id()));
      counts.push_back(m->n_u());
      clients_.emplace_back(m);
    }
    std::uint64_t total = 0;
    for (auto c : counts) total += c;
    std::vector<double> rates(counts.size(), cfg_.lr_global);
    if (cfg_.adaptive_lr && total > 0) rates = adaptive_lrs(cfg_.lr_global, counts);
    for (std::size_t i = 0; i < clients_.size(); ++i) clients_[i].set_learning_rate(rates[i]);
    manifest_ = canonical_.manifest();
  }

  void set_tap(MessageTap tap) { tap_ = std::move(tap); }
  void set_parallel(bool on) { parallel_ = on; }

  const ParamSet& canonical() const { return canonical_; }
  const std::vector<std::pair<std::string, Shape>>& manifest() const { return manifest_; }
  std::uint64_t round() const { return round_; }
  const FedConfig& config() const { return cfg_; }
  std::size_t size() const { return clients_.size(); }
  const Client& client(std::size_t i) const { return clients_.at(i); }
  const std::vector<Client>& clients() const { return clients_; }

  // Initial distribution of the shared parameters.
  void start() {
    if (started_) return;
    broadcast(encode_message(ParamsDownload{round_, canonical_}));
    started_ = true;
  }

  std::vector<std::uint32_t> select(std::uint64_t round) const {
    std::vector<std::uint32_t> ids;
    for (const auto& c : clients_) ids.push_back(c.id());
    const std::size_t k = cfg_.subset_size == 0 ? ids.size() : cfg_.subset_size;
    if (k < ids.size()) {
      auto rng = derive_rng(cfg_.selection_seed, "select", {round});
      for (std::size_t i = 0; i < k; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.below(ids.size() - i));
        std::swap(ids[i], ids[j]);
      }
      ids.resize(k);
    }
    std::sort(ids.begin(), ids.end());
    return ids;
  }

  RoundLog global_round() {
    start();
    const auto t0 = std::chrono::steady_clock::now();
    RoundLog log;
    log.round = round_;
    log.selected = select(round_);

    const Bytes begin = encode_message(RoundBegin{round_, log.selected});
    emit(begin);
    std::vector<std::optional<Bytes>> replies(clients_.size());
    try {
      if (parallel_) {
        std::vector<std::future<std::optional<Bytes>>> futures;
        futures.reserve(clients_.size());
        for (auto& c : clients_)
          futures.push_back(std::async(std::launch::async, [&c, &begin] { return c.handle(begin); }));
        std::exception_ptr first;
        for (std::size_t i = 0; i < futures.size(); ++i) {
          try {
            replies[i] = futures[i].get();
          } catch (...) {
            if (!first) first = std::current_exception();
          }
        }
        if (first) std::rethrow_exception(first);
      } else {
        for (std::size_t i = 0; i < clients_.size(); ++i) replies[i] = clients_[i].handle(begin);
      }
    } catch (const std::exception& e) {
      for (auto& c : clients_) c.discard_pending();
      throw RoundAborted("round " + std::to_string(round_) + " aborted: " + e.what());
    }

    std::vector<GradientUpload> uploads;
    try {
      for (auto& r : replies) {
        if (!r) continue;
        emit(*r);
        auto msg = decode_message(*r);
        auto* up = std::get_if<GradientUpload>(&msg);
        if (!up) throw ProtocolError("expected gradient upload");
        if (up->round != round_) throw ProtocolError("upload for wrong round");
        if (!manifest_violations(msg, manifest_).empty() || !up->gradients.same_manifest(canonical_))
          throw ProtocolError("upload from school " + std::to_string(up->school_id) + " has foreign tensors");
        uploads.push_back(std::move(*up));
      }
      if (uploads.size() != log.selected.size()) throw ProtocolError("missing uploads");
    } catch (const std::exception& e) {
      for (auto& c : clients_) c.discard_pending();
      throw RoundAborted("round " + std::to_string(round_) + " aborted: " + e.what());
    }

    const ParamSet g = aggregate(std::move(uploads), cfg_.aggregation);
    broadcast(encode_message(GradientBroadcast{round_, g}));
    axpy(canonical_, -cfg_.lr_global, g);
    for (const auto& c : clients_)
      if (c.last_loss()) log.loss[c.id()] = *c.last_loss();
    ++round_;
    if (round_ % cfg_.redistribute_every == 0) broadcast(encode_message(ParamsDownload{round_, canonical_}));

    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return log;
  }

 private:
  void emit(const Bytes& b) const {
    if (tap_) tap_(b);
  }
  void broadcast(const Bytes& b) {
    emit(b);
    for (auto& c : clients_) c.handle(b);
  }

  std::vector<Client> clients_;
  ParamSet canonical_;
  FedConfig cfg_;
  std::vector<std::pair<std::string, Shape>> manifest_;
  MessageTap tap_;
  std::uint64_t round_ = 0;
  bool started_ = false;
  bool parallel_ = true;
};

struct TrainingResult {
  ParamSet params;
  std::vector<RoundLog> log;
  bool early_stopped = false;
};

// Runs cfg.rounds global rounds, or stops once `validate` (higher is better)
// has not improved for cfg.patience consecutive rounds.
inline TrainingResult run_training(Federation& fed, const std::function<double(const Federation&)>& validate = {}) {
  TrainingResult out;
  fed.start();
  double best = -std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t r = 0; r < fed.config().rounds; ++r) {
    out.log.push_back(fed.global_round());
    if (fed.config().patience > 0 && validate) {
      const double v = validate(fed);
      if (v > best) {
        best = v;
        stale = 0;
      } else if (++stale >= fed.config().patience) {
        out.early_stopped = true;
        break;
      }
    }
  }
  out.params = fed.canonical();
  return out;
}

}  // namespace fedcourse
