#pragma once

// Negative sampling and training losses. Losses consume canonical scores
// (higher is better); the distance-style losses work on d = -score.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kge/error.hpp"
#include "kge/graph_store.hpp"
#include "kge/rng.hpp"

namespace kge {

enum class SamplingMode { Uniform, Filtered };

inline std::string_view to_string(SamplingMode m) { return m == SamplingMode::Uniform ? "uniform" : "filtered"; }

inline std::optional<SamplingMode> sampling_mode_from_string(std::string_view s) {
  if (s == "uniform") return SamplingMode::Uniform;
  if (s == "filtered") return SamplingMode::Filtered;
  return std::nullopt;
}

struct Negative {
  Triple triple;
  Direction corrupted = Direction::Tail;
  // The corruption happens to be a known-true triple.
  bool leak = false;
};

struct NegativeBatch {
  Triple positive;
  std::vector<Negative> negatives;
};

inline constexpr int kFilteredAttempts = 100;

namespace detail {

inline Triple corrupt(const Triple& t, Direction side, EntityId e) {
  Triple c = t;
  (side == Direction::Head ? c.head : c.tail) = e;
  return c;
}

inline EntityId original(const Triple& t, Direction side) { return side == Direction::Head ? t.head : t.tail; }

// Uniform over entities other than `skip`.
inline EntityId draw_other(Rng& rng, std::size_t n, EntityId skip) {
  auto e = static_cast<EntityId>(rng.below(n - 1));
  return e >= skip ? e + 1 : e;
}

}  // namespace detail

// Corrupts the head or the tail (probability 1/2 each) k times. Filtered mode
// redraws known-true corruptions up to kFilteredAttempts times, then picks
// uniformly among the valid corruptions of that side, then of the other side;
// a flagged sample is returned only when no valid corruption exists.
inline NegativeBatch sample_negatives(const TripleStore& store, const Triple& positive, std::size_t k,
                                      SamplingMode mode, Rng& rng) {
  if (k == 0) throw ParameterError("negatives per positive must be at least 1");
  const std::size_t n = store.n_entities();
  if (n < 2) throw SamplingError("cannot corrupt a triple with fewer than 2 entities");
  store.check_triple(positive);

  NegativeBatch batch{positive, {}};
  batch.negatives.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    const Direction side = rng.coin() ? Direction::Head : Direction::Tail;
    Triple c = detail::corrupt(positive, side, detail::draw_other(rng, n, detail::original(positive, side)));
    bool leak = store.is_known(c);
    Direction used = side;
    if (leak && mode == SamplingMode::Filtered) {
      for (int attempt = 1; attempt < kFilteredAttempts && leak; ++attempt) {
        c = detail::corrupt(positive, side, detail::draw_other(rng, n, detail::original(positive, side)));
        leak = store.is_known(c);
      }
      for (Direction s : {side, side == Direction::Head ? Direction::Tail : Direction::Head}) {
        if (!leak) break;
        std::vector<EntityId> valid;
        for (EntityId e = 0; e < n; ++e) {
          if (e == detail::original(positive, s)) continue;
          if (!store.is_known(detail::corrupt(positive, s, e))) valid.push_back(e);
        }
        if (!valid.empty()) {
          c = detail::corrupt(positive, s, valid[rng.below(valid.size())]);
          leak = false;
          used = s;
        }
      }
    }
    batch.negatives.push_back({c, used, leak});
  }
  return batch;
}

enum class LossKind { Margin, Limit, DoubleLimit, SelfAdversarial, NLL, BCE };

inline constexpr std::array<std::string_view, 6> kLossNames{"margin", "limit", "double_limit",
                                                            "self_adversarial", "nll", "bce"};

inline std::string_view to_string(LossKind k) { return kLossNames[static_cast<std::size_t>(k)]; }

inline std::optional<LossKind> loss_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kLossNames.size(); ++i) {
    if (kLossNames[i] == s) return static_cast<LossKind>(i);
  }
  return std::nullopt;
}

enum class NllForm { Softplus, Literal };

struct LossParams {
  double margin = 1.0;          // gamma
  double limit_mu = 1.0;        // limit loss
  double limit_lambda = 1.0;
  double mu_pos = 1.0;          // double-limit loss
  double mu_neg = 2.0;
  double double_limit_lambda = 1.0;
  double adversarial_temperature = 1.0;
  NllForm nll_form = NllForm::Softplus;

  void validate(LossKind kind) const {
    auto finite = [](double x) { return std::isfinite(x); };
    switch (kind) {
      case LossKind::Margin:
      case LossKind::SelfAdversarial:
        if (!(margin > 0.0) || !finite(margin)) throw ParameterError("margin must be positive");
        if (kind == LossKind::SelfAdversarial &&
            (!(adversarial_temperature >= 0.0) || !finite(adversarial_temperature))) {
          throw ParameterError("adversarial_temperature must be non-negative");
        }
        break;
      case LossKind::Limit:
        if (!(margin > 0.0) || !finite(margin)) throw ParameterError("margin must be positive");
        if (!(limit_lambda >= 0.0) || !finite(limit_lambda)) throw ParameterError("limit_lambda must be non-negative");
        if (!finite(limit_mu)) throw ParameterError("limit_mu must be finite");
        break;
      case LossKind::DoubleLimit:
        if (!(mu_pos > 0.0) || !(mu_neg > mu_pos) || !finite(mu_neg)) {
          throw ParameterError("double-limit loss needs mu_neg > mu_pos > 0");
        }
        if (!(double_limit_lambda >= 0.0) || !finite(double_limit_lambda)) {
          throw ParameterError("double_limit_lambda must be non-negative");
        }
        break;
      case LossKind::NLL:
      case LossKind::BCE:
        break;
    }
  }
};

struct LossResult {
  double value = 0.0;
  // d value / d score, per input score.
  std::vector<double> pos_grad;
  std::vector<double> neg_grad;
};

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// Softmax over alpha * score. Treated as constants by loss().
inline std::vector<double> adversarial_weights(std::span<const double> scores, double alpha) {
  if (scores.empty()) throw ParameterError("adversarial_weights needs at least one score");
  if (!(alpha >= 0.0)) throw ParameterError("adversarial temperature must be non-negative");
  double top = -std::numeric_limits<double>::infinity();
  for (double s : scores) top = std::max(top, alpha * s);
  std::vector<double> w(scores.size());
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    w[i] = std::exp(alpha * scores[i] - top);
    total += w[i];
  }
  for (auto& x : w) x /= total;
  return w;
}

// neg holds k = neg.size() / pos.size() scores per positive, grouped.
inline LossResult loss(LossKind kind, std::span<const double> pos, std::span<const double> neg,
                       const LossParams& p) {
  p.validate(kind);
  if (pos.empty()) throw ParameterError("loss needs at least one positive score");
  if (neg.empty() || neg.size() % pos.size() != 0) {
    throw ParameterError("negative scores must be grouped k >= 1 per positive");
  }
  for (double s : pos) {
    if (!std::isfinite(s)) throw ParameterError("non-finite positive score");
  }
  for (double s : neg) {
    if (!std::isfinite(s)) throw ParameterError("non-finite negative score");
  }
  const std::size_t k = neg.size() / pos.size();
  LossResult out;
  out.pos_grad.assign(pos.size(), 0.0);
  out.neg_grad.assign(neg.size(), 0.0);
  double& v = out.value;

  for (std::size_t i = 0; i < pos.size(); ++i) {
    const double dp = -pos[i];
    const auto ni = neg.subspan(i * k, k);
    switch (kind) {
      case LossKind::Margin:
      case LossKind::Limit:
        for (std::size_t j = 0; j < k; ++j) {
          const double dn = -ni[j];
          const double h = p.margin + dp - dn;
          if (h > 0.0) {
            v += h;
            out.pos_grad[i] -= 1.0;
            out.neg_grad[i * k + j] += 1.0;
          }
          if (kind == LossKind::Limit && dp - p.limit_mu > 0.0) {
            v += p.limit_lambda * (dp - p.limit_mu);
            out.pos_grad[i] -= p.limit_lambda;
          }
        }
        break;
      case LossKind::DoubleLimit:
        for (std::size_t j = 0; j < k; ++j) {
          const double dn = -ni[j];
          if (dp - p.mu_pos > 0.0) {
            v += dp - p.mu_pos;
            out.pos_grad[i] -= 1.0;
          }
          if (p.mu_neg - dn > 0.0) {
            v += p.double_limit_lambda * (p.mu_neg - dn);
            out.neg_grad[i * k + j] += p.double_limit_lambda;
          }
        }
        break;
      case LossKind::SelfAdversarial: {
        // -log sigma(gamma - d) = softplus(d - gamma)
        v += softplus(dp - p.margin);
        out.pos_grad[i] -= sigmoid(dp - p.margin);
        const auto w = adversarial_weights(ni, p.adversarial_temperature);
        for (std::size_t j = 0; j < k; ++j) {
          const double x = p.margin - (-ni[j]);  // -log sigma(d - gamma) = softplus(gamma - d)
          v += w[j] * softplus(x);
          out.neg_grad[i * k + j] += w[j] * sigmoid(x);
        }
        break;
      }
      case LossKind::NLL: {
        auto term = [&](double s, double y, double& g) {
          if (p.nll_form == NllForm::Softplus) {
            v += softplus(-y * s);
            g += -y * sigmoid(-y * s);
          } else {
            const double e = std::exp(-y * s);
            v += 1.0 + e;
            g += -y * e;
          }
        };
        term(pos[i], 1.0, out.pos_grad[i]);
        for (std::size_t j = 0; j < k; ++j) term(ni[j], -1.0, out.neg_grad[i * k + j]);
        break;
      }
      case LossKind::BCE: {
        const double inv = 1.0 / static_cast<double>(pos.size() + neg.size());
        // -log sigma(s) = softplus(-s); -log(1 - sigma(s)) = softplus(s)
        v += inv * softplus(-pos[i]);
        out.pos_grad[i] -= inv * sigmoid(-pos[i]);
        for (std::size_t j = 0; j < k; ++j) {
          v += inv * softplus(ni[j]);
          out.neg_grad[i * k + j] += inv * sigmoid(ni[j]);
        }
        break;
      }
    }
  }
  return out;
}

// Mean binary cross entropy of probabilities against 0/1 labels, with
// 0 log 0 taken as 0.
inline double bce_from_probabilities(std::span<const double> labels, std::span<const double> probs) {
  if (labels.size() != probs.size() || labels.empty()) {
    throw ParameterError("labels and probabilities must be non-empty and equal in length");
  }
  auto xlogy = [](double x, double y) { return x == 0.0 ? 0.0 : x * std::log(y); };
  double acc = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!(probs[i] >= 0.0 && probs[i] <= 1.0)) throw ParameterError("probability outside [0, 1]");
    acc += xlogy(labels[i], probs[i]) + xlogy(1.0 - labels[i], 1.0 - probs[i]);
  }
  return -acc / static_cast<double>(labels.size());
}

}  // namespace kge
