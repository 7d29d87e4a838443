#pragma once

// Scoring functions, embedding tables and analytic gradients for every
// supported model family. Scores are oriented higher-is-better: distance
// families return the negated distance, product families the raw product.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kge/error.hpp"
#include "kge/geometry.hpp"
#include "kge/graph_store.hpp"
#include "kge/rng.hpp"

namespace kge {

enum class Family : std::uint32_t {
  TransE,
  TransH,
  TransR,
  TransD,
  TransM,
  TransF,
  RotatE,
  PairRE,
  HAKE,
  CompoundE,
  CompoundE3D,
  RESCAL,
  DistMult,
  ComplEx,
  SimplE,
  HolE,
  QuatE,
  TuckER,
};

inline constexpr std::array<Family, 18> kAllFamilies{
    Family::TransE,   Family::TransH,  Family::TransR,      Family::TransD, Family::TransM, Family::TransF,
    Family::RotatE,   Family::PairRE,  Family::HAKE,        Family::CompoundE, Family::CompoundE3D,
    Family::RESCAL,   Family::DistMult, Family::ComplEx,    Family::SimplE, Family::HolE,   Family::QuatE,
    Family::TuckER,
};

inline constexpr std::array<std::string_view, 18> kFamilyNames{
    "TransE", "TransH",   "TransR",  "TransD", "TransM", "TransF", "RotatE", "PairRE", "HAKE",
    "CompoundE", "CompoundE3D", "RESCAL", "DistMult", "ComplEx", "SimplE", "HolE", "QuatE", "TuckER",
};

inline std::string_view to_string(Family f) { return kFamilyNames[static_cast<std::size_t>(f)]; }

inline std::optional<Family> family_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kFamilyNames.size(); ++i) {
    if (kFamilyNames[i] == name) return static_cast<Family>(i);
  }
  return std::nullopt;
}

// Families whose score is a negated distance.
inline bool is_distance_family(Family f) {
  switch (f) {
    case Family::TransE: case Family::TransH: case Family::TransR: case Family::TransD: case Family::TransM:
    case Family::RotatE: case Family::PairRE: case Family::HAKE: case Family::CompoundE: case Family::CompoundE3D:
      return true;
    default:
      return false;
  }
}

enum class CompoundVariant : std::uint32_t { Head, Tail, Complete };

inline std::string_view to_string(CompoundVariant v) {
  switch (v) {
    case CompoundVariant::Head: return "Head";
    case CompoundVariant::Tail: return "Tail";
    case CompoundVariant::Complete: return "Complete";
  }
  return "?";
}

inline std::optional<CompoundVariant> variant_from_string(std::string_view s) {
  if (s == "Head") return CompoundVariant::Head;
  if (s == "Tail") return CompoundVariant::Tail;
  if (s == "Complete") return CompoundVariant::Complete;
  return std::nullopt;
}

// Bound on r'_m keeping HAKE's modulus denominator 1 - r'_m away from zero.
inline constexpr double kHakeClampEpsilon = 1e-3;

struct ModelSpec {
  Family family = Family::TransE;
  std::size_t entity_dim = 0;
  // TransR, TransD and TuckER only; other families use entity_dim.
  std::size_t relation_dim = 0;
  int norm_p = 1;
  CompoundVariant variant = CompoundVariant::Head;
  // Operator kinds of a compound, left to right. Empty means the identity.
  std::vector<geometry::OpKind> ops;
  geometry::ShearForm shear_form = geometry::ShearForm::Product;
  double hake_lambda = 1.0;

  // A spec with the default operator order filled in for compound families.
  static ModelSpec make(Family f, std::size_t entity_dim, std::size_t relation_dim = 0) {
    ModelSpec s;
    s.family = f;
    s.entity_dim = entity_dim;
    s.relation_dim = relation_dim;
    if (f == Family::CompoundE) s.ops = geometry::default_ops(2);
    if (f == Family::CompoundE3D) s.ops = geometry::default_ops(3);
    return s;
  }

  bool uses_relation_dim() const {
    return family == Family::TransR || family == Family::TransD || family == Family::TuckER;
  }

  std::size_t rel_dim() const { return uses_relation_dim() && relation_dim != 0 ? relation_dim : entity_dim; }

  std::size_t block_dim() const { return family == Family::CompoundE3D ? 3 : 2; }

  geometry::CompoundSpec compound() const { return {ops, shear_form, true}; }

  void validate() const {
    const auto name = std::string(to_string(family));
    if (entity_dim == 0) throw ParameterError(name + ": entity_dim must be positive");
    if (norm_p != 1 && norm_p != 2) throw ParameterError(name + ": norm_p must be 1 or 2");
    switch (family) {
      case Family::RotatE:
      case Family::ComplEx:
        if (entity_dim % 2 != 0) throw ParameterError(name + ": entity_dim must be even");
        break;
      case Family::QuatE:
        if (entity_dim % 4 != 0) throw ParameterError(name + ": entity_dim must be divisible by 4");
        break;
      case Family::CompoundE:
        if (entity_dim % 2 != 0) throw ParameterError(name + ": entity_dim must be divisible by 2");
        geometry::validate_ops<2>(ops);
        break;
      case Family::CompoundE3D:
        if (entity_dim % 3 != 0) throw ParameterError(name + ": entity_dim must be divisible by 3");
        geometry::validate_ops<3>(ops);
        break;
      case Family::HAKE:
        if (!(hake_lambda >= 0.0) || !std::isfinite(hake_lambda)) {
          throw ParameterError(name + ": hake_lambda must be finite and non-negative");
        }
        break;
      default:
        break;
    }
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// Reals per entity row.
inline std::size_t entity_width(const ModelSpec& s) {
  switch (s.family) {
    case Family::TransD:  // e, e_p
    case Family::HAKE:    // modulus, phase
    case Family::SimplE:  // head-role, tail-role
      return 2 * s.entity_dim;
    default:
      return s.entity_dim;
  }
}

inline std::size_t compound_block_count(const ModelSpec& s) { return s.entity_dim / s.block_dim(); }

inline std::size_t compound_operator_width(const ModelSpec& s) {
  return compound_block_count(s) *
         (s.family == Family::CompoundE3D ? geometry::kParamsPerBlock<3> : geometry::kParamsPerBlock<2>);
}

// Reals per relation row.
inline std::size_t relation_width(const ModelSpec& s) {
  const std::size_t d = s.entity_dim, k = s.rel_dim();
  switch (s.family) {
    case Family::TransE: case Family::DistMult: case Family::HolE: case Family::TransF: case Family::ComplEx:
    case Family::QuatE:
      return d;
    case Family::TransH: return 2 * d;              // r, w
    case Family::TransR: return k + k * d;          // r, M (k x d, row-major)
    case Family::TransD: return 2 * k;              // r, r_p
    case Family::TransM: return d + 1;              // r, w_r
    case Family::RotatE: return d / 2;              // phases
    case Family::PairRE: return 2 * d;              // r^H, r^T
    case Family::HAKE: return 3 * d;                // r_m, r'_m, r_p
    case Family::CompoundE:
    case Family::CompoundE3D:
      return compound_operator_width(s) * (s.variant == CompoundVariant::Complete ? 2 : 1);
    case Family::RESCAL: return d * d;
    case Family::SimplE: return 2 * d;              // r, r'
    case Family::TuckER: return k;
  }
  return d;
}

// Reals shared by all triples (TuckER's core tensor, head x relation x tail).
inline std::size_t shared_width(const ModelSpec& s) {
  return s.family == Family::TuckER ? s.entity_dim * s.rel_dim() * s.entity_dim : 0;
}

template <typename T>
struct EmbeddingTable {
  std::size_t n_entities = 0;
  std::size_t n_relations = 0;
  std::size_t entity_width = 0;
  std::size_t relation_width = 0;
  std::vector<T> entities;
  std::vector<T> relations;
  std::vector<T> shared;

  static EmbeddingTable zeros(const ModelSpec& spec, std::size_t n_e, std::size_t n_r) {
    EmbeddingTable t;
    t.n_entities = n_e;
    t.n_relations = n_r;
    t.entity_width = kge::entity_width(spec);
    t.relation_width = kge::relation_width(spec);
    t.entities.assign(n_e * t.entity_width, T(0));
    t.relations.assign(n_r * t.relation_width, T(0));
    t.shared.assign(shared_width(spec), T(0));
    return t;
  }

  std::span<T> entity(std::size_t i) { return std::span<T>(entities).subspan(i * entity_width, entity_width); }
  std::span<const T> entity(std::size_t i) const {
    return std::span<const T>(entities).subspan(i * entity_width, entity_width);
  }
  std::span<T> relation(std::size_t i) {
    return std::span<T>(relations).subspan(i * relation_width, relation_width);
  }
  std::span<const T> relation(std::size_t i) const {
    return std::span<const T>(relations).subspan(i * relation_width, relation_width);
  }

  bool matches(const ModelSpec& spec) const {
    return entity_width == kge::entity_width(spec) && relation_width == kge::relation_width(spec) &&
           shared.size() == shared_width(spec) && entities.size() == n_entities * entity_width &&
           relations.size() == n_relations * relation_width;
  }

  bool all_finite() const {
    auto finite = [](const std::vector<T>& v) {
      return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
    };
    return finite(entities) && finite(relations) && finite(shared);
  }

  template <typename U>
  EmbeddingTable<U> cast() const {
    EmbeddingTable<U> out;
    out.n_entities = n_entities;
    out.n_relations = n_relations;
    out.entity_width = entity_width;
    out.relation_width = relation_width;
    out.entities.assign(entities.begin(), entities.end());
    out.relations.assign(relations.begin(), relations.end());
    out.shared.assign(shared.begin(), shared.end());
    return out;
  }

  friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;
};

// Deterministic in `seed`. Vectors are uniform in [-6/sqrt(d), 6/sqrt(d)],
// angles uniform in (-pi, pi], scales 1, translations and shears 0.
template <typename T = float>
EmbeddingTable<T> init_embeddings(const ModelSpec& spec, std::size_t n_entities, std::size_t n_relations,
                                  std::uint64_t seed) {
  spec.validate();
  using geometry::BlockLayout;
  auto table = EmbeddingTable<T>::zeros(spec, n_entities, n_relations);
  Rng rng(seed);
  const std::size_t d = spec.entity_dim, k = spec.rel_dim();
  const double be = 6.0 / std::sqrt(static_cast<double>(d));
  const double br = 6.0 / std::sqrt(static_cast<double>(k));
  auto uniform = [&](std::span<T> s, double bound) {
    for (auto& x : s) x = static_cast<T>(rng.uniform(-bound, bound));
  };
  auto angles = [&](std::span<T> s) {
    for (auto& x : s) x = static_cast<T>(rng.angle());
  };
  auto fill = [](std::span<T> s, T v) { std::fill(s.begin(), s.end(), v); };

  for (std::size_t e = 0; e < n_entities; ++e) {
    auto row = table.entity(e);
    if (spec.family == Family::HAKE) {
      uniform(row.first(d), be);
      angles(row.subspan(d, d));
    } else {
      uniform(row, be);
    }
  }
  for (std::size_t r = 0; r < n_relations; ++r) {
    auto row = table.relation(r);
    switch (spec.family) {
      case Family::TransR: {
        uniform(row.first(k), br);
        auto m = row.subspan(k);
        fill(m, T(0));
        for (std::size_t i = 0; i < std::min(k, d); ++i) m[i * d + i] = T(1);
        break;
      }
      case Family::TransD:
      case Family::TuckER:
        uniform(row, br);
        break;
      case Family::TransM:
        uniform(row.first(d), be);
        row[d] = T(1);
        break;
      case Family::RotatE:
        angles(row);
        break;
      case Family::PairRE:
        fill(row, T(1));
        break;
      case Family::HAKE:
        fill(row.first(d), T(1));
        fill(row.subspan(d, d), T(0));
        angles(row.subspan(2 * d, d));
        break;
      case Family::CompoundE: {
        using L = BlockLayout<2>;
        for (std::size_t b = 0; b < row.size() / L::kSize; ++b) {
          auto p = row.subspan(b * L::kSize, L::kSize);
          p[L::kTranslate] = p[L::kTranslate + 1] = T(0);
          p[L::kRotate] = static_cast<T>(rng.angle());
          p[L::kScale] = p[L::kScale + 1] = T(1);
        }
        break;
      }
      case Family::CompoundE3D: {
        using L = BlockLayout<3>;
        for (std::size_t b = 0; b < row.size() / L::kSize; ++b) {
          auto p = row.subspan(b * L::kSize, L::kSize);
          fill(p, T(0));
          for (std::size_t i = 0; i < 3; ++i) p[L::kScale + i] = T(1);
          for (std::size_t i = 0; i < 3; ++i) p[L::kRotate + i] = static_cast<T>(rng.angle());
          double norm2 = 0.0;
          for (std::size_t i = 0; i < 3; ++i) {
            const double x = rng.uniform(-1.0, 1.0);
            p[L::kReflect + i] = static_cast<T>(x);
            norm2 += x * x;
          }
          if (norm2 < 1e-2) {
            p[L::kReflect] = T(1);
            p[L::kReflect + 1] = p[L::kReflect + 2] = T(0);
          }
        }
        break;
      }
      default:
        uniform(row, be);
        break;
    }
  }
  for (auto& w : table.shared) w = static_cast<T>(rng.uniform(-0.1, 0.1));
  return table;
}

namespace detail {

enum class NormKind { L1, L2, L2Squared };

inline NormKind distance_norm(const ModelSpec& s) {
  switch (s.family) {
    case Family::TransH: case Family::TransR: case Family::TransD:
      return NormKind::L2Squared;
    default:
      return s.norm_p == 1 ? NormKind::L1 : NormKind::L2;
  }
}

template <typename T>
T norm_value(NormKind kind, std::span<const T> u) {
  T acc = T(0);
  switch (kind) {
    case NormKind::L1:
      for (T x : u) acc += std::abs(x);
      return acc;
    case NormKind::L2:
      for (T x : u) acc += x * x;
      return std::sqrt(acc);
    case NormKind::L2Squared:
      for (T x : u) acc += x * x;
      return acc;
  }
  return acc;
}

// gu += coeff * d|u|/du. Subgradient 0 at the kinks.
template <typename T>
void norm_backward(NormKind kind, std::span<const T> u, T value, T coeff, std::span<T> gu) {
  switch (kind) {
    case NormKind::L1:
      for (std::size_t i = 0; i < u.size(); ++i) {
        if (u[i] > T(0)) gu[i] += coeff;
        else if (u[i] < T(0)) gu[i] -= coeff;
      }
      break;
    case NormKind::L2:
      if (value > T(0)) {
        for (std::size_t i = 0; i < u.size(); ++i) gu[i] += coeff * u[i] / value;
      }
      break;
    case NormKind::L2Squared:
      for (std::size_t i = 0; i < u.size(); ++i) gu[i] += coeff * T(2) * u[i];
      break;
  }
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
std::vector<T>& scratch(std::size_t slot, std::size_t n) {
  thread_local std::array<std::vector<T>, 4> buffers;
  auto& b = buffers[slot];
  b.assign(n, T(0));
  return b;
}

template <typename T>
T hake_clamp(T x) {
  const T lim = T(1) - T(kHakeClampEpsilon);
  return std::clamp(x, -lim, lim);
}

template <typename T>
T unit_or_zero(std::span<const T> w, std::span<T> out) {
  T n = std::sqrt(dot(w, w));
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = n > T(0) ? w[i] / n : T(0);
  return n;
}

// Residual vector of a distance family; the score is -|u| in the family's norm
// (TransM additionally multiplies by w_r; HAKE adds a phase term).
template <typename T>
void residual(const ModelSpec& s, std::span<const T> h, std::span<const T> r, std::span<const T> t,
              std::span<T> u) {
  const std::size_t d = s.entity_dim, k = s.rel_dim();
  switch (s.family) {
    case Family::TransE:
    case Family::TransM:
      for (std::size_t i = 0; i < d; ++i) u[i] = h[i] + r[i] - t[i];
      break;
    case Family::TransH: {
      auto& w = scratch<T>(1, d);
      unit_or_zero<T>(r.subspan(d, d), w);
      T c = T(0);
      for (std::size_t i = 0; i < d; ++i) c += w[i] * (h[i] - t[i]);
      for (std::size_t i = 0; i < d; ++i) u[i] = (h[i] - t[i]) - c * w[i] + r[i];
      break;
    }
    case Family::TransR: {
      const auto m = r.subspan(k);
      for (std::size_t i = 0; i < k; ++i) {
        T acc = T(0);
        for (std::size_t j = 0; j < d; ++j) acc += m[i * d + j] * (h[j] - t[j]);
        u[i] = acc + r[i];
      }
      break;
    }
    case Family::TransD: {
      const T ch = dot(h.subspan(d, d), h.first(d));
      const T ct = dot(t.subspan(d, d), t.first(d));
      const auto rp = r.subspan(k, k);
      for (std::size_t i = 0; i < k; ++i) {
        const T ih = i < d ? h[i] : T(0);
        const T it = i < d ? t[i] : T(0);
        u[i] = rp[i] * (ch - ct) + ih + r[i] - it;
      }
      break;
    }
    case Family::PairRE:
      for (std::size_t i = 0; i < d; ++i) u[i] = h[i] * r[i] - t[i] * r[d + i];
      break;
    case Family::CompoundE:
    case Family::CompoundE3D: {
      const auto cs = s.compound();
      const std::size_t w = compound_operator_width(s);
      auto& mh = scratch<T>(1, d);
      auto& mt = scratch<T>(2, d);
      std::span<const T> lhs = h, rhs = t;
      if (s.variant == CompoundVariant::Head || s.variant == CompoundVariant::Complete) {
        if (s.family == Family::CompoundE) geometry::apply_blocks<2, T>(cs, r.first(w), h, mh);
        else geometry::apply_blocks<3, T>(cs, r.first(w), h, mh);
        lhs = mh;
      }
      if (s.variant == CompoundVariant::Tail || s.variant == CompoundVariant::Complete) {
        const auto op = s.variant == CompoundVariant::Tail ? r.first(w) : r.subspan(w, w);
        if (s.family == Family::CompoundE) geometry::apply_blocks<2, T>(cs, op, t, mt);
        else geometry::apply_blocks<3, T>(cs, op, t, mt);
        rhs = mt;
      }
      for (std::size_t i = 0; i < d; ++i) u[i] = lhs[i] - rhs[i];
      break;
    }
    default:
      throw ParameterError("residual() called for a non-residual family");
  }
}

template <typename T>
T rotate_distance(const ModelSpec& s, std::span<const T> h, std::span<const T> r, std::span<const T> t) {
  const std::size_t n = s.entity_dim / 2;
  T acc = T(0);
  for (std::size_t k = 0; k < n; ++k) {
    const T c = std::cos(r[k]), sn = std::sin(r[k]);
    const T ur = h[2 * k] * c - h[2 * k + 1] * sn - t[2 * k];
    const T ui = h[2 * k] * sn + h[2 * k + 1] * c - t[2 * k + 1];
    acc += s.norm_p == 1 ? std::sqrt(ur * ur + ui * ui) : ur * ur + ui * ui;
  }
  return s.norm_p == 1 ? acc : std::sqrt(acc);
}

template <typename T>
std::array<T, 4> hamilton(const T* q, const std::array<T, 4>& w) {
  const T a = q[0], b = q[1], c = q[2], d = q[3];
  const T p = w[0], qq = w[1], u = w[2], v = w[3];
  return {a * p - b * qq - c * u - d * v, a * qq + b * p + c * v - d * u, a * u - b * v + c * p + d * qq,
          a * v + b * u - c * qq + d * p};
}

}  // namespace detail

// Score from raw rows without bounds or finiteness checks.
template <typename T>
T score_rows(const ModelSpec& s, std::span<const T> h, std::span<const T> r, std::span<const T> t,
             std::span<const T> shared = {}) {
  using namespace detail;
  const std::size_t d = s.entity_dim, k = s.rel_dim();
  switch (s.family) {
    case Family::TransE: case Family::TransH: case Family::TransR: case Family::TransD: case Family::PairRE:
    case Family::CompoundE: case Family::CompoundE3D: {
      const std::size_t n = s.family == Family::TransR || s.family == Family::TransD ? k : d;
      auto& u = scratch<T>(0, n);
      residual<T>(s, h, r, t, u);
      return -norm_value<T>(distance_norm(s), u);
    }
    case Family::TransM: {
      auto& u = scratch<T>(0, d);
      residual<T>(s, h, r, t, u);
      return -r[d] * norm_value<T>(distance_norm(s), u);
    }
    case Family::TransF: {
      T acc = T(0);
      for (std::size_t i = 0; i < d; ++i) acc += (h[i] + r[i]) * t[i] + (t[i] - r[i]) * h[i];
      return acc;
    }
    case Family::RotatE:
      return -rotate_distance<T>(s, h, r, t);
    case Family::HAKE: {
      T dm = T(0), dp = T(0);
      for (std::size_t i = 0; i < d; ++i) {
        const T c = hake_clamp(r[d + i]);
        const T um = h[i] * ((r[i] + c) / (T(1) - c)) - t[i];
        dm += um * um;
        dp += std::abs(std::sin((h[d + i] + r[2 * d + i] - t[d + i]) / T(2)));
      }
      return -(std::sqrt(dm) + static_cast<T>(s.hake_lambda) * dp);
    }
    case Family::RESCAL: {
      T acc = T(0);
      for (std::size_t i = 0; i < d; ++i) {
        T row = T(0);
        for (std::size_t j = 0; j < d; ++j) row += r[i * d + j] * t[j];
        acc += h[i] * row;
      }
      return acc;
    }
    case Family::DistMult: {
      T acc = T(0);
      for (std::size_t i = 0; i < d; ++i) acc += h[i] * t[i] * r[i];
      return acc;
    }
    case Family::ComplEx: {
      T acc = T(0);
      for (std::size_t i = 0; i < d / 2; ++i) {
        const T hr = h[2 * i], hi = h[2 * i + 1], rr = r[2 * i], ri = r[2 * i + 1], tr = t[2 * i],
                ti = t[2 * i + 1];
        acc += (rr * hr - ri * hi) * tr + (rr * hi + ri * hr) * ti;
      }
      return acc;
    }
    case Family::SimplE: {
      T a = T(0), b = T(0);
      for (std::size_t i = 0; i < d; ++i) {
        a += h[i] * r[i] * t[d + i];
        b += t[i] * r[d + i] * h[d + i];
      }
      return T(0.5) * (a + b);
    }
    case Family::HolE: {
      T acc = T(0);
      for (std::size_t j = 0; j < d; ++j) {
        T corr = T(0);
        for (std::size_t i = 0; i < d; ++i) corr += h[i] * t[(i + j) % d];
        acc += r[j] * corr;
      }
      return acc;
    }
    case Family::QuatE: {
      T acc = T(0);
      for (std::size_t q = 0; q < d / 4; ++q) {
        const T* w = r.data() + 4 * q;
        const T n = std::sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2] + w[3] * w[3]);
        if (!(n > T(0))) continue;
        const auto p = hamilton<T>(h.data() + 4 * q, {w[0] / n, w[1] / n, w[2] / n, w[3] / n});
        for (std::size_t c = 0; c < 4; ++c) acc += p[c] * t[4 * q + c];
      }
      return acc;
    }
    case Family::TuckER: {
      T acc = T(0);
      for (std::size_t i = 0; i < d; ++i) {
        if (h[i] == T(0)) continue;
        T hi = T(0);
        for (std::size_t j = 0; j < k; ++j) {
          const T* w = shared.data() + (i * k + j) * d;
          T inner = T(0);
          for (std::size_t l = 0; l < d; ++l) inner += w[l] * t[l];
          hi += r[j] * inner;
        }
        acc += h[i] * hi;
      }
      return acc;
    }
  }
  return T(0);
}

// Adds upstream * d score / d(rows) into the gradient spans. gh and gt may
// alias (self-loop triples). Returns the score.
template <typename T>
T score_grad_rows(const ModelSpec& s, std::span<const T> h, std::span<const T> r, std::span<const T> t,
                  std::span<const T> shared, T up, std::span<T> gh, std::span<T> gr, std::span<T> gt,
                  std::span<T> gshared) {
  using namespace detail;
  const std::size_t d = s.entity_dim, k = s.rel_dim();
  switch (s.family) {
    case Family::TransE:
    case Family::TransM: {
      auto& u = scratch<T>(0, d);
      residual<T>(s, h, r, t, u);
      const auto kind = distance_norm(s);
      const T dist = norm_value<T>(kind, u);
      const T w = s.family == Family::TransM ? r[d] : T(1);
      auto& g = scratch<T>(3, d);
      norm_backward<T>(kind, u, dist, -up * w, g);
      for (std::size_t i = 0; i < d; ++i) {
        gh[i] += g[i];
        gr[i] += g[i];
        gt[i] -= g[i];
      }
      if (s.family == Family::TransM) gr[d] += -up * dist;
      return -w * dist;
    }
    case Family::TransH: {
      auto& u = scratch<T>(0, d);
      residual<T>(s, h, r, t, u);
      const T dist = norm_value<T>(NormKind::L2Squared, u);
      auto& g = scratch<T>(3, d);
      norm_backward<T>(NormKind::L2Squared, u, dist, -up, g);
      auto& w = scratch<T>(1, d);
      const T wn = unit_or_zero<T>(r.subspan(d, d), w);
      T c = T(0), gw_dot = T(0);
      for (std::size_t i = 0; i < d; ++i) {
        c += w[i] * (h[i] - t[i]);
        gw_dot += g[i] * w[i];
      }
      // u = a - w (w.a) + r with a = h - t
      auto& gwhat = scratch<T>(2, d);
      for (std::size_t i = 0; i < d; ++i) {
        const T ga = g[i] - w[i] * gw_dot;
        gh[i] += ga;
        gt[i] -= ga;
        gr[i] += g[i];
        gwhat[i] = -g[i] * c - gw_dot * (h[i] - t[i]);
      }
      if (wn > T(0)) {
        T proj = T(0);
        for (std::size_t i = 0; i < d; ++i) proj += gwhat[i] * w[i];
        for (std::size_t i = 0; i < d; ++i) gr[d + i] += (gwhat[i] - w[i] * proj) / wn;
      }
      return -dist;
    }
    case Family::TransR: {
      auto& u = scratch<T>(0, k);
      residual<T>(s, h, r, t, u);
      const T dist = norm_value<T>(NormKind::L2Squared, u);
      auto& g = scratch<T>(3, k);
      norm_backward<T>(NormKind::L2Squared, u, dist, -up, g);
      const auto m = r.subspan(k);
      auto gm = gr.subspan(k);
      for (std::size_t i = 0; i < k; ++i) {
        gr[i] += g[i];
        for (std::size_t j = 0; j < d; ++j) {
          const T a = h[j] - t[j];
          gm[i * d + j] += g[i] * a;
          const T ga = m[i * d + j] * g[i];
          gh[j] += ga;
          gt[j] -= ga;
        }
      }
      return -dist;
    }
    case Family::TransD: {
      auto& u = scratch<T>(0, k);
      residual<T>(s, h, r, t, u);
      const T dist = norm_value<T>(NormKind::L2Squared, u);
      auto& g = scratch<T>(3, k);
      norm_backward<T>(NormKind::L2Squared, u, dist, -up, g);
      const auto rp = r.subspan(k, k);
      const T ch = dot(h.subspan(d, d), h.first(d));
      const T ct = dot(t.subspan(d, d), t.first(d));
      T gc = T(0);
      for (std::size_t i = 0; i < k; ++i) {
        gr[i] += g[i];
        gr[k + i] += g[i] * (ch - ct);
        gc += g[i] * rp[i];
      }
      for (std::size_t j = 0; j < std::min(d, k); ++j) {
        gh[j] += g[j];
        gt[j] -= g[j];
      }
      for (std::size_t j = 0; j < d; ++j) {
        gh[j] += gc * h[d + j];
        gh[d + j] += gc * h[j];
        gt[j] -= gc * t[d + j];
        gt[d + j] -= gc * t[j];
      }
      return -dist;
    }
    case Family::TransF: {
      T acc = T(0);
      for (std::size_t i = 0; i < d; ++i) {
        acc += (h[i] + r[i]) * t[i] + (t[i] - r[i]) * h[i];
        gh[i] += up * (T(2) * t[i] - r[i]);
        gt[i] += up * (T(2) * h[i] + r[i]);
        gr[i] += up * (t[i] - h[i]);
      }
      return acc;
    }
    case Family::RotatE: {
      const std::size_t n = d / 2;
      auto& ur = scratch<T>(0, n);
      auto& ui = scratch<T>(1, n);
      T acc = T(0);
      for (std::size_t q = 0; q < n; ++q) {
        const T c = std::cos(r[q]), sn = std::sin(r[q]);
        ur[q] = h[2 * q] * c - h[2 * q + 1] * sn - t[2 * q];
        ui[q] = h[2 * q] * sn + h[2 * q + 1] * c - t[2 * q + 1];
        acc += s.norm_p == 1 ? std::sqrt(ur[q] * ur[q] + ui[q] * ui[q]) : ur[q] * ur[q] + ui[q] * ui[q];
      }
      const T dist = s.norm_p == 1 ? acc : std::sqrt(acc);
      for (std::size_t q = 0; q < n; ++q) {
        T scale;
        if (s.norm_p == 1) {
          const T m = std::sqrt(ur[q] * ur[q] + ui[q] * ui[q]);
          scale = m > T(0) ? -up / m : T(0);
        } else {
          scale = dist > T(0) ? -up / dist : T(0);
        }
        const T gur = scale * ur[q], gui = scale * ui[q];
        const T c = std::cos(r[q]), sn = std::sin(r[q]);
        const T hr = h[2 * q], hi = h[2 * q + 1];
        gh[2 * q] += gur * c + gui * sn;
        gh[2 * q + 1] += -gur * sn + gui * c;
        gt[2 * q] -= gur;
        gt[2 * q + 1] -= gui;
        gr[q] += gur * (-hr * sn - hi * c) + gui * (hr * c - hi * sn);
      }
      return -dist;
    }
    case Family::PairRE: {
      auto& u = scratch<T>(0, d);
      residual<T>(s, h, r, t, u);
      const auto kind = distance_norm(s);
      const T dist = norm_value<T>(kind, u);
      auto& g = scratch<T>(3, d);
      norm_backward<T>(kind, u, dist, -up, g);
      for (std::size_t i = 0; i < d; ++i) {
        gh[i] += g[i] * r[i];
        gr[i] += g[i] * h[i];
        gt[i] -= g[i] * r[d + i];
        gr[d + i] -= g[i] * t[i];
      }
      return -dist;
    }
    case Family::HAKE: {
      auto& um = scratch<T>(0, d);
      T dm2 = T(0), dp = T(0);
      for (std::size_t i = 0; i < d; ++i) {
        const T c = hake_clamp(r[d + i]);
        um[i] = h[i] * ((r[i] + c) / (T(1) - c)) - t[i];
        dm2 += um[i] * um[i];
        dp += std::abs(std::sin((h[d + i] + r[2 * d + i] - t[d + i]) / T(2)));
      }
      const T dm = std::sqrt(dm2);
      const T lambda = static_cast<T>(s.hake_lambda);
      const T lim = T(1) - T(kHakeClampEpsilon);
      for (std::size_t i = 0; i < d; ++i) {
        const T raw = r[d + i];
        const T c = hake_clamp(raw);
        const T q = (r[i] + c) / (T(1) - c);
        const T gum = dm > T(0) ? -up * um[i] / dm : T(0);
        gh[i] += gum * q;
        gt[i] -= gum;
        const T gq = gum * h[i];
        gr[i] += gq / (T(1) - c);
        if (raw > -lim && raw < lim) gr[d + i] += gq * (T(1) + r[i]) / ((T(1) - c) * (T(1) - c));
        const T x = (h[d + i] + r[2 * d + i] - t[d + i]) / T(2);
        const T sx = std::sin(x);
        const T sign = sx > T(0) ? T(1) : (sx < T(0) ? T(-1) : T(0));
        const T gx = -up * lambda * sign * std::cos(x) / T(2);
        gh[d + i] += gx;
        gr[2 * d + i] += gx;
        gt[d + i] -= gx;
      }
      return -(dm + lambda * dp);
    }
    case Family::CompoundE:
    case Family::CompoundE3D: {
      auto& u = scratch<T>(0, d);
      residual<T>(s, h, r, t, u);
      const auto kind = distance_norm(s);
      const T dist = norm_value<T>(kind, u);
      auto& g = scratch<T>(3, d);
      norm_backward<T>(kind, u, dist, -up, g);
      const auto cs = s.compound();
      const std::size_t w = compound_operator_width(s);
      const std::size_t n = s.block_dim();
      const std::size_t pb = s.family == Family::CompoundE ? geometry::kParamsPerBlock<2> : geometry::kParamsPerBlock<3>;
      auto back = [&](std::span<const T> op, std::span<T> gop, std::span<const T> x, std::span<T> gx, T sign) {
        auto& gy = scratch<T>(1, d);
        for (std::size_t i = 0; i < d; ++i) gy[i] = sign * g[i];
        for (std::size_t b = 0; b < d / n; ++b) {
          const auto p = op.subspan(b * pb, pb);
          const auto gp = gop.subspan(b * pb, pb);
          const auto xb = x.subspan(b * n, n);
          const auto gxb = gx.subspan(b * n, n);
          const auto gyb = std::span<const T>(gy).subspan(b * n, n);
          if (n == 2) geometry::block_backward<2, T>(cs, p, xb, gyb, gxb, gp);
          else geometry::block_backward<3, T>(cs, p, xb, gyb, gxb, gp);
        }
      };
      switch (s.variant) {
        case CompoundVariant::Head:
          back(r.first(w), gr.first(w), h, gh, T(1));
          for (std::size_t i = 0; i < d; ++i) gt[i] -= g[i];
          break;
        case CompoundVariant::Tail:
          for (std::size_t i = 0; i < d; ++i) gh[i] += g[i];
          back(r.first(w), gr.first(w), t, gt, T(-1));
          break;
        case CompoundVariant::Complete:
          back(r.first(w), gr.first(w), h, gh, T(1));
          back(r.subspan(w, w), gr.subspan(w, w), t, gt, T(-1));
          break;
      }
      return -dist;
    }
    case Family::RESCAL: {
      T acc = T(0);
      for (std::size_t i = 0; i < d; ++i) {
        T row = T(0);
        for (std::size_t j = 0; j < d; ++j) {
          const T m = r[i * d + j];
          row += m * t[j];
          gt[j] += up * h[i] * m;
          gr[i * d + j] += up * h[i] * t[j];
        }
        gh[i] += up * row;
        acc += h[i] * row;
      }
      return acc;
    }
    case Family::DistMult: {
      T acc = T(0);
      for (std::size_t i = 0; i < d; ++i) {
        acc += h[i] * t[i] * r[i];
        gh[i] += up * r[i] * t[i];
        gr[i] += up * h[i] * t[i];
        gt[i] += up * h[i] * r[i];
      }
      return acc;
    }
    case Family::ComplEx: {
      T acc = T(0);
      for (std::size_t i = 0; i < d / 2; ++i) {
        const T hr = h[2 * i], hi = h[2 * i + 1], rr = r[2 * i], ri = r[2 * i + 1], tr = t[2 * i],
                ti = t[2 * i + 1];
        acc += (rr * hr - ri * hi) * tr + (rr * hi + ri * hr) * ti;
        gh[2 * i] += up * (rr * tr + ri * ti);
        gh[2 * i + 1] += up * (-ri * tr + rr * ti);
        gr[2 * i] += up * (hr * tr + hi * ti);
        gr[2 * i + 1] += up * (-hi * tr + hr * ti);
        gt[2 * i] += up * (rr * hr - ri * hi);
        gt[2 * i + 1] += up * (rr * hi + ri * hr);
      }
      return acc;
    }
    case Family::SimplE: {
      T a = T(0), b = T(0);
      const T half = T(0.5) * up;
      for (std::size_t i = 0; i < d; ++i) {
        a += h[i] * r[i] * t[d + i];
        b += t[i] * r[d + i] * h[d + i];
        gh[i] += half * r[i] * t[d + i];
        gr[i] += half * h[i] * t[d + i];
        gt[d + i] += half * h[i] * r[i];
        gt[i] += half * r[d + i] * h[d + i];
        gr[d + i] += half * t[i] * h[d + i];
        gh[d + i] += half * t[i] * r[d + i];
      }
      return T(0.5) * (a + b);
    }
    case Family::HolE: {
      T acc = T(0);
      for (std::size_t j = 0; j < d; ++j) {
        T corr = T(0);
        for (std::size_t i = 0; i < d; ++i) {
          const std::size_t l = (i + j) % d;
          corr += h[i] * t[l];
          gh[i] += up * r[j] * t[l];
          gt[l] += up * r[j] * h[i];
        }
        gr[j] += up * corr;
        acc += r[j] * corr;
      }
      return acc;
    }
    case Family::QuatE: {
      T acc = T(0);
      for (std::size_t q = 0; q < d / 4; ++q) {
        const T* wr = r.data() + 4 * q;
        const T n = std::sqrt(wr[0] * wr[0] + wr[1] * wr[1] + wr[2] * wr[2] + wr[3] * wr[3]);
        if (!(n > T(0))) continue;
        const std::array<T, 4> w{wr[0] / n, wr[1] / n, wr[2] / n, wr[3] / n};
        const T* hq = h.data() + 4 * q;
        const T* tq = t.data() + 4 * q;
        const auto prod = hamilton<T>(hq, w);
        std::array<T, 4> g{};
        for (std::size_t c = 0; c < 4; ++c) {
          acc += prod[c] * tq[c];
          gt[4 * q + c] += up * prod[c];
          g[c] = up * tq[c];
        }
        const T a = hq[0], b = hq[1], c = hq[2], dd = hq[3];
        const T p = w[0], qq = w[1], u = w[2], v = w[3];
        gh[4 * q + 0] += g[0] * p + g[1] * qq + g[2] * u + g[3] * v;
        gh[4 * q + 1] += -g[0] * qq + g[1] * p - g[2] * v + g[3] * u;
        gh[4 * q + 2] += -g[0] * u + g[1] * v + g[2] * p - g[3] * qq;
        gh[4 * q + 3] += -g[0] * v - g[1] * u + g[2] * qq + g[3] * p;
        const std::array<T, 4> gw{g[0] * a + g[1] * b + g[2] * c + g[3] * dd,
                                  -g[0] * b + g[1] * a + g[2] * dd - g[3] * c,
                                  -g[0] * c - g[1] * dd + g[2] * a + g[3] * b,
                                  -g[0] * dd + g[1] * c - g[2] * b + g[3] * a};
        // through w = W / |W|
        const T proj = gw[0] * w[0] + gw[1] * w[1] + gw[2] * w[2] + gw[3] * w[3];
        for (std::size_t c2 = 0; c2 < 4; ++c2) gr[4 * q + c2] += (gw[c2] - w[c2] * proj) / n;
      }
      return acc;
    }
    case Family::TuckER: {
      T acc = T(0);
      auto& wt = scratch<T>(0, k);  // sum_l W[i][j][l] t_l for the current i
      for (std::size_t i = 0; i < d; ++i) {
        T hi = T(0);
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t base = (i * k + j) * d;
          T inner = T(0);
          for (std::size_t l = 0; l < d; ++l) {
            inner += shared[base + l] * t[l];
            gt[l] += up * h[i] * r[j] * shared[base + l];
            gshared[base + l] += up * h[i] * r[j] * t[l];
          }
          wt[j] = inner;
          hi += r[j] * inner;
          gr[j] += up * h[i] * inner;
        }
        gh[i] += up * hi;
        acc += h[i] * hi;
      }
      return acc;
    }
  }
  return T(0);
}

// Distance from the probe point to the nearest non-differentiable point of
// the score (L1 kinks, zero residual under L2, HAKE's |sin| and clamp
// boundaries). +inf for everywhere-smooth families.
template <typename T>
double nondifferentiability_margin(const ModelSpec& s, std::span<const T> h, std::span<const T> r,
                                   std::span<const T> t) {
  using namespace detail;
  const std::size_t d = s.entity_dim, k = s.rel_dim();
  double margin = std::numeric_limits<double>::infinity();
  switch (s.family) {
    case Family::TransE: case Family::TransM: case Family::PairRE: case Family::CompoundE:
    case Family::CompoundE3D: {
      auto& u = scratch<T>(0, d);
      residual<T>(s, h, r, t, u);
      if (distance_norm(s) == NormKind::L1) {
        for (T x : u) margin = std::min(margin, double(std::abs(x)));
      } else {
        margin = norm_value<T>(NormKind::L2, u);
      }
      break;
    }
    case Family::RotatE: {
      T total = T(0);
      for (std::size_t q = 0; q < d / 2; ++q) {
        const T c = std::cos(r[q]), sn = std::sin(r[q]);
        const T ur = h[2 * q] * c - h[2 * q + 1] * sn - t[2 * q];
        const T ui = h[2 * q] * sn + h[2 * q + 1] * c - t[2 * q + 1];
        const T m = std::sqrt(ur * ur + ui * ui);
        total += m * m;
        if (s.norm_p == 1) margin = std::min(margin, double(m));
      }
      if (s.norm_p == 2) margin = std::sqrt(double(total));
      break;
    }
    case Family::HAKE: {
      T dm2 = T(0);
      for (std::size_t i = 0; i < d; ++i) {
        const T c = hake_clamp(r[d + i]);
        const T um = h[i] * ((r[i] + c) / (T(1) - c)) - t[i];
        dm2 += um * um;
        margin = std::min(margin, double(std::abs(std::sin((h[d + i] + r[2 * d + i] - t[d + i]) / T(2)))));
        margin = std::min(margin, std::abs(std::abs(double(r[d + i])) - (1.0 - kHakeClampEpsilon)));
      }
      margin = std::min(margin, std::sqrt(double(dm2)));
      break;
    }
    default:
      (void)k;
      break;
  }
  return margin;
}

template <typename T>
void check_ids(const EmbeddingTable<T>& table, const Triple& tr) {
  if (tr.head >= table.n_entities || tr.tail >= table.n_entities) {
    throw BoundsError("entity id out of range for embedding table of " + std::to_string(table.n_entities) +
                      " entities");
  }
  if (tr.relation >= table.n_relations) {
    throw BoundsError("relation id " + std::to_string(tr.relation) + " out of range for embedding table of " +
                      std::to_string(table.n_relations) + " relations");
  }
}

template <typename T>
void check_finite_rows(const EmbeddingTable<T>& table, const Triple& tr) {
  auto finite = [](std::span<const T> s) { return std::all_of(s.begin(), s.end(), [](T x) { return std::isfinite(x); }); };
  if (!finite(table.entity(tr.head)) || !finite(table.entity(tr.tail)) || !finite(table.relation(tr.relation)) ||
      !finite(table.shared)) {
    throw CorruptionError("non-finite value in embedding rows of triple (" + std::to_string(tr.head) + ", " +
                          std::to_string(tr.relation) + ", " + std::to_string(tr.tail) + ")");
  }
}

template <typename T>
T score(const ModelSpec& spec, const EmbeddingTable<T>& table, const Triple& tr) {
  check_ids(table, tr);
  check_finite_rows(table, tr);
  return score_rows<T>(spec, table.entity(tr.head), table.relation(tr.relation), table.entity(tr.tail),
                       table.shared);
}

template <typename T>
T score(const ModelSpec& spec, const EmbeddingTable<T>& table, EntityId h, RelationId r, EntityId t) {
  return score(spec, table, Triple{h, r, t});
}

enum class SlotKind : std::uint32_t { Entity, Relation, Shared };

struct Slot {
  SlotKind kind = SlotKind::Entity;
  std::uint32_t id = 0;

  friend bool operator==(const Slot&, const Slot&) = default;
  friend auto operator<=>(const Slot&, const Slot&) = default;
};

// Gradient slices keyed by the parameter row they belong to.
template <typename T>
struct SparseGrad {
  std::vector<std::pair<Slot, std::vector<T>>> entries;

  const std::vector<T>* find(Slot s) const {
    for (const auto& [slot, g] : entries) {
      if (slot == s) return &g;
    }
    return nullptr;
  }
};

// d score / d parameters, scaled by `upstream`, for the rows of one triple.
template <typename T>
SparseGrad<T> grad(const ModelSpec& spec, const EmbeddingTable<T>& table, const Triple& tr, T upstream = T(1)) {
  check_ids(table, tr);
  check_finite_rows(table, tr);
  std::vector<T> gh(table.entity_width, T(0)), gt(table.entity_width, T(0)), gr(table.relation_width, T(0)),
      gs(table.shared.size(), T(0));
  const bool self = tr.head == tr.tail;
  score_grad_rows<T>(spec, table.entity(tr.head), table.relation(tr.relation), table.entity(tr.tail),
                     table.shared, upstream, gh, gr, self ? std::span<T>(gh) : std::span<T>(gt), gs);
  SparseGrad<T> out;
  out.entries.push_back({{SlotKind::Entity, tr.head}, std::move(gh)});
  out.entries.push_back({{SlotKind::Relation, tr.relation}, std::move(gr)});
  if (!self) out.entries.push_back({{SlotKind::Entity, tr.tail}, std::move(gt)});
  if (!gs.empty()) out.entries.push_back({{SlotKind::Shared, 0}, std::move(gs)});
  return out;
}

}  // namespace kge
