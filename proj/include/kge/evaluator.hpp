#pragma once

// Link-prediction ranking (raw and filtered) and the MR / MRR / Hits@k
// metrics.

#include <algorithm>
#include <cmath>
#include <exception>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "kge/error.hpp"
#include "kge/graph_store.hpp"
#include "kge/models.hpp"

namespace kge {

enum class TiePolicy { Mean, Pessimistic, Optimistic };

inline std::string_view to_string(TiePolicy p) {
  switch (p) {
    case TiePolicy::Mean: return "mean";
    case TiePolicy::Pessimistic: return "pessimistic";
    case TiePolicy::Optimistic: return "optimistic";
  }
  return "?";
}

inline std::optional<TiePolicy> tie_policy_from_string(std::string_view s) {
  if (s == "mean") return TiePolicy::Mean;
  if (s == "pessimistic") return TiePolicy::Pessimistic;
  if (s == "optimistic") return TiePolicy::Optimistic;
  return std::nullopt;
}

// 1 + #better + tie adjustment, from counts of competitors (target excluded).
inline double rank_from_counts(std::size_t better, std::size_t ties, TiePolicy policy) {
  switch (policy) {
    case TiePolicy::Mean: return 1.0 + static_cast<double>(better) + static_cast<double>(ties) / 2.0;
    case TiePolicy::Pessimistic: return 1.0 + static_cast<double>(better + ties);
    case TiePolicy::Optimistic: return 1.0 + static_cast<double>(better);
  }
  return 0.0;
}

struct RankResult {
  Triple query;
  Direction direction = Direction::Tail;
  double filtered_rank = 1.0;
  double raw_rank = 1.0;
};

// Scores of every entity as the missing slot of `q`. Unchecked.
template <typename T>
std::vector<T> score_all_candidates(const ModelSpec& spec, const EmbeddingTable<T>& table, const Query& q) {
  std::vector<T> out(table.n_entities);
  const auto r = table.relation(q.relation);
  const auto anchor = table.entity(q.anchor);
  for (std::size_t e = 0; e < table.n_entities; ++e) {
    const auto c = table.entity(e);
    out[e] = q.direction == Direction::Tail ? score_rows<T>(spec, anchor, r, c, table.shared)
                                            : score_rows<T>(spec, c, r, anchor, table.shared);
  }
  return out;
}

// Rank of `target` among `candidates` (which must contain it), given scores
// indexed by entity id.
template <typename T>
double rank_among(std::span<const T> scores, std::span<const EntityId> candidates, EntityId target,
                  TiePolicy policy) {
  if (candidates.empty()) throw ParameterError("empty candidate set");
  if (std::find(candidates.begin(), candidates.end(), target) == candidates.end()) {
    throw ParameterError("target " + std::to_string(target) + " is not among the candidates");
  }
  const T s = scores[target];
  std::size_t better = 0, ties = 0;
  for (EntityId c : candidates) {
    if (c == target) continue;
    if (scores[c] > s) ++better;
    else if (scores[c] == s) ++ties;
  }
  return rank_from_counts(better, ties, policy);
}

// Ranks the true answer of `triple` for one direction. The filtered rank
// skips competitors that form known-true triples in `store`.
template <typename T>
RankResult rank_query(const ModelSpec& spec, const EmbeddingTable<T>& table, const TripleStore& store,
                      const Triple& triple, Direction direction, TiePolicy policy = TiePolicy::Mean) {
  store.check_triple(triple);
  check_ids(table, triple);
  const Query q = direction == Direction::Tail ? Query::tail_of(triple) : Query::head_of(triple);
  const EntityId target = direction == Direction::Tail ? triple.tail : triple.head;
  const auto scores = score_all_candidates(spec, table, q);
  const auto known = store.known_answers(q);
  const T s = scores[target];
  if (!std::isfinite(s)) throw CorruptionError("non-finite score for the query target");
  std::size_t better = 0, ties = 0, fbetter = 0, fties = 0;
  for (EntityId e = 0; e < scores.size(); ++e) {
    if (e == target) continue;
    const bool filtered_out = std::binary_search(known.begin(), known.end(), e);
    if (scores[e] > s) {
      ++better;
      if (!filtered_out) ++fbetter;
    } else if (scores[e] == s) {
      ++ties;
      if (!filtered_out) ++fties;
    }
  }
  return {triple, direction, rank_from_counts(fbetter, fties, policy), rank_from_counts(better, ties, policy)};
}

struct MetricsReport {
  double mr = 0.0;
  double mrr = 0.0;
  double hits1 = 0.0;
  double hits3 = 0.0;
  double hits10 = 0.0;
  std::size_t count = 0;
};

inline MetricsReport metrics_from_ranks(std::span<const double> ranks) {
  MetricsReport m;
  m.count = ranks.size();
  if (ranks.empty()) return m;
  for (double r : ranks) {
    m.mr += r;
    m.mrr += 1.0 / r;
    m.hits1 += r <= 1.0 ? 1.0 : 0.0;
    m.hits3 += r <= 3.0 ? 1.0 : 0.0;
    m.hits10 += r <= 10.0 ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(ranks.size());
  m.mr /= n;
  m.mrr /= n;
  m.hits1 /= n;
  m.hits3 /= n;
  m.hits10 /= n;
  return m;
}

struct Evaluation {
  TiePolicy policy = TiePolicy::Mean;
  MetricsReport raw;
  MetricsReport filtered;
  std::vector<RankResult> ranks;
};

inline std::size_t default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// Head and tail queries for every triple of `split` (2 |split| queries). The
// result does not depend on `threads`.
template <typename T>
Evaluation evaluate(const ModelSpec& spec, const EmbeddingTable<T>& table, const TripleStore& store,
                    std::span<const Triple> split, TiePolicy policy = TiePolicy::Mean, std::size_t threads = 1) {
  if (!table.all_finite()) throw CorruptionError("embedding table contains non-finite values");
  Evaluation ev;
  ev.policy = policy;
  ev.ranks.resize(2 * split.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      ev.ranks[i] = rank_query(spec, table, store, split[i / 2], i % 2 == 0 ? Direction::Head : Direction::Tail,
                               policy);
    }
  };
  const std::size_t n = ev.ranks.size();
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, n));
  if (threads == 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          work(n * w / threads, n * (w + 1) / threads);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  std::vector<double> raw(n), filtered(n);
  for (std::size_t i = 0; i < n; ++i) {
    raw[i] = ev.ranks[i].raw_rank;
    filtered[i] = ev.ranks[i].filtered_rank;
  }
  ev.raw = metrics_from_ranks(raw);
  ev.filtered = metrics_from_ranks(filtered);
  return ev;
}

inline nlohmann::ordered_json to_json(const Evaluation& ev) {
  nlohmann::ordered_json j;
  j["queries"] = ev.filtered.count;
  j["tie_policy"] = std::string(to_string(ev.policy));
  for (auto [suffix, m] : {std::pair{"filtered", &ev.filtered}, std::pair{"raw", &ev.raw}}) {
    const std::string s(suffix);
    j["mr_" + s] = m->mr;
    j["mrr_" + s] = m->mrr;
    j["hits@1_" + s] = m->hits1;
    j["hits@3_" + s] = m->hits3;
    j["hits@10_" + s] = m->hits10;
  }
  return j;
}

// query_head,query_rel,query_tail,direction,raw_rank,filtered_rank
inline void write_rank_csv(std::ostream& out, const Evaluation& ev, const Vocabulary* vocab = nullptr) {
  out << "query_head,query_rel,query_tail,direction,raw_rank,filtered_rank\n";
  auto ent = [&](EntityId e) { return vocab ? vocab->entities.name(e) : std::to_string(e); };
  auto rel = [&](RelationId r) { return vocab ? vocab->relations.name(r) : std::to_string(r); };
  for (const auto& r : ev.ranks) {
    out << ent(r.query.head) << ',' << rel(r.query.relation) << ',' << ent(r.query.tail) << ','
        << to_string(r.direction) << ',' << r.raw_rank << ',' << r.filtered_rank << '\n';
  }
}

}  // namespace kge
