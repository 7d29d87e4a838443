#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <sstream>
#include <vector>

#include "kge/evaluator.hpp"

using namespace kge;

namespace {

// Sorts every candidate by score and reads the rank off the target's tie
// group: first position (optimistic), last (pessimistic) or their mean.
double sort_oracle(const std::vector<double>& scores, const std::vector<EntityId>& candidates, EntityId target,
                   TiePolicy policy) {
  std::vector<std::pair<double, EntityId>> order;
  for (auto c : candidates) order.push_back({scores[c], c});
  std::stable_sort(order.begin(), order.end(), [](auto& a, auto& b) { return a.first > b.first; });
  std::size_t first = 0, last = 0;
  bool seen = false;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i].first == scores[target]) {
      if (!seen) first = i + 1;
      seen = true;
      last = i + 1;
    }
  }
  switch (policy) {
    case TiePolicy::Optimistic: return static_cast<double>(first);
    case TiePolicy::Pessimistic: return static_cast<double>(last);
    case TiePolicy::Mean: return (first + last) / 2.0;
  }
  return 0;
}

struct Toy {
  ModelSpec spec = ModelSpec::make(Family::TransE, 2);
  EmbeddingTable<double> table;
  TripleStore store;
};

Toy random_toy(Rng& rng) {
  Toy toy;
  const std::size_t n = 2 + rng.below(19), m = 1 + rng.below(3);
  toy.table = EmbeddingTable<double>::zeros(toy.spec, n, m);
  // Coarse values produce many exact ties.
  for (auto& x : toy.table.entities) x = static_cast<double>(rng.below(3));
  for (auto& x : toy.table.relations) x = static_cast<double>(rng.below(3)) - 1.0;
  std::set<Triple> all;
  const std::size_t n_triples = std::min<std::size_t>(1 + rng.below(3 * n), n * n * m);
  while (all.size() < n_triples) {
    all.insert({static_cast<EntityId>(rng.below(n)), static_cast<RelationId>(rng.below(m)),
                static_cast<EntityId>(rng.below(n))});
  }
  std::vector<Triple> tr, va, te;
  for (const auto& t : all) {
    const auto u = rng.below(3);
    (u == 0 ? tr : u == 1 ? va : te).push_back(t);
  }
  if (tr.empty()) tr.push_back(*all.begin());
  if (te.empty()) te.push_back(*all.rbegin());
  toy.store = TripleStore(n, m, tr, va, te);
  return toy;
}

}  // namespace

TEST(Ranking, MatchesSortOracleOnRandomToyGraphs) {
  Rng rng(2024);
  for (int g = 0; g < 200; ++g) {
    const auto toy = random_toy(rng);
    for (const auto& t : toy.store.test()) {
      for (auto dir : {Direction::Head, Direction::Tail}) {
        const Query q = dir == Direction::Tail ? Query::tail_of(t) : Query::head_of(t);
        const EntityId target = dir == Direction::Tail ? t.tail : t.head;
        const auto scores = score_all_candidates(toy.spec, toy.table, q);
        std::vector<EntityId> all(toy.store.n_entities());
        for (EntityId e = 0; e < all.size(); ++e) all[e] = e;
        const auto filtered = filtered_candidates(toy.store, q, target);
        for (auto policy : {TiePolicy::Mean, TiePolicy::Pessimistic, TiePolicy::Optimistic}) {
          const auto r = rank_query(toy.spec, toy.table, toy.store, t, dir, policy);
          ASSERT_EQ(r.raw_rank, sort_oracle(scores, all, target, policy));
          ASSERT_EQ(r.filtered_rank, sort_oracle(scores, filtered, target, policy));
          ASSERT_EQ(r.filtered_rank, rank_among<double>(scores, filtered, target, policy));
          ASSERT_LE(r.filtered_rank, r.raw_rank);
          ASSERT_GE(r.filtered_rank, 1.0);
        }
      }
    }
  }
}

TEST(Ranking, TiePolicies) {
  const std::vector<double> s{1.0, 2.0, 2.0, 2.0, 0.5};
  const std::vector<EntityId> c{0, 1, 2, 3, 4};
  EXPECT_EQ(rank_among<double>(s, c, 2, TiePolicy::Optimistic), 1.0);
  EXPECT_EQ(rank_among<double>(s, c, 2, TiePolicy::Pessimistic), 3.0);
  EXPECT_EQ(rank_among<double>(s, c, 2, TiePolicy::Mean), 2.0);
  EXPECT_EQ(rank_among<double>(s, c, 0, TiePolicy::Mean), 4.0);
  EXPECT_THROW((void)rank_among<double>(s, {}, 0, TiePolicy::Mean), ParameterError);
  const std::vector<EntityId> without{0, 1};
  EXPECT_THROW((void)rank_among<double>(s, without, 3, TiePolicy::Mean), ParameterError);
  for (auto p : {TiePolicy::Mean, TiePolicy::Pessimistic, TiePolicy::Optimistic}) {
    EXPECT_EQ(tie_policy_from_string(to_string(p)), p);
  }
}

TEST(Metrics, HandComputed) {
  const std::vector<double> r{1, 2, 4};
  const auto m = metrics_from_ranks(r);
  EXPECT_NEAR(m.mrr, 7.0 / 12.0, 1e-15);
  EXPECT_NEAR(m.mr, 7.0 / 3.0, 1e-15);
  EXPECT_NEAR(m.hits1, 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(m.hits3, 2.0 / 3.0, 1e-15);
  EXPECT_EQ(m.hits10, 1.0);
  EXPECT_EQ(m.count, 3u);
}

TEST(Metrics, BoundsOnRandomRanks) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> r(1 + rng.below(50));
    for (auto& x : r) x = 1.0 + static_cast<double>(rng.below(30)) / (rng.coin() ? 1.0 : 2.0);
    const auto m = metrics_from_ranks(r);
    EXPECT_GT(m.mrr, 0.0);
    EXPECT_LE(m.mrr, 1.0);
    EXPECT_GE(m.mr, 1.0);
    EXPECT_LE(m.hits1, m.hits3);
    EXPECT_LE(m.hits3, m.hits10);
    EXPECT_LE(m.hits10, 1.0);
  }
}

TEST(Evaluate, CountsBothDirectionsAndIsThreadIndependent) {
  Rng rng(77);
  const auto toy = random_toy(rng);
  const auto a = evaluate(toy.spec, toy.table, toy.store, toy.store.test(), TiePolicy::Mean, 1);
  const auto b = evaluate(toy.spec, toy.table, toy.store, toy.store.test(), TiePolicy::Mean, 4);
  EXPECT_EQ(a.ranks.size(), 2 * toy.store.test().size());
  EXPECT_EQ(a.filtered.mrr, b.filtered.mrr);
  EXPECT_EQ(a.raw.mr, b.raw.mr);
  for (std::size_t i = 0; i < a.ranks.size(); ++i) EXPECT_EQ(a.ranks[i].filtered_rank, b.ranks[i].filtered_rank);
  EXPECT_EQ(a.ranks[0].direction, Direction::Head);
  EXPECT_EQ(a.ranks[1].direction, Direction::Tail);
  EXPECT_GE(a.filtered.mrr, a.raw.mrr);
}

TEST(Evaluate, PerfectModelScoresOne) {
  // A TransE table where each test triple is the unique exact translation.
  const auto spec = ModelSpec::make(Family::TransE, 1);
  auto t = EmbeddingTable<double>::zeros(spec, 4, 1);
  for (std::size_t e = 0; e < 4; ++e) t.entity(e)[0] = static_cast<double>(e) * 10;
  t.relation(0)[0] = 10;
  const TripleStore store(4, 1, {{0, 0, 1}}, {}, {{1, 0, 2}, {2, 0, 3}});
  const auto ev = evaluate(spec, t, store, store.test());
  EXPECT_EQ(ev.filtered.mrr, 1.0);
  EXPECT_EQ(ev.filtered.hits1, 1.0);
}

TEST(Evaluate, RejectsNonFiniteTable) {
  const auto spec = ModelSpec::make(Family::TransE, 1);
  auto t = EmbeddingTable<double>::zeros(spec, 2, 1);
  t.entities[0] = std::nan("");
  const TripleStore store(2, 1, {{0, 0, 1}}, {}, {{0, 0, 1}});
  EXPECT_THROW((void)evaluate(spec, t, store, store.test()), CorruptionError);
}

TEST(Evaluate, JsonAndCsv) {
  const auto spec = ModelSpec::make(Family::TransE, 1);
  auto t = EmbeddingTable<double>::zeros(spec, 3, 1);
  t.entity(1)[0] = 1;
  t.entity(2)[0] = 2;
  const TripleStore store(3, 1, {{0, 0, 1}}, {}, {{1, 0, 2}});
  const auto ev = evaluate(spec, t, store, store.test(), TiePolicy::Pessimistic);
  const auto j = to_json(ev);
  EXPECT_EQ(j["queries"], 2);
  EXPECT_EQ(j["tie_policy"], "pessimistic");
  EXPECT_TRUE(j.contains("hits@10_filtered"));
  EXPECT_TRUE(j.contains("mrr_raw"));
  std::ostringstream csv;
  write_rank_csv(csv, ev);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "query_head,query_rel,query_tail,direction,raw_rank,filtered_rank");
  const std::string body = csv.str();
  EXPECT_EQ(std::count(body.begin(), body.end(), '\n'), 3);
}
