#pragma once

// Triple ingestion, entity/relation vocabularies, train/valid/test splits and
// the filter index of known-true triples.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "kge/error.hpp"

namespace kge {

using EntityId = std::uint32_t;
using RelationId = std::uint32_t;

struct Triple {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;

  friend bool operator==(const Triple&, const Triple&) = default;
  friend auto operator<=>(const Triple&, const Triple&) = default;
};

struct TripleHash {
  std::size_t operator()(const Triple& t) const noexcept {
    std::uint64_t x = (static_cast<std::uint64_t>(t.head) << 40) ^
                      (static_cast<std::uint64_t>(t.relation) << 20) ^ t.tail;
    x ^= x >> 33;
    x *= 0xff51afd7ed558ccdULL;
    x ^= x >> 33;
    return static_cast<std::size_t>(x);
  }
};

// A bijection between names and contiguous ids starting at 0.
class Dictionary {
 public:
  // Returns the id of `name`, assigning the next free id on first sight.
  std::uint32_t intern(std::string_view name) {
    auto it = ids_.find(std::string(name));
    if (it != ids_.end()) return it->second;
    const auto id = static_cast<std::uint32_t>(names_.size());
    names_.emplace_back(name);
    ids_.emplace(names_.back(), id);
    return id;
  }

  std::optional<std::uint32_t> find(std::string_view name) const {
    auto it = ids_.find(std::string(name));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& name(std::uint32_t id) const {
    if (id >= names_.size()) throw BoundsError("dictionary id " + std::to_string(id) + " out of range");
    return names_[id];
  }

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  friend bool operator==(const Dictionary& a, const Dictionary& b) { return a.names_ == b.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::uint32_t> ids_;
};

struct Vocabulary {
  Dictionary entities;
  Dictionary relations;

  std::size_t n_entities() const { return entities.size(); }
  std::size_t n_relations() const { return relations.size(); }

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;
};

enum class Direction { Head, Tail };

inline const char* to_string(Direction d) { return d == Direction::Head ? "head" : "tail"; }

// A partial triple with one entity slot open. For Direction::Tail the anchor
// is the head, for Direction::Head it is the tail.
struct Query {
  Direction direction = Direction::Tail;
  EntityId anchor = 0;
  RelationId relation = 0;

  static Query tail_of(const Triple& t) { return {Direction::Tail, t.head, t.relation}; }
  static Query head_of(const Triple& t) { return {Direction::Head, t.tail, t.relation}; }

  Triple complete(EntityId e) const {
    return direction == Direction::Tail ? Triple{anchor, relation, e} : Triple{e, relation, anchor};
  }
};

// Immutable after construction.
class TripleStore {
 public:
  TripleStore() = default;

  TripleStore(std::size_t n_entities, std::size_t n_relations, std::vector<Triple> train,
              std::vector<Triple> valid, std::vector<Triple> test)
      : n_entities_(n_entities),
        n_relations_(n_relations),
        splits_{std::move(train), std::move(valid), std::move(test)} {
    for (const auto& split : splits_) {
      for (const auto& t : split) {
        check_triple(t);
        tails_[key(t.head, t.relation)].push_back(t.tail);
        heads_[key(t.tail, t.relation)].push_back(t.head);
        known_.insert(t);
      }
    }
    for (auto* index : {&tails_, &heads_}) {
      for (auto& [k, ids] : *index) {
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
      }
    }
  }

  std::size_t n_entities() const { return n_entities_; }
  std::size_t n_relations() const { return n_relations_; }

  const std::vector<Triple>& train() const { return splits_[0]; }
  const std::vector<Triple>& valid() const { return splits_[1]; }
  const std::vector<Triple>& test() const { return splits_[2]; }

  bool is_known(const Triple& t) const { return known_.contains(t); }
  std::size_t n_known() const { return known_.size(); }

  // Sorted ids of every true tail of (head, relation) over all splits.
  std::span<const EntityId> known_tails(EntityId head, RelationId relation) const {
    return lookup(tails_, head, relation);
  }

  // Sorted ids of every true head of (relation, tail) over all splits.
  std::span<const EntityId> known_heads(RelationId relation, EntityId tail) const {
    return lookup(heads_, tail, relation);
  }

  std::span<const EntityId> known_answers(const Query& q) const {
    return q.direction == Direction::Tail ? known_tails(q.anchor, q.relation)
                                          : known_heads(q.relation, q.anchor);
  }

  void check_triple(const Triple& t) const {
    if (t.head >= n_entities_ || t.tail >= n_entities_) {
      throw BoundsError("entity id out of range in triple (" + std::to_string(t.head) + ", " +
                        std::to_string(t.relation) + ", " + std::to_string(t.tail) + ")");
    }
    if (t.relation >= n_relations_) {
      throw BoundsError("relation id " + std::to_string(t.relation) + " out of range");
    }
  }

 private:
  static std::uint64_t key(EntityId e, RelationId r) { return (static_cast<std::uint64_t>(e) << 32) | r; }

  using Index = std::unordered_map<std::uint64_t, std::vector<EntityId>>;

  static std::span<const EntityId> lookup(const Index& index, EntityId e, RelationId r) {
    auto it = index.find(key(e, r));
    if (it == index.end()) return {};
    return it->second;
  }

  std::size_t n_entities_ = 0;
  std::size_t n_relations_ = 0;
  std::array<std::vector<Triple>, 3> splits_;
  Index tails_;
  Index heads_;
  std::unordered_set<Triple, TripleHash> known_;
};

struct LoadReport {
  std::array<std::size_t, 3> duplicates{};  // per split, lines dropped as repeats
  std::vector<std::string> unseen_in_train;  // entities that appear only in valid/test
};

struct Dataset {
  Vocabulary vocab;
  TripleStore store;
  LoadReport report;
};

namespace detail {

inline std::vector<std::array<std::string, 3>> read_triple_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::array<std::string, 3>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::array<std::string, 3> fields;
    std::size_t n = 0;
    std::size_t start = 0;
    while (true) {
      const auto tab = line.find('\t', start);
      const auto piece = line.substr(start, tab == std::string::npos ? std::string::npos : tab - start);
      if (n < 3) fields[n] = piece;
      ++n;
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (n != 3) {
      throw ParseError(path, lineno, "expected 3 tab-separated fields, found " + std::to_string(n));
    }
    for (const auto& f : fields) {
      if (f.empty()) throw ParseError(path, lineno, "empty field");
    }
    rows.push_back(std::move(fields));
  }
  if (in.bad()) throw IoError("read failure on " + path);
  return rows;
}

}  // namespace detail

// Ids are assigned in first-appearance order over train, then valid, then
// test. Repeated lines within a split are dropped and counted.
inline Dataset load_dataset(const std::string& train_path, const std::string& valid_path,
                            const std::string& test_path) {
  const std::array<std::string, 3> paths{train_path, valid_path, test_path};
  Dataset ds;
  std::array<std::vector<Triple>, 3> splits;
  std::unordered_set<std::uint32_t> in_train;
  for (std::size_t s = 0; s < 3; ++s) {
    const auto rows = detail::read_triple_file(paths[s]);
    std::unordered_set<Triple, TripleHash> seen;
    for (const auto& row : rows) {
      const auto before = ds.vocab.entities.size();
      Triple t{ds.vocab.entities.intern(row[0]), ds.vocab.relations.intern(row[1]),
               ds.vocab.entities.intern(row[2])};
      if (s > 0) {
        for (auto e = before; e < ds.vocab.entities.size(); ++e) {
          ds.report.unseen_in_train.push_back(ds.vocab.entities.name(static_cast<std::uint32_t>(e)));
        }
      }
      if (!seen.insert(t).second) {
        ++ds.report.duplicates[s];
        continue;
      }
      splits[s].push_back(t);
    }
  }
  if (splits[0].empty()) throw IoError("training split " + train_path + " contains no triples");
  ds.store = TripleStore(ds.vocab.n_entities(), ds.vocab.n_relations(), std::move(splits[0]),
                         std::move(splits[1]), std::move(splits[2]));
  return ds;
}

// Every entity id except those completing `q` into another known-true
// triple; `target` itself is always kept.
inline std::vector<EntityId> filtered_candidates(const TripleStore& store, const Query& q, EntityId target) {
  if (q.anchor >= store.n_entities() || target >= store.n_entities()) {
    throw BoundsError("entity id out of range in filtered_candidates");
  }
  if (q.relation >= store.n_relations()) throw BoundsError("relation id out of range in filtered_candidates");
  const auto known = store.known_answers(q);
  std::vector<EntityId> out;
  out.reserve(store.n_entities());
  for (EntityId e = 0; e < store.n_entities(); ++e) {
    if (e != target && std::binary_search(known.begin(), known.end(), e)) continue;
    out.push_back(e);
  }
  return out;
}

struct DatasetStats {
  std::size_t entities = 0;
  std::size_t relations = 0;
  std::size_t train = 0;
  std::size_t valid = 0;
  std::size_t test = 0;
  // |train| / entities, the convention of the published benchmark table.
  double avg_degree = 0.0;
  std::array<std::size_t, 3> duplicates{};

  // 2 * |train| / entities: mean number of train edge endpoints per entity.
  double avg_total_degree() const { return 2.0 * avg_degree; }
};

inline double round2(double x) { return std::round(x * 100.0) / 100.0; }

inline DatasetStats compute_stats(const TripleStore& store, const LoadReport& report = {}) {
  DatasetStats s;
  s.entities = store.n_entities();
  s.relations = store.n_relations();
  s.train = store.train().size();
  s.valid = store.valid().size();
  s.test = store.test().size();
  s.avg_degree = s.entities == 0 ? 0.0 : static_cast<double>(s.train) / static_cast<double>(s.entities);
  s.duplicates = report.duplicates;
  return s;
}

inline nlohmann::ordered_json to_json(const DatasetStats& s) {
  nlohmann::ordered_json j;
  j["entities"] = s.entities;
  j["relations"] = s.relations;
  j["train"] = s.train;
  j["valid"] = s.valid;
  j["test"] = s.test;
  j["avg_degree"] = round2(s.avg_degree);
  j["avg_total_degree"] = round2(s.avg_total_degree());
  j["duplicates"] = {{"train", s.duplicates[0]}, {"valid", s.duplicates[1]}, {"test", s.duplicates[2]}};
  return j;
}

// Published statistics for common link-prediction benchmarks.
struct ReferenceStats {
  std::string_view name;
  std::size_t entities;
  std::size_t relations;
  std::size_t train;
  std::size_t valid;
  std::size_t test;
  double avg_degree;
};

inline constexpr std::array<ReferenceStats, 8> kReferenceStats{{
    {"kinship", 104, 26, 8544, 1068, 1074, 82.15},
    {"umls", 135, 49, 5216, 652, 661, 38.63},
    {"countries", 272, 2, 1111, 24, 24, 4.35},
    {"fb15k", 14951, 1345, 483142, 50000, 59071, 13.2},
    {"fb15k-237", 14951, 237, 272115, 17535, 20466, 19.74},
    {"wn18", 40943, 18, 141442, 5000, 5000, 1.2},
    {"wn18rr", 40943, 11, 86835, 3034, 3134, 2.19},
    {"yago3-10", 123182, 37, 1079040, 5000, 5000, 9.6},
}};

inline std::optional<ReferenceStats> reference_stats(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (const auto& r : kReferenceStats) {
    if (r.name == lower) return r;
  }
  return std::nullopt;
}

// One human-readable line per count that differs from the reference.
inline std::vector<std::string> compare_to_reference(const DatasetStats& s, const ReferenceStats& ref) {
  std::vector<std::string> out;
  auto check = [&](const char* field, std::size_t got, std::size_t want) {
    if (got != want) {
      out.push_back(std::string(field) + ": files give " + std::to_string(got) + ", reference " +
                    std::to_string(want) + " (delta " +
                    std::to_string(static_cast<long long>(got) - static_cast<long long>(want)) + ")");
    }
  };
  check("entities", s.entities, ref.entities);
  check("relations", s.relations, ref.relations);
  check("train", s.train, ref.train);
  check("valid", s.valid, ref.valid);
  check("test", s.test, ref.test);
  return out;
}

// Two-column `name<TAB>id` files.
inline void save_dictionary(const Dictionary& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (std::uint32_t i = 0; i < d.size(); ++i) out << d.name(i) << '\t' << i << '\n';
  if (!out) throw IoError("write failure on " + path);
}

inline Dictionary load_dictionary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::pair<std::uint32_t, std::string>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) throw ParseError(path, lineno, "expected name<TAB>id");
    std::uint32_t id = 0;
    try {
      id = static_cast<std::uint32_t>(std::stoul(line.substr(tab + 1)));
    } catch (const std::exception&) {
      throw ParseError(path, lineno, "bad id");
    }
    rows.emplace_back(id, line.substr(0, tab));
  }
  std::sort(rows.begin(), rows.end());
  Dictionary d;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].first != i) throw ParseError(path, 0, "ids are not contiguous from 0");
    if (d.intern(rows[i].second) != i) throw ParseError(path, 0, "duplicate name " + rows[i].second);
  }
  return d;
}

inline void save_triples(const std::vector<Triple>& triples, const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& t : triples) {
    out << vocab.entities.name(t.head) << '\t' << vocab.relations.name(t.relation) << '\t'
        << vocab.entities.name(t.tail) << '\n';
  }
  if (!out) throw IoError("write failure on " + path);
}

}  // namespace kge
