#pragma once

// Mini-batch training, sparse optimizers, checkpoint persistence and the
// finite-difference gradient check.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <boost/crc.hpp>
#include <nlohmann/json.hpp>

#include "kge/error.hpp"
#include "kge/evaluator.hpp"
#include "kge/graph_store.hpp"
#include "kge/models.hpp"
#include "kge/objectives.hpp"
#include "kge/rng.hpp"

namespace kge {

enum class OptimizerKind { SGD, Adagrad };

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::SGD ? "sgd" : "adagrad"; }

inline std::optional<OptimizerKind> optimizer_from_string(std::string_view s) {
  if (s == "sgd") return OptimizerKind::SGD;
  if (s == "adagrad") return OptimizerKind::Adagrad;
  return std::nullopt;
}

inline constexpr double kAdagradEpsilon = 1e-10;

struct TrainConfig {
  ModelSpec model = ModelSpec::make(Family::TransE, 50);
  LossKind loss = LossKind::SelfAdversarial;
  LossParams loss_params;
  std::size_t negatives = 64;
  std::size_t batch_size = 512;
  std::size_t epochs = 100;
  double learning_rate = 0.1;
  OptimizerKind optimizer = OptimizerKind::Adagrad;
  std::uint64_t seed = 0;
  SamplingMode sampling = SamplingMode::Uniform;
  // Project touched entity rows onto the unit L2 ball after each batch.
  bool renormalize = false;
  // Validation filtered MRR every N epochs; 0 disables.
  std::size_t eval_every = 0;
  // Stop after this many epochs without a validation MRR improvement; 0 disables.
  std::size_t patience = 0;
  std::size_t threads = 1;
  std::string train_path, valid_path, test_path;
};

// Recognized keys of the flat JSON config.
inline constexpr std::array<std::string_view, 31> kConfigKeys{
    "model",        "entity_dim", "relation_dim", "norm_p",     "variant",      "ops",
    "shear_form",   "hake_lambda", "loss",        "margin",     "limit_mu",     "limit_lambda",
    "mu_pos",       "mu_neg",     "double_limit_lambda", "adversarial_temperature", "nll_form", "negatives",
    "batch_size",   "epochs",     "learning_rate", "optimizer", "seed",         "sampling",
    "renormalize",  "eval_every", "patience",     "threads",    "train",        "valid",
    "test",
};

// Parses a flat JSON config, collecting every invalid field before throwing
// ConfigError. KGE_SEED in the environment overrides "seed" when use_env is set.
inline TrainConfig parse_config(const nlohmann::json& j, bool use_env = true) {
  std::vector<std::string> bad;
  TrainConfig c;
  if (!j.is_object()) throw ConfigError({"config must be a JSON object"});
  for (const auto& [key, value] : j.items()) {
    if (std::find(kConfigKeys.begin(), kConfigKeys.end(), key) == kConfigKeys.end()) {
      bad.push_back(key + ": unknown field");
    }
  }
  auto get_string = [&](const char* key, auto parse, auto& out) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_string()) {
      bad.push_back(std::string(key) + ": expected a string");
      return;
    }
    if (auto p = parse(v.template get<std::string>())) out = *p;
    else bad.push_back(std::string(key) + ": unrecognized value \"" + v.template get<std::string>() + "\"");
  };
  auto get_count = [&](const char* key, std::size_t& out, bool allow_zero) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < (allow_zero ? 0 : 1)) {
      bad.push_back(std::string(key) + (allow_zero ? ": expected a non-negative integer" : ": expected a positive integer"));
      return;
    }
    out = v.get<std::size_t>();
  };
  auto get_real = [&](const char* key, double& out, bool positive) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_number() || !std::isfinite(v.get<double>()) || (positive && !(v.get<double>() > 0.0))) {
      bad.push_back(std::string(key) + (positive ? ": expected a positive number" : ": expected a finite number"));
      return;
    }
    out = v.get<double>();
  };
  auto get_path = [&](const char* key, std::string& out) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_string()) bad.push_back(std::string(key) + ": expected a path string");
    else out = j.at(key).get<std::string>();
  };

  Family family = Family::TransE;
  if (!j.contains("model")) bad.push_back("model: required");
  get_string("model", family_from_string, family);
  std::size_t entity_dim = 50, relation_dim = 0;
  get_count("entity_dim", entity_dim, false);
  get_count("relation_dim", relation_dim, true);
  c.model = ModelSpec::make(family, entity_dim, relation_dim);
  if (j.contains("norm_p")) {
    const auto& v = j.at("norm_p");
    if (!v.is_number_integer() || (v.get<int>() != 1 && v.get<int>() != 2)) bad.push_back("norm_p: expected 1 or 2");
    else c.model.norm_p = v.get<int>();
  }
  get_string("variant", variant_from_string, c.model.variant);
  if (j.contains("ops")) {
    const auto& v = j.at("ops");
    try {
      if (!v.is_string()) throw ParameterError("expected a string such as \"TSR\"");
      c.model.ops = geometry::parse_ops(v.get<std::string>());
    } catch (const Error& e) {
      bad.push_back(std::string("ops: ") + e.what());
    }
  }
  get_string(
      "shear_form",
      [](const std::string& s) -> std::optional<geometry::ShearForm> {
        if (s == "product") return geometry::ShearForm::Product;
        if (s == "displayed") return geometry::ShearForm::Displayed;
        return std::nullopt;
      },
      c.model.shear_form);
  get_real("hake_lambda", c.model.hake_lambda, false);

  get_string("loss", loss_from_string, c.loss);
  get_real("margin", c.loss_params.margin, true);
  get_real("limit_mu", c.loss_params.limit_mu, false);
  get_real("limit_lambda", c.loss_params.limit_lambda, false);
  get_real("mu_pos", c.loss_params.mu_pos, true);
  get_real("mu_neg", c.loss_params.mu_neg, true);
  get_real("double_limit_lambda", c.loss_params.double_limit_lambda, false);
  get_real("adversarial_temperature", c.loss_params.adversarial_temperature, false);
  get_string(
      "nll_form",
      [](const std::string& s) -> std::optional<NllForm> {
        if (s == "softplus") return NllForm::Softplus;
        if (s == "literal") return NllForm::Literal;
        return std::nullopt;
      },
      c.loss_params.nll_form);

  get_count("negatives", c.negatives, false);
  get_count("batch_size", c.batch_size, false);
  get_count("epochs", c.epochs, false);
  get_real("learning_rate", c.learning_rate, false);
  if (c.learning_rate < 0.0) bad.push_back("learning_rate: must be non-negative");
  get_string("optimizer", optimizer_from_string, c.optimizer);
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned()) bad.push_back("seed: expected a non-negative integer");
    else c.seed = j.at("seed").get<std::uint64_t>();
  }
  get_string("sampling", sampling_mode_from_string, c.sampling);
  if (j.contains("renormalize")) {
    if (!j.at("renormalize").is_boolean()) bad.push_back("renormalize: expected true or false");
    else c.renormalize = j.at("renormalize").get<bool>();
  }
  get_count("eval_every", c.eval_every, true);
  get_count("patience", c.patience, true);
  get_count("threads", c.threads, false);
  get_path("train", c.train_path);
  get_path("valid", c.valid_path);
  get_path("test", c.test_path);

  if (bad.empty()) {
    try {
      c.model.validate();
    } catch (const ParameterError& e) {
      bad.push_back(std::string("model: ") + e.what());
    }
    try {
      c.loss_params.validate(c.loss);
    } catch (const ParameterError& e) {
      bad.push_back(std::string("loss: ") + e.what());
    }
  }
  if (use_env) {
    if (const char* env = std::getenv("KGE_SEED")) {
      char* end = nullptr;
      const auto v = std::strtoull(env, &end, 10);
      if (end == env || *end != '\0') bad.push_back("KGE_SEED: expected a non-negative integer");
      else c.seed = v;
    }
  }
  if (!bad.empty()) throw ConfigError(bad);
  return c;
}

inline TrainConfig load_config(const std::string& path, bool use_env = true) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError({std::string("not valid JSON: ") + e.what()});
  }
  auto c = parse_config(j, use_env);
  // dataset paths are relative to the config file
  const auto base = std::filesystem::path(path).parent_path();
  for (auto* p : {&c.train_path, &c.valid_path, &c.test_path}) {
    if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  }
  return c;
}

// Gradient slices touched in one batch, dense-indexed by row.
class GradientBuffer {
 public:
  GradientBuffer() = default;

  GradientBuffer(std::size_t n_entities, std::size_t entity_width, std::size_t n_relations,
                 std::size_t relation_width, std::size_t shared_size)
      : ew_(entity_width),
        rw_(relation_width),
        entity_slot_(n_entities, kNone),
        relation_slot_(n_relations, kNone),
        shared_(shared_size, 0.0f) {}

  template <typename T>
  static GradientBuffer like(const EmbeddingTable<T>& t) {
    return GradientBuffer(t.n_entities, t.entity_width, t.n_relations, t.relation_width, t.shared.size());
  }

  std::span<float> entity(EntityId e) { return row(entity_slot_, entity_ids_, entity_values_, ew_, e); }
  std::span<float> relation(RelationId r) { return row(relation_slot_, relation_ids_, relation_values_, rw_, r); }
  std::span<float> shared() {
    shared_touched_ = shared_touched_ || !shared_.empty();
    return shared_;
  }

  const std::vector<std::uint32_t>& entity_ids() const { return entity_ids_; }
  const std::vector<std::uint32_t>& relation_ids() const { return relation_ids_; }
  bool shared_touched() const { return shared_touched_; }

  std::span<const float> entity_grad(EntityId e) const {
    return std::span<const float>(entity_values_).subspan(entity_slot_[e] * ew_, ew_);
  }
  std::span<const float> relation_grad(RelationId r) const {
    return std::span<const float>(relation_values_).subspan(relation_slot_[r] * rw_, rw_);
  }
  std::span<const float> shared_grad() const { return shared_; }

  void clear() {
    for (auto e : entity_ids_) entity_slot_[e] = kNone;
    for (auto r : relation_ids_) relation_slot_[r] = kNone;
    entity_ids_.clear();
    relation_ids_.clear();
    entity_values_.clear();
    relation_values_.clear();
    if (shared_touched_) std::fill(shared_.begin(), shared_.end(), 0.0f);
    shared_touched_ = false;
  }

  void merge(const GradientBuffer& other) {
    for (auto e : other.entity_ids_) add(entity(e), other.entity_grad(e));
    for (auto r : other.relation_ids_) add(relation(r), other.relation_grad(r));
    if (other.shared_touched_) add(shared(), other.shared_);
  }

  void add(const SparseGrad<float>& g) {
    for (const auto& [slot, values] : g.entries) {
      switch (slot.kind) {
        case SlotKind::Entity: add(entity(slot.id), values); break;
        case SlotKind::Relation: add(relation(slot.id), values); break;
        case SlotKind::Shared: add(shared(), values); break;
      }
    }
  }

 private:
  static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();

  static void add(std::span<float> dst, std::span<const float> src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  static std::span<float> row(std::vector<std::uint32_t>& slot, std::vector<std::uint32_t>& ids,
                              std::vector<float>& values, std::size_t width, std::uint32_t id) {
    if (id >= slot.size()) throw BoundsError("gradient row " + std::to_string(id) + " out of range");
    if (slot[id] == kNone) {
      slot[id] = static_cast<std::uint32_t>(ids.size());
      ids.push_back(id);
      values.resize(values.size() + width, 0.0f);
    }
    return std::span<float>(values).subspan(slot[id] * width, width);
  }

  std::size_t ew_ = 0, rw_ = 0;
  std::vector<std::uint32_t> entity_slot_, relation_slot_;
  std::vector<std::uint32_t> entity_ids_, relation_ids_;
  std::vector<float> entity_values_, relation_values_;
  std::vector<float> shared_;
  bool shared_touched_ = false;
};

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Adagrad;
  // Adagrad squared-gradient sums, same layout as the table; empty for SGD.
  std::vector<float> entity_acc, relation_acc, shared_acc;

  static OptimizerState make(OptimizerKind kind, const EmbeddingTable<float>& t) {
    OptimizerState s;
    s.kind = kind;
    if (kind == OptimizerKind::Adagrad) {
      s.entity_acc.assign(t.entities.size(), 0.0f);
      s.relation_acc.assign(t.relations.size(), 0.0f);
      s.shared_acc.assign(t.shared.size(), 0.0f);
    }
    return s;
  }

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

namespace detail {

inline void update(OptimizerKind kind, std::span<float> theta, std::span<float> acc, std::span<const float> g,
                   double lr) {
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (kind == OptimizerKind::SGD) {
      theta[i] = static_cast<float>(theta[i] - lr * g[i]);
    } else {
      acc[i] += g[i] * g[i];
      theta[i] = static_cast<float>(theta[i] - lr * g[i] / std::sqrt(double(acc[i]) + kAdagradEpsilon));
    }
  }
}

}  // namespace detail

// Applies one optimizer step to the rows named by `g` only. Rows are visited in
// ascending id order.
inline void step(OptimizerState& state, EmbeddingTable<float>& table, const GradientBuffer& g, double lr) {
  const bool ada = state.kind == OptimizerKind::Adagrad;
  auto ids = g.entity_ids();
  std::sort(ids.begin(), ids.end());
  for (auto e : ids) {
    auto acc = ada ? std::span<float>(state.entity_acc).subspan(e * table.entity_width, table.entity_width)
                   : std::span<float>();
    detail::update(state.kind, table.entity(e), acc, g.entity_grad(e), lr);
  }
  auto rids = g.relation_ids();
  std::sort(rids.begin(), rids.end());
  for (auto r : rids) {
    auto acc = ada ? std::span<float>(state.relation_acc).subspan(r * table.relation_width, table.relation_width)
                   : std::span<float>();
    detail::update(state.kind, table.relation(r), acc, g.relation_grad(r), lr);
  }
  if (g.shared_touched()) {
    detail::update(state.kind, table.shared, ada ? std::span<float>(state.shared_acc) : std::span<float>(),
                   g.shared_grad(), lr);
  }
}

inline void step(OptimizerState& state, EmbeddingTable<float>& table, const SparseGrad<float>& g, double lr) {
  auto buf = GradientBuffer::like(table);
  buf.add(g);
  step(state, table, buf, lr);
}

// Identifies a vocabulary by CRC-64 over its names in id order.
inline std::uint64_t vocabulary_digest(const Vocabulary& v) {
  boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true> crc;
  for (const auto* d : {&v.entities, &v.relations}) {
    for (const auto& name : d->names()) {
      crc.process_bytes(name.data(), name.size());
      crc.process_byte('\n');
    }
    crc.process_byte('\0');
  }
  return crc.checksum();
}

// CRC-64 over the raw bits of every parameter array.
inline std::uint64_t table_digest(const EmbeddingTable<float>& t) {
  boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true> crc;
  for (const auto* v : {&t.entities, &t.relations, &t.shared}) {
    for (float f : *v) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      for (int i = 0; i < 4; ++i) crc.process_byte(static_cast<unsigned char>(bits >> (8 * i)));
    }
  }
  return crc.checksum();
}

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'K', 'G', 'E', 'F'};

struct Checkpoint {
  ModelSpec spec;
  std::uint64_t vocab_digest = 0;
  std::uint64_t epoch = 0;
  std::string rng_state;
  EmbeddingTable<float> table;
  OptimizerState optimizer;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t x) { out_.push_back(static_cast<char>(x)); }
  void u32(std::uint32_t x) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(x >> (8 * i)));
  }
  void u64(std::uint64_t x) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(x >> (8 * i)));
  }
  void f64(double x) { u64(std::bit_cast<std::uint64_t>(x)); }
  void bytes(std::string_view s) {
    u64(s.size());
    out_.append(s);
  }
  void floats(const std::vector<float>& v) {
    u64(v.size());
    for (float f : v) u32(std::bit_cast<std::uint32_t>(f));
  }
  std::string& data() { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= std::uint32_t(u8()) << (8 * i);
    return x;
  }
  std::uint64_t u64() {
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= std::uint64_t(u8()) << (8 * i);
    return x;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes() {
    const auto n = u64();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::vector<float> floats(std::size_t expected) {
    const auto n = u64();
    if (n != expected) {
      throw CorruptionError("checkpoint array has " + std::to_string(n) + " values, expected " +
                            std::to_string(expected));
    }
    need(n * 4);
    std::vector<float> v(n);
    for (auto& f : v) f = std::bit_cast<float>(u32());
    return v;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw TruncatedCheckpoint("checkpoint ends early");
  }

  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32(std::string_view data) {
  boost::crc_32_type crc;
  crc.process_bytes(data.data(), data.size());
  return crc.checksum();
}

}  // namespace detail

// Layout (little-endian): "KGEF", u32 version, u64 body length, body, u32
// CRC-32 of everything before it.
inline std::string serialize_checkpoint(const Checkpoint& c) {
  detail::ByteWriter body;
  const auto& s = c.spec;
  body.u32(static_cast<std::uint32_t>(s.family));
  body.u64(s.entity_dim);
  body.u64(s.relation_dim);
  body.u32(static_cast<std::uint32_t>(s.norm_p));
  body.u32(static_cast<std::uint32_t>(s.variant));
  body.bytes(geometry::ops_to_string(s.ops));
  body.u32(static_cast<std::uint32_t>(s.shear_form));
  body.f64(s.hake_lambda);
  body.u64(c.vocab_digest);
  body.u64(c.table.n_entities);
  body.u64(c.table.n_relations);
  body.u64(c.epoch);
  body.bytes(c.rng_state);
  body.floats(c.table.entities);
  body.floats(c.table.relations);
  body.floats(c.table.shared);
  body.u32(static_cast<std::uint32_t>(c.optimizer.kind));
  if (c.optimizer.kind == OptimizerKind::Adagrad) {
    body.floats(c.optimizer.entity_acc);
    body.floats(c.optimizer.relation_acc);
    body.floats(c.optimizer.shared_acc);
  }

  detail::ByteWriter out;
  for (char m : kCheckpointMagic) out.u8(static_cast<std::uint8_t>(m));
  out.u32(kCheckpointVersion);
  out.u64(body.data().size());
  out.data() += body.data();
  out.u32(detail::crc32(out.data()));
  return std::move(out.data());
}

inline Checkpoint deserialize_checkpoint(std::string_view data) {
  if (data.size() < 4) throw TruncatedCheckpoint("checkpoint shorter than its magic bytes");
  if (data.substr(0, 4) != std::string_view(kCheckpointMagic, 4)) throw BadMagic("not a KGEF checkpoint");
  detail::ByteReader head(data.substr(4));
  const auto version = head.u32();
  if (version != kCheckpointVersion) {
    throw VersionMismatch("checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  const auto length = head.u64();
  if (head.remaining() < length + 4) throw TruncatedCheckpoint("checkpoint body is truncated");
  if (head.remaining() > length + 4) throw CorruptionError("trailing bytes after checkpoint checksum");
  const std::size_t crc_at = 16 + length;
  detail::ByteReader tail(data.substr(crc_at));
  if (tail.u32() != detail::crc32(data.substr(0, crc_at))) throw ChecksumMismatch("checkpoint CRC-32 mismatch");

  detail::ByteReader r(data.substr(16, length));
  Checkpoint c;
  auto& s = c.spec;
  const auto family = r.u32();
  if (family >= kAllFamilies.size()) throw CorruptionError("unknown model family in checkpoint");
  s.family = static_cast<Family>(family);
  s.entity_dim = r.u64();
  s.relation_dim = r.u64();
  s.norm_p = static_cast<int>(r.u32());
  s.variant = static_cast<CompoundVariant>(r.u32());
  s.ops = geometry::parse_ops(r.bytes());
  s.shear_form = static_cast<geometry::ShearForm>(r.u32());
  s.hake_lambda = r.f64();
  try {
    s.validate();
  } catch (const ParameterError& e) {
    throw CorruptionError(std::string("invalid model spec in checkpoint: ") + e.what());
  }
  c.vocab_digest = r.u64();
  const auto n_e = r.u64(), n_r = r.u64();
  c.epoch = r.u64();
  c.rng_state = r.bytes();
  c.table = EmbeddingTable<float>::zeros(s, 0, 0);
  c.table.n_entities = n_e;
  c.table.n_relations = n_r;
  c.table.entities = r.floats(n_e * c.table.entity_width);
  c.table.relations = r.floats(n_r * c.table.relation_width);
  c.table.shared = r.floats(shared_width(s));
  const auto kind = r.u32();
  if (kind > 1) throw CorruptionError("unknown optimizer in checkpoint");
  c.optimizer.kind = static_cast<OptimizerKind>(kind);
  if (c.optimizer.kind == OptimizerKind::Adagrad) {
    c.optimizer.entity_acc = r.floats(c.table.entities.size());
    c.optimizer.relation_acc = r.floats(c.table.relations.size());
    c.optimizer.shared_acc = r.floats(c.table.shared.size());
  }
  if (r.remaining() != 0) throw CorruptionError("unexpected bytes at end of checkpoint body");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path);
  const auto bytes = serialize_checkpoint(c);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(data);
}

// Checks the checkpoint was trained against `vocab`.
inline Checkpoint load_checkpoint(const std::string& path, const Vocabulary& vocab) {
  auto c = load_checkpoint(path);
  if (c.vocab_digest != vocabulary_digest(vocab)) {
    throw DigestMismatch("checkpoint " + path + " was trained on a different vocabulary");
  }
  return c;
}

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::optional<double> val_mrr;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> history;
  bool stopped_early = false;
  // table_digest() of the parameters before the first update of this run.
  std::uint64_t initial_digest = 0;
};

// Positives per gradient chunk. Chunks are summed in order, so results do not
// depend on the thread count.
inline constexpr std::size_t kChunkSize = 32;

namespace detail {

struct ChunkWork {
  GradientBuffer grad;
  double loss = 0.0;
  std::exception_ptr error;
  std::vector<double> neg_scores;
};

template <typename F>
void run_parallel(std::size_t tasks, std::size_t threads, F&& f) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, tasks));
  if (threads == 1) {
    for (std::size_t i = 0; i < tasks; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < tasks; i += threads) f(i);
    });
  }
  for (auto& t : pool) t.join();
}

inline void renormalize_rows(EmbeddingTable<float>& table, const std::vector<std::uint32_t>& ids) {
  for (auto e : ids) {
    auto row = table.entity(e);
    double n2 = 0.0;
    for (float x : row) n2 += double(x) * x;
    if (n2 > 1.0) {
      const double inv = 1.0 / std::sqrt(n2);
      for (auto& x : row) x = static_cast<float>(x * inv);
    }
  }
}

}  // namespace detail

// Trains from a fresh initialization, or continues `resume` up to
// config.epochs. Validation metrics use the valid split of `store`.
inline TrainResult train(const TrainConfig& config, const TripleStore& store, const Vocabulary& vocab,
                         const std::optional<Checkpoint>& resume = std::nullopt,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  const auto& spec = config.model;
  spec.validate();
  config.loss_params.validate(config.loss);
  const auto& data = store.train();
  if (data.empty()) throw ParameterError("training split is empty");
  if (config.batch_size == 0 || config.batch_size > data.size()) {
    throw ParameterError("batch_size must be in [1, " + std::to_string(data.size()) + "]");
  }
  if (config.negatives == 0) throw ParameterError("negatives must be at least 1");

  TrainResult result;
  Checkpoint& ck = result.checkpoint;
  Rng rng(config.seed);
  if (resume) {
    ck = *resume;
    if (!(ck.spec == spec)) throw ParameterError("resume checkpoint has a different model spec");
    if (ck.vocab_digest != vocabulary_digest(vocab)) throw DigestMismatch("resume checkpoint vocabulary differs");
    if (ck.optimizer.kind != config.optimizer) throw ParameterError("resume checkpoint uses another optimizer");
    rng.restore(ck.rng_state);
  } else {
    ck.spec = spec;
    ck.vocab_digest = vocabulary_digest(vocab);
    ck.table = init_embeddings<float>(spec, store.n_entities(), store.n_relations(), rng.next());
    ck.optimizer = OptimizerState::make(config.optimizer, ck.table);
  }
  auto& table = ck.table;
  if (table.n_entities != store.n_entities() || table.n_relations != store.n_relations() || !table.matches(spec)) {
    throw ParameterError("embedding table shape does not match the dataset");
  }

  result.initial_digest = table_digest(table);

  const std::size_t k = config.negatives;
  std::vector<std::uint32_t> order(data.size());
  std::vector<NegativeBatch> negs;
  std::vector<detail::ChunkWork> chunks;
  GradientBuffer total = GradientBuffer::like(table);
  double best_mrr = -1.0;
  std::size_t since_best = 0;

  for (std::size_t epoch = ck.epoch + 1; epoch <= config.epochs; ++epoch) {
    for (std::uint32_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    double epoch_loss = 0.0;
    const std::size_t n_batches = (data.size() + config.batch_size - 1) / config.batch_size;
    for (std::size_t b = 0; b < n_batches; ++b) {
      const std::size_t begin = b * config.batch_size;
      const std::size_t end = std::min(data.size(), begin + config.batch_size);
      const std::size_t batch = end - begin;
      negs.clear();
      for (std::size_t i = begin; i < end; ++i) {
        negs.push_back(sample_negatives(store, data[order[i]], k, config.sampling, rng));
      }
      const std::size_t n_chunks = (batch + kChunkSize - 1) / kChunkSize;
      while (chunks.size() < n_chunks) chunks.push_back({GradientBuffer::like(table), 0.0, nullptr, {}});
      const float scale = 1.0f / static_cast<float>(batch);

      detail::run_parallel(n_chunks, config.threads, [&](std::size_t c) {
        auto& w = chunks[c];
        w.grad.clear();
        w.loss = 0.0;
        w.error = nullptr;
        try {
          for (std::size_t i = c * kChunkSize; i < std::min(batch, (c + 1) * kChunkSize); ++i) {
            const auto& nb = negs[i];
            const auto& p = nb.positive;
            const double pos = score_rows<float>(spec, table.entity(p.head), table.relation(p.relation),
                                                 table.entity(p.tail), table.shared);
            w.neg_scores.resize(k);
            for (std::size_t j = 0; j < k; ++j) {
              const auto& t = nb.negatives[j].triple;
              w.neg_scores[j] = score_rows<float>(spec, table.entity(t.head), table.relation(t.relation),
                                                  table.entity(t.tail), table.shared);
            }
            if (!std::isfinite(pos) ||
                !std::all_of(w.neg_scores.begin(), w.neg_scores.end(), [](double x) { return std::isfinite(x); })) {
              w.loss = std::numeric_limits<double>::quiet_NaN();
              return;
            }
            const auto l = loss(config.loss, std::span<const double>(&pos, 1), w.neg_scores, config.loss_params);
            w.loss += l.value;
            auto accumulate = [&](const Triple& t, double coeff) {
              if (coeff == 0.0) return;
              w.grad.entity(t.head);
              w.grad.entity(t.tail);  // both rows exist before any span is taken
              auto gh = w.grad.entity(t.head);
              auto gr = w.grad.relation(t.relation);
              auto gt = w.grad.entity(t.tail);
              auto gs = table.shared.empty() ? std::span<float>() : w.grad.shared();
              score_grad_rows<float>(spec, table.entity(t.head), table.relation(t.relation), table.entity(t.tail),
                                     table.shared, static_cast<float>(coeff) * scale, gh, gr, gt, gs);
            };
            accumulate(p, l.pos_grad[0]);
            for (std::size_t j = 0; j < k; ++j) accumulate(nb.negatives[j].triple, l.neg_grad[j]);
          }
        } catch (...) {
          w.error = std::current_exception();
        }
      });

      total.clear();
      double batch_loss = 0.0;
      for (std::size_t c = 0; c < n_chunks; ++c) {
        if (chunks[c].error) std::rethrow_exception(chunks[c].error);
        batch_loss += chunks[c].loss;
        total.merge(chunks[c].grad);
      }
      if (!std::isfinite(batch_loss)) {
        throw DivergenceError(epoch, b,
                              "loss diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                                  " (triples " + std::to_string(begin) + ".." + std::to_string(end - 1) +
                                  " of the shuffled order)");
      }
      epoch_loss += batch_loss;
      step(ck.optimizer, table, total, config.learning_rate);
      if (config.renormalize) detail::renormalize_rows(table, total.entity_ids());
    }

    EpochLog log{epoch, epoch_loss / static_cast<double>(data.size()), std::nullopt};
    if (!std::isfinite(log.mean_loss)) throw DivergenceError(epoch, n_batches, "mean loss is not finite");
    ck.epoch = epoch;
    const bool last = epoch == config.epochs;
    if (config.eval_every > 0 && !store.valid().empty() && (epoch % config.eval_every == 0 || last)) {
      const auto ev = evaluate(spec, table, store, store.valid(), TiePolicy::Mean, config.threads);
      log.val_mrr = ev.filtered.mrr;
      if (ev.filtered.mrr > best_mrr) {
        best_mrr = ev.filtered.mrr;
        since_best = 0;
      } else {
        since_best += config.eval_every;
      }
    }
    result.history.push_back(log);
    if (on_epoch) on_epoch(log);
    if (config.patience > 0 && log.val_mrr && since_best >= config.patience && !last) {
      result.stopped_early = true;
      break;
    }
  }
  ck.rng_state = rng.state();
  return result;
}

struct GradCheckEntry {
  std::string name;
  std::size_t probes = 0;
  std::size_t skipped = 0;
  double max_rel_error = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  double tolerance = 0.0;
  std::vector<GradCheckEntry> entries;

  bool all_pass() const {
    return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.pass; });
  }
};

inline nlohmann::ordered_json to_json(const GradCheckReport& r) {
  nlohmann::ordered_json j;
  j["tolerance"] = r.tolerance;
  j["pass"] = r.all_pass();
  auto& arr = j["results"] = nlohmann::ordered_json::array();
  for (const auto& e : r.entries) {
    arr.push_back({{"name", e.name},
                   {"probes", e.probes},
                   {"skipped", e.skipped},
                   {"max_rel_error", e.max_rel_error},
                   {"pass", e.pass}});
  }
  return j;
}

inline constexpr double kFiniteDifferenceStep = 1e-5;
// Probes closer than this to a kink of the score are redrawn.
inline constexpr double kKinkExclusion = 1e-4;

using GradientHook = std::function<void(SparseGrad<double>&)>;

// Compares grad() against central differences at n_probes random
// (triple, coordinate) points in double precision.
inline GradCheckEntry gradient_check(const ModelSpec& spec, std::size_t n_probes, double tol,
                                     std::uint64_t seed = 1, const GradientHook& hook = {}) {
  spec.validate();
  GradCheckEntry entry{std::string(to_string(spec.family)), 0, 0, 0.0, false};
  Rng rng(seed);
  constexpr std::size_t n_e = 4, n_r = 2;
  const double h = kFiniteDifferenceStep;
  std::size_t attempts = 0;
  while (entry.probes < n_probes && attempts < 50 * n_probes) {
    ++attempts;
    auto table = init_embeddings<double>(spec, n_e, n_r, rng.next());
    for (auto& x : table.entities) x += rng.uniform(-0.5, 0.5);
    for (auto& x : table.relations) x += rng.uniform(-0.5, 0.5);
    const Triple t{static_cast<EntityId>(rng.below(n_e)), static_cast<RelationId>(rng.below(n_r)),
                   static_cast<EntityId>(rng.below(n_e))};
    const double margin =
        nondifferentiability_margin<double>(spec, table.entity(t.head), table.relation(t.relation), table.entity(t.tail));
    if (margin < kKinkExclusion) {
      ++entry.skipped;
      continue;
    }
    auto g = grad(spec, table, t);
    if (hook) hook(g);
    const auto& [slot, values] = g.entries[rng.below(g.entries.size())];
    const std::size_t i = rng.below(values.size());
    std::vector<double>* arr = &table.shared;
    std::size_t offset = 0;
    if (slot.kind == SlotKind::Entity) {
      arr = &table.entities;
      offset = slot.id * table.entity_width;
    } else if (slot.kind == SlotKind::Relation) {
      arr = &table.relations;
      offset = slot.id * table.relation_width;
    }
    double& x = (*arr)[offset + i];
    const double x0 = x;
    x = x0 + h;
    const double up = score(spec, table, t);
    x = x0 - h;
    const double down = score(spec, table, t);
    x = x0;
    const double fd = (up - down) / (2.0 * h);
    const double err = std::abs(values[i] - fd) / std::max(1.0, std::abs(fd));
    entry.max_rel_error = std::max(entry.max_rel_error, err);
    ++entry.probes;
  }
  entry.pass = entry.probes == n_probes && entry.max_rel_error < tol;
  return entry;
}

// Every family, with each compound variant and both norms where they apply.
inline GradCheckReport gradient_check_all(std::size_t n_probes, double tol, std::uint64_t seed = 1) {
  GradCheckReport report{tol, {}};
  for (Family f : kAllFamilies) {
    const bool compound = f == Family::CompoundE || f == Family::CompoundE3D;
    const bool uses_p = is_distance_family(f) && f != Family::TransH && f != Family::TransR &&
                        f != Family::TransD && f != Family::HAKE;
    const std::size_t dim = f == Family::CompoundE3D ? 6 : 8;
    for (int p : {1, 2}) {
      if (p == 2 && !uses_p) continue;
      for (auto v : {CompoundVariant::Head, CompoundVariant::Tail, CompoundVariant::Complete}) {
        if (!compound && v != CompoundVariant::Head) continue;
        auto spec = ModelSpec::make(f, dim, f == Family::TuckER || f == Family::TransR || f == Family::TransD ? 4 : 0);
        spec.norm_p = p;
        spec.variant = v;
        auto e = gradient_check(spec, n_probes, tol, seed);
        if (uses_p) e.name += " p=" + std::to_string(p);
        if (compound) e.name += " " + std::string(to_string(v));
        report.entries.push_back(std::move(e));
      }
    }
  }
  return report;
}

// Loss coefficients against central differences on random score sets.
inline GradCheckEntry loss_gradient_check(LossKind kind, std::size_t n_probes, double tol, std::uint64_t seed = 1) {
  GradCheckEntry entry{std::string(to_string(kind)), 0, 0, 0.0, false};
  Rng rng(seed);
  LossParams p;
  p.margin = 1.0;
  p.limit_mu = 0.5;
  p.limit_lambda = 0.7;
  p.mu_pos = 0.5;
  p.mu_neg = 1.5;
  p.double_limit_lambda = 0.8;
  p.adversarial_temperature = 0.9;
  constexpr std::size_t n_pos = 2, k = 3;
  const double h = 1e-6;
  std::size_t attempts = 0;
  while (entry.probes < n_probes && attempts < 50 * n_probes) {
    ++attempts;
    std::vector<double> pos(n_pos), neg(n_pos * k);
    for (auto& s : pos) s = rng.uniform(-3.0, 1.0);
    for (auto& s : neg) s = rng.uniform(-3.0, 1.0);
    // hinge arguments must stay clear of their kinks
    double kink = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n_pos; ++i) {
      kink = std::min({kink, std::abs(-pos[i] - p.limit_mu), std::abs(-pos[i] - p.mu_pos)});
      for (std::size_t j = 0; j < k; ++j) {
        kink = std::min({kink, std::abs(p.margin - pos[i] + neg[i * k + j]), std::abs(p.mu_neg + neg[i * k + j])});
      }
    }
    if (kink < 1e-3) {
      ++entry.skipped;
      continue;
    }
    const auto base = loss(kind, pos, neg, p);
    const bool on_pos = rng.below(n_pos + n_pos * k) < n_pos;
    auto& v = on_pos ? pos : neg;
    const std::size_t i = rng.below(v.size());
    const double x0 = v[i];
    v[i] = x0 + h;
    const double up = loss(kind, pos, neg, p).value;
    v[i] = x0 - h;
    const double down = loss(kind, pos, neg, p).value;
    v[i] = x0;
    double fd = (up - down) / (2.0 * h);
    const double analytic = on_pos ? base.pos_grad[i] : base.neg_grad[i];
    if (kind == LossKind::SelfAdversarial && !on_pos) {
      // weights are held constant; differentiate with them frozen
      const std::size_t g = i / k;
      const auto w = adversarial_weights(std::span<const double>(neg).subspan(g * k, k), p.adversarial_temperature);
      auto term = [&](double s) { return w[i % k] * softplus(p.margin + s); };
      fd = (term(x0 + h) - term(x0 - h)) / (2.0 * h);
    }
    const double err = std::abs(analytic - fd) / std::max(1.0, std::abs(fd));
    entry.max_rel_error = std::max(entry.max_rel_error, err);
    ++entry.probes;
  }
  entry.pass = entry.probes == n_probes && entry.max_rel_error < tol;
  return entry;
}

}  // namespace kge
