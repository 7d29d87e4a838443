#include <gtest/gtest.h>

#include <cstdlib>
#include <vector>

#include "kge/trainer.hpp"
#include "test_util.hpp"

using namespace kge;
using kge::testing::TempDir;

namespace {

// Two exact-translation pairs: a -> b and c -> d under one relation.
struct ToyGraph {
  Vocabulary vocab;
  TripleStore store;
  ToyGraph() {
    for (auto n : {"a", "b", "c", "d"}) vocab.entities.intern(n);
    vocab.relations.intern("r");
    store = TripleStore(4, 1, {{0, 0, 1}, {2, 0, 3}}, {}, {});
  }
};

TrainConfig toy_config() {
  TrainConfig c;
  c.model = ModelSpec::make(Family::TransE, 4);
  c.model.norm_p = 2;
  c.loss = LossKind::Margin;
  c.loss_params.margin = 6.0;
  c.negatives = 2;
  c.batch_size = 2;
  c.epochs = 200;
  c.learning_rate = 0.05;
  c.optimizer = OptimizerKind::SGD;
  c.seed = 3;
  return c;
}

struct Umls {
  Dataset ds;
  Umls() {
    using kge::testing::data_path;
    ds = load_dataset(data_path("umls", "train"), data_path("umls", "valid"), data_path("umls", "test"));
  }
};

TrainConfig small_umls_config() {
  TrainConfig c;
  c.model = ModelSpec::make(Family::RotatE, 16);
  c.negatives = 4;
  c.batch_size = 1024;
  c.epochs = 2;
  c.learning_rate = 0.05;
  c.seed = 11;
  return c;
}

}  // namespace

TEST(Optimizer, SgdSingleStep) {
  const auto spec = ModelSpec::make(Family::TransE, 2);
  auto table = EmbeddingTable<float>::zeros(spec, 1, 1);
  auto state = OptimizerState::make(OptimizerKind::SGD, table);
  SparseGrad<float> g;
  g.entries.push_back({{SlotKind::Entity, 0}, {1.0f, 2.0f}});
  step(state, table, g, 1.0);
  EXPECT_EQ(table.entities, (std::vector<float>{-1.0f, -2.0f}));
  EXPECT_TRUE(state.entity_acc.empty());
}

TEST(Optimizer, ZeroGradientLeavesTableUnchanged) {
  const auto spec = ModelSpec::make(Family::TransE, 3);
  auto table = init_embeddings<float>(spec, 2, 1, 1);
  const auto before = table;
  for (auto kind : {OptimizerKind::SGD, OptimizerKind::Adagrad}) {
    auto state = OptimizerState::make(kind, table);
    SparseGrad<float> g;
    g.entries.push_back({{SlotKind::Entity, 1}, {0.0f, 0.0f, 0.0f}});
    step(state, table, g, 0.5);
    EXPECT_EQ(table, before);
  }
}

TEST(Optimizer, AdagradSecondStepIsSmaller) {
  const auto spec = ModelSpec::make(Family::TransE, 3);
  auto table = EmbeddingTable<float>::zeros(spec, 1, 1);
  auto state = OptimizerState::make(OptimizerKind::Adagrad, table);
  SparseGrad<float> g;
  g.entries.push_back({{SlotKind::Entity, 0}, {0.5f, -1.0f, 2.0f}});
  step(state, table, g, 0.1);
  const auto first = table.entities;
  step(state, table, g, 0.1);
  for (std::size_t i = 0; i < 3; ++i) {
    const float d1 = std::abs(first[i]), d2 = std::abs(table.entities[i] - first[i]);
    EXPECT_LT(d2, d1);
    EXPECT_NEAR(d1, 0.1, 1e-6);  // lr * g / |g| on the first step
    EXPECT_NEAR(d2, 0.1 / std::sqrt(2.0), 1e-6);
  }
}

TEST(GradientBuffer, MergesAndTracksTouchedRows) {
  const auto spec = ModelSpec::make(Family::TransE, 2);
  const auto table = EmbeddingTable<float>::zeros(spec, 5, 2);
  auto a = GradientBuffer::like(table), b = GradientBuffer::like(table);
  a.entity(3)[0] = 1.0f;
  b.entity(3)[0] = 2.0f;
  b.entity(1)[1] = 4.0f;
  b.relation(1)[0] = 5.0f;
  a.merge(b);
  EXPECT_EQ(a.entity(3)[0], 3.0f);
  EXPECT_EQ(a.entity(1)[1], 4.0f);
  EXPECT_EQ(a.relation(1)[0], 5.0f);
  a.clear();
  EXPECT_TRUE(a.entity_ids().empty());
}

TEST(Train, ZeroLearningRateKeepsEmbeddings) {
  ToyGraph g;
  auto c = toy_config();
  c.epochs = 1;
  c.learning_rate = 0.0;
  const auto r = train(c, g.store, g.vocab);
  const auto init = init_embeddings<float>(c.model, 4, 1, Rng(c.seed).next());
  EXPECT_EQ(r.checkpoint.table, init);
  EXPECT_EQ(r.initial_digest, table_digest(r.checkpoint.table));
}

TEST(Train, ToyTranslationsConverge) {
  ToyGraph g;
  const auto c = toy_config();
  const auto r = train(c, g.store, g.vocab);
  double mean = 0;
  for (const auto& t : g.store.train()) mean += -score(c.model, r.checkpoint.table, t);
  mean /= 2;
  EXPECT_LT(mean, 0.1);
  EXPECT_EQ(r.history.size(), 200u);
  EXPECT_LT(r.history.back().mean_loss, r.history.front().mean_loss);
}

TEST(Train, SameSeedSameCheckpointBytes) {
  ToyGraph g;
  auto c = toy_config();
  c.epochs = 20;
  c.optimizer = OptimizerKind::Adagrad;
  const auto a = serialize_checkpoint(train(c, g.store, g.vocab).checkpoint);
  const auto b = serialize_checkpoint(train(c, g.store, g.vocab).checkpoint);
  EXPECT_EQ(a, b);
  c.seed = 4;
  EXPECT_NE(a, serialize_checkpoint(train(c, g.store, g.vocab).checkpoint));
}

TEST(Train, ThreadCountDoesNotChangeResult) {
  Umls u;
  auto c = small_umls_config();
  c.threads = 1;
  const auto a = train(c, u.ds.store, u.ds.vocab);
  c.threads = 3;
  const auto b = train(c, u.ds.store, u.ds.vocab);
  EXPECT_EQ(serialize_checkpoint(a.checkpoint), serialize_checkpoint(b.checkpoint));
}

TEST(Train, ResumeReproducesUninterruptedRun) {
  Umls u;
  auto c = small_umls_config();
  c.epochs = 3;
  const auto full = train(c, u.ds.store, u.ds.vocab);
  c.epochs = 1;
  const auto part = train(c, u.ds.store, u.ds.vocab);
  TempDir dir;
  save_checkpoint(part.checkpoint, dir.file("p.kgef"));
  const auto reloaded = load_checkpoint(dir.file("p.kgef"), u.ds.vocab);
  c.epochs = 3;
  const auto resumed = train(c, u.ds.store, u.ds.vocab, reloaded);
  EXPECT_EQ(serialize_checkpoint(resumed.checkpoint), serialize_checkpoint(full.checkpoint));
  EXPECT_EQ(resumed.history.size(), 2u);
  EXPECT_EQ(resumed.history.front().epoch, 2u);
}

TEST(Train, ValidationAndEarlyStopping) {
  Umls u;
  auto c = small_umls_config();
  c.epochs = 4;
  c.eval_every = 2;
  std::vector<EpochLog> seen;
  const auto r = train(c, u.ds.store, u.ds.vocab, std::nullopt, [&](const EpochLog& l) { seen.push_back(l); });
  ASSERT_EQ(seen.size(), 4u);
  EXPECT_FALSE(seen[0].val_mrr.has_value());
  ASSERT_TRUE(seen[1].val_mrr.has_value());
  EXPECT_GT(*seen[1].val_mrr, 0.0);
  EXPECT_TRUE(seen[3].val_mrr.has_value());
  EXPECT_FALSE(r.stopped_early);

  // lr = 0 never improves, so patience 1 stops after the second evaluation.
  c.learning_rate = 0.0;
  c.eval_every = 1;
  c.patience = 1;
  const auto s = train(c, u.ds.store, u.ds.vocab);
  EXPECT_TRUE(s.stopped_early);
  EXPECT_EQ(s.history.size(), 2u);
}

TEST(Train, DivergenceNamesTheBatch) {
  ToyGraph g;
  auto c = toy_config();
  c.model = ModelSpec::make(Family::DistMult, 4);
  c.loss = LossKind::NLL;
  c.learning_rate = 1e30;
  try {
    (void)train(c, g.store, g.vocab);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("batch"), std::string::npos);
  }
}

TEST(Train, RenormalizeKeepsRowsInUnitBall) {
  ToyGraph g;
  auto c = toy_config();
  c.epochs = 5;
  c.learning_rate = 0.5;
  c.renormalize = true;
  const auto r = train(c, g.store, g.vocab);
  for (std::size_t e = 0; e < 4; ++e) {
    double n2 = 0;
    for (float x : r.checkpoint.table.entity(e)) n2 += double(x) * x;
    EXPECT_LE(n2, 1.0 + 1e-5);
  }
}

TEST(Train, RejectsBadSettings) {
  ToyGraph g;
  auto c = toy_config();
  c.batch_size = 3;
  EXPECT_THROW((void)train(c, g.store, g.vocab), ParameterError);
  c = toy_config();
  c.negatives = 0;
  EXPECT_THROW((void)train(c, g.store, g.vocab), ParameterError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ToyGraph g;
  auto c = toy_config();
  c.epochs = 3;
  c.optimizer = OptimizerKind::Adagrad;
  const auto ck = train(c, g.store, g.vocab).checkpoint;
  TempDir dir;
  save_checkpoint(ck, dir.file("a.kgef"));
  const auto back = load_checkpoint(dir.file("a.kgef"));
  EXPECT_EQ(back, ck);
  save_checkpoint(back, dir.file("b.kgef"));
  EXPECT_EQ(kge::testing::read_file(dir.file("a.kgef")), kge::testing::read_file(dir.file("b.kgef")));
}

TEST(Checkpoint, CompoundSpecSurvivesRoundTrip) {
  Checkpoint ck;
  ck.spec = ModelSpec::make(Family::CompoundE3D, 6);
  ck.spec.ops = geometry::parse_ops("HRT");
  ck.spec.variant = CompoundVariant::Complete;
  ck.spec.shear_form = geometry::ShearForm::Displayed;
  ck.table = init_embeddings<float>(ck.spec, 3, 2, 1);
  ck.optimizer = OptimizerState::make(OptimizerKind::SGD, ck.table);
  ck.rng_state = Rng(5).state();
  EXPECT_EQ(deserialize_checkpoint(serialize_checkpoint(ck)), ck);
}

TEST(Checkpoint, DistinctErrorsForDamage) {
  ToyGraph g;
  auto c = toy_config();
  c.epochs = 1;
  const auto bytes = serialize_checkpoint(train(c, g.store, g.vocab).checkpoint);
  EXPECT_THROW((void)deserialize_checkpoint(bytes.substr(0, bytes.size() - 9)), TruncatedCheckpoint);
  EXPECT_THROW((void)deserialize_checkpoint(bytes.substr(0, 2)), TruncatedCheckpoint);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW((void)deserialize_checkpoint(magic), BadMagic);
  auto version = bytes;
  version[4] = 9;
  EXPECT_THROW((void)deserialize_checkpoint(version), VersionMismatch);
  auto flipped = bytes;
  flipped[40] ^= 0x10;
  EXPECT_THROW((void)deserialize_checkpoint(flipped), ChecksumMismatch);

  TempDir dir;
  const auto path = dir.write("ck.kgef", bytes);
  Vocabulary other = g.vocab;
  other.entities.intern("e");
  EXPECT_THROW((void)load_checkpoint(path, other), DigestMismatch);
  EXPECT_NO_THROW((void)load_checkpoint(path, g.vocab));
  EXPECT_THROW((void)load_checkpoint(dir.file("missing.kgef")), IoError);
}

TEST(Config, ParsesAllFields) {
  const auto j = nlohmann::json::parse(R"({
    "model": "CompoundE3D", "entity_dim": 12, "variant": "Tail", "ops": "TRH", "shear_form": "displayed",
    "loss": "double_limit", "mu_pos": 0.5, "mu_neg": 2.5, "negatives": 8, "batch_size": 64, "epochs": 3,
    "learning_rate": 0.2, "optimizer": "sgd", "seed": 99, "sampling": "filtered", "renormalize": true,
    "eval_every": 1, "patience": 2, "threads": 2, "train": "t.txt"})");
  const auto c = parse_config(j, false);
  EXPECT_EQ(c.model.family, Family::CompoundE3D);
  EXPECT_EQ(c.model.variant, CompoundVariant::Tail);
  EXPECT_EQ(geometry::ops_to_string(c.model.ops), "TRH");
  EXPECT_EQ(c.model.shear_form, geometry::ShearForm::Displayed);
  EXPECT_EQ(c.loss, LossKind::DoubleLimit);
  EXPECT_EQ(c.loss_params.mu_neg, 2.5);
  EXPECT_EQ(c.optimizer, OptimizerKind::SGD);
  EXPECT_EQ(c.seed, 99u);
  EXPECT_EQ(c.sampling, SamplingMode::Filtered);
  EXPECT_TRUE(c.renormalize);
  EXPECT_EQ(c.threads, 2u);
  EXPECT_EQ(c.train_path, "t.txt");
}

TEST(Config, ReportsEveryBadField) {
  const auto j = nlohmann::json::parse(R"({"model": "Nope", "batch_size": 0, "margin": -1, "colour": 1})");
  try {
    (void)parse_config(j, false);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.problems().size(), 4u) << e.what();
  }
  EXPECT_THROW((void)parse_config(nlohmann::json::parse(R"({"entity_dim": 4})"), false), ConfigError);
  EXPECT_THROW((void)parse_config(nlohmann::json::parse(R"({"model": "RotatE", "entity_dim": 5})"), false),
               ConfigError);
  EXPECT_THROW((void)parse_config(nlohmann::json::parse(R"({"model": "TransE", "epochs": 0})"), false), ConfigError);
}

TEST(Config, EnvironmentSeedOverrides) {
  const auto j = nlohmann::json::parse(R"({"model": "TransE", "seed": 1})");
  ::setenv("KGE_SEED", "1234", 1);
  EXPECT_EQ(parse_config(j, true).seed, 1234u);
  EXPECT_EQ(parse_config(j, false).seed, 1u);
  ::setenv("KGE_SEED", "x", 1);
  EXPECT_THROW((void)parse_config(j, true), ConfigError);
  ::unsetenv("KGE_SEED");
}

TEST(Config, RelativeDatasetPathsFollowTheConfigFile) {
  const auto c = load_config(std::string(KGE_CONFIG_DIR) + "/umls_rotate.json", false);
  EXPECT_EQ(c.model.family, Family::RotatE);
  EXPECT_TRUE(std::filesystem::exists(c.train_path)) << c.train_path;
  TempDir dir;
  dir.write("bad.json", "{ not json");
  EXPECT_THROW((void)load_config(dir.file("bad.json")), ConfigError);
  EXPECT_THROW((void)load_config(dir.file("none.json")), IoError);
}

TEST(Digest, VocabularyOrderMatters) {
  Vocabulary a, b;
  a.entities.intern("x");
  a.entities.intern("y");
  b.entities.intern("y");
  b.entities.intern("x");
  EXPECT_NE(vocabulary_digest(a), vocabulary_digest(b));
  EXPECT_EQ(vocabulary_digest(a), vocabulary_digest(a));
}

TEST(GradCheck, ReportJson) {
  GradCheckReport r{1e-4, {gradient_check(ModelSpec::make(Family::TransE, 4), 20, 1e-4)}};
  const auto j = to_json(r);
  EXPECT_EQ(j["pass"], true);
  EXPECT_EQ(j["results"][0]["name"], "TransE");
  EXPECT_EQ(j["results"][0]["probes"], 20);
}

TEST(GradCheck, SignFlipIsFlagged) {
  const auto e = gradient_check(ModelSpec::make(Family::TransE, 4), 30, 1e-4, 1, [](SparseGrad<double>& g) {
    for (auto& [slot, v] : g.entries) {
      for (auto& x : v) x = -x;
    }
  });
  EXPECT_FALSE(e.pass);
}
