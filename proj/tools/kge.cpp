// kge: command-line front end for dataset statistics, training, evaluation,
// gradient checks and top-k prediction.
//
// Exit codes: 0 ok, 1 usage or config error, 2 I/O, 3 divergence,
// 4 vocabulary digest mismatch, 5 unknown entity or relation name.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kge/kge.hpp"

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kIo = 2, kDiverged = 3, kDigest = 4, kUnknownName = 5 };

class UnknownName : public kge::Error {
 public:
  using kge::Error::Error;
};

struct DataPaths {
  std::string train, valid, test;

  void add_to(CLI::App* cmd, bool required) {
    auto* a = cmd->add_option("--train", train, "training triples (TSV)");
    auto* b = cmd->add_option("--valid", valid, "validation triples (TSV)");
    auto* c = cmd->add_option("--test", test, "test triples (TSV)");
    if (required) {
      a->required();
      b->required();
      c->required();
    }
  }

  bool given() const { return !train.empty() || !valid.empty() || !test.empty(); }
};

kge::Dataset load(const DataPaths& p) {
  auto ds = kge::load_dataset(p.train, p.valid, p.test);
  const auto& d = ds.report.duplicates;
  if (d[0] + d[1] + d[2] > 0) {
    std::cerr << "warning: dropped duplicate triples train=" << d[0] << " valid=" << d[1] << " test=" << d[2]
              << "\n";
  }
  if (!ds.report.unseen_in_train.empty()) {
    std::cerr << "warning: " << ds.report.unseen_in_train.size()
              << " entities never appear in train and get no gradient:";
    for (const auto& n : ds.report.unseen_in_train) std::cerr << ' ' << n;
    std::cerr << "\n";
  }
  return ds;
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

std::uint32_t resolve(const kge::Dictionary& dict, const std::string& name, const char* what) {
  if (auto id = dict.find(name)) return *id;
  std::vector<std::pair<std::size_t, std::string>> near;
  for (const auto& n : dict.names()) near.emplace_back(edit_distance(name, n), n);
  std::sort(near.begin(), near.end());
  std::string msg = std::string("unknown ") + what + " \"" + name + "\"";
  if (!near.empty()) {
    msg += "; closest:";
    for (std::size_t i = 0; i < std::min<std::size_t>(5, near.size()); ++i) msg += " " + near[i].second;
  }
  throw UnknownName(msg);
}

std::string hex(std::uint64_t x) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << x;
  return os.str();
}

int run_stats(const DataPaths& paths, const std::string& reference) {
  const auto ds = load(paths);
  const auto stats = kge::compute_stats(ds.store, ds.report);
  if (!reference.empty()) {
    const auto ref = kge::reference_stats(reference);
    if (!ref) throw kge::ParameterError("no reference statistics named \"" + reference + "\"");
    for (const auto& d : kge::compare_to_reference(stats, *ref)) std::cerr << "reference delta: " << d << "\n";
  }
  std::cout << kge::to_json(stats).dump() << "\n";
  return kOk;
}

struct TrainFlags {
  std::string config, out, resume;
  DataPaths paths;
  std::optional<std::size_t> epochs, threads;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainFlags& f) {
  auto cfg = kge::load_config(f.config);
  // flags > KGE_SEED > config file
  if (f.epochs) cfg.epochs = *f.epochs;
  if (f.lr) cfg.learning_rate = *f.lr;
  if (f.seed) cfg.seed = *f.seed;
  cfg.threads = f.threads.value_or(kge::default_threads());
  if (!f.paths.train.empty()) cfg.train_path = f.paths.train;
  if (!f.paths.valid.empty()) cfg.valid_path = f.paths.valid;
  if (!f.paths.test.empty()) cfg.test_path = f.paths.test;
  if (cfg.train_path.empty() || cfg.valid_path.empty() || cfg.test_path.empty()) {
    throw kge::ConfigError({"train/valid/test: dataset paths are required (config or flags)"});
  }
  const auto ds = load({cfg.train_path, cfg.valid_path, cfg.test_path});
  std::optional<kge::Checkpoint> resume;
  if (!f.resume.empty()) resume = kge::load_checkpoint(f.resume, ds.vocab);

  const auto result = kge::train(cfg, ds.store, ds.vocab, resume, [](const kge::EpochLog& log) {
    std::cerr << "epoch=" << log.epoch << " loss=" << log.mean_loss << " val_mrr=";
    if (log.val_mrr) std::cerr << *log.val_mrr;
    else std::cerr << "na";
    std::cerr << std::endl;
  });
  kge::save_checkpoint(result.checkpoint, f.out);
  kge::save_dictionary(ds.vocab.entities, f.out + ".entities.tsv");
  kge::save_dictionary(ds.vocab.relations, f.out + ".relations.tsv");

  nlohmann::ordered_json j;
  j["checkpoint"] = f.out;
  j["model"] = std::string(kge::to_string(cfg.model.family));
  j["epochs"] = result.checkpoint.epoch;
  j["stopped_early"] = result.stopped_early;
  j["final_loss"] = result.history.empty() ? 0.0 : result.history.back().mean_loss;
  if (!result.history.empty() && result.history.back().val_mrr) j["val_mrr"] = *result.history.back().val_mrr;
  j["initial_digest"] = hex(result.initial_digest);
  j["final_digest"] = hex(kge::table_digest(result.checkpoint.table));
  std::cout << j.dump() << "\n";
  return kOk;
}

struct EvalFlags {
  std::string ckpt, tie_policy = "mean", split = "test", ranks_csv;
  DataPaths paths;
  std::optional<std::size_t> threads;
};

int run_eval(const EvalFlags& f) {
  const auto policy = kge::tie_policy_from_string(f.tie_policy);
  if (!policy) throw kge::ParameterError("--tie-policy must be mean, pessimistic or optimistic");
  const auto ds = load(f.paths);
  const auto ck = kge::load_checkpoint(f.ckpt, ds.vocab);
  const auto& split = f.split == "valid" ? ds.store.valid() : ds.store.test();
  const auto ev =
      kge::evaluate(ck.spec, ck.table, ds.store, split, *policy, f.threads.value_or(kge::default_threads()));
  if (!f.ranks_csv.empty()) {
    std::ofstream out(f.ranks_csv);
    if (!out) throw kge::IoError("cannot write " + f.ranks_csv);
    kge::write_rank_csv(out, ev, &ds.vocab);
  }
  auto j = kge::to_json(ev);
  j["split"] = f.split;
  std::cout << j.dump() << "\n";
  return kOk;
}

int run_gradcheck(std::size_t probes, double tol, const std::string& family, std::uint64_t seed) {
  kge::GradCheckReport report{tol, {}};
  if (family.empty()) {
    report = kge::gradient_check_all(probes, tol, seed);
    for (auto kind : {kge::LossKind::Margin, kge::LossKind::Limit, kge::LossKind::DoubleLimit,
                      kge::LossKind::SelfAdversarial, kge::LossKind::NLL, kge::LossKind::BCE}) {
      auto e = kge::loss_gradient_check(kind, probes, tol, seed);
      e.name = "loss " + e.name;
      report.entries.push_back(std::move(e));
    }
  } else {
    const auto fam = kge::family_from_string(family);
    if (!fam) throw kge::ParameterError("unknown model family \"" + family + "\"");
    const std::size_t dim = *fam == kge::Family::CompoundE3D ? 6 : 8;
    report.entries.push_back(kge::gradient_check(kge::ModelSpec::make(*fam, dim, 4), probes, tol, seed));
  }
  std::cout << kge::to_json(report).dump() << "\n";
  return report.all_pass() ? kOk : kUsage;
}

struct PredictFlags {
  std::string ckpt, head, rel;
  std::size_t topk = 10;
  bool filter = false;
  DataPaths paths;
};

int run_predict(const PredictFlags& f) {
  kge::Vocabulary vocab;
  std::optional<kge::Dataset> ds;
  if (f.paths.given()) {
    ds = load(f.paths);
    vocab = ds->vocab;
  } else {
    if (f.filter) throw kge::ParameterError("--filter needs --train, --valid and --test");
    vocab.entities = kge::load_dictionary(f.ckpt + ".entities.tsv");
    vocab.relations = kge::load_dictionary(f.ckpt + ".relations.tsv");
  }
  const auto ck = kge::load_checkpoint(f.ckpt, vocab);
  const auto h = resolve(vocab.entities, f.head, "entity");
  const auto r = resolve(vocab.relations, f.rel, "relation");
  if (!ck.table.all_finite()) throw kge::CorruptionError("checkpoint contains non-finite parameters");
  const kge::Query q{kge::Direction::Tail, h, r};
  const auto scores = kge::score_all_candidates(ck.spec, ck.table, q);
  std::vector<kge::EntityId> ids;
  for (kge::EntityId e = 0; e < scores.size(); ++e) {
    if (f.filter && ds->store.is_known(q.complete(e))) continue;
    ids.push_back(e);
  }
  std::stable_sort(ids.begin(), ids.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  ids.resize(std::min(ids.size(), f.topk));
  for (auto e : ids) std::cout << vocab.entities.name(e) << '\t' << scores[e] << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge graph embedding: train, evaluate and inspect link-prediction models"};
  app.require_subcommand(1);

  DataPaths stats_paths;
  std::string reference;
  auto* stats = app.add_subcommand("stats", "print dataset statistics as JSON");
  stats_paths.add_to(stats, true);
  stats->add_option("--reference", reference, "log deltas against a published dataset row (e.g. umls)");

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  train->add_option("--config", tf.config, "flat JSON training config")->required();
  train->add_option("--out", tf.out, "checkpoint path")->required();
  train->add_option("--resume", tf.resume, "continue from this checkpoint");
  tf.paths.add_to(train, false);
  train->add_option("--epochs", tf.epochs, "override epochs");
  train->add_option("--lr", tf.lr, "override learning rate");
  train->add_option("--seed", tf.seed, "override seed (also KGE_SEED)");
  train->add_option("--threads", tf.threads, "worker threads (default: all cores)");

  EvalFlags ef;
  auto* eval = app.add_subcommand("eval", "filtered and raw link-prediction metrics as JSON");
  eval->add_option("--ckpt", ef.ckpt, "checkpoint")->required();
  ef.paths.add_to(eval, true);
  eval->add_option("--tie-policy", ef.tie_policy, "mean | pessimistic | optimistic");
  eval->add_option("--split", ef.split, "test | valid")->check(CLI::IsMember({"test", "valid"}));
  eval->add_option("--ranks-csv", ef.ranks_csv, "write per-query ranks");
  eval->add_option("--threads", ef.threads, "worker threads (default: all cores)");

  std::size_t probes = 100;
  double tol = 1e-4;
  std::string family;
  std::uint64_t gc_seed = 1;
  auto* gc = app.add_subcommand("gradcheck", "compare analytic gradients with central differences");
  gc->add_option("--probes", probes, "probes per entry");
  gc->add_option("--tol", tol, "relative tolerance");
  gc->add_option("--family", family, "check one model family only");
  gc->add_option("--seed", gc_seed, "probe seed");

  PredictFlags pf;
  auto* predict = app.add_subcommand("predict", "top-k tails for (head, relation)");
  predict->add_option("--ckpt", pf.ckpt, "checkpoint")->required();
  predict->add_option("--head", pf.head, "head entity name")->required();
  predict->add_option("--rel", pf.rel, "relation name")->required();
  predict->add_option("--topk", pf.topk, "number of results");
  predict->add_flag("--filter", pf.filter, "drop tails that form known triples");
  pf.paths.add_to(predict, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (stats->parsed()) return run_stats(stats_paths, reference);
    if (train->parsed()) return run_train(tf);
    if (eval->parsed()) return run_eval(ef);
    if (gc->parsed()) return run_gradcheck(probes, tol, family, gc_seed);
    if (predict->parsed()) return run_predict(pf);
  } catch (const kge::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const kge::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const kge::DigestMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDigest;
  } catch (const UnknownName& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUnknownName;
  } catch (const kge::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const kge::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const kge::CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const kge::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
