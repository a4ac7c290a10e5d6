#include <gtest/gtest.h>

#include <sstream>

#include "synthetic.hpp"
#include "tempdir.hpp"
#include "veracity/train.hpp"

using namespace veracity;

namespace {

ModelConfig small_config(Variant v = Variant::kClaimOnlyEmbAvg) {
  ModelConfig c;
  c.word_emb = 8;
  c.hidden = 8;
  c.layers = 1;
  c.dropout = 0.0;
  c.label_emb = 4;
  c.batch = 8;
  c.lr = 0.02;
  c.max_epochs = 60;
  c.patience = 60;
  c.variant = v;
  c.seed = 3;
  return c;
}

// Label is a function of the first claim token, so the data can be fit.
TrainingSet learnable_set(const std::vector<std::size_t>& label_counts, std::size_t n, std::uint64_t seed) {
  TrainingSet set;
  set.tasks = synth::make_tasks(label_counts);
  set.vocab_size = 30;
  Rng rng(seed);
  auto make = [&](std::size_t count) {
    auto insts = synth::random_instances(set.tasks, count, set.vocab_size, 0, rng, 4, 0);
    for (auto& inst : insts) {
      const auto& t = set.tasks[inst.task];
      inst.label = t.global_offset + inst.claim[0] % t.labels.size();
    }
    return insts;
  };
  set.train = make(n);
  set.dev = make(n / 2);
  set.test = make(n / 2);
  return set;
}

double accuracy(ClaimModel<double>& m, const std::vector<Instance>& insts) {
  const auto pred = predict(m, insts);
  double hits = 0;
  for (std::size_t i = 0; i < insts.size(); ++i) hits += pred.labels[i] == insts[i].label;
  return hits / static_cast<double>(insts.size());
}

}  // namespace

TEST(EarlyStoppingTest, StopsAfterPatienceWithoutImprovement) {
  EarlyStopping s(3);
  const std::vector<double> trace{0.5, 0.6, 0.55, 0.58, 0.59};
  std::size_t stopped_at = 0;
  for (std::size_t i = 0; i < trace.size(); ++i)
    if (s.update(trace[i])) {
      stopped_at = i + 1;
      break;
    }
  EXPECT_EQ(stopped_at, 5u);
  EXPECT_EQ(s.best_epoch(), 2u);
  EXPECT_DOUBLE_EQ(s.best(), 0.6);
}

TEST(EarlyStoppingTest, TiesDoNotCountAsImprovement) {
  EarlyStopping s(2);
  EXPECT_FALSE(s.update(0.4));
  EXPECT_TRUE(s.improved_last());
  EXPECT_FALSE(s.update(0.4));
  EXPECT_FALSE(s.improved_last());
  EXPECT_TRUE(s.update(0.4));
  EXPECT_EQ(s.best_epoch(), 1u);
}

TEST(EarlyStoppingTest, NeverStopsWhileImproving) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    EarlyStopping s(1 + rng.below(4));
    double v = 0;
    for (int e = 0; e < 30; ++e) {
      v += 0.001 + rng.uniform();
      ASSERT_FALSE(s.update(v));
    }
    ASSERT_EQ(s.best_epoch(), 30u);
  }
}

TEST(RestrictToTask, RelabelsLocally) {
  auto set = learnable_set({2, 3, 4}, 60, 1);
  const auto view = restrict_to_task(set, 2);
  ASSERT_EQ(view.tasks.size(), 1u);
  EXPECT_EQ(view.tasks[0].global_offset, 0u);
  EXPECT_EQ(view.tasks[0].labels.size(), 4u);
  std::size_t expected = 0;
  for (const auto& inst : set.train) expected += inst.task == 2;
  EXPECT_EQ(view.train.size(), expected);
  for (const auto& inst : view.train) {
    EXPECT_EQ(inst.task, 0u);
    EXPECT_LT(inst.label, 4u);
  }
}

TEST(SplitHash, SensitiveToLabelsAndMembership) {
  auto set = learnable_set({2, 2}, 20, 4);
  const auto h = split_hash(set);
  EXPECT_EQ(h, split_hash(set));
  auto moved = set;
  moved.dev.push_back(moved.train.back());
  moved.train.pop_back();
  EXPECT_NE(h, split_hash(moved));
  auto relabelled = set;
  relabelled.test[0].label ^= 1;
  EXPECT_NE(h, split_hash(relabelled));
}

TEST(Training, TwoTaskModelFitsItsTrainingData) {
  auto set = learnable_set({2, 3}, 80, 5);
  set.dev = set.train;
  for (auto mode : {TrainingMode::kMtl, TrainingMode::kMtlLel}) {
    auto trained = train_mtl<double>(set, small_config(), std::nullopt, mode);
    EXPECT_GE(accuracy(*trained.model, set.train), 0.95) << to_string(mode);
  }
}

TEST(Training, SameSeedSameHistory) {
  auto set = learnable_set({2, 3}, 40, 6);
  auto cfg = small_config();
  cfg.max_epochs = 4;
  auto a = train_mtl<double>(set, cfg, std::nullopt);
  auto b = train_mtl<double>(set, cfg, std::nullopt);
  ASSERT_EQ(a.run.history.size(), b.run.history.size());
  for (std::size_t e = 0; e < a.run.history.size(); ++e) {
    EXPECT_EQ(a.run.history[e].train_loss, b.run.history[e].train_loss);
    EXPECT_EQ(a.run.history[e].dev_macro_f1, b.run.history[e].dev_macro_f1);
  }
  cfg.seed = 4;
  auto c = train_mtl<double>(set, cfg, std::nullopt);
  EXPECT_NE(a.run.history[0].train_loss, c.run.history[0].train_loss);
}

TEST(Training, RestoresBestEpochParameters) {
  auto set = learnable_set({3, 2}, 60, 7);
  auto cfg = small_config();
  cfg.max_epochs = 25;
  cfg.patience = 5;
  for (std::optional<std::size_t> target : {std::optional<std::size_t>{}, std::optional<std::size_t>{1}}) {
    auto trained = train_mtl<double>(set, cfg, target);
    const auto& run = trained.run;
    ASSERT_GE(run.best_epoch, 1u);
    EXPECT_DOUBLE_EQ(run.history.at(run.best_epoch - 1).dev_macro_f1, run.best_dev_macro_f1);
    for (const auto& e : run.history) EXPECT_LE(e.dev_macro_f1, run.best_dev_macro_f1);
    const auto dev = evaluate_model(*trained.model, set.dev, target);
    EXPECT_NEAR(dev.mean_macro_f1, run.best_dev_macro_f1, 1e-12);
  }
}

TEST(Training, StlHandlesSingleLabelTask) {
  auto set = learnable_set({1, 3}, 40, 8);
  auto cfg = small_config();
  cfg.max_epochs = 3;
  auto trained = train_stl<double>(set, cfg, 0);
  ASSERT_EQ(trained.model->tasks().size(), 1u);
  const auto pred = predict(*trained.model, trained.data.test);
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    EXPECT_EQ(pred.labels[i], 0u);
    EXPECT_NEAR(pred.probabilities[i][0], 1.0, 1e-12);
  }
  EXPECT_DOUBLE_EQ(trained.run.best_dev_macro_f1, 1.0);
}

TEST(Training, StlModelsHaveOneHeadPerTarget) {
  auto set = learnable_set({2, 3, 4}, 60, 9);
  auto cfg = small_config();
  cfg.max_epochs = 2;
  for (std::size_t t = 0; t < set.tasks.size(); ++t) {
    auto trained = train<double>(set, cfg, t, TrainingMode::kStl);
    EXPECT_EQ(trained.model->tasks().size(), 1u);
    EXPECT_EQ(trained.model->tasks()[0].code, set.tasks[t].code);
    EXPECT_EQ(total_labels(trained.model->tasks()), set.tasks[t].labels.size());
    EXPECT_EQ(trained.run.target, set.tasks[t].code);
  }
  EXPECT_THROW(train_mtl<double>(set, cfg, std::nullopt, TrainingMode::kStl), ConfigError);
}

TEST(Training, RequiresDevInstancesForTarget) {
  auto set = learnable_set({2, 2}, 30, 10);
  std::erase_if(set.dev, [](const Instance& i) { return i.task == 1; });
  EXPECT_THROW(train_mtl<double>(set, small_config(), std::size_t{1}), Error);
  set.train.clear();
  EXPECT_THROW(train_mtl<double>(set, small_config(), std::nullopt), Error);
}

TEST(Training, WritesRunLog) {
  vtest::TempDir dir;
  auto set = learnable_set({2, 2}, 20, 11);
  auto cfg = small_config();
  cfg.max_epochs = 3;
  cfg.patience = 10;
  {
    RunLog log(dir / "runs.jsonl");
    TrainOptions opts;
    opts.log = &log;
    train_mtl<double>(set, cfg, std::nullopt, TrainingMode::kMtlLel, opts);
  }
  std::istringstream in(vtest::read_file(dir / "runs.jsonl"));
  std::vector<std::string> events;
  std::string line;
  while (std::getline(in, line)) events.push_back(nlohmann::json::parse(line).at("event"));
  EXPECT_EQ(events, (std::vector<std::string>{"start", "epoch", "epoch", "epoch", "end"}));
}

TEST(GridSearch, SingletonGridMatchesPlainRun) {
  auto set = learnable_set({2, 3}, 40, 12);
  auto cfg = small_config();
  cfg.max_epochs = 5;
  const auto grid = grid_search<double>(set, {cfg}, 1, TrainingMode::kMtlLel);
  ASSERT_EQ(grid.rows.size(), 1u);
  EXPECT_EQ(grid.best, 0u);
  const auto plain = train<double>(set, cfg, 1, TrainingMode::kMtlLel);
  EXPECT_DOUBLE_EQ(grid.rows[0].best_dev_macro_f1, plain.run.best_dev_macro_f1);
}

TEST(GridSearch, AvoidsSabotagedPointAndWritesEveryRow) {
  vtest::TempDir dir;
  auto set = learnable_set({2, 3}, 60, 13);
  auto good = small_config();
  good.max_epochs = 30;
  auto frozen = good;
  frozen.lr = 0.0;  // never moves from initialisation
  const auto result =
      grid_search<double>(set, {frozen, good, frozen}, 0, TrainingMode::kMtl, 2, dir / "grid.tsv");
  EXPECT_EQ(result.best, 1u);
  EXPECT_GT(result.rows[1].best_dev_macro_f1, result.rows[0].best_dev_macro_f1);
  EXPECT_DOUBLE_EQ(result.rows[0].best_dev_macro_f1, result.rows[2].best_dev_macro_f1);
  std::istringstream in(vtest::read_file(dir / "grid.tsv"));
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  EXPECT_EQ(lines, 4u);
}

TEST(GridSearch, TiesGoToEarlierPoint) {
  auto set = learnable_set({2, 2}, 30, 14);
  auto cfg = small_config();
  cfg.max_epochs = 3;
  const auto result = grid_search<double>(set, {cfg, cfg}, 0, TrainingMode::kMtlLel);
  EXPECT_EQ(result.best, 0u);
  EXPECT_THROW(grid_search<double>(set, {}, 0, TrainingMode::kMtlLel), ConfigError);
}

TEST(HyperGridTest, FullProductSize) {
  HyperGrid grid;
  const auto points = grid.expand(ModelConfig{});
  EXPECT_EQ(points.size(), 3u * 3 * 3 * 4 * 2 * 3 * 3);
  std::set<std::uint64_t> hashes;
  for (const auto& p : points) hashes.insert(p.hash());
  EXPECT_EQ(hashes.size(), points.size());
}

TEST(TrainingModes, NamesRoundTrip) {
  for (auto m : {TrainingMode::kStl, TrainingMode::kMtl, TrainingMode::kMtlLel})
    EXPECT_EQ(parse_training_mode(to_string(m)), m);
  EXPECT_THROW(parse_training_mode("joint"), ConfigError);
  EXPECT_EQ(head_for(TrainingMode::kMtlLel), HeadKind::kLabelEmbedding);
  EXPECT_EQ(head_for(TrainingMode::kMtl), HeadKind::kTaskSoftmax);
}
