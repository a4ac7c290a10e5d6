#pragma once
// Multi-task training with a target task, early stopping and grid search.

#include <chrono>
#include <fstream>
#include <future>
#include <limits>
#include <memory>
#include <mutex>

#include "json.hpp"
#include "veracity/eval.hpp"
#include "veracity/model.hpp"

namespace veracity {

enum class TrainingMode { kStl, kMtl, kMtlLel };

inline std::string to_string(TrainingMode m) {
  switch (m) {
    case TrainingMode::kStl: return "stl";
    case TrainingMode::kMtl: return "mtl";
    case TrainingMode::kMtlLel: return "mtl_lel";
  }
  return "?";
}

inline TrainingMode parse_training_mode(std::string_view s) {
  if (s == "stl" || s == "STL") return TrainingMode::kStl;
  if (s == "mtl" || s == "MTL") return TrainingMode::kMtl;
  if (s == "mtl_lel" || s == "mtl+lel" || s == "MTL+LEL") return TrainingMode::kMtlLel;
  throw ConfigError("unknown training mode '" + std::string(s) + "'");
}

inline HeadKind head_for(TrainingMode m) {
  return m == TrainingMode::kMtlLel ? HeadKind::kLabelEmbedding : HeadKind::kTaskSoftmax;
}

/// Stops once `patience` epochs pass without a strict improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Records the metric for the next epoch; true means stop now.
  bool update(double metric) {
    history_.push_back(metric);
    if (history_.size() == 1 || metric > best_) {
      best_ = metric;
      best_epoch_ = history_.size();
      since_best_ = 0;
    } else {
      ++since_best_;
    }
    return since_best_ >= patience_;
  }

  bool improved_last() const noexcept { return since_best_ == 0 && !history_.empty(); }
  double best() const noexcept { return best_; }
  std::size_t best_epoch() const noexcept { return best_epoch_; }  // 1-based
  std::size_t epochs() const noexcept { return history_.size(); }
  const std::vector<double>& history() const noexcept { return history_; }

 private:
  std::size_t patience_;
  std::vector<double> history_;
  double best_ = -std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t since_best_ = 0;
};

/// Encoded splits plus everything needed to size a model.
struct TrainingSet {
  std::vector<Instance> train;
  std::vector<Instance> dev;
  std::vector<Instance> test;
  std::vector<DomainTask> tasks;
  std::size_t vocab_size = 2;
  std::size_t metadata_size = 0;
};

/// Single-task view: one task at offset 0, labels re-indexed locally.
inline TrainingSet restrict_to_task(const TrainingSet& set, std::size_t task) {
  TrainingSet out;
  DomainTask t = set.tasks.at(task);
  const std::size_t offset = t.global_offset;
  t.global_offset = 0;
  out.tasks = {t};
  out.vocab_size = set.vocab_size;
  out.metadata_size = set.metadata_size;
  auto copy = [&](const std::vector<Instance>& from, std::vector<Instance>& to) {
    for (const auto& inst : from) {
      if (inst.task != task) continue;
      Instance c = inst;
      c.task = 0;
      c.label = inst.label - offset;
      to.push_back(std::move(c));
    }
  };
  copy(set.train, out.train);
  copy(set.dev, out.dev);
  copy(set.test, out.test);
  return out;
}

/// Hash over claim ids, tasks and labels of the three splits.
inline std::uint64_t split_hash(const TrainingSet& set) {
  Fnv1a h;
  for (const auto* part : {&set.train, &set.dev, &set.test}) {
    for (const auto& inst : *part) {
      h.update(inst.claim_id);
      h.update("\t" + std::to_string(inst.task) + "\t" + std::to_string(inst.label) + "\n");
    }
    h.update("--\n");
  }
  return h.digest();
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_micro_f1 = 0.0;
  double dev_macro_f1 = 0.0;
  double seconds = 0.0;
};

struct TrainRun {
  std::string target;  // task code, or "all"
  TrainingMode mode = TrainingMode::kMtlLel;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  std::size_t stop_epoch = 0;
  double best_dev_macro_f1 = 0.0;
  std::string best_checkpoint;  // serialized parameters of the best epoch
};

/// Line-delimited JSON run log. Thread-safe appends.
class RunLog {
 public:
  RunLog() = default;
  explicit RunLog(const std::filesystem::path& path) : out_(std::make_unique<std::ofstream>(path, std::ios::app)) {
    if (!*out_) throw Error("cannot open run log: " + path.string());
  }
  void write(const nlohmann::json& event) {
    if (!out_) return;
    std::lock_guard lock(mutex_);
    *out_ << event.dump() << '\n';
    out_->flush();
  }

 private:
  std::unique_ptr<std::ofstream> out_;
  std::mutex mutex_;
};

struct TrainOptions {
  std::optional<std::size_t> target_task;  // none: monitor the mean over all tasks
  bool checked = false;
  bool verbose = false;
  RunLog* log = nullptr;
  Diagnostics* diag = nullptr;
};

template <typename T>
struct Prediction {
  std::vector<std::size_t> labels;          // global label ids
  std::vector<std::vector<T>> probabilities;  // per instance, global label space
  std::vector<std::array<T, kMaxEvidence>> ranking;
  std::vector<bool> fallback;
};

/// Inference without dropout, in batches.
template <typename T>
Prediction<T> predict(ClaimModel<T>& model, const std::vector<Instance>& instances, std::size_t batch = 64) {
  Prediction<T> out;
  const std::size_t labels = total_labels(model.tasks());
  std::vector<const Instance*> ptrs;
  for (const auto& inst : instances) ptrs.push_back(&inst);
  for (std::size_t start = 0; start < ptrs.size(); start += batch) {
    const std::size_t end = std::min(ptrs.size(), start + batch);
    ad::Graph<T> g(false);
    std::span<const Instance* const> chunk(ptrs.data() + start, end - start);
    auto fr = model.forward(g, chunk);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      std::vector<T> p(fr.probs.values().begin() + i * labels, fr.probs.values().begin() + (i + 1) * labels);
      out.labels.push_back(static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin()));
      out.probabilities.push_back(std::move(p));
      out.ranking.push_back(fr.ranking[i]);
      out.fallback.push_back(fr.fallback[i]);
    }
  }
  return out;
}

/// Groups predictions per task into local label indices.
inline std::vector<DomainPredictions> group_by_task(const std::vector<DomainTask>& tasks,
                                                    const std::vector<Instance>& instances,
                                                    const std::vector<std::size_t>& predicted,
                                                    std::optional<std::size_t> only = std::nullopt) {
  std::vector<DomainPredictions> out(tasks.size());
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    out[t].domain = tasks[t].code;
    out[t].labels = tasks[t].labels;
  }
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& inst = instances[i];
    const auto& task = tasks.at(inst.task);
    out[inst.task].gold.push_back(inst.label - task.global_offset);
    // Masking keeps predictions inside the task's block.
    out[inst.task].pred.push_back(predicted[i] - task.global_offset);
  }
  std::vector<DomainPredictions> kept;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    if (only && t != *only) continue;
    if (!out[t].gold.empty()) kept.push_back(std::move(out[t]));
  }
  return kept;
}

template <typename T>
SuiteReport evaluate_model(ClaimModel<T>& model, const std::vector<Instance>& instances,
                           std::optional<std::size_t> only = std::nullopt) {
  auto pred = predict(model, instances);
  return evaluate_suite(group_by_task(model.tasks(), instances, pred.labels, only));
}

namespace detail {

template <typename T>
nlohmann::json history_json(const TrainRun& run) {
  auto arr = nlohmann::json::array();
  for (const auto& e : run.history)
    arr.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"dev_micro_f1", e.dev_micro_f1},
                   {"dev_macro_f1", e.dev_macro_f1}});
  return arr;
}

}  // namespace detail

/// Trains `model` in place and restores its best epoch.
///
/// Batches are task-homogeneous. An epoch is one pass over all training
/// instances: each task's instances are shuffled and cut into batches, and
/// the pooled batch list is shuffled, so tasks are visited in proportion to
/// their size.
template <typename T>
TrainRun train_model(ClaimModel<T>& model, const TrainingSet& set, TrainingMode mode, const TrainOptions& opts = {}) {
  const auto& cfg = model.config();
  if (set.train.empty()) throw Error("empty training set");
  const auto target = opts.target_task;
  std::size_t target_dev = 0;
  for (const auto& inst : set.dev)
    if (!target || inst.task == *target) ++target_dev;
  if (target_dev == 0)
    throw Error("no dev instances for target task " + (target ? set.tasks.at(*target).code : std::string("all")));

  TrainRun run;
  run.mode = mode;
  run.target = target ? set.tasks.at(*target).code : "all";

  std::vector<std::vector<const Instance*>> by_task(set.tasks.size());
  for (const auto& inst : set.train) by_task.at(inst.task).push_back(&inst);

  Rng rng(cfg.seed ^ 0x7261696eULL);
  RmsPropConfig opt_cfg;
  opt_cfg.learning_rate = cfg.lr;
  opt_cfg.checked = opts.checked;
  RmsProp<T> optimizer(opt_cfg);
  EarlyStopping stopper(cfg.patience);

  if (opts.log)
    opts.log->write({{"event", "start"}, {"target", run.target}, {"mode", to_string(mode)},
                     {"config", cfg.canonical()}, {"config_hash", to_hex(cfg.hash())}, {"seed", cfg.seed},
                     {"split_hash", to_hex(split_hash(set))}, {"train", set.train.size()}, {"dev", set.dev.size()}});

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::vector<std::vector<const Instance*>> batches;
    for (auto& items : by_task) {
      rng.shuffle(items);
      for (std::size_t s = 0; s < items.size(); s += cfg.batch)
        batches.emplace_back(items.begin() + s, items.begin() + std::min(items.size(), s + cfg.batch));
    }
    rng.shuffle(batches);

    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      ad::Graph<T> g(true, rng.next(), opts.checked);
      model.params().zero_grad();
      auto fr = model.forward(g, batches[b]);
      auto loss = model.loss(g, fr, batches[b]);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv))
        throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b + 1));
      g.backward(loss);
      optimizer.step(model.params());
      loss_sum += lv;
    }

    auto dev = evaluate_model(model, set.dev, target);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(batches.size());
    rec.dev_micro_f1 = dev.mean_micro_f1;
    rec.dev_macro_f1 = dev.mean_macro_f1;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    run.history.push_back(rec);
    if (opts.log)
      opts.log->write({{"event", "epoch"}, {"target", run.target}, {"mode", to_string(mode)}, {"epoch", epoch},
                       {"train_loss", rec.train_loss}, {"dev_micro_f1", rec.dev_micro_f1},
                       {"dev_macro_f1", rec.dev_macro_f1}, {"seconds", rec.seconds}});
    if (opts.verbose && opts.diag)
      opts.diag->warn("epoch " + std::to_string(epoch) + " loss " + std::to_string(rec.train_loss) + " dev macro " +
                      std::to_string(rec.dev_macro_f1));

    const bool stop = stopper.update(rec.dev_macro_f1);
    if (stopper.improved_last()) run.best_checkpoint = serialize_checkpoint(model.params());
    run.stop_epoch = epoch;
    if (stop) break;
  }
  run.best_epoch = stopper.best_epoch();
  run.best_dev_macro_f1 = stopper.best();
  deserialize_checkpoint(run.best_checkpoint, model.params());
  if (opts.log)
    opts.log->write({{"event", "end"}, {"target", run.target}, {"mode", to_string(mode)},
                     {"best_epoch", run.best_epoch}, {"stop_epoch", run.stop_epoch},
                     {"best_dev_macro_f1", run.best_dev_macro_f1}, {"history", detail::history_json<T>(run)}});
  return run;
}

template <typename T>
struct TrainedModel {
  std::unique_ptr<ClaimModel<T>> model;
  TrainRun run;
  TrainingSet data;  // the view the model was trained on
};

/// One model over all tasks, selected on the target task's dev score.
template <typename T>
TrainedModel<T> train_mtl(const TrainingSet& set, const ModelConfig& cfg, std::optional<std::size_t> target,
                          TrainingMode mode = TrainingMode::kMtlLel, TrainOptions opts = {}) {
  if (mode == TrainingMode::kStl) throw ConfigError("train_mtl called with STL mode");
  TrainedModel<T> out;
  out.data = set;
  out.model = std::make_unique<ClaimModel<T>>(cfg, head_for(mode), set.tasks, set.vocab_size, set.metadata_size);
  opts.target_task = target;
  out.run = train_model(*out.model, out.data, mode, opts);
  return out;
}

/// One model restricted to a single task with its own softmax layer.
template <typename T>
TrainedModel<T> train_stl(const TrainingSet& set, const ModelConfig& cfg, std::size_t task, TrainOptions opts = {}) {
  TrainedModel<T> out;
  out.data = restrict_to_task(set, task);
  out.model = std::make_unique<ClaimModel<T>>(cfg, HeadKind::kTaskSoftmax, out.data.tasks, set.vocab_size,
                                              set.metadata_size);
  opts.target_task = 0;
  out.run = train_model(*out.model, out.data, TrainingMode::kStl, opts);
  return out;
}

template <typename T>
TrainedModel<T> train(const TrainingSet& set, const ModelConfig& cfg, std::size_t target, TrainingMode mode,
                      TrainOptions opts = {}) {
  if (mode == TrainingMode::kStl) return train_stl<T>(set, cfg, target, opts);
  return train_mtl<T>(set, cfg, target, mode, opts);
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

struct HyperGrid {
  std::vector<std::size_t> word_emb{64, 128, 256};
  std::vector<std::size_t> hidden{64, 128, 256};
  std::vector<std::size_t> layers{1, 2, 3};
  std::vector<double> dropout{0.0, 0.1, 0.2, 0.5};
  std::vector<bool> skip_connections{true, false};
  std::vector<std::size_t> batch{32, 64, 128};
  std::vector<std::size_t> label_emb{16, 32, 64};

  /// Cartesian product applied on top of `base`.
  std::vector<ModelConfig> expand(const ModelConfig& base) const {
    std::vector<ModelConfig> out{base};
    auto axis = [&out](const auto& values, auto setter) {
      std::vector<ModelConfig> next;
      for (const auto& c : out)
        for (const auto& v : values) {
          ModelConfig m = c;
          setter(m, v);
          next.push_back(m);
        }
      out = std::move(next);
    };
    axis(word_emb, [](ModelConfig& m, std::size_t v) { m.word_emb = v; });
    axis(hidden, [](ModelConfig& m, std::size_t v) { m.hidden = v; });
    axis(layers, [](ModelConfig& m, std::size_t v) { m.layers = v; });
    axis(dropout, [](ModelConfig& m, double v) { m.dropout = v; });
    axis(skip_connections, [](ModelConfig& m, bool v) { m.skip_connections = v; });
    axis(batch, [](ModelConfig& m, std::size_t v) { m.batch = v; });
    axis(label_emb, [](ModelConfig& m, std::size_t v) { m.label_emb = v; });
    return out;
  }
};

struct GridRow {
  ModelConfig config;
  double best_dev_macro_f1 = 0.0;
  std::size_t best_epoch = 0;
  std::size_t stop_epoch = 0;
};

struct GridResult {
  std::vector<GridRow> rows;  // grid order
  std::size_t best = 0;
  const ModelConfig& best_config() const { return rows.at(best).config; }

  void write_tsv(std::ostream& out) const {
    out << "index\tconfig_hash\tbest_dev_macro_f1\tbest_epoch\tstop_epoch\tconfig\n";
    for (std::size_t i = 0; i < rows.size(); ++i)
      out << i << '\t' << to_hex(rows[i].config.hash()) << '\t' << SuiteReport::fixed(rows[i].best_dev_macro_f1, 6)
          << '\t' << rows[i].best_epoch << '\t' << rows[i].stop_epoch << '\t' << rows[i].config.canonical() << '\n';
  }
};

/// Trains every grid point (up to `jobs` at a time) and picks the best
/// target dev Macro F1; ties go to the earlier grid point.
template <typename T>
GridResult grid_search(const TrainingSet& set, const std::vector<ModelConfig>& grid, std::size_t target,
                       TrainingMode mode, std::size_t jobs = 1,
                       const std::optional<std::filesystem::path>& results_path = std::nullopt,
                       RunLog* log = nullptr) {
  if (grid.empty()) throw ConfigError("empty hyperparameter grid");
  GridResult result;
  result.rows.resize(grid.size());
  auto run_point = [&](std::size_t i) {
    TrainOptions opts;
    opts.log = log;
    auto trained = train<T>(set, grid[i], target, mode, opts);
    result.rows[i] = {grid[i], trained.run.best_dev_macro_f1, trained.run.best_epoch, trained.run.stop_epoch};
  };
  jobs = std::max<std::size_t>(1, jobs);
  for (std::size_t start = 0; start < grid.size(); start += jobs) {
    std::vector<std::future<void>> running;
    for (std::size_t i = start; i < std::min(grid.size(), start + jobs); ++i)
      running.push_back(std::async(jobs == 1 ? std::launch::deferred : std::launch::async, run_point, i));
    for (auto& f : running) f.get();
  }
  for (std::size_t i = 1; i < result.rows.size(); ++i)
    if (result.rows[i].best_dev_macro_f1 > result.rows[result.best].best_dev_macro_f1) result.best = i;
  if (results_path) {
    std::ofstream out(*results_path);
    if (!out) throw Error("cannot write grid results: " + results_path->string());
    result.write_tsv(out);
  }
  return result;
}

}  // namespace veracity
