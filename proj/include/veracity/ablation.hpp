#pragma once
// Metadata and training-mode ablations.

#include <future>
#include <set>

#include "veracity/pipeline.hpp"
#include "veracity/train.hpp"

namespace veracity {

/// Metadata subsets in reporting order.
inline std::vector<MetaFields> metadata_ablation_subsets() {
  return {MetaFields::none(),
          MetaFields::parse("speaker"),
          MetaFields::parse("speaker+tags"),
          MetaFields::parse("tags"),
          MetaFields::parse("entity"),
          MetaFields::parse("entity+speaker"),
          MetaFields::parse("entity+speaker+tags")};
}

inline bool has_any_metadata(const ClaimRecord& r) {
  return r.speaker || r.category || !r.tags.empty() || !r.entities.empty();
}

struct AblationRow {
  std::string name;
  SuiteReport test;
  std::uint64_t split_hash = 0;
  // Test instances whose record has / lacks any metadata at all.
  std::optional<SuiteReport> with_metadata;
  std::optional<SuiteReport> without_metadata;
};

struct AblationTable {
  std::string title;
  std::vector<AblationRow> rows;

  void write_tsv(std::ostream& out) const {
    const bool split = std::any_of(rows.begin(), rows.end(), [](const auto& r) { return r.with_metadata.has_value(); });
    out << "name\tmicro_f1\tmacro_f1\tsplit_hash";
    if (split) out << "\tmeta_micro_f1\tmeta_macro_f1\tnometa_micro_f1\tnometa_macro_f1";
    out << '\n';
    auto cells = [&](const std::optional<SuiteReport>& s) {
      if (!s) return std::string("\t\t");
      return "\t" + SuiteReport::fixed(s->mean_micro_f1) + "\t" + SuiteReport::fixed(s->mean_macro_f1);
    };
    for (const auto& r : rows) {
      out << r.name << '\t' << SuiteReport::fixed(r.test.mean_micro_f1) << '\t'
          << SuiteReport::fixed(r.test.mean_macro_f1) << '\t' << to_hex(r.split_hash);
      if (split) out << cells(r.with_metadata) << cells(r.without_metadata);
      out << '\n';
    }
  }

  void write_markdown(std::ostream& out) const {
    out << "| " << title << " | Micro F1 | Macro F1 |\n|---|---:|---:|\n";
    for (const auto& r : rows)
      out << "| " << r.name << " | " << SuiteReport::fixed(r.test.mean_micro_f1, 3) << " | "
          << SuiteReport::fixed(r.test.mean_macro_f1, 3) << " |\n";
  }

  const AblationRow* find(const std::string& name) const {
    for (const auto& r : rows)
      if (r.name == name) return &r;
    return nullptr;
  }
};

struct AblationOptions {
  /// One model per target task, each scored on its own domain. Otherwise a
  /// single model is selected on the mean dev score over all tasks.
  bool per_target = false;
  TrainingMode mode = TrainingMode::kMtlLel;
  std::size_t jobs = 1;  // per-task models trained concurrently
  RunLog* log = nullptr;
  Diagnostics* diag = nullptr;
};

namespace detail {

/// Trains according to `opts` and returns test predictions (global ids) for
/// every test instance, in order.
template <typename T>
std::vector<std::size_t> train_and_predict(const TrainingSet& set, const ModelConfig& cfg, TrainingMode mode,
                                           const AblationOptions& opts) {
  TrainOptions topts;
  topts.log = opts.log;
  topts.diag = opts.diag;
  std::vector<std::size_t> predicted(set.test.size(), 0);
  std::set<std::size_t> dev_tasks;
  for (const auto& inst : set.dev) dev_tasks.insert(inst.task);

  if (mode == TrainingMode::kStl || opts.per_target) {
    std::vector<std::size_t> targets;
    for (std::size_t t = 0; t < set.tasks.size(); ++t) {
      bool has_test = false;
      for (const auto& inst : set.test) has_test |= inst.task == t;
      if (!has_test) continue;
      if (!dev_tasks.count(t)) {
        warn(opts.diag, "task " + set.tasks[t].code + " has no dev instances; skipped");
        continue;
      }
      targets.push_back(t);
    }
    // Each task's predictions land in disjoint slots of `predicted`.
    auto run_task = [&](std::size_t t) {
      auto trained = train<T>(set, cfg, t, mode, topts);
      std::vector<Instance> view;
      std::vector<std::size_t> where;
      for (std::size_t i = 0; i < set.test.size(); ++i) {
        if (set.test[i].task != t) continue;
        where.push_back(i);
        view.push_back(set.test[i]);
        if (mode == TrainingMode::kStl) {
          view.back().task = 0;
          view.back().label -= set.tasks[t].global_offset;
        }
      }
      auto pred = predict(*trained.model, view);
      for (std::size_t k = 0; k < where.size(); ++k)
        predicted[where[k]] = mode == TrainingMode::kStl ? pred.labels[k] + set.tasks[t].global_offset : pred.labels[k];
    };
    const std::size_t jobs = std::max<std::size_t>(1, opts.jobs);
    for (std::size_t start = 0; start < targets.size(); start += jobs) {
      std::vector<std::future<void>> running;
      for (std::size_t i = start; i < std::min(targets.size(), start + jobs); ++i)
        running.push_back(std::async(jobs == 1 ? std::launch::deferred : std::launch::async, run_task, targets[i]));
      for (auto& r : running) r.get();
    }
    return predicted;
  }
  auto trained = train_mtl<T>(set, cfg, std::nullopt, mode, topts);
  return predict(*trained.model, set.test).labels;
}

inline SuiteReport score(const TrainingSet& set, const std::vector<std::size_t>& predicted,
                         const std::function<bool(std::size_t)>& keep = {}) {
  std::vector<Instance> insts;
  std::vector<std::size_t> preds;
  for (std::size_t i = 0; i < set.test.size(); ++i) {
    if (keep && !keep(i)) continue;
    insts.push_back(set.test[i]);
    preds.push_back(predicted[i]);
  }
  return evaluate_suite(group_by_task(set.tasks, insts, preds));
}

}  // namespace detail

/// Trains `base` (normally crawled_ranked) once per metadata subset. Rows
/// also report the test set split by whether a record has any metadata.
template <typename T>
AblationTable run_metadata_ablation(const std::vector<ClaimRecord>& records, const CorpusSplit& split,
                                    const std::map<std::string, EvidenceSet>& evidence, const ModelConfig& base,
                                    const AblationOptions& opts = {},
                                    std::vector<MetaFields> subsets = metadata_ablation_subsets()) {
  AblationTable table;
  table.title = "Metadata";
  std::map<std::string, bool> available;
  for (const auto& r : records) available[r.claim_id] = has_any_metadata(r);
  for (const auto& subset : subsets) {
    ModelConfig cfg = base;
    cfg.use_metadata = subset != MetaFields::none();
    cfg.metadata_fields = subset;
    auto enc = encode_corpus(records, split, evidence, cfg, std::nullopt, std::nullopt, opts.diag);
    const auto predicted = detail::train_and_predict<T>(enc.set, cfg, opts.mode, opts);
    AblationRow row;
    row.name = subset.name();
    row.split_hash = split_hash(enc.set);
    row.test = detail::score(enc.set, predicted);
    row.with_metadata = detail::score(enc.set, predicted, [&](std::size_t i) { return available.at(enc.set.test[i].claim_id); });
    row.without_metadata =
        detail::score(enc.set, predicted, [&](std::size_t i) { return !available.at(enc.set.test[i].claim_id); });
    table.rows.push_back(std::move(row));
  }
  return table;
}

/// STL, MTL and MTL+LEL on identical splits and encodings.
template <typename T>
AblationTable run_training_ablation(const std::vector<ClaimRecord>& records, const CorpusSplit& split,
                                    const std::map<std::string, EvidenceSet>& evidence, const ModelConfig& cfg,
                                    const AblationOptions& opts = {}) {
  AblationTable table;
  table.title = "Model";
  auto enc = encode_corpus(records, split, evidence, cfg, std::nullopt, std::nullopt, opts.diag);
  const std::pair<const char*, TrainingMode> modes[] = {
      {"STL", TrainingMode::kStl}, {"MTL", TrainingMode::kMtl}, {"MTL + LEL", TrainingMode::kMtlLel}};
  for (const auto& [name, mode] : modes) {
    AblationRow row;
    row.name = name;
    row.split_hash = split_hash(enc.set);
    row.test = detail::score(enc.set, detail::train_and_predict<T>(enc.set, cfg, mode, opts));
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace veracity
