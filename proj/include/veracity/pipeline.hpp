#pragma once
// Corpus preparation stages and the records -> model-input encoding.

#include <filesystem>
#include <fstream>

#include "veracity/corpus.hpp"
#include "veracity/evidence.hpp"
#include "veracity/features.hpp"
#include "veracity/train.hpp"

namespace veracity {

struct PrepareOptions {
  std::filesystem::path corpus;
  std::optional<std::filesystem::path> entities;
  std::optional<std::filesystem::path> merge_table;
  std::set<std::string> domains = default_domain_codes();
  std::size_t min_label_count = reference::kMinLabelCount;
  std::uint64_t split_seed = 1;
  SplitRatios ratios;
  /// Labels never used for leak stripping; purely numeric labels are
  /// always skipped as well.
  std::set<std::string> leak_lexicon_exclude{"none"};
};

struct DomainCount {
  std::string domain;
  std::size_t instances = 0;
  std::size_t labels = 0;
};

struct PrepareSummary {
  std::size_t loaded = 0;
  std::size_t leak_modified = 0;
  std::size_t leak_discarded = 0;
  std::size_t before_rare_filter = 0;
  std::size_t rare_removed = 0;
  std::size_t claims = 0;
  std::size_t duplicate_groups = 0;
  std::size_t disagreeing_duplicate_groups = 0;
  double entity_annotated_fraction = 0.0;
  std::vector<DomainCount> domains;
  std::vector<std::string> dropped_domains;
  std::size_t train = 0, dev = 0, test = 0;

  void write_tsv(std::ostream& out) const {
    out << "domain\tinstances\tlabels\n";
    for (const auto& d : domains) out << d.domain << '\t' << d.instances << '\t' << d.labels << '\n';
    out << "total\t" << claims << '\t' << '\n';
  }

  void write_text(std::ostream& out) const {
    out << "loaded " << loaded << " claims\n"
        << "label leaks: " << leak_modified << " claims edited, " << leak_discarded << " discarded\n"
        << "before rare-label filter: " << before_rare_filter << "\n"
        << "rare labels removed " << rare_removed << " claims\n"
        << "claims: " << claims << "\n"
        << "duplicate claims: " << duplicate_groups << " (" << disagreeing_duplicate_groups
        << " with differing labels)\n"
        << "entity-annotated: " << SuiteReport::fixed(100.0 * entity_annotated_fraction, 2) << "%\n"
        << "split: train " << train << ", dev " << dev << ", test " << test << "\n";
    write_tsv(out);
  }
};

/// Lexicon of one domain's labels usable for leak stripping.
inline std::set<std::string> leak_lexicon(const std::set<std::string>& labels, const std::set<std::string>& exclude) {
  std::set<std::string> out;
  for (const auto& l : labels) {
    const auto lower = to_lower(trim(l));
    if (lower.empty() || exclude.count(lower)) continue;
    if (std::all_of(lower.begin(), lower.end(), [](unsigned char c) { return std::isdigit(c) || c == '.'; }))
      continue;
    out.insert(lower);
  }
  return out;
}

struct PreparedCorpus {
  std::vector<ClaimRecord> records;
  CorpusSplit split;
  std::vector<DomainTask> tasks;
  DuplicateReport duplicates;
  PrepareSummary summary;
};

/// Stage name attached to errors raised inside a preparation stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what) : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

namespace detail {

template <typename F>
auto stage(const char* name, F&& f) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

}  // namespace detail

/// Cleansing steps applied to already-loaded records.
inline PreparedCorpus prepare_records(std::vector<ClaimRecord> records, const PrepareOptions& opts,
                                      const std::map<std::string, EntityAnnotation>* entities,
                                      const MergeTable* merge, Diagnostics* diag) {
  PreparedCorpus out;
  out.summary.loaded = records.size();

  records = detail::stage("strip-leaks", [&] {
    std::map<std::string, std::set<std::string>> labels;
    for (const auto& r : records) labels[r.domain].insert(r.label);
    std::map<std::string, std::set<std::string>> lexicons;
    for (const auto& [d, ls] : labels) lexicons[d] = leak_lexicon(ls, opts.leak_lexicon_exclude);
    std::vector<ClaimRecord> kept;
    for (const auto& r : records) {
      auto res = strip_label_leaks(r, lexicons[r.domain]);
      if (res.discard) {
        ++out.summary.leak_discarded;
        continue;
      }
      if (res.modified) ++out.summary.leak_modified;
      kept.push_back(std::move(res.record));
    }
    return kept;
  });

  if (merge) records = detail::stage("merge-labels", [&] { return merge_labels(std::move(records), *merge); });

  out.summary.before_rare_filter = records.size();
  auto filtered = detail::stage("rare-labels", [&] { return filter_rare_labels(records, opts.min_label_count, diag); });
  out.summary.rare_removed = filtered.removed_total();
  out.summary.dropped_domains = filtered.dropped_domains;
  records = std::move(filtered.records);

  if (entities) attach_entities(records, *entities);

  out.duplicates = detail::stage("duplicates", [&] { return resolve_duplicates(records); });
  out.summary.duplicate_groups = out.duplicates.duplicate_claims();
  out.summary.disagreeing_duplicate_groups = out.duplicates.disagreeing_groups();

  out.tasks = build_tasks(records);
  out.split = detail::stage("split", [&] { return stratified_split(records, opts.ratios, opts.split_seed, diag); });

  out.summary.claims = records.size();
  out.summary.entity_annotated_fraction = entity_stats(records).annotated_fraction();
  for (const auto& t : out.tasks) out.summary.domains.push_back({t.code, t.instance_count, t.labels.size()});
  out.summary.train = out.split.train.size();
  out.summary.dev = out.split.dev.size();
  out.summary.test = out.split.test.size();
  out.records = std::move(records);
  return out;
}

inline PreparedCorpus prepare_corpus(const PrepareOptions& opts, Diagnostics* diag = nullptr) {
  auto records = detail::stage("load", [&] { return load_corpus(opts.corpus, opts.domains); });
  std::optional<std::map<std::string, EntityAnnotation>> entities;
  if (opts.entities) {
    std::set<std::string> ids;
    for (const auto& r : records) ids.insert(r.claim_id);
    entities = detail::stage("entities", [&] { return load_entity_annotations(*opts.entities, ids, diag); });
  }
  std::optional<MergeTable> merge;
  if (opts.merge_table) merge = detail::stage("merge-labels", [&] { return load_merge_table(*opts.merge_table); });
  return prepare_records(std::move(records), opts, entities ? &*entities : nullptr, merge ? &*merge : nullptr,
                         diag);
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

struct EncodedCorpus {
  TrainingSet set;
  Vocabulary vocab;
  MetadataInventories inventories;
};

/// Records by split membership, in id order.
inline std::vector<ClaimRecord> select_records(const std::vector<ClaimRecord>& records,
                                               const std::vector<std::string>& ids) {
  std::map<std::string, const ClaimRecord*> by_id;
  for (const auto& r : records) by_id[r.claim_id] = &r;
  std::vector<ClaimRecord> out;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw Error("split lists unknown claim '" + id + "'");
    out.push_back(*it->second);
  }
  return out;
}

/// Builds vocabulary and metadata inventories from the training split
/// (unless supplied) and encodes all three splits.
inline EncodedCorpus encode_corpus(const std::vector<ClaimRecord>& records, const CorpusSplit& split,
                                   const std::map<std::string, EvidenceSet>& evidence, const ModelConfig& cfg,
                                   std::optional<Vocabulary> vocab = std::nullopt,
                                   std::optional<MetadataInventories> inventories = std::nullopt,
                                   Diagnostics* diag = nullptr) {
  EncodedCorpus out;
  out.set.tasks = build_tasks(records);
  const auto train = select_records(records, split.train);
  const bool with_evidence = uses_evidence(cfg.variant);
  static const std::map<std::string, EvidenceSet> kNoEvidence;
  const auto& ev = with_evidence ? evidence : kNoEvidence;

  if (vocab) {
    out.vocab = std::move(*vocab);
  } else {
    std::vector<std::vector<std::string>> seqs;
    for (const auto& r : train) {
      seqs.push_back(tokenize(r.claim_text));
      if (auto e = ev.find(r.claim_id); e != ev.end())
        for (const auto& s : e->second.snippets) seqs.push_back(evidence_tokens(s));
    }
    out.vocab = build_vocab(seqs);
  }
  out.inventories = inventories ? std::move(*inventories) : build_inventories(train);

  InstanceEncoding enc;
  enc.max_tokens = cfg.max_tokens;
  enc.metadata_fields = cfg.use_metadata ? cfg.metadata_fields : MetaFields::none();
  out.set.train = encode_instances(train, ev, out.vocab, out.inventories, out.set.tasks, enc, diag);
  out.set.dev = encode_instances(select_records(records, split.dev), ev, out.vocab, out.inventories, out.set.tasks,
                                 enc, diag);
  out.set.test = encode_instances(select_records(records, split.test), ev, out.vocab, out.inventories,
                                  out.set.tasks, enc, diag);
  out.set.vocab_size = out.vocab.size();
  out.set.metadata_size = out.inventories.total_size();
  return out;
}

/// Loads fixtures for every record that has one. Claims without a fixture
/// simply have no evidence.
inline std::map<std::string, EvidenceSet> load_evidence(const std::filesystem::path& dir,
                                                        const std::vector<ClaimRecord>& records) {
  std::map<std::string, EvidenceSet> out;
  for (const auto& r : records)
    if (auto set = try_load_fixture(dir, r.claim_id)) out[r.claim_id] = std::move(*set);
  return out;
}

}  // namespace veracity
