#pragma once
// Claim corpus: TSV loading, label-leak stripping, duplicate detection,
// label merging, rare-label filtering and label-stratified splitting.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "veracity/common.hpp"
#include "veracity/reference.hpp"

namespace veracity {

using Date = std::chrono::year_month_day;

struct ClaimRecord {
  std::string claim_id;
  std::string claim_text;
  std::string label;
  std::string domain;
  std::string claim_url;
  std::optional<std::string> reason;
  std::optional<std::string> category;
  std::optional<std::string> speaker;
  std::optional<std::string> checker;
  std::vector<std::string> tags;
  std::vector<std::string> entities;  // filled from the entity sidecar
  std::optional<std::string> article_title;
  std::optional<Date> publish_date;
  std::optional<Date> claim_date;

  bool operator==(const ClaimRecord&) const = default;
};

inline constexpr std::array<std::string_view, 13> kCorpusColumns{
    "claim_id", "claim_text", "label",         "claim_url",    "reason",
    "category", "speaker",    "checker",       "tags",         "article_title",
    "publish_date", "claim_date", "domain"};

inline std::optional<Date> parse_iso_date(std::string_view s) {
  if (s.size() < 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
  int y = 0;
  unsigned m = 0, d = 0;
  if (std::sscanf(std::string(s.substr(0, 10)).c_str(), "%4d-%2u-%2u", &y, &m, &d) != 3)
    return std::nullopt;
  Date date{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!date.ok()) return std::nullopt;
  return date;
}

inline std::string format_iso_date(const Date& d) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(d.year()),
                static_cast<unsigned>(d.month()), static_cast<unsigned>(d.day()));
  return buf;
}

/// Domain codes accepted by the loader. Defaults to the 26 released domains.
inline std::set<std::string> default_domain_codes() {
  std::set<std::string> out;
  for (auto c : reference::domain_codes()) out.emplace(c);
  return out;
}

namespace detail {

inline std::optional<std::string> optional_field(const std::string& raw) {
  if (raw.empty()) return std::nullopt;
  return unescape_field(raw);
}

inline std::string opt_out(const std::optional<std::string>& v) {
  return v ? escape_field(*v) : std::string();
}

}  // namespace detail

/// Parses corpus TSV from a stream. `source` names the input in errors.
inline std::vector<ClaimRecord> parse_corpus(std::istream& in, const std::string& source,
                                             const std::set<std::string>& domains =
                                                 default_domain_codes()) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(source, 1, "missing header row");
  chomp(line);
  const auto header = split(line, '\t');
  if (header.size() != kCorpusColumns.size() ||
      !std::equal(header.begin(), header.end(), kCorpusColumns.begin())) {
    throw ParseError(source, 1,
                     "header does not match expected columns: " + join(kCorpusColumns, ", "));
  }

  std::vector<ClaimRecord> records;
  std::set<std::string> seen_ids;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    chomp(line);
    if (line.empty()) continue;
    const auto cols = split(line, '\t');
    if (cols.size() != kCorpusColumns.size()) {
      throw ParseError(source, line_no,
                       "expected " + std::to_string(kCorpusColumns.size()) + " columns, found " +
                           std::to_string(cols.size()));
    }
    ClaimRecord r;
    r.claim_id = unescape_field(cols[0]);
    r.claim_text = unescape_field(cols[1]);
    r.label = unescape_field(cols[2]);
    r.claim_url = unescape_field(cols[3]);
    r.reason = detail::optional_field(cols[4]);
    r.category = detail::optional_field(cols[5]);
    r.speaker = detail::optional_field(cols[6]);
    r.checker = detail::optional_field(cols[7]);
    if (!cols[8].empty()) {
      for (auto& t : split(cols[8], '|'))
        if (!t.empty()) r.tags.push_back(unescape_field(t));
    }
    r.article_title = detail::optional_field(cols[9]);
    for (auto [idx, target] : {std::pair{10, &r.publish_date}, std::pair{11, &r.claim_date}}) {
      if (cols[idx].empty()) continue;
      auto d = parse_iso_date(cols[idx]);
      if (!d)
        throw ParseError(source, line_no,
                         "invalid ISO-8601 date in column " + std::string(kCorpusColumns[idx]));
      *target = *d;
    }
    r.domain = unescape_field(cols[12]);
    if (r.claim_id.empty()) throw ParseError(source, line_no, "empty claim_id");
    if (!domains.count(r.domain)) {
      throw ParseError(source, line_no,
                       "unknown domain code '" + r.domain + "'; valid codes: " + join(domains, ", "));
    }
    if (!seen_ids.insert(r.claim_id).second)
      throw ParseError(source, line_no, "duplicate claim_id '" + r.claim_id + "'");
    records.push_back(std::move(r));
  }
  return records;
}

inline std::vector<ClaimRecord> load_corpus(const std::filesystem::path& path,
                                            const std::set<std::string>& domains =
                                                default_domain_codes()) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open corpus file: " + path.string());
  return parse_corpus(in, path.string(), domains);
}

inline void write_corpus(std::ostream& out, const std::vector<ClaimRecord>& records) {
  out << join(kCorpusColumns, "\t") << '\n';
  for (const auto& r : records) {
    std::vector<std::string> tags;
    for (const auto& t : r.tags) tags.push_back(escape_field(t));
    out << escape_field(r.claim_id) << '\t' << escape_field(r.claim_text) << '\t'
        << escape_field(r.label) << '\t' << escape_field(r.claim_url) << '\t'
        << detail::opt_out(r.reason) << '\t' << detail::opt_out(r.category) << '\t'
        << detail::opt_out(r.speaker) << '\t' << detail::opt_out(r.checker) << '\t'
        << join(tags, "|") << '\t' << detail::opt_out(r.article_title) << '\t'
        << (r.publish_date ? format_iso_date(*r.publish_date) : "") << '\t'
        << (r.claim_date ? format_iso_date(*r.claim_date) : "") << '\t' << escape_field(r.domain)
        << '\n';
  }
}

inline void write_corpus(const std::filesystem::path& path,
                         const std::vector<ClaimRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write corpus file: " + path.string());
  write_corpus(out, records);
}

// ---------------------------------------------------------------------------
// Label-leak stripping
// ---------------------------------------------------------------------------

namespace detail {

inline bool is_word_byte(unsigned char c) {
  return std::isalnum(c) != 0 || c >= 0x80;
}

struct Span {
  std::size_t begin;
  std::size_t end;
};

/// Sentence spans: a sentence ends after a run of [.!?] followed by
/// whitespace or end of text.
inline std::vector<Span> sentence_spans(std::string_view text) {
  std::vector<Span> spans;
  std::size_t start = 0;
  while (start < text.size() && is_space(text[start])) ++start;
  std::size_t i = start;
  while (i < text.size()) {
    char c = text[i];
    if (c == '.' || c == '!' || c == '?') {
      std::size_t j = i;
      while (j < text.size() && (text[j] == '.' || text[j] == '!' || text[j] == '?')) ++j;
      if (j == text.size() || is_space(text[j])) {
        spans.push_back({start, j});
        while (j < text.size() && is_space(text[j])) ++j;
        start = j;
      }
      i = j;
    } else {
      ++i;
    }
  }
  std::size_t end = text.size();
  while (end > start && is_space(text[end - 1])) --end;
  if (end > start) spans.push_back({start, end});
  return spans;
}

inline std::size_t count_words(std::string_view s) {
  std::size_t n = 0;
  bool in_word = false;
  for (unsigned char c : s) {
    bool w = is_word_byte(c);
    if (w && !in_word) ++n;
    in_word = w;
  }
  return n;
}

/// Case-insensitive occurrences of lexicon entries inside `lower_text`,
/// respecting word boundaries. Longer entries win over overlapping shorter.
inline std::vector<Span> find_label_spans(std::string_view lower_text,
                                          const std::vector<std::string>& lexicon_longest_first) {
  std::vector<Span> found;
  for (const auto& label : lexicon_longest_first) {
    if (label.empty()) continue;
    std::size_t pos = 0;
    while ((pos = lower_text.find(label, pos)) != std::string_view::npos) {
      const std::size_t end = pos + label.size();
      bool left_ok = pos == 0 || !is_word_byte(lower_text[pos - 1]) ||
                     !is_word_byte(static_cast<unsigned char>(label.front()));
      bool right_ok = end == lower_text.size() || !is_word_byte(lower_text[end]) ||
                      !is_word_byte(static_cast<unsigned char>(label.back()));
      bool overlaps = false;
      for (const auto& f : found)
        if (pos < f.end && f.begin < end) overlaps = true;
      if (left_ok && right_ok && !overlaps) found.push_back({pos, end});
      pos = pos + 1;
    }
  }
  std::sort(found.begin(), found.end(), [](Span a, Span b) { return a.begin < b.begin; });
  return found;
}

inline std::string tidy_after_removal(std::string_view s) {
  std::string collapsed = collapse_whitespace(s);
  std::string out;
  for (std::size_t i = 0; i < collapsed.size(); ++i) {
    char c = collapsed[i];
    if (c == ' ' && i + 1 < collapsed.size() &&
        (collapsed[i + 1] == '.' || collapsed[i + 1] == ',' || collapsed[i + 1] == '!' ||
         collapsed[i + 1] == '?' || collapsed[i + 1] == ';' || collapsed[i + 1] == ':'))
      continue;
    out.push_back(c);
  }
  return trim(out);
}

}  // namespace detail

struct LeakStripResult {
  ClaimRecord record;
  bool modified = false;
  bool discard = false;  // stripping left no words behind
};

/// Removes veracity labels leaked into the first or last sentence of a claim.
///
/// A sentence whose matched label words make up at least half of its words
/// is dropped entirely; otherwise only the matched spans are cut out.
inline LeakStripResult strip_label_leaks(const ClaimRecord& record,
                                         const std::set<std::string>& label_lexicon) {
  LeakStripResult result{record, false, false};
  std::vector<std::string> lexicon;
  for (const auto& l : label_lexicon) lexicon.push_back(to_lower(l));
  std::sort(lexicon.begin(), lexicon.end(),
            [](const auto& a, const auto& b) { return a.size() != b.size() ? a.size() > b.size() : a < b; });

  std::string text = record.claim_text;
  auto spans = detail::sentence_spans(text);
  if (spans.empty()) {
    result.discard = true;
    return result;
  }
  std::vector<std::size_t> targets{spans.size() - 1};
  if (spans.size() > 1) targets.push_back(0);  // last first, keeps earlier offsets valid

  for (std::size_t idx : targets) {
    const auto sent = spans[idx];
    std::string_view sentence(text.data() + sent.begin, sent.end - sent.begin);
    const std::string lower = to_lower(sentence);
    const auto hits = detail::find_label_spans(lower, lexicon);
    if (hits.empty()) continue;
    result.modified = true;

    std::size_t label_words = 0;
    for (const auto& h : hits) label_words += detail::count_words(lower.substr(h.begin, h.end - h.begin));
    const std::size_t sentence_words = detail::count_words(sentence);
    if (2 * label_words >= sentence_words) {
      text.erase(sent.begin, sent.end - sent.begin);
    } else {
      std::string kept;
      std::size_t cursor = 0;
      for (const auto& h : hits) {
        kept.append(sentence.substr(cursor, h.begin - cursor));
        cursor = h.end;
      }
      kept.append(sentence.substr(cursor));
      text.replace(sent.begin, sent.end - sent.begin, kept);
    }
  }
  if (result.modified) {
    result.record.claim_text = detail::tidy_after_removal(text);
    if (detail::count_words(result.record.claim_text) == 0) result.discard = true;
  } else if (detail::count_words(text) == 0) {
    result.discard = true;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Duplicates
// ---------------------------------------------------------------------------

/// Lowercase, collapse whitespace, strip trailing punctuation.
inline std::string normalize_claim_text(std::string_view text) {
  std::string s = collapse_whitespace(to_lower(text));
  while (!s.empty() && (std::ispunct(static_cast<unsigned char>(s.back())) || s.back() == ' '))
    s.pop_back();
  return s;
}

struct DuplicateGroup {
  std::string normalized_text;
  std::vector<std::string> claim_ids;  // sorted
  bool labels_agree = true;
};

struct DuplicateReport {
  std::vector<DuplicateGroup> groups;  // ordered by first claim_id

  /// Number of claims that appear more than once (one per group).
  std::size_t duplicate_claims() const { return groups.size(); }
  std::size_t disagreeing_groups() const {
    std::size_t n = 0;
    for (const auto& g : groups) n += g.labels_agree ? 0 : 1;
    return n;
  }
  /// Total records that belong to some duplicate group.
  std::size_t member_records() const {
    std::size_t n = 0;
    for (const auto& g : groups) n += g.claim_ids.size();
    return n;
  }
  std::set<std::string> pinned_ids() const {
    std::set<std::string> ids;
    for (const auto& g : groups) ids.insert(g.claim_ids.begin(), g.claim_ids.end());
    return ids;
  }
};

inline DuplicateReport resolve_duplicates(const std::vector<ClaimRecord>& records) {
  std::map<std::string, std::vector<const ClaimRecord*>> by_text;
  for (const auto& r : records) by_text[normalize_claim_text(r.claim_text)].push_back(&r);
  DuplicateReport report;
  for (auto& [text, members] : by_text) {
    if (members.size() < 2) continue;
    DuplicateGroup g;
    g.normalized_text = text;
    for (const auto* m : members) {
      g.claim_ids.push_back(m->claim_id);
      if (m->label != members.front()->label) g.labels_agree = false;
    }
    std::sort(g.claim_ids.begin(), g.claim_ids.end());
    report.groups.push_back(std::move(g));
  }
  std::sort(report.groups.begin(), report.groups.end(),
            [](const auto& a, const auto& b) { return a.claim_ids.front() < b.claim_ids.front(); });
  return report;
}

// ---------------------------------------------------------------------------
// Label merging
// ---------------------------------------------------------------------------

/// domain -> (old label -> canonical label)
using MergeTable = std::map<std::string, std::map<std::string, std::string>>;

/// Reads "domain \t old \t canonical" lines; '#' starts a comment.
inline MergeTable load_merge_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open merge table: " + path.string());
  MergeTable table;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    chomp(line);
    if (line.empty() || line.front() == '#') continue;
    auto cols = split(line, '\t');
    if (cols.size() != 3) throw ParseError(path.string(), line_no, "expected 3 columns");
    table[unescape_field(cols[0])][unescape_field(cols[1])] = unescape_field(cols[2]);
  }
  return table;
}

/// Rewrites labels per domain. Targets must already occur in the domain and
/// must not themselves be merge sources, so one application is final.
inline std::vector<ClaimRecord> merge_labels(std::vector<ClaimRecord> records,
                                             const MergeTable& table) {
  std::map<std::string, std::set<std::string>> inventory;
  for (const auto& r : records) inventory[r.domain].insert(r.label);
  for (const auto& [domain, mapping] : table) {
    for (const auto& [from, to] : mapping) {
      if (mapping.count(to))
        throw ConfigError("merge table for '" + domain + "' chains '" + from + "' -> '" + to +
                          "' into another merge source");
      auto it = inventory.find(domain);
      if (it == inventory.end() || !it->second.count(to))
        throw ConfigError("merge target '" + to + "' absent from domain '" + domain + "'");
    }
  }
  for (auto& r : records) {
    auto d = table.find(r.domain);
    if (d == table.end()) continue;
    auto m = d->second.find(r.label);
    if (m != d->second.end()) r.label = m->second;
  }
  return records;
}

// ---------------------------------------------------------------------------
// Rare-label filtering
// ---------------------------------------------------------------------------

struct RareLabelFilterResult {
  std::vector<ClaimRecord> records;
  std::map<std::pair<std::string, std::string>, std::size_t> removed;  // (domain,label) -> count
  std::vector<std::string> dropped_domains;
  std::size_t input_count = 0;

  std::size_t removed_total() const {
    std::size_t n = 0;
    for (const auto& [k, v] : removed) n += v;
    return n;
  }
};

inline RareLabelFilterResult filter_rare_labels(const std::vector<ClaimRecord>& records,
                                                std::size_t min_count = 5,
                                                Diagnostics* diag = nullptr) {
  std::map<std::pair<std::string, std::string>, std::size_t> counts;
  for (const auto& r : records) ++counts[{r.domain, r.label}];
  RareLabelFilterResult out;
  out.input_count = records.size();
  std::set<std::string> all_domains, surviving_domains;
  for (const auto& [key, n] : counts) {
    all_domains.insert(key.first);
    if (n < min_count)
      out.removed[key] = n;
    else
      surviving_domains.insert(key.first);
  }
  for (const auto& r : records)
    if (!out.removed.count({r.domain, r.label})) out.records.push_back(r);
  for (const auto& d : all_domains) {
    if (!surviving_domains.count(d)) {
      out.dropped_domains.push_back(d);
      warn(diag, "domain '" + d + "' lost all labels below min_count " + std::to_string(min_count) +
                     "; dropped");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

/// One domain's label inventory placed in the global label space.
struct DomainTask {
  std::string code;
  std::vector<std::string> labels;
  std::size_t global_offset = 0;
  std::size_t instance_count = 0;

  std::optional<std::size_t> local_index(std::string_view label) const {
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == label) return i;
    return std::nullopt;
  }
  bool operator==(const DomainTask&) const = default;
};

/// Domains ordered by code; labels ordered lexicographically; contiguous
/// global offsets.
inline std::vector<DomainTask> build_tasks(const std::vector<ClaimRecord>& records) {
  std::map<std::string, std::map<std::string, std::size_t>> counts;
  for (const auto& r : records) ++counts[r.domain][r.label];
  std::vector<DomainTask> tasks;
  std::size_t offset = 0;
  for (const auto& [code, labels] : counts) {
    DomainTask t;
    t.code = code;
    t.global_offset = offset;
    for (const auto& [label, n] : labels) {
      t.labels.push_back(label);
      t.instance_count += n;
    }
    offset += t.labels.size();
    tasks.push_back(std::move(t));
  }
  return tasks;
}

inline std::size_t total_labels(const std::vector<DomainTask>& tasks) {
  return tasks.empty() ? 0 : tasks.back().global_offset + tasks.back().labels.size();
}

// ---------------------------------------------------------------------------
// Stratified split
// ---------------------------------------------------------------------------

struct SplitRatios {
  double train = 0.8;
  double dev = 0.1;
  double test = 0.1;
};

struct CorpusSplit {
  std::vector<std::string> train;
  std::vector<std::string> dev;
  std::vector<std::string> test;
  std::uint64_t seed = 0;

  std::size_t size() const { return train.size() + dev.size() + test.size(); }
  bool operator==(const CorpusSplit&) const = default;
};

/// Label-stratified split per (domain, label). Members of duplicate groups go
/// to train before the remainder is stratified; strata under 3 records go
/// wholly to train. Output id lists are sorted.
inline CorpusSplit stratified_split(const std::vector<ClaimRecord>& records, SplitRatios ratios,
                                    std::uint64_t seed, Diagnostics* diag = nullptr) {
  if (ratios.train < 0 || ratios.dev < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.dev + ratios.test - 1.0) > 1e-9)
    throw ConfigError("split ratios must be non-negative and sum to 1");

  CorpusSplit split;
  split.seed = seed;
  const auto pinned = resolve_duplicates(records).pinned_ids();

  std::map<std::pair<std::string, std::string>, std::vector<std::string>> strata;
  for (const auto& r : records) {
    if (pinned.count(r.claim_id))
      split.train.push_back(r.claim_id);
    else
      strata[{r.domain, r.label}].push_back(r.claim_id);
  }

  Rng rng(seed);
  for (auto& [key, ids] : strata) {
    std::sort(ids.begin(), ids.end());
    if (ids.size() < 3) {
      warn(diag, "stratum (" + key.first + ", " + key.second + ") has " +
                     std::to_string(ids.size()) + " records; all assigned to train");
      split.train.insert(split.train.end(), ids.begin(), ids.end());
      continue;
    }
    Rng stratum_rng = rng.fork(fnv1a(key.first + '\t' + key.second));
    stratum_rng.shuffle(ids);
    const double n = static_cast<double>(ids.size());
    const auto n_dev = static_cast<std::size_t>(std::floor(n * ratios.dev + 0.5));
    const auto n_test = static_cast<std::size_t>(std::floor(n * ratios.test + 0.5));
    const std::size_t n_train = ids.size() - std::min(ids.size(), n_dev + n_test);
    split.train.insert(split.train.end(), ids.begin(), ids.begin() + n_train);
    split.dev.insert(split.dev.end(), ids.begin() + n_train, ids.begin() + n_train + n_dev);
    split.test.insert(split.test.end(), ids.begin() + n_train + n_dev, ids.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.dev.begin(), split.dev.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

/// Writes train.ids / dev.ids / test.ids, each with a provenance header.
inline void write_split_manifests(const CorpusSplit& split, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::pair<const char*, const std::vector<std::string>*> parts[] = {
      {"train", &split.train}, {"dev", &split.dev}, {"test", &split.test}};
  for (const auto& [name, ids] : parts) {
    std::ofstream out(dir / (std::string(name) + ".ids"), std::ios::binary);
    if (!out) throw Error("cannot write split manifest in " + dir.string());
    out << "# split=" << name << " seed=" << split.seed << " count=" << ids->size()
        << " total=" << split.size() << '\n';
    for (const auto& id : *ids) out << id << '\n';
  }
}

inline CorpusSplit read_split_manifests(const std::filesystem::path& dir) {
  CorpusSplit split;
  const std::pair<const char*, std::vector<std::string>*> parts[] = {
      {"train", &split.train}, {"dev", &split.dev}, {"test", &split.test}};
  for (const auto& [name, ids] : parts) {
    const auto path = dir / (std::string(name) + ".ids");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("missing split manifest: " + path.string());
    std::string line;
    while (std::getline(in, line)) {
      chomp(line);
      if (line.empty()) continue;
      if (line.front() == '#') {
        auto pos = line.find("seed=");
        if (pos != std::string::npos) split.seed = std::stoull(line.substr(pos + 5));
        continue;
      }
      ids->push_back(line);
    }
  }
  return split;
}

}  // namespace veracity
