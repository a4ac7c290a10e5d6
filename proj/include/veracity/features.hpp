#pragma once
// Tokenization, vocabularies, entity annotations and metadata encodings,
// plus assembly of model-ready instances.

#include <algorithm>
#include <array>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "veracity/common.hpp"
#include "veracity/corpus.hpp"
#include "veracity/evidence.hpp"

namespace veracity {

using TokenId = std::int32_t;

/// Lowercases and splits on whitespace; every ASCII punctuation character
/// becomes its own token. Non-ASCII bytes are treated as word characters.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c >= 0x80 || c == '_') {
      current.push_back(static_cast<char>(c >= 'A' && c <= 'Z' ? c - 'A' + 'a' : c));
    } else if (is_space(ch)) {
      flush();
    } else {
      flush();
      tokens.emplace_back(1, ch);
    }
  }
  flush();
  return tokens;
}

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;

  Vocabulary() : tokens_{"<pad>", "<unk>"} { reindex(); }

  /// Tokens in id order, reserved entries included.
  explicit Vocabulary(std::vector<std::string> tokens, std::size_t min_frequency = 1)
      : tokens_(std::move(tokens)), min_frequency_(min_frequency) {
    if (tokens_.size() < 2 || tokens_[0] != "<pad>" || tokens_[1] != "<unk>")
      throw Error("vocabulary must start with <pad>, <unk>");
    reindex();
  }

  TokenId id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const noexcept { return tokens_.size(); }
  std::size_t min_frequency() const noexcept { return min_frequency_; }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  std::vector<TokenId> encode(const std::vector<std::string>& toks) const {
    std::vector<TokenId> ids;
    ids.reserve(toks.size());
    for (const auto& t : toks) ids.push_back(id(t));
    return ids;
  }

  std::uint64_t hash() const {
    Fnv1a h;
    for (const auto& t : tokens_) {
      h.update(t);
      h.update("\n", 1);
    }
    return h.digest();
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write vocabulary: " + path.string());
    for (const auto& t : tokens_) out << escape_field(t) << '\n';
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read vocabulary: " + path.string());
    std::vector<std::string> toks;
    std::string line;
    while (std::getline(in, line)) {
      chomp(line);
      toks.push_back(unescape_field(line));
    }
    return Vocabulary(std::move(toks));
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      index_.emplace(tokens_[i], static_cast<TokenId>(i));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t min_frequency_ = 1;
};

/// Ids by descending frequency, ties broken lexicographically.
inline Vocabulary build_vocab(const std::vector<std::vector<std::string>>& sequences,
                              std::size_t min_frequency = 1) {
  std::map<std::string, std::size_t> counts;
  for (const auto& seq : sequences)
    for (const auto& t : seq) ++counts[t];
  std::vector<std::pair<std::string, std::size_t>> items;
  for (auto& [t, n] : counts)
    if (n >= min_frequency && t != "<pad>" && t != "<unk>") items.emplace_back(t, n);
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens{"<pad>", "<unk>"};
  for (auto& [t, n] : items) tokens.push_back(t);
  return Vocabulary(std::move(tokens), min_frequency);
}

// ---------------------------------------------------------------------------
// Entity annotations (sidecar TSV: claim_id \t entity1|entity2|...)
// ---------------------------------------------------------------------------

struct EntityAnnotation {
  std::string claim_id;
  std::vector<std::string> entities;
  std::size_t count() const noexcept { return entities.size(); }
};

/// Annotations for claims not in `known_claims` are skipped with a warning.
/// An empty `known_claims` accepts everything.
inline std::map<std::string, EntityAnnotation> load_entity_annotations(
    const std::filesystem::path& path, const std::set<std::string>& known_claims = {},
    Diagnostics* diag = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open entity annotations: " + path.string());
  std::map<std::string, EntityAnnotation> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    chomp(line);
    if (line.empty()) continue;
    auto cols = split(line, '\t');
    if (cols.size() > 2) throw ParseError(path.string(), line_no, "expected 2 columns");
    EntityAnnotation a;
    a.claim_id = unescape_field(cols[0]);
    if (!known_claims.empty() && !known_claims.count(a.claim_id)) {
      warn(diag, "entity annotation for unknown claim '" + a.claim_id + "' skipped");
      continue;
    }
    if (cols.size() == 2 && !cols[1].empty())
      for (auto& e : split(cols[1], '|'))
        if (!e.empty()) a.entities.push_back(unescape_field(e));
    out[a.claim_id] = std::move(a);
  }
  return out;
}

inline void attach_entities(std::vector<ClaimRecord>& records,
                            const std::map<std::string, EntityAnnotation>& annotations) {
  for (auto& r : records) {
    auto it = annotations.find(r.claim_id);
    r.entities = it == annotations.end() ? std::vector<std::string>{} : it->second.entities;
  }
}

struct EntityStats {
  std::size_t total_entities = 0;
  std::size_t claims_with_entities = 0;
  std::size_t total_claims = 0;
  std::size_t unique_entities = 0;
  std::map<std::size_t, std::size_t> histogram;  // entities per claim -> claims (>= 1 only)

  double annotated_fraction() const {
    return total_claims == 0 ? 0.0
                             : static_cast<double>(claims_with_entities) /
                                   static_cast<double>(total_claims);
  }
  /// Most common entity count among annotated claims.
  std::size_t histogram_mode() const {
    std::size_t best = 0, best_n = 0;
    for (const auto& [k, n] : histogram)
      if (n > best_n) best = k, best_n = n;
    return best;
  }
};

inline EntityStats entity_stats(const std::vector<ClaimRecord>& records) {
  EntityStats s;
  std::set<std::string> unique;
  s.total_claims = records.size();
  for (const auto& r : records) {
    if (r.entities.empty()) continue;
    ++s.claims_with_entities;
    s.total_entities += r.entities.size();
    ++s.histogram[r.entities.size()];
    unique.insert(r.entities.begin(), r.entities.end());
  }
  s.unique_entities = unique.size();
  return s;
}

// ---------------------------------------------------------------------------
// Metadata
// ---------------------------------------------------------------------------

enum class MetaField : unsigned { kSpeaker = 1, kCategory = 2, kTags = 4, kEntities = 8 };

/// Bit set of metadata fields to encode.
struct MetaFields {
  unsigned bits = 0;

  static constexpr MetaFields all() { return {15}; }
  static constexpr MetaFields none() { return {0}; }
  constexpr bool has(MetaField f) const { return (bits & static_cast<unsigned>(f)) != 0; }
  constexpr MetaFields with(MetaField f) const { return {bits | static_cast<unsigned>(f)}; }
  bool operator==(const MetaFields&) const = default;

  /// "speaker+tags", "none", "all", ...
  std::string name() const {
    if (bits == 0) return "none";
    if (bits == 15) return "all";
    std::vector<std::string> parts;
    if (has(MetaField::kEntities)) parts.push_back("entity");
    if (has(MetaField::kSpeaker)) parts.push_back("speaker");
    if (has(MetaField::kCategory)) parts.push_back("category");
    if (has(MetaField::kTags)) parts.push_back("tags");
    return join(parts, "+");
  }

  static MetaFields parse(std::string_view s) {
    if (s == "none") return none();
    if (s == "all") return all();
    MetaFields out;
    for (const auto& p : split(s, '+')) {
      if (p == "speaker") out = out.with(MetaField::kSpeaker);
      else if (p == "category") out = out.with(MetaField::kCategory);
      else if (p == "tags") out = out.with(MetaField::kTags);
      else if (p == "entity" || p == "entities") out = out.with(MetaField::kEntities);
      else throw ConfigError("unknown metadata field '" + p + "'");
    }
    return out;
  }
};

/// Per-field value inventories (sorted). Built from training records only.
struct MetadataInventories {
  std::vector<std::string> speakers;
  std::vector<std::string> categories;
  std::vector<std::string> tags;
  std::vector<std::string> entities;

  std::size_t total_size() const {
    return speakers.size() + categories.size() + tags.size() + entities.size();
  }
  bool operator==(const MetadataInventories&) const = default;

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    const std::pair<const char*, const std::vector<std::string>*> parts[] = {
        {"speaker", &speakers}, {"category", &categories}, {"tags", &tags}, {"entities", &entities}};
    for (const auto& [name, values] : parts) {
      std::ofstream out(dir / (std::string(name) + ".txt"), std::ios::binary);
      for (const auto& v : *values) out << escape_field(v) << '\n';
    }
  }

  static MetadataInventories load(const std::filesystem::path& dir) {
    MetadataInventories inv;
    const std::pair<const char*, std::vector<std::string>*> parts[] = {
        {"speaker", &inv.speakers}, {"category", &inv.categories}, {"tags", &inv.tags},
        {"entities", &inv.entities}};
    for (const auto& [name, values] : parts) {
      std::ifstream in(dir / (std::string(name) + ".txt"), std::ios::binary);
      if (!in) throw Error("missing inventory file " + (dir / name).string());
      std::string line;
      while (std::getline(in, line)) {
        chomp(line);
        if (!line.empty()) values->push_back(unescape_field(line));
      }
    }
    return inv;
  }
};

inline MetadataInventories build_inventories(const std::vector<ClaimRecord>& train_records) {
  std::set<std::string> sp, ca, ta, en;
  for (const auto& r : train_records) {
    if (r.speaker) sp.insert(*r.speaker);
    if (r.category) ca.insert(*r.category);
    ta.insert(r.tags.begin(), r.tags.end());
    en.insert(r.entities.begin(), r.entities.end());
  }
  return {{sp.begin(), sp.end()}, {ca.begin(), ca.end()}, {ta.begin(), ta.end()},
          {en.begin(), en.end()}};
}

/// Binary blocks [speaker; category; tags; entities], stored sparsely as the
/// sorted global indices of the ones.
struct MetadataVector {
  std::array<std::size_t, 4> block_sizes{};
  std::vector<std::size_t> active;

  std::size_t length() const {
    return block_sizes[0] + block_sizes[1] + block_sizes[2] + block_sizes[3];
  }
  std::size_t block_offset(std::size_t block) const {
    std::size_t off = 0;
    for (std::size_t b = 0; b < block; ++b) off += block_sizes[b];
    return off;
  }
  std::vector<std::uint8_t> dense() const {
    std::vector<std::uint8_t> out(length(), 0);
    for (auto i : active) out[i] = 1;
    return out;
  }
  /// Dense view of one block (0 speaker, 1 category, 2 tags, 3 entities).
  std::vector<std::uint8_t> block(std::size_t b) const {
    auto d = dense();
    const auto off = block_offset(b);
    return {d.begin() + static_cast<std::ptrdiff_t>(off),
            d.begin() + static_cast<std::ptrdiff_t>(off + block_sizes[b])};
  }
  bool operator==(const MetadataVector&) const = default;
};

/// Reason, checker and dates are never encoded. Unseen values leave their
/// block at zero.
inline MetadataVector encode_metadata(const ClaimRecord& r, const MetadataInventories& inv,
                                      MetaFields fields = MetaFields::all()) {
  MetadataVector v;
  v.block_sizes = {inv.speakers.size(), inv.categories.size(), inv.tags.size(),
                   inv.entities.size()};
  auto mark = [&](const std::vector<std::string>& values, const std::string& value,
                  std::size_t offset) {
    auto it = std::lower_bound(values.begin(), values.end(), value);
    if (it != values.end() && *it == value)
      v.active.push_back(offset + static_cast<std::size_t>(it - values.begin()));
  };
  if (fields.has(MetaField::kSpeaker) && r.speaker) mark(inv.speakers, *r.speaker, 0);
  if (fields.has(MetaField::kCategory) && r.category)
    mark(inv.categories, *r.category, v.block_offset(1));
  if (fields.has(MetaField::kTags))
    for (const auto& t : r.tags) mark(inv.tags, t, v.block_offset(2));
  if (fields.has(MetaField::kEntities))
    for (const auto& e : r.entities) mark(inv.entities, e, v.block_offset(3));
  std::sort(v.active.begin(), v.active.end());
  v.active.erase(std::unique(v.active.begin(), v.active.end()), v.active.end());
  return v;
}

// ---------------------------------------------------------------------------
// Model-ready instances
// ---------------------------------------------------------------------------

struct EvidenceTokens {
  std::vector<TokenId> ids;
  std::string url;
  int rank = 0;
};

struct Instance {
  std::string claim_id;
  std::size_t task = 0;   // index into the task list
  std::size_t label = 0;  // global label id
  std::vector<TokenId> claim;
  std::vector<EvidenceTokens> evidence;  // rank order, at most 10
  std::vector<std::size_t> metadata;     // active global metadata indices
  bool has_metadata() const { return !metadata.empty(); }
};

struct InstanceEncoding {
  std::size_t max_tokens = 100;
  MetaFields metadata_fields = MetaFields::all();
};

/// Evidence text is title followed by snippet.
inline std::vector<std::string> evidence_tokens(const EvidenceSnippet& s) {
  auto toks = tokenize(s.title);
  auto body = tokenize(s.snippet_text);
  toks.insert(toks.end(), body.begin(), body.end());
  return toks;
}

inline std::vector<Instance> encode_instances(
    const std::vector<ClaimRecord>& records, const std::map<std::string, EvidenceSet>& evidence,
    const Vocabulary& vocab, const MetadataInventories& inventories,
    const std::vector<DomainTask>& tasks, const InstanceEncoding& opts = {},
    Diagnostics* diag = nullptr) {
  std::map<std::string, std::size_t> task_index;
  for (std::size_t i = 0; i < tasks.size(); ++i) task_index[tasks[i].code] = i;
  std::size_t truncated = 0;
  auto cap = [&](std::vector<TokenId> ids) {
    if (ids.size() > opts.max_tokens) {
      ids.resize(opts.max_tokens);
      ++truncated;
    }
    return ids;
  };
  std::vector<Instance> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    auto t = task_index.find(r.domain);
    if (t == task_index.end()) throw Error("record '" + r.claim_id + "' has no task");
    const auto local = tasks[t->second].local_index(r.label);
    if (!local) throw Error("label '" + r.label + "' not in task '" + r.domain + "'");
    Instance inst;
    inst.claim_id = r.claim_id;
    inst.task = t->second;
    inst.label = tasks[t->second].global_offset + *local;
    inst.claim = cap(vocab.encode(tokenize(r.claim_text)));
    if (auto e = evidence.find(r.claim_id); e != evidence.end()) {
      for (const auto& s : e->second.snippets) {
        if (inst.evidence.size() == kMaxEvidence) break;
        inst.evidence.push_back({cap(vocab.encode(evidence_tokens(s))), s.url, s.rank});
      }
    }
    inst.metadata = encode_metadata(r, inventories, opts.metadata_fields).active;
    out.push_back(std::move(inst));
  }
  if (truncated > 0)
    warn(diag, std::to_string(truncated) + " sequences truncated to " +
                   std::to_string(opts.max_tokens) + " tokens");
  return out;
}

}  // namespace veracity
