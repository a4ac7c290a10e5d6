#pragma once
// Ranked evidence snippets per claim: on-disk fixture store, pluggable
// search clients, URL-domain statistics.

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "veracity/common.hpp"

namespace veracity {

inline constexpr std::size_t kMaxEvidence = 10;

struct EvidenceSnippet {
  std::string claim_id;
  int rank = 0;  // 1..10
  std::string title;
  std::string snippet_text;
  std::string url;
  std::optional<std::string> last_update;

  bool operator==(const EvidenceSnippet&) const = default;
};

struct EvidenceSet {
  std::string claim_id;
  std::vector<EvidenceSnippet> snippets;  // ascending rank

  std::size_t available_count() const noexcept { return snippets.size(); }
  bool operator==(const EvidenceSet&) const = default;
};

/// Throws if ranks are out of range, repeated or not ascending, or if the
/// set holds more than ten snippets.
inline void validate(const EvidenceSet& set) {
  if (set.snippets.size() > kMaxEvidence)
    throw Error("evidence set for '" + set.claim_id + "' has more than 10 snippets");
  int prev = 0;
  for (const auto& s : set.snippets) {
    if (s.rank < 1 || s.rank > static_cast<int>(kMaxEvidence) || s.rank <= prev)
      throw Error("evidence ranks for '" + set.claim_id + "' must be unique, ascending, in 1..10");
    prev = s.rank;
  }
}

// ---------------------------------------------------------------------------
// Fixture store: <dir>/<claim_id>, one snippet per line
//   rank \t title \t snippet \t url \t timestamp
// followed by a checksum trailer "#fnv1a64 \t <hex>" over the preceding bytes.
// Files without a trailer (e.g. externally produced) are accepted as-is.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_claim_id_as_filename(const std::string& id) {
  if (id.empty() || id == "." || id == ".." || id.find('/') != std::string::npos ||
      id.find('\\') != std::string::npos)
    throw Error("claim_id '" + id + "' cannot name a fixture file");
}

inline std::string serialize_snippets(const EvidenceSet& set) {
  std::string body;
  for (const auto& s : set.snippets) {
    body += std::to_string(s.rank);
    body += '\t';
    body += escape_field(s.title);
    body += '\t';
    body += escape_field(s.snippet_text);
    body += '\t';
    body += escape_field(s.url);
    body += '\t';
    body += s.last_update ? escape_field(*s.last_update) : std::string();
    body += '\n';
  }
  return body;
}

}  // namespace detail

inline std::filesystem::path fixture_path(const std::filesystem::path& dir,
                                          const std::string& claim_id) {
  detail::check_claim_id_as_filename(claim_id);
  return dir / claim_id;
}

inline void store_fixture(const EvidenceSet& set, const std::filesystem::path& dir) {
  validate(set);
  std::filesystem::create_directories(dir);
  const auto path = fixture_path(dir, set.claim_id);
  const std::string body = detail::serialize_snippets(set);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write fixture: " + tmp);
    out << body << "#fnv1a64\t" << to_hex(fnv1a(body)) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

inline EvidenceSet parse_fixture(std::string_view content, const std::string& claim_id,
                                 const std::string& source) {
  EvidenceSet set;
  set.claim_id = claim_id;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < content.size()) {
    std::size_t nl = content.find('\n', pos);
    if (nl == std::string_view::npos) nl = content.size();
    std::string line(content.substr(pos, nl - pos));
    const std::size_t line_start = pos;
    pos = nl + 1;
    ++line_no;
    chomp(line);
    if (line.empty()) continue;
    if (line.rfind("#fnv1a64\t", 0) == 0) {
      const auto expected = line.substr(9);
      const auto actual = to_hex(fnv1a(content.substr(0, line_start)));
      if (expected != actual)
        throw CorruptionError("checksum mismatch in fixture " + source + " (expected " + expected +
                              ", computed " + actual + ")");
      break;
    }
    auto cols = split(line, '\t');
    if (cols.size() != 4 && cols.size() != 5)
      throw ParseError(source, line_no, "expected 4 or 5 columns");
    EvidenceSnippet s;
    s.claim_id = claim_id;
    try {
      s.rank = std::stoi(cols[0]);
    } catch (const std::exception&) {
      throw ParseError(source, line_no, "rank is not an integer");
    }
    s.title = unescape_field(cols[1]);
    s.snippet_text = unescape_field(cols[2]);
    s.url = unescape_field(cols[3]);
    if (cols.size() == 5 && !cols[4].empty()) s.last_update = unescape_field(cols[4]);
    set.snippets.push_back(std::move(s));
  }
  validate(set);
  return set;
}

/// Returns nullopt when no fixture exists for the claim.
inline std::optional<EvidenceSet> try_load_fixture(const std::filesystem::path& dir,
                                                   const std::string& claim_id) {
  const auto path = fixture_path(dir, claim_id);
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_fixture(ss.str(), claim_id, path.string());
}

inline EvidenceSet load_fixture(const std::filesystem::path& dir, const std::string& claim_id) {
  auto set = try_load_fixture(dir, claim_id);
  if (!set) throw Error("no fixture for claim '" + claim_id + "' in " + dir.string());
  return std::move(*set);
}

// ---------------------------------------------------------------------------
// Search clients
// ---------------------------------------------------------------------------

struct SearchResult {
  std::string title;
  std::string snippet;
  std::string url;
  std::optional<std::string> last_update;
};

/// A search backend. Results are returned in rank order.
class SearchClient {
 public:
  virtual ~SearchClient() = default;
  virtual std::vector<SearchResult> search(const std::string& claim_id, const std::string& query,
                                           Diagnostics* diag) = 0;
};

/// Serves stored fixtures; unknown claims yield no results and a warning.
class FixtureClient final : public SearchClient {
 public:
  explicit FixtureClient(std::filesystem::path dir) : dir_(std::move(dir)) {}

  std::vector<SearchResult> search(const std::string& claim_id, const std::string&,
                                   Diagnostics* diag) override {
    auto set = try_load_fixture(dir_, claim_id);
    if (!set) {
      warn(diag, "no evidence fixture for claim '" + claim_id + "'");
      return {};
    }
    std::vector<SearchResult> out;
    for (auto& s : set->snippets)
      out.push_back({std::move(s.title), std::move(s.snippet_text), std::move(s.url),
                     std::move(s.last_update)});
    return out;
  }

  const std::filesystem::path& dir() const noexcept { return dir_; }

 private:
  std::filesystem::path dir_;
};

/// Submits the claim verbatim (unquoted) and keeps the ten best results.
inline EvidenceSet fetch_snippets(const std::string& claim_id, const std::string& claim_text,
                                  SearchClient& client, Diagnostics* diag = nullptr) {
  if (trim(claim_text).empty()) throw Error("cannot search for an empty claim");
  auto results = client.search(claim_id, claim_text, diag);
  EvidenceSet set;
  set.claim_id = claim_id;
  for (std::size_t i = 0; i < results.size() && i < kMaxEvidence; ++i) {
    auto& r = results[i];
    set.snippets.push_back({claim_id, static_cast<int>(i + 1), std::move(r.title),
                            std::move(r.snippet), std::move(r.url), std::move(r.last_update)});
  }
  return set;
}

// ---------------------------------------------------------------------------
// URL-domain statistics
// ---------------------------------------------------------------------------

/// "scheme://host/" for a URL; the raw string if it has no scheme.
inline std::string url_domain(std::string_view url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string_view::npos) return std::string(url);
  const auto host_start = scheme_end + 3;
  auto host_end = url.find_first_of("/?#", host_start);
  if (host_end == std::string_view::npos) host_end = url.size();
  return to_lower(url.substr(0, host_end)) + "/";
}

struct DomainShare {
  std::string domain;
  double percentage = 0.0;
  std::size_t count = 0;
};

/// Share of all snippets per URL domain, descending (ties by name).
inline std::vector<DomainShare> domain_frequency_report(const std::vector<EvidenceSet>& sets,
                                                        std::size_t top_n = 30) {
  std::map<std::string, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& set : sets) {
    for (const auto& s : set.snippets) {
      ++counts[url_domain(s.url)];
      ++total;
    }
  }
  std::vector<DomainShare> out;
  for (const auto& [d, n] : counts)
    out.push_back({d, 100.0 * static_cast<double>(n) / static_cast<double>(total), n});
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.count != b.count ? a.count > b.count : a.domain < b.domain;
  });
  if (out.size() > top_n) out.resize(top_n);
  return out;
}

}  // namespace veracity
