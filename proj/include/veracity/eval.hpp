#pragma once
// F1 metrics, confusion matrices and per-domain reports.

#include <algorithm>
#include <future>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "veracity/common.hpp"

namespace veracity {

struct F1Result {
  double micro = 0.0;
  double macro = 0.0;
  std::vector<double> per_label;
};

namespace detail {

inline double f1_from_counts(double tp, double fp, double fn) {
  const double denom = 2.0 * tp + fp + fn;
  return denom == 0.0 ? 0.0 : 2.0 * tp / denom;
}

inline void check_pair(std::size_t gold, std::size_t pred) {
  if (gold != pred)
    throw Error("gold and predicted sequences differ in length (" + std::to_string(gold) + " vs " +
                std::to_string(pred) + ")");
}

}  // namespace detail

/// Labels are indices in [0, num_labels). A label that never occurs in gold
/// or predictions contributes F1 = 0 to the macro average.
inline F1Result f1_scores(const std::vector<std::size_t>& gold, const std::vector<std::size_t>& pred,
                          std::size_t num_labels) {
  detail::check_pair(gold.size(), pred.size());
  std::vector<double> tp(num_labels, 0), fp(num_labels, 0), fn(num_labels, 0);
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] >= num_labels || pred[i] >= num_labels)
      throw Error("label index outside label set at position " + std::to_string(i));
    if (gold[i] == pred[i]) {
      tp[gold[i]] += 1;
    } else {
      fp[pred[i]] += 1;
      fn[gold[i]] += 1;
    }
  }
  F1Result r;
  double tp_all = 0, fp_all = 0, fn_all = 0;
  for (std::size_t l = 0; l < num_labels; ++l) {
    r.per_label.push_back(detail::f1_from_counts(tp[l], fp[l], fn[l]));
    tp_all += tp[l];
    fp_all += fp[l];
    fn_all += fn[l];
  }
  r.micro = detail::f1_from_counts(tp_all, fp_all, fn_all);
  r.macro = num_labels == 0 ? 0.0
                            : std::accumulate(r.per_label.begin(), r.per_label.end(), 0.0) /
                                  static_cast<double>(num_labels);
  return r;
}

/// String-label form; every label must belong to `labels`.
inline F1Result f1_scores(const std::vector<std::string>& gold, const std::vector<std::string>& pred,
                          const std::vector<std::string>& labels) {
  detail::check_pair(gold.size(), pred.size());
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < labels.size(); ++i) index[labels[i]] = i;
  auto lookup = [&](const std::string& l) {
    auto it = index.find(l);
    if (it == index.end()) throw Error("label '" + l + "' not in label set");
    return it->second;
  };
  std::vector<std::size_t> g, p;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    g.push_back(lookup(gold[i]));
    p.push_back(lookup(pred[i]));
  }
  return f1_scores(g, p, labels.size());
}

/// Rows are gold labels, columns predicted labels.
struct ConfusionMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<std::size_t>> counts;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t total() const {
    std::size_t t = 0;
    for (const auto& row : counts) t += std::accumulate(row.begin(), row.end(), std::size_t{0});
    return t;
  }
  std::size_t row_sum(std::size_t r) const {
    return std::accumulate(counts.at(r).begin(), counts.at(r).end(), std::size_t{0});
  }
  std::size_t col_sum(std::size_t c) const {
    std::size_t t = 0;
    for (const auto& row : counts) t += row.at(c);
    return t;
  }

  void write_csv(std::ostream& out) const {
    out << csv_field("gold\\predicted");
    for (const auto& l : labels) out << ',' << csv_field(l);
    out << '\n';
    for (std::size_t r = 0; r < labels.size(); ++r) {
      out << csv_field(labels[r]);
      for (auto c : counts[r]) out << ',' << c;
      out << '\n';
    }
  }
  std::string csv() const {
    std::ostringstream s;
    write_csv(s);
    return s.str();
  }

  static std::string csv_field(const std::string& v) {
    if (v.find_first_of(",\"\n\r") == std::string::npos) return v;
    std::string q = "\"";
    for (char c : v) {
      if (c == '"') q += '"';
      q += c;
    }
    return q + '"';
  }
};

inline ConfusionMatrix confusion_matrix(const std::vector<std::size_t>& gold, const std::vector<std::size_t>& pred,
                                        std::vector<std::string> labels) {
  detail::check_pair(gold.size(), pred.size());
  ConfusionMatrix m;
  m.counts.assign(labels.size(), std::vector<std::size_t>(labels.size(), 0));
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] >= labels.size() || pred[i] >= labels.size())
      throw Error("label index outside label set at position " + std::to_string(i));
    ++m.counts[gold[i]][pred[i]];
  }
  m.labels = std::move(labels);
  return m;
}

struct DomainReport {
  std::string domain;
  double micro_f1 = 0.0;
  double macro_f1 = 0.0;
  std::size_t support = 0;
  ConfusionMatrix confusion;
};

inline DomainReport evaluate_domain(std::string domain, std::vector<std::string> labels,
                                    const std::vector<std::size_t>& gold, const std::vector<std::size_t>& pred) {
  DomainReport r;
  const auto f1 = f1_scores(gold, pred, labels.size());
  r.domain = std::move(domain);
  r.micro_f1 = f1.micro;
  r.macro_f1 = f1.macro;
  r.support = gold.size();
  r.confusion = confusion_matrix(gold, pred, std::move(labels));
  return r;
}

struct SuiteReport {
  std::vector<DomainReport> domains;  // ordered by domain code
  double mean_micro_f1 = 0.0;
  double mean_macro_f1 = 0.0;

  static SuiteReport from(std::vector<DomainReport> reports) {
    SuiteReport s;
    std::sort(reports.begin(), reports.end(),
              [](const DomainReport& a, const DomainReport& b) { return a.domain < b.domain; });
    s.domains = std::move(reports);
    if (!s.domains.empty()) {
      for (const auto& d : s.domains) {
        s.mean_micro_f1 += d.micro_f1;
        s.mean_macro_f1 += d.macro_f1;
      }
      s.mean_micro_f1 /= static_cast<double>(s.domains.size());
      s.mean_macro_f1 /= static_cast<double>(s.domains.size());
    }
    return s;
  }

  const DomainReport* find(const std::string& domain) const {
    for (const auto& d : domains)
      if (d.domain == domain) return &d;
    return nullptr;
  }

  /// domain, support, labels, micro_f1, macro_f1; final row "avg".
  void write_tsv(std::ostream& out) const {
    out << "domain\tsupport\tlabels\tmicro_f1\tmacro_f1\n";
    for (const auto& d : domains)
      out << d.domain << '\t' << d.support << '\t' << d.confusion.size() << '\t' << fixed(d.micro_f1) << '\t'
          << fixed(d.macro_f1) << '\n';
    out << "avg\t\t\t" << fixed(mean_micro_f1) << '\t' << fixed(mean_macro_f1) << '\n';
  }

  void write_markdown(std::ostream& out) const {
    out << "| Domain | # Test | # Labels | Micro F1 | Macro F1 |\n|---|---:|---:|---:|---:|\n";
    for (const auto& d : domains)
      out << "| " << d.domain << " | " << d.support << " | " << d.confusion.size() << " | " << fixed(d.micro_f1)
          << " | " << fixed(d.macro_f1) << " |\n";
    out << "| avg | | | " << fixed(mean_micro_f1) << " | " << fixed(mean_macro_f1) << " |\n";
  }

  static std::string fixed(double v, int digits = 4) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(digits);
    s << v;
    return s.str();
  }
};

/// One domain's gold and predicted local label indices.
struct DomainPredictions {
  std::string domain;
  std::vector<std::string> labels;
  std::vector<std::size_t> gold;
  std::vector<std::size_t> pred;
};

/// Evaluates domains concurrently; the result is ordered by domain code.
inline SuiteReport evaluate_suite(const std::vector<DomainPredictions>& domains, bool parallel = true) {
  std::vector<DomainReport> reports;
  if (!parallel) {
    for (const auto& d : domains) reports.push_back(evaluate_domain(d.domain, d.labels, d.gold, d.pred));
    return SuiteReport::from(std::move(reports));
  }
  std::vector<std::future<DomainReport>> jobs;
  for (const auto& d : domains)
    jobs.push_back(std::async(std::launch::async, [&d] { return evaluate_domain(d.domain, d.labels, d.gold, d.pred); }));
  for (auto& j : jobs) reports.push_back(j.get());
  return SuiteReport::from(std::move(reports));
}

}  // namespace veracity
