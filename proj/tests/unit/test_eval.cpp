#include <gtest/gtest.h>

#include <sstream>

#include "veracity/eval.hpp"

using namespace veracity;

namespace {

// Per-label precision/recall computed by scanning the sequences, F1 as their
// harmonic mean. Undefined precision or recall counts as zero.
double oracle_label_f1(const std::vector<std::size_t>& gold, const std::vector<std::size_t>& pred, std::size_t l) {
  double predicted = 0, actual = 0, hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    predicted += pred[i] == l;
    actual += gold[i] == l;
    hits += gold[i] == l && pred[i] == l;
  }
  const double p = predicted > 0 ? hits / predicted : 0.0;
  const double r = actual > 0 ? hits / actual : 0.0;
  return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
}

double oracle_accuracy(const std::vector<std::size_t>& gold, const std::vector<std::size_t>& pred) {
  double hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hits += gold[i] == pred[i];
  return gold.empty() ? 0.0 : hits / static_cast<double>(gold.size());
}

std::vector<std::size_t> draw(Rng& rng, std::size_t n, std::size_t labels) {
  std::vector<std::size_t> v(n);
  for (auto& x : v) x = rng.below(labels);
  return v;
}

}  // namespace

TEST(F1Scores, SmallWorkedExample) {
  // gold A A B, predicted A B B: A has P=1 R=1/2, B has P=1/2 R=1.
  const auto r = f1_scores(std::vector<std::string>{"A", "A", "B"}, std::vector<std::string>{"A", "B", "B"},
                           std::vector<std::string>{"A", "B"});
  EXPECT_NEAR(r.micro, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.macro, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.per_label[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.per_label[1], 2.0 / 3.0, 1e-12);
}

TEST(F1Scores, PerfectAndHopeless) {
  const std::vector<std::size_t> gold{0, 1, 2, 1};
  auto perfect = f1_scores(gold, gold, 3);
  EXPECT_DOUBLE_EQ(perfect.micro, 1.0);
  EXPECT_DOUBLE_EQ(perfect.macro, 1.0);
  auto wrong = f1_scores(gold, {1, 2, 0, 0}, 3);
  EXPECT_DOUBLE_EQ(wrong.micro, 0.0);
  EXPECT_DOUBLE_EQ(wrong.macro, 0.0);
}

TEST(F1Scores, AbsentLabelScoresZeroInMacro) {
  // Label 2 never appears; it drags the macro mean down by a third.
  const std::vector<std::size_t> gold{0, 1}, pred{0, 1};
  auto r = f1_scores(gold, pred, 3);
  EXPECT_DOUBLE_EQ(r.micro, 1.0);
  EXPECT_NEAR(r.macro, 2.0 / 3.0, 1e-12);
}

TEST(F1Scores, MatchesScanningOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t labels = 1 + rng.below(8);
    const std::size_t n = rng.below(40);
    const auto gold = draw(rng, n, labels);
    const auto pred = draw(rng, n, labels);
    const auto r = f1_scores(gold, pred, labels);
    double macro = 0;
    for (std::size_t l = 0; l < labels; ++l) {
      const double f = oracle_label_f1(gold, pred, l);
      ASSERT_NEAR(r.per_label[l], f, 1e-12);
      macro += f;
    }
    ASSERT_NEAR(r.macro, macro / static_cast<double>(labels), 1e-12);
    // Single-label multiclass: pooled F1 is plain accuracy.
    ASSERT_NEAR(r.micro, oracle_accuracy(gold, pred), 1e-12);
  }
}

TEST(F1Scores, BoundedAndPermutationInvariant) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t labels = 2 + rng.below(6), n = 1 + rng.below(30);
    auto gold = draw(rng, n, labels), pred = draw(rng, n, labels);
    const auto a = f1_scores(gold, pred, labels);
    ASSERT_GE(a.micro, 0.0);
    ASSERT_LE(a.micro, 1.0);
    ASSERT_GE(a.macro, 0.0);
    ASSERT_LE(a.macro, 1.0);
    // Shuffling instances jointly changes nothing.
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<std::size_t> g2, p2;
    for (auto i : order) {
      g2.push_back(gold[i]);
      p2.push_back(pred[i]);
    }
    const auto b = f1_scores(g2, p2, labels);
    ASSERT_DOUBLE_EQ(a.micro, b.micro);
    ASSERT_DOUBLE_EQ(a.macro, b.macro);
  }
}

TEST(F1Scores, RejectsMismatchedInput) {
  EXPECT_THROW(f1_scores(std::vector<std::size_t>{0, 1}, std::vector<std::size_t>{0}, 2), Error);
  EXPECT_THROW(f1_scores(std::vector<std::size_t>{0, 3}, std::vector<std::size_t>{0, 1}, 2), Error);
  EXPECT_THROW(f1_scores(std::vector<std::string>{"A"}, std::vector<std::string>{"C"}, std::vector<std::string>{"A"}),
               Error);
}

TEST(ConfusionMatrixTest, PerfectPredictionsAreDiagonal) {
  const std::vector<std::size_t> gold{0, 1, 2, 2, 1};
  const auto m = confusion_matrix(gold, gold, {"a", "b", "c"});
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c)
      if (r != c) EXPECT_EQ(m.counts[r][c], 0u);
  EXPECT_EQ(m.counts[2][2], 2u);
  EXPECT_EQ(m.total(), 5u);
}

TEST(ConfusionMatrixTest, SwappedBinaryIsAntiDiagonal) {
  const std::vector<std::size_t> gold{0, 0, 1}, pred{1, 1, 0};
  const auto m = confusion_matrix(gold, pred, {"x", "y"});
  EXPECT_EQ(m.counts[0][0], 0u);
  EXPECT_EQ(m.counts[1][1], 0u);
  EXPECT_EQ(m.counts[0][1], 2u);
  EXPECT_EQ(m.counts[1][0], 1u);
}

TEST(ConfusionMatrixTest, RowAndColumnSumsAreLabelCounts) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t labels = 1 + rng.below(6), n = rng.below(50);
    const auto gold = draw(rng, n, labels), pred = draw(rng, n, labels);
    std::vector<std::string> names;
    for (std::size_t l = 0; l < labels; ++l) names.push_back("l" + std::to_string(l));
    const auto m = confusion_matrix(gold, pred, names);
    ASSERT_EQ(m.total(), n);
    for (std::size_t l = 0; l < labels; ++l) {
      ASSERT_EQ(m.row_sum(l), static_cast<std::size_t>(std::count(gold.begin(), gold.end(), l)));
      ASSERT_EQ(m.col_sum(l), static_cast<std::size_t>(std::count(pred.begin(), pred.end(), l)));
    }
  }
}

TEST(ConfusionMatrixTest, CsvHasLabelHeadersAndQuotes) {
  const auto m = confusion_matrix({0, 1}, {1, 1}, {"true", "half, true"});
  EXPECT_EQ(m.csv(), "gold\\predicted,true,\"half, true\"\ntrue,0,1\n\"half, true\",0,1\n");
}

TEST(Suite, MeansAreUnweightedOverDomains) {
  // A big perfect domain and a small hopeless one average to one half.
  DomainPredictions big{"bbb", {"a", "b"}, std::vector<std::size_t>(100, 0), std::vector<std::size_t>(100, 0)};
  DomainPredictions small{"aaa", {"a", "b"}, {0, 1}, {1, 0}};
  const auto s = evaluate_suite({big, small});
  EXPECT_DOUBLE_EQ(s.mean_micro_f1, 0.5);
  ASSERT_EQ(s.domains.size(), 2u);
  EXPECT_EQ(s.domains[0].domain, "aaa");  // ordered by code, not input order
  EXPECT_EQ(s.domains[1].support, 100u);
}

TEST(Suite, ParallelAndSerialReportsAreIdentical) {
  Rng rng(12);
  std::vector<DomainPredictions> domains;
  for (int d = 0; d < 9; ++d) {
    DomainPredictions p;
    p.domain = "d" + std::to_string(8 - d);
    const std::size_t labels = 2 + rng.below(5), n = 5 + rng.below(40);
    for (std::size_t l = 0; l < labels; ++l) p.labels.push_back("l" + std::to_string(l));
    p.gold = draw(rng, n, labels);
    p.pred = draw(rng, n, labels);
    domains.push_back(p);
  }
  std::ostringstream a, b, c;
  evaluate_suite(domains, true).write_tsv(a);
  evaluate_suite(domains, false).write_tsv(b);
  evaluate_suite(domains, true).write_tsv(c);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(a.str(), c.str());
}

TEST(Suite, TsvAndMarkdownLayout) {
  const auto s = evaluate_suite({{"pomt", {"true", "false"}, {0, 1, 1}, {0, 1, 0}}});
  std::ostringstream tsv, md;
  s.write_tsv(tsv);
  s.write_markdown(md);
  EXPECT_EQ(tsv.str(),
            "domain\tsupport\tlabels\tmicro_f1\tmacro_f1\n"
            "pomt\t3\t2\t0.6667\t0.6667\n"
            "avg\t\t\t0.6667\t0.6667\n");
  EXPECT_NE(md.str().find("| pomt | 3 | 2 | 0.6667 | 0.6667 |"), std::string::npos);
}

TEST(Suite, EmptySuite) {
  const auto s = evaluate_suite({});
  EXPECT_EQ(s.mean_micro_f1, 0.0);
  EXPECT_EQ(s.find("pomt"), nullptr);
}
