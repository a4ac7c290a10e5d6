#include <gtest/gtest.h>

#include <cmath>

#include "tempdir.hpp"
#include "veracity/params.hpp"

using namespace veracity;

namespace {

ParameterSet<double> small_set(double fill) {
  ParameterSet<double> p;
  p.add("w", {2, 3});
  p.add("b", {1, 3});
  for (auto& [name, t] : p)
    for (std::size_t i = 0; i < t.size(); ++i) t.values()[i] = fill + static_cast<double>(i) * 0.25;
  return p;
}

}  // namespace

TEST(ParameterSetTest, RegistryBasics) {
  auto p = small_set(0);
  EXPECT_EQ(p.size(), 2u);
  EXPECT_EQ(p.scalar_count(), 9u);
  EXPECT_TRUE(p.contains("w"));
  EXPECT_THROW(p.get("nope"), Error);
  EXPECT_THROW(p.add("w", {1, 1}), Error);
  EXPECT_TRUE(p.get("w").requires_grad());
}

TEST(ParameterSetTest, SnapshotRestore) {
  auto p = small_set(1);
  auto snap = p.snapshot();
  p.get("w").values()[0] = 99;
  p.restore(snap);
  EXPECT_EQ(p.get("w").values()[0], 1.0);
}

TEST(RmsPropTest, ZeroGradientLeavesParameter) {
  ParameterSet<double> p;
  auto& w = p.add("w", {1, 1});
  w.values()[0] = 0.7;
  w.grad_buffer()[0] = 0.0;
  RmsProp<double> opt;
  opt.step(p);
  EXPECT_EQ(w.values()[0], 0.7);
}

// Hand evaluation: s = 0.1 * 1^2, delta = 0.001 * 1 / sqrt(0.1 + 1e-8).
TEST(RmsPropTest, FirstStepOracle) {
  ParameterSet<double> p;
  auto& w = p.add("w", {1, 1});
  w.grad_buffer()[0] = 1.0;
  RmsProp<double> opt({0.001, 0.9, 1e-8});
  opt.step(p);
  const double expected = -0.001 / std::sqrt(0.1 + 1e-8);
  EXPECT_NEAR(w.values()[0], expected, 1e-15);
  EXPECT_NEAR(w.values()[0], -0.003162, 1e-6);
}

TEST(RmsPropTest, QuadraticBowl) {
  ParameterSet<double> p;
  auto& w = p.add("theta", {1, 1});
  w.values()[0] = 1.0;
  RmsProp<double> opt({0.01, 0.9, 1e-8});
  for (int i = 0; i < 200; ++i) {
    p.zero_grad();
    ad::Graph<double> g;
    g.backward(ad::sum_all(g, ad::mul(g, w, w)));
    opt.step(p);
  }
  EXPECT_LT(std::abs(w.values()[0]), 0.1);
}

// Default learning rate, scripted descent with the update rule written out.
TEST(RmsPropTest, MatchesScriptedDescent) {
  ParameterSet<double> p;
  auto& w = p.add("theta", {1, 1});
  w.values()[0] = 1.0;
  RmsProp<double> opt;
  double theta = 1.0, s = 0.0;
  for (int i = 0; i < 200; ++i) {
    p.zero_grad();
    ad::Graph<double> g;
    g.backward(ad::sum_all(g, ad::mul(g, w, w)));
    opt.step(p);
    const double grad = 2 * theta;
    s = 0.9 * s + 0.1 * grad * grad;
    theta -= 0.001 * grad / std::sqrt(s + 1e-8);
  }
  EXPECT_NEAR(w.values()[0], theta, 1e-12);
}

TEST(RmsPropTest, CheckedModeRejectsNonFinite) {
  ParameterSet<double> p;
  auto& w = p.add("w", {1, 1});
  w.grad_buffer()[0] = std::numeric_limits<double>::quiet_NaN();
  RmsPropConfig cfg;
  cfg.checked = true;
  RmsProp<double> opt(cfg);
  EXPECT_THROW(opt.step(p), NumericError);
}

TEST(Initializers, GlorotBounds) {
  Rng rng(2);
  auto t = ad::Tensor<double>::zeros({30, 20});
  init_glorot(t, rng);
  const double a = std::sqrt(6.0 / 50.0);
  for (double v : t.values()) {
    EXPECT_LE(std::abs(v), a);
  }
}

// ---------------------------------------------------------------------------

TEST(Checkpoint, RoundTrip) {
  vtest::TempDir dir;
  auto a = small_set(0.5);
  save_checkpoint(a, dir / "m.ckpt");
  auto b = small_set(0);
  load_checkpoint(b, dir / "m.ckpt");
  EXPECT_EQ(a.snapshot(), b.snapshot());
}

TEST(Checkpoint, CrossPrecision) {
  auto a = small_set(0.5);
  const auto bytes = serialize_checkpoint(a);
  ParameterSet<float> f;
  f.add("w", {2, 3});
  f.add("b", {1, 3});
  deserialize_checkpoint(bytes, f);
  EXPECT_FLOAT_EQ(f.get("w").values()[2], 1.0f);
}

TEST(Checkpoint, CorruptionDetected) {
  auto bytes = serialize_checkpoint(small_set(0.5));
  auto p = small_set(0);
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x01;
  EXPECT_THROW(deserialize_checkpoint(flipped, p), CorruptionError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3), p), CorruptionError);
  EXPECT_THROW(deserialize_checkpoint("garbage", p), CorruptionError);
}

TEST(Checkpoint, ShapeMismatchNamesTensor) {
  auto bytes = serialize_checkpoint(small_set(0.5));
  ParameterSet<double> other;
  other.add("w", {3, 2});
  other.add("b", {1, 3});
  try {
    deserialize_checkpoint(bytes, other);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("'w'"), std::string::npos);
  }
}

TEST(Checkpoint, LayoutHeader) {
  const auto bytes = serialize_checkpoint(small_set(0.5));
  EXPECT_EQ(bytes.substr(0, 4), "VRCK");
  // magic + version + count + 2 * (len + name + rows + cols + dtype) + values + checksum
  EXPECT_EQ(bytes.size(), 4u + 4 + 4 + (4 + 1 + 8 + 8 + 1) * 2 + 9 * 8 + 8);
}
