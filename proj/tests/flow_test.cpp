#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "aligngen/flow.hpp"

using namespace aligngen;
using namespace aligngen::flow;

namespace {

Image filled(int h, int w, float v) { return Image(h, w, v); }

Image scaled(const Image& x, float a) {
  Image y = x;
  for (auto& v : y.pixels) v *= a;
  return y;
}

}  // namespace

TEST(FlowSample, Endpoints) {
  const Image x = filled(4, 4, 0.25f), n = gaussian_image(4, 4, 3);
  EXPECT_EQ(make_flow_sample(x, n, 0.0).x_t, x);
  EXPECT_EQ(make_flow_sample(x, n, 1.0).x_t, n);
  const auto mid = make_flow_sample(x, n, 0.5);
  for (std::size_t i = 0; i < x.pixels.size(); ++i) {
    EXPECT_FLOAT_EQ(mid.x_t.pixels[i], 0.5f * (x.pixels[i] + n.pixels[i]));
    EXPECT_FLOAT_EQ(mid.v_target.pixels[i], n.pixels[i] - x.pixels[i]);
  }
}

TEST(FlowSample, Errors) {
  const Image x = filled(4, 4, 0.f);
  EXPECT_THROW(make_flow_sample(x, x, 1.5), ArgumentError);
  EXPECT_THROW(make_flow_sample(x, x, -0.1), ArgumentError);
  EXPECT_THROW(make_flow_sample(x, filled(4, 8, 0.f), 0.5), ShapeError);
}

TEST(FlowSample, RandomDrawIsSeeded) {
  std::mt19937_64 a(9), b(9);
  const Image x = filled(8, 8, 0.5f);
  const auto sa = make_flow_sample(x, a), sb = make_flow_sample(x, b);
  EXPECT_EQ(sa.t, sb.t);
  EXPECT_EQ(sa.noise, sb.noise);
}

TEST(VelocityLoss, ZeroAtTargetAndSquaredOffset) {
  const auto s = make_flow_sample(filled(8, 8, 0.2f), gaussian_image(8, 8, 5), 0.3);
  ad::Tape<double> tape;
  const auto target = patchify<double>(s.v_target, 4);
  EXPECT_EQ(velocity_loss(tape.constant(target), s, 4).value()[0], 0.0);
  auto shifted = target;
  for (auto& v : shifted.data()) v += 0.7;
  EXPECT_NEAR(velocity_loss(tape.constant(shifted), s, 4).value()[0], 0.49, 1e-12);
}

TEST(VelocityLoss, MatchesMeanSquareOracle) {
  std::mt19937_64 rng(6);
  const auto s = make_flow_sample(gaussian_image(8, 8, rng), rng);
  ad::Tape<double> tape;
  const auto pred = ad::Tensor<double>::randn({4, 48}, rng);
  const auto target = patchify<double>(s.v_target, 4);
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - target[i]) * (pred[i] - target[i]);
  EXPECT_NEAR(velocity_loss(tape.constant(pred), s, 4).value()[0], acc / double(pred.size()), 1e-12);
}

TEST(Integrate, ConstantFieldSubtractsOnce) {
  const Image n = gaussian_image(6, 6, 11);
  const Field v = [](const Image& x, double) { return Image(x.height, x.width, 0.4f); };
  for (int steps : {1, 7, 28}) {
    const Image out = integrate(n, steps, v);
    for (std::size_t i = 0; i < n.pixels.size(); ++i) EXPECT_NEAR(out.pixels[i], n.pixels[i] - 0.4f, 1e-5);
  }
}

// Euler with v = x: each step multiplies by (1 - 1/steps).
TEST(Integrate, LinearFieldClosedForm) {
  const Image n = gaussian_image(8, 8, 12);
  const Field v = [](const Image& x, double) { return x; };
  const Image out = integrate(n, 28, v);
  const double factor = std::pow(1.0 - 1.0 / 28.0, 28);
  for (std::size_t i = 0; i < n.pixels.size(); ++i) EXPECT_NEAR(out.pixels[i], n.pixels[i] * factor, 1e-6);
}

TEST(Integrate, FirstOrderConvergence) {
  const Image n = gaussian_image(4, 4, 13);
  const Field v = [](const Image& x, double) { return x; };
  auto err = [&](int steps) {
    const Image out = integrate(n, steps, v);
    double e = 0;
    for (std::size_t i = 0; i < n.pixels.size(); ++i) e = std::max(e, std::abs(out.pixels[i] - n.pixels[i] * std::exp(-1.0)));
    return e;
  };
  const double e1 = err(16), e2 = err(32), e3 = err(64);
  EXPECT_NEAR(e2 / e1, 0.5, 0.05);
  EXPECT_NEAR(e3 / e2, 0.5, 0.05);
}

TEST(Integrate, TimeGridAndTelemetry) {
  std::vector<double> times;
  const Field v = [&](const Image& x, double t) {
    times.push_back(t);
    return Image(x.height, x.width, 1.0f);
  };
  std::vector<StepRecord> log;
  integrate(filled(2, 2, 0.f), 4, v, &log);
  EXPECT_EQ(times, (std::vector<double>{1.0, 0.75, 0.5, 0.25}));
  ASSERT_EQ(log.size(), 4u);
  EXPECT_EQ(log[0].step, 0);
  EXPECT_DOUBLE_EQ(log[3].v_norm, 1.0);
  const auto path = (std::filesystem::temp_directory_path() / "aligngen_telemetry.csv").string();
  write_telemetry(log, path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "step,t,v_norm");
  std::filesystem::remove(path);
  EXPECT_THROW(integrate(filled(2, 2, 0.f), 0, v), ArgumentError);
}

TEST(Integrate, NonFiniteStateIsAnError) {
  const Field v = [](const Image& x, double) { return Image(x.height, x.width, std::numeric_limits<float>::infinity()); };
  EXPECT_THROW(integrate(filled(2, 2, 0.f), 3, v), NumericError);
}

TEST(Guidance, UnitAndZeroSelectBranches) {
  const Field cond = [](const Image& x, double) { return scaled(x, 2.f); };
  const Field uncond = [](const Image& x, double) { return scaled(x, -1.f); };
  const Image x = gaussian_image(4, 4, 14);
  EXPECT_EQ(guided(cond, uncond, 1.0)(x, 0.5), cond(x, 0.5));
  EXPECT_EQ(guided(cond, uncond, 0.0)(x, 0.5), uncond(x, 0.5));
  const Image g = guided(cond, uncond, 3.5)(x, 0.5);
  for (std::size_t i = 0; i < x.pixels.size(); ++i) EXPECT_NEAR(g.pixels[i], -x.pixels[i] + 3.5f * 3.f * x.pixels[i], 1e-5);
}

TEST(Sample, DeterministicAndClamped) {
  const Field cond = [](const Image& x, double) { return scaled(x, 0.5f); };
  const Field uncond = [](const Image& x, double) { return x; };
  const SampleConfig cfg;
  EXPECT_EQ(cfg.steps, 28);
  EXPECT_EQ(cfg.guidance, 3.5);
  EXPECT_EQ(cfg.seed, 42u);
  const Image a = flow::sample(cond, uncond, 8, 8, cfg), b = flow::sample(cond, uncond, 8, 8, cfg);
  EXPECT_EQ(a, b);
  for (float v : a.pixels) {
    EXPECT_GE(v, 0.f);
    EXPECT_LE(v, 1.f);
  }
  SampleConfig other = cfg;
  other.seed = 43;
  EXPECT_NE(flow::sample(cond, uncond, 8, 8, other), a);
  other.steps = 0;
  EXPECT_THROW(flow::sample(cond, uncond, 8, 8, other), ArgumentError);
}
