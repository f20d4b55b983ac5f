#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "aligngen/diffcore/ops.hpp"
#include "aligngen/errors.hpp"
#include "aligngen/image.hpp"

// Rectified flow: linear data/noise interpolant, velocity-matching loss and
// an Euler sampler with classifier-free guidance.
namespace aligngen::flow {

struct FlowSample {
  Image x_data;
  Image noise;
  double t = 0.0;
  Image x_t;
  Image v_target;
};

template <typename Rng>
Image gaussian_image(int height, int width, Rng& rng) {
  Image img(height, width);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (auto& v : img.pixels) v = n(rng);
  return img;
}

inline Image gaussian_image(int height, int width, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return gaussian_image(height, width, rng);
}

// x_t = (1 - t) x + t n, v = n - x.
inline FlowSample make_flow_sample(const Image& x_data, const Image& noise, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw ArgumentError("make_flow_sample: t must lie in [0, 1]");
  if (noise.height != x_data.height || noise.width != x_data.width) {
    throw ShapeError("make_flow_sample: noise and data shapes differ");
  }
  FlowSample s{x_data, noise, t, Image(x_data.height, x_data.width), Image(x_data.height, x_data.width)};
  const float tf = static_cast<float>(t);
  for (std::size_t i = 0; i < x_data.pixels.size(); ++i) {
    s.x_t.pixels[i] = (1.0f - tf) * x_data.pixels[i] + tf * noise.pixels[i];
    s.v_target.pixels[i] = noise.pixels[i] - x_data.pixels[i];
  }
  // keep the endpoints exact
  if (t == 0.0) s.x_t = x_data;
  if (t == 1.0) s.x_t = noise;
  return s;
}

template <typename Rng>
FlowSample make_flow_sample(const Image& x_data, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double t = u(rng);
  return make_flow_sample(x_data, gaussian_image(x_data.height, x_data.width, rng), t);
}

// Mean squared error between predicted patches and the target velocity.
template <typename T>
ad::Var<T> velocity_loss(ad::Var<T> v_pred, const FlowSample& s, int patch) {
  return ad::mse(v_pred, v_pred.tape->constant(patchify<T>(s.v_target, patch)));
}

struct SampleConfig {
  int steps = 28;
  double guidance = 3.5;
  std::uint64_t seed = 42;

  void validate() const {
    if (steps < 1) throw ArgumentError("sample: steps must be >= 1");
    if (!std::isfinite(guidance)) throw ArgumentError("sample: guidance must be finite");
  }
};

struct StepRecord {
  int step = 0;
  double t = 0.0;
  double v_norm = 0.0;
};

using Field = std::function<Image(const Image& x, double t)>;

inline double rms(const Image& img) {
  double acc = 0.0;
  for (float v : img.pixels) acc += double(v) * v;
  return std::sqrt(acc / static_cast<double>(img.pixels.size()));
}

// Euler from t = 1 to t = 0 on a uniform grid: x <- x - dt * v(x, t).
inline Image integrate(Image x, int steps, const Field& v, std::vector<StepRecord>* log = nullptr) {
  if (steps < 1) throw ArgumentError("integrate: steps must be >= 1");
  const double dt = 1.0 / steps;
  for (int s = steps; s >= 1; --s) {
    const double t = s * dt;
    Image vel = v(x, t);
    if (vel.height != x.height || vel.width != x.width) throw ShapeError("integrate: field changed the shape");
    for (std::size_t i = 0; i < x.pixels.size(); ++i) {
      x.pixels[i] -= static_cast<float>(dt) * vel.pixels[i];
      if (!std::isfinite(x.pixels[i])) throw NumericError("integrate: non-finite state at t=" + std::to_string(t));
    }
    if (log) log->push_back({steps - s, t, rms(vel)});
  }
  return x;
}

// v_u + g (v_c - v_u). g = 1 and g = 0 evaluate a single branch.
inline Field guided(const Field& cond, const Field& uncond, double g) {
  if (g == 1.0) return cond;
  if (g == 0.0) return uncond;
  return [cond, uncond, g](const Image& x, double t) {
    Image vc = cond(x, t);
    const Image vu = uncond(x, t);
    const float gf = static_cast<float>(g);
    for (std::size_t i = 0; i < vc.pixels.size(); ++i) vc.pixels[i] = vu.pixels[i] + gf * (vc.pixels[i] - vu.pixels[i]);
    return vc;
  };
}

inline Image clamp01(Image img) {
  for (auto& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

inline Image sample(const Field& cond, const Field& uncond, int height, int width, const SampleConfig& cfg,
                    std::vector<StepRecord>* log = nullptr) {
  cfg.validate();
  return clamp01(integrate(gaussian_image(height, width, cfg.seed), cfg.steps, guided(cond, uncond, cfg.guidance), log));
}

inline void write_telemetry(const std::vector<StepRecord>& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("telemetry: cannot write " + path);
  out << "step,t,v_norm\n";
  for (const auto& r : log) out << r.step << ',' << r.t << ',' << r.v_norm << '\n';
}

}  // namespace aligngen::flow
