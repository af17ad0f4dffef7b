#pragma once

#include <cmath>
#include <functional>
#include <set>
#include <vector>

#include "pim/geometry.hpp"
#include "pim/imitator.hpp"
#include "pim/rng.hpp"
#include "pim/scene.hpp"
#include "pim/tensor.hpp"

namespace testing {

using pim::cell_center;
using pim::GridSpec;
using pim::OrientedBox;
using pim::Rng;
using pim::uniform;
using pim::uniform_int;
using pim::Vec2;

inline pim::OrientedBox random_box(pim::Rng& rng, double spread = 3.0) {
  return {pim::uniform(rng, -spread, spread), pim::uniform(rng, -spread, spread), pim::uniform(rng, 0.5, 3.0),
          pim::uniform(rng, 0.5, 5.0), pim::uniform(rng, -3.1, 3.1)};
}

inline pim::nn::Tensor random_tensor(pim::Rng& rng, pim::nn::Shape shape, double lo = -1.0, double hi = 1.0,
                                     bool requires_grad = true) {
  std::vector<double> v(pim::nn::numel(shape));
  for (auto& x : v) x = pim::uniform(rng, lo, hi);
  return pim::nn::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||, floor)
/// of the gradient of the scalar f with respect to every input, by central
/// differences.
inline double gradient_error(const std::function<pim::nn::Tensor(const std::vector<pim::nn::Tensor>&)>& f,
                             std::vector<pim::nn::Tensor> inputs, double h = 1e-6, double floor = 1e-7) {
  for (auto& t : inputs) t.zero_grad();
  pim::nn::backward(f(inputs));
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.numel(), 0.0);
    const auto g = t.grad();
    std::copy(g.begin(), g.end(), analytic.begin());
    auto v = t.mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double keep = v[i];
      v[i] = keep + h;
      const double up = f(inputs).item();
      v[i] = keep - h;
      const double down = f(inputs).item();
      v[i] = keep;
      const double num = (up - down) / (2 * h);
      diff2 += (analytic[i] - num) * (analytic[i] - num);
      a2 += analytic[i] * analytic[i];
      n2 += num * num;
    }
  }
  return std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), floor});
}

/// Squared MMD by the definition, one double loop per kernel sum.
inline double brute_mmd(const std::vector<double>& x, const std::vector<double>& y, double sigma) {
  auto k = [&](double a, double b) { return std::exp(-(a - b) * (a - b) / (2 * sigma * sigma)); };
  const double n = static_cast<double>(x.size());
  double xx = 0, yy = 0, xy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = 0; j < x.size(); ++j) {
      xx += k(x[i], x[j]);
      yy += k(y[i], y[j]);
      xy += k(x[i], y[j]);
    }
  }
  return (xx + yy - 2 * xy) / (n * n);
}

// (M_box, M_err) of one sample over the given cells, summed over channels.
inline std::pair<double, double> brute_mmd_maps(const pim::HeadMaps& x, const pim::HeadMaps& y, const pim::HeadMaps& z,
                                                double sigma, const std::vector<int>& cells) {
  double box = 0, err = 0;
  for (int ch = 0; ch < pim::kRegChannels; ++ch) {
    std::vector<double> xs, ys, ex, ey;
    for (int c : cells) {
      xs.push_back(x.reg_at(ch, c));
      ys.push_back(y.reg_at(ch, c));
      ex.push_back(x.reg_at(ch, c) - z.reg_at(ch, c));
      ey.push_back(y.reg_at(ch, c) - z.reg_at(ch, c));
    }
    box += std::max(0.0, brute_mmd(xs, ys, sigma));
    err += std::max(0.0, brute_mmd(ex, ey, sigma));
  }
  return {box, err};
}

inline pim::HeadMaps random_maps(pim::Rng& rng, int h, int w, double positive_rate) {
  pim::HeadMaps m(h, w);
  for (auto& c : m.cls) c = pim::uniform(rng, 0, 1) < positive_rate ? 1.0 : 0.0;
  for (auto& r : m.reg) r = pim::uniform(rng, -2, 2);
  return m;
}

// Independent per-ray visibility: slab intersection of the sensor ray with
// each box in the box's own frame.
inline bool ray_oracle_visible(const std::vector<OrientedBox>& boxes, Vec2 p, double mpp) {
  const double len = std::hypot(p.x, p.y);
  if (len == 0.0) return true;
  const Vec2 dir{p.x / len, p.y / len};
  for (const auto& b : boxes) {
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    // Origin and direction in the box frame.
    const double ox = c * (0.0 - b.cx) + s * (0.0 - b.cy);
    const double oy = -s * (0.0 - b.cx) + c * (0.0 - b.cy);
    const double dx = c * dir.x + s * dir.y;
    const double dy = -s * dir.x + c * dir.y;
    double t0 = 0.0, t1 = len;
    bool miss = false;
    auto slab = [&](double o, double d, double half) {
      if (d == 0.0) {
        if (o < -half || o > half) miss = true;
        return;
      }
      double a = (-half - o) / d, e = (half - o) / d;
      if (a > e) std::swap(a, e);
      t0 = std::max(t0, a);
      t1 = std::min(t1, e);
    };
    slab(ox, dx, 0.5 * b.l);
    slab(oy, dy, 0.5 * b.w);
    if (miss || !(t0 < t1)) continue;
    const double px = c * (p.x - b.cx) + s * (p.y - b.cy);
    const double py = -s * (p.x - b.cx) + c * (p.y - b.cy);
    const bool inside = std::abs(px) < 0.5 * b.l && std::abs(py) < 0.5 * b.w;
    if (!inside) return false;
    if (len - t0 > mpp) return false;
  }
  return true;
}

// Fraction-of-hits estimate of the IoU inside the joint bounding square.
inline double monte_carlo_iou(const OrientedBox& a, const OrientedBox& b, int samples, Rng& rng) {
  const double r = std::max(std::hypot(a.w, a.l), std::hypot(b.w, b.l));
  const double x0 = std::min(a.cx, b.cx) - r, x1 = std::max(a.cx, b.cx) + r;
  const double y0 = std::min(a.cy, b.cy) - r, y1 = std::max(a.cy, b.cy) + r;
  long in_a = 0, in_b = 0, both = 0;
  for (int i = 0; i < samples; ++i) {
    const Vec2 p{uniform(rng, x0, x1), uniform(rng, y0, y1)};
    const bool ia = point_in_box(a, p);
    const bool ib = point_in_box(b, p);
    in_a += ia;
    in_b += ib;
    both += ia && ib;
  }
  const long uni = in_a + in_b - both;
  return uni == 0 ? 0.0 : static_cast<double>(both) / uni;
}

// Random scene with at most one box center per output cell, centers kept
// strictly inside their cells.
inline std::vector<OrientedBox> one_box_per_cell(Rng& rng, const GridSpec& g, int d, int count) {
  const int h = g.height_px / d, w = g.width_px / d;
  std::set<int> used;
  std::vector<OrientedBox> boxes;
  const double half = 0.5 * d * g.meters_per_px;
  while (static_cast<int>(boxes.size()) < count) {
    const int cell = uniform_int(rng, 0, h * w - 1);
    if (!used.insert(cell).second) continue;
    const Vec2 cc = cell_center(g, d, cell / w, cell % w);
    boxes.push_back({cc.x + uniform(rng, -0.99, 0.99) * half, cc.y + uniform(rng, -0.99, 0.99) * half,
                     uniform(rng, 0.5, 3.0), uniform(rng, 1.0, 8.0), uniform(rng, -3.14, 3.14)});
  }
  return boxes;
}

// 16 x 24 px grid: 4 x 6 output cells at downsample 4.
inline pim::GridSpec small_grid() {
  pim::GridSpec g;
  g.height_px = 16;
  g.width_px = 24;
  g.anchor_row = 15;
  g.anchor_col = 12;
  g.meters_per_px = 0.5;
  return g;
}

// Scene with the ego at the origin heading +x and the given agent boxes.
inline pim::SceneState ego_scene(const std::vector<pim::OrientedBox>& boxes) {
  pim::SceneState s;
  s.ego_box = pim::default_ego_box(s.ego);
  std::int64_t id = 1;
  for (const auto& b : boxes) s.agents.push_back({id++, b, 0.0, pim::AgentKind::vehicle});
  return s;
}

}  // namespace testing
