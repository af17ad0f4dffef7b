#include "pim/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "pim/kernels.hpp"

namespace pim {

using nlohmann::json;
using nn::Node;
using nn::NodePtr;
using nn::Tensor;

void LossWeights::validate() const {
  for (double v : {lambda, alpha, beta, gamma, omega1, omega2}) {
    if (!(v >= 0.0)) throw std::invalid_argument("LossWeights: weights must be nonnegative");
  }
  if (!(kernel_sigma > 0.0)) throw std::invalid_argument("LossWeights: kernel_sigma must be > 0");
}

json to_json(const LossWeights& w) {
  return {{"lambda", w.lambda},
          {"alpha", w.alpha},
          {"beta", w.beta},
          {"gamma", w.gamma},
          {"omega1", w.omega1},
          {"omega2", w.omega2},
          {"kernel_sigma", w.kernel_sigma},
          {"median_heuristic", w.median_heuristic},
          {"mmd_all_pixels", w.mmd_all_pixels},
          {"corner_match_iou", w.corner_match_iou}};
}

LossWeights loss_weights_from_json(const json& j) {
  LossWeights w;
  w.lambda = j.value("lambda", w.lambda);
  w.alpha = j.value("alpha", w.alpha);
  w.beta = j.value("beta", w.beta);
  w.gamma = j.value("gamma", w.gamma);
  w.omega1 = j.value("omega1", w.omega1);
  w.omega2 = j.value("omega2", w.omega2);
  w.kernel_sigma = j.value("kernel_sigma", w.kernel_sigma);
  w.median_heuristic = j.value("median_heuristic", w.median_heuristic);
  w.mmd_all_pixels = j.value("mmd_all_pixels", w.mmd_all_pixels);
  w.corner_match_iou = j.value("corner_match_iou", w.corner_match_iou);
  return w;
}

double LossReport::recombined(const LossWeights& w) const {
  return w.alpha * cls + w.beta * reg + w.gamma * corner + w.omega1 * mmd_box + w.omega2 * mmd_err +
         w.lambda * weight_reg;
}

json LossReport::to_json() const {
  return {{"L_total", total},
          {"L_cls", cls},
          {"L_reg", reg},
          {"L_corner", corner},
          {"L_mmd_box", mmd_box},
          {"L_mmd_err", mmd_err},
          {"L_weight_reg", weight_reg},
          {"corner_matches", corner_matches},
          {"no_matches", no_matches},
          {"smooth_l1_transition", kSmoothL1Transition}};
}

double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < kSmoothL1Transition ? 0.5 * x * x / kSmoothL1Transition : a - 0.5 * kSmoothL1Transition;
}

namespace {

double smooth_l1_grad(double x) {
  const double a = std::abs(x);
  if (a < kSmoothL1Transition) return x / kSmoothL1Transition;
  return x > 0 ? 1.0 : -1.0;
}

void check_batch(const Tensor& t, int channels, std::size_t batch, const HeadMaps& first, const char* op) {
  if (t.shape().size() != 4 || t.dim(1) != channels || static_cast<std::size_t>(t.dim(0)) != batch ||
      t.dim(2) != first.height || t.dim(3) != first.width) {
    throw nn::ShapeError(std::string(op) + ": tensor " + nn::shape_str(t.shape()) + " does not match the pseudo maps");
  }
}

}  // namespace

Tensor bce(const Tensor& x_cls, const std::vector<const HeadMaps*>& y) {
  if (y.empty()) throw std::invalid_argument("bce: empty batch");
  check_batch(x_cls, 1, y.size(), *y.front(), "bce");
  constexpr double lo = 1e-7;
  constexpr double hi = 1.0 - 1e-7;
  const std::size_t cells = static_cast<std::size_t>(y.front()->cells());
  const auto xv = x_cls.data();
  double acc = 0.0;
  for (std::size_t n = 0; n < y.size(); ++n) {
    for (std::size_t i = 0; i < cells; ++i) {
      const double x = std::clamp(xv[n * cells + i], lo, hi);
      const double t = y[n]->cls[i];
      acc += -(t * std::log(x) + (1.0 - t) * std::log(1.0 - x));
    }
  }
  const double count = static_cast<double>(xv.size());
  return nn::make_result("bce", {1}, {acc / count}, {x_cls}, [y, cells, count](Node& self) {
    const NodePtr& p = self.parents[0];
    auto g = p->ensure_grad();
    const double up = self.grad[0] / count;
    for (std::size_t n = 0; n < y.size(); ++n) {
      for (std::size_t i = 0; i < cells; ++i) {
        const double xr = p->value[n * cells + i];
        if (xr < lo || xr > hi) continue;
        const double t = y[n]->cls[i];
        g[n * cells + i] += up * (-t / xr + (1.0 - t) / (1.0 - xr));
      }
    }
  });
}

Tensor smooth_l1_masked(const Tensor& x_reg, const std::vector<const HeadMaps*>& y) {
  if (y.empty()) throw std::invalid_argument("smooth_l1_masked: empty batch");
  check_batch(x_reg, kRegChannels, y.size(), *y.front(), "smooth_l1_masked");
  const int cells = y.front()->cells();
  const auto xv = x_reg.data();
  double acc = 0.0;
  double positives = 0.0;
  for (std::size_t n = 0; n < y.size(); ++n) {
    for (int i = 0; i < cells; ++i) {
      const double m = y[n]->cls[i];
      if (m == 0.0) continue;
      positives += m;
      for (int ch = 0; ch < kRegChannels; ++ch) {
        const double diff = xv[(n * kRegChannels + ch) * cells + i] - y[n]->reg_at(ch, i);
        acc += smooth_l1(m * diff);
      }
    }
  }
  const double denom = positives > 0.0 ? positives : 1.0;
  return nn::make_result("smooth_l1_masked", {1}, {acc / denom}, {x_reg}, [y, cells, denom](Node& self) {
    const NodePtr& p = self.parents[0];
    auto g = p->ensure_grad();
    const double up = self.grad[0] / denom;
    for (std::size_t n = 0; n < y.size(); ++n) {
      for (int i = 0; i < cells; ++i) {
        const double m = y[n]->cls[i];
        if (m == 0.0) continue;
        for (int ch = 0; ch < kRegChannels; ++ch) {
          const std::size_t k = (n * kRegChannels + ch) * cells + i;
          const double diff = p->value[k] - y[n]->reg_at(ch, i);
          g[k] += up * m * smooth_l1_grad(m * diff);
        }
      }
    }
  });
}

// ---- corner loss --------------------------------------------------------------

namespace {

constexpr double kCornerSign[4][2] = {{1, 1}, {1, -1}, {-1, -1}, {-1, 1}};

// Corners of the box decoded from raw regression values, plus their
// Jacobian with respect to the six channels.
struct DecodedCorners {
  Vec2 p[4];
  double jac[4][2][kRegChannels];
};

DecodedCorners decode_corners(const double* r, Vec2 cc) {
  DecodedCorners out{};
  const double s = r[kSin];
  const double c = r[kCos];
  const double r2 = s * s + c * c;
  const double rn = std::sqrt(r2);
  const double cos_t = c / rn;
  const double sin_t = s / rn;
  const double w = std::exp(r[kLogW]);
  const double l = std::exp(r[kLogL]);
  const double dth_ds = c / r2;
  const double dth_dc = -s / r2;
  for (int m = 0; m < 4; ++m) {
    const double a = kCornerSign[m][0] * 0.5 * l;
    const double b = kCornerSign[m][1] * 0.5 * w;
    out.p[m] = {cc.x + r[kDx] + cos_t * a - sin_t * b, cc.y + r[kDy] + sin_t * a + cos_t * b};
    const double dpx_dth = -sin_t * a - cos_t * b;
    const double dpy_dth = cos_t * a - sin_t * b;
    auto& jx = out.jac[m][0];
    auto& jy = out.jac[m][1];
    jx[kDx] = 1.0;
    jy[kDx] = 0.0;
    jx[kDy] = 0.0;
    jy[kDy] = 1.0;
    jx[kLogW] = -sin_t * b;
    jy[kLogW] = cos_t * b;
    jx[kLogL] = cos_t * a;
    jy[kLogL] = sin_t * a;
    jx[kSin] = dpx_dth * dth_ds;
    jy[kSin] = dpy_dth * dth_ds;
    jx[kCos] = dpx_dth * dth_dc;
    jy[kCos] = dpy_dth * dth_dc;
  }
  return out;
}

double corner_term(const std::array<Vec2, 4>& pred, const std::array<Vec2, 4>& tgt) {
  double acc = 0.0;
  for (int m = 0; m < 4; ++m) acc += smooth_l1(std::hypot(pred[m].x - tgt[m].x, pred[m].y - tgt[m].y));
  return acc;
}

struct CornerPair {
  std::size_t sample;
  int cell;
  OrientedBox target;
};

}  // namespace

double corner_loss_boxes(const std::vector<OrientedBox>& pred, const std::vector<OrientedBox>& target) {
  if (pred.size() != target.size()) throw std::invalid_argument("corner_loss_boxes: size mismatch");
  if (pred.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += corner_term(pred[i].corners(), target[i].corners());
  return acc / static_cast<double>(pred.size());
}

CornerLossResult corner_loss(const Tensor& x_reg, const Tensor& x_cls, const std::vector<const HeadMaps*>& y,
                             const GridSpec& grid, int downsample, double score_threshold, double match_iou) {
  if (y.empty()) throw std::invalid_argument("corner_loss: empty batch");
  check_batch(x_reg, kRegChannels, y.size(), *y.front(), "corner_loss");
  check_batch(x_cls, 1, y.size(), *y.front(), "corner_loss");
  const int cells = y.front()->cells();
  const int width = y.front()->width;
  const auto rv = x_reg.data();
  const auto cv = x_cls.data();

  std::vector<CornerPair> pairs;
  for (std::size_t n = 0; n < y.size(); ++n) {
    const auto targets = decode(*y[n], grid, downsample, 0.5);
    struct Cand {
      int cell;
      double score;
      OrientedBox box;
    };
    std::vector<Cand> cands;
    for (int i = 0; i < cells; ++i) {
      const double score = cv[n * cells + i];
      if (!(score >= score_threshold) && y[n]->cls[i] < 0.5) continue;
      double r[kRegChannels];
      for (int ch = 0; ch < kRegChannels; ++ch) r[ch] = rv[(n * kRegChannels + ch) * cells + i];
      const Vec2 cc = cell_center(grid, downsample, i / width, i % width);
      cands.push_back({i, score,
                       {cc.x + r[kDx], cc.y + r[kDy], std::exp(r[kLogW]), std::exp(r[kLogL]), std::atan2(r[kSin], r[kCos])}});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.score > b.score; });
    std::vector<bool> used(targets.size(), false);
    for (const auto& c : cands) {
      double best = -1.0;
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < targets.size(); ++j) {
        if (used[j]) continue;
        const double iou = iou_rotated(c.box, targets[j].box);
        if (iou >= match_iou && iou > best) {
          best = iou;
          best_j = j;
        }
      }
      if (best >= 0.0) {
        used[best_j] = true;
        pairs.push_back({n, c.cell, targets[best_j].box});
      }
    }
  }

  double acc = 0.0;
  for (const auto& pr : pairs) {
    double r[kRegChannels];
    for (int ch = 0; ch < kRegChannels; ++ch) r[ch] = rv[(pr.sample * kRegChannels + ch) * cells + pr.cell];
    const auto dc = decode_corners(r, cell_center(grid, downsample, pr.cell / width, pr.cell % width));
    const auto tc = pr.target.corners();
    for (int m = 0; m < 4; ++m) acc += smooth_l1(std::hypot(dc.p[m].x - tc[m].x, dc.p[m].y - tc[m].y));
  }
  const int matches = static_cast<int>(pairs.size());
  const double denom = matches > 0 ? matches : 1.0;
  Tensor loss = nn::make_result(
      "corner_loss", {1}, {acc / denom}, {x_reg}, [pairs, cells, width, grid, downsample, denom](Node& self) {
        const NodePtr& p = self.parents[0];
        auto g = p->ensure_grad();
        const double up = self.grad[0] / denom;
        for (const auto& pr : pairs) {
          double r[kRegChannels];
          for (int ch = 0; ch < kRegChannels; ++ch) r[ch] = p->value[(pr.sample * kRegChannels + ch) * cells + pr.cell];
          const auto dc = decode_corners(r, cell_center(grid, downsample, pr.cell / width, pr.cell % width));
          const auto tc = pr.target.corners();
          for (int m = 0; m < 4; ++m) {
            const double vx = dc.p[m].x - tc[m].x;
            const double vy = dc.p[m].y - tc[m].y;
            const double d = std::hypot(vx, vy);
            // d smoothL1(d) / d v: v below the transition, v / d above it.
            double gx = vx;
            double gy = vy;
            if (d >= kSmoothL1Transition) {
              gx = vx / d;
              gy = vy / d;
            }
            for (int ch = 0; ch < kRegChannels; ++ch) {
              g[(pr.sample * kRegChannels + ch) * cells + pr.cell] +=
                  up * (gx * dc.jac[m][0][ch] + gy * dc.jac[m][1][ch]);
            }
          }
        }
      });
  return {loss, matches};
}

// ---- MMD ---------------------------------------------------------------------

std::vector<int> union_positive_cells(const HeadMaps& a, const HeadMaps& b) {
  std::vector<int> out;
  for (int i = 0; i < a.cells(); ++i) {
    if (a.cls[i] >= 0.5 || b.cls[i] >= 0.5) out.push_back(i);
  }
  return out;
}

double median_bandwidth(const std::vector<double>& pooled) {
  std::vector<double> d;
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    for (std::size_t j = i + 1; j < pooled.size(); ++j) d.push_back(std::abs(pooled[i] - pooled[j]));
  }
  if (d.empty()) return 1.0;
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid > 1e-6 ? *mid : 1.0;
}

std::pair<double, double> mmd2(const HeadMaps& x, const HeadMaps& y, const HeadMaps& z, double sigma,
                               const std::vector<int>& cells) {
  std::vector<int> idx = cells;
  if (idx.empty()) {
    idx.resize(x.cells());
    std::iota(idx.begin(), idx.end(), 0);
  }
  double box = 0.0;
  double err = 0.0;
  std::vector<double> xs(idx.size()), ys(idx.size()), ex(idx.size()), ey(idx.size());
  for (int ch = 0; ch < kRegChannels; ++ch) {
    for (std::size_t k = 0; k < idx.size(); ++k) {
      xs[k] = x.reg_at(ch, idx[k]);
      ys[k] = y.reg_at(ch, idx[k]);
      ex[k] = xs[k] - z.reg_at(ch, idx[k]);
      ey[k] = ys[k] - z.reg_at(ch, idx[k]);
    }
    box += std::max(0.0, kernels::mmd_parallel(xs, ys, sigma));
    err += std::max(0.0, kernels::mmd_parallel(ex, ey, sigma));
  }
  return {box, err};
}

MmdTerms mmd_terms(const Tensor& x_reg, const std::vector<const LossTarget*>& targets, double sigma, bool all_pixels,
                   bool median_heuristic) {
  if (targets.empty()) throw std::invalid_argument("mmd_terms: empty batch");
  check_batch(x_reg, kRegChannels, targets.size(), targets.front()->target, "mmd_terms");
  const int cells = targets.front()->target.cells();
  const auto xv = x_reg.data();
  const double inv_batch = 1.0 / static_cast<double>(targets.size());

  // Per (sample, channel): selected cells, the value and its gradients.
  struct Slot {
    std::size_t sample;
    int ch;
    std::vector<int> idx;
    std::vector<double> g_box;
    std::vector<double> g_err;
  };
  std::vector<Slot> slots;
  double box = 0.0;
  double err = 0.0;
  for (std::size_t n = 0; n < targets.size(); ++n) {
    const auto& t = *targets[n];
    std::vector<int> idx;
    if (all_pixels) {
      idx.resize(cells);
      std::iota(idx.begin(), idx.end(), 0);
    } else {
      idx = union_positive_cells(t.target, t.annotation);
    }
    if (idx.empty()) continue;
    for (int ch = 0; ch < kRegChannels; ++ch) {
      const std::size_t m = idx.size();
      std::vector<double> xs(m), ys(m), ex(m), ey(m);
      for (std::size_t k = 0; k < m; ++k) {
        xs[k] = xv[(n * kRegChannels + ch) * cells + idx[k]];
        ys[k] = t.target.reg_at(ch, idx[k]);
        const double zk = t.annotation.reg_at(ch, idx[k]);
        ex[k] = xs[k] - zk;
        ey[k] = ys[k] - zk;
      }
      double s_box = sigma;
      double s_err = sigma;
      if (median_heuristic) {
        std::vector<double> pool(xs);
        pool.insert(pool.end(), ys.begin(), ys.end());
        s_box = median_bandwidth(pool);
        pool.assign(ex.begin(), ex.end());
        pool.insert(pool.end(), ey.begin(), ey.end());
        s_err = median_bandwidth(pool);
      }
      Slot slot{n, ch, idx, std::vector<double>(m), std::vector<double>(m)};
      const double mb = kernels::mmd_parallel(xs, ys, s_box, slot.g_box);
      const double me = kernels::mmd_parallel(ex, ey, s_err, slot.g_err);
      // Rounding can leave a tiny negative estimate; clamp it and its gradient.
      if (mb < 0.0) std::fill(slot.g_box.begin(), slot.g_box.end(), 0.0);
      if (me < 0.0) std::fill(slot.g_err.begin(), slot.g_err.end(), 0.0);
      box += std::max(0.0, mb) * inv_batch;
      err += std::max(0.0, me) * inv_batch;
      slots.push_back(std::move(slot));
    }
  }
  auto shared = std::make_shared<std::vector<Slot>>(std::move(slots));
  auto backward_for = [shared, cells, inv_batch](bool err_term) {
    return [shared, cells, inv_batch, err_term](Node& self) {
      auto g = self.parents[0]->ensure_grad();
      const double up = self.grad[0] * inv_batch;
      for (const auto& s : *shared) {
        const auto& gs = err_term ? s.g_err : s.g_box;
        for (std::size_t k = 0; k < s.idx.size(); ++k) {
          g[(s.sample * kRegChannels + s.ch) * cells + s.idx[k]] += up * gs[k];
        }
      }
    };
  };
  MmdTerms out;
  out.box = nn::make_result("mmd_box", {1}, {box}, {x_reg}, backward_for(false));
  out.err = nn::make_result("mmd_err", {1}, {err}, {x_reg}, backward_for(true));
  return out;
}

// ---- total ----------------------------------------------------------------------

TotalLoss total_loss(const HeadTensors& out, const std::vector<const LossTarget*>& targets,
                     const std::vector<Tensor>& weights_for_decay, const LossWeights& w, const GridSpec& grid,
                     int downsample, double score_threshold) {
  w.validate();
  std::vector<const HeadMaps*> ys;
  for (const auto* t : targets) ys.push_back(&t->target);

  TotalLoss res;
  const Tensor l_cls = bce(out.cls, ys);
  const Tensor l_reg = smooth_l1_masked(out.reg, ys);
  const auto corner = corner_loss(out.reg, out.cls, ys, grid, downsample, score_threshold, w.corner_match_iou);
  const auto mmd = mmd_terms(out.reg, targets, w.kernel_sigma, w.mmd_all_pixels, w.median_heuristic);
  Tensor l_w = Tensor::scalar(0.0);
  for (const auto& p : weights_for_decay) l_w = nn::add(l_w, nn::sum_squares(p));

  auto& r = res.report;
  r.cls = l_cls.item();
  r.reg = l_reg.item();
  r.corner = corner.loss.item();
  r.corner_matches = corner.matches;
  r.no_matches = corner.matches == 0;
  r.mmd_box = mmd.box.item();
  r.mmd_err = mmd.err.item();
  r.weight_reg = l_w.item();
  const std::pair<const char*, double> named[] = {{"L_cls", r.cls},         {"L_reg", r.reg},
                                                  {"L_corner", r.corner},   {"L_mmd_box", r.mmd_box},
                                                  {"L_mmd_err", r.mmd_err}, {"L_weight_reg", r.weight_reg}};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v)) throw std::runtime_error(std::string("total_loss: term ") + name + " is not finite");
  }

  Tensor total = nn::scale(l_cls, w.alpha);
  total = nn::add(total, nn::scale(l_reg, w.beta));
  total = nn::add(total, nn::scale(corner.loss, w.gamma));
  total = nn::add(total, nn::scale(mmd.box, w.omega1));
  total = nn::add(total, nn::scale(mmd.err, w.omega2));
  total = nn::add(total, nn::scale(l_w, w.lambda));
  r.total = total.item();
  res.total = total;
  return res;
}

}  // namespace pim
