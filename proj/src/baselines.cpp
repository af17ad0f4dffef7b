#include "pim/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "pim/metrics.hpp"
#include "pim/rng.hpp"

namespace pim {

using nlohmann::json;

double PiecewiseLinear::operator()(double x) const {
  if (knots.empty()) return 0.0;
  if (x <= knots.front().first) return knots.front().second;
  if (x >= knots.back().first) return knots.back().second;
  for (std::size_t i = 1; i < knots.size(); ++i) {
    const auto& [x1, y1] = knots[i];
    if (x <= x1) {
      const auto& [x0, y0] = knots[i - 1];
      const double t = (x - x0) / (x1 - x0);
      return y0 + t * (y1 - y0);
    }
  }
  return knots.back().second;
}

void PiecewiseLinear::validate(const char* name) const {
  if (knots.empty()) throw std::invalid_argument(std::string(name) + ": needs at least one knot");
  for (std::size_t i = 0; i < knots.size(); ++i) {
    if (knots[i].second < 0.0 || knots[i].second > 1.0) {
      throw std::invalid_argument(std::string(name) + ": probabilities must lie in [0, 1]");
    }
    if (i > 0 && !(knots[i].first > knots[i - 1].first)) {
      throw std::invalid_argument(std::string(name) + ": knot positions must increase");
    }
  }
}

void TargetProxySpec::validate() const {
  distance_curve.validate("TargetProxySpec.distance_curve");
  occlusion_curve.validate("TargetProxySpec.occlusion_curve");
  if (sigma_xy < 0 || sigma_log_size < 0 || sigma_yaw < 0) {
    throw std::invalid_argument("TargetProxySpec: noise scales must be >= 0");
  }
  if (fp_rate < 0) throw std::invalid_argument("TargetProxySpec.fp_rate: must be >= 0");
  if (occlusion_samples < 1) throw std::invalid_argument("TargetProxySpec.occlusion_samples: must be >= 1");
  if (!(score_range > 0)) throw std::invalid_argument("TargetProxySpec.score_range: must be > 0");
}

TargetProxySpec TargetProxySpec::identity(std::uint64_t seed) {
  TargetProxySpec s;
  s.distance_curve = PiecewiseLinear::constant(1.0);
  s.occlusion_curve = PiecewiseLinear::constant(1.0);
  s.sigma_xy = s.sigma_log_size = s.sigma_yaw = 0.0;
  s.fp_rate = 0.0;
  s.seed = seed;
  return s;
}

namespace {

json curve_json(const PiecewiseLinear& c) {
  json a = json::array();
  for (const auto& [x, y] : c.knots) a.push_back({x, y});
  return a;
}

PiecewiseLinear curve_from(const json& j) {
  PiecewiseLinear c;
  for (const auto& k : j) c.knots.emplace_back(k.at(0).get<double>(), k.at(1).get<double>());
  return c;
}

}  // namespace

json to_json(const TargetProxySpec& s) {
  return {{"distance_curve", curve_json(s.distance_curve)},
          {"occlusion_curve", curve_json(s.occlusion_curve)},
          {"sigma_xy", s.sigma_xy},
          {"sigma_log_size", s.sigma_log_size},
          {"sigma_yaw", s.sigma_yaw},
          {"fp_rate", s.fp_rate},
          {"score_near", s.score_near},
          {"score_far", s.score_far},
          {"score_range", s.score_range},
          {"score_jitter", s.score_jitter},
          {"occlusion_samples", s.occlusion_samples},
          {"seed", s.seed}};
}

TargetProxySpec target_proxy_spec_from_json(const json& j) {
  TargetProxySpec s;
  if (j.contains("distance_curve")) s.distance_curve = curve_from(j.at("distance_curve"));
  if (j.contains("occlusion_curve")) s.occlusion_curve = curve_from(j.at("occlusion_curve"));
  s.sigma_xy = j.value("sigma_xy", s.sigma_xy);
  s.sigma_log_size = j.value("sigma_log_size", s.sigma_log_size);
  s.sigma_yaw = j.value("sigma_yaw", s.sigma_yaw);
  s.fp_rate = j.value("fp_rate", s.fp_rate);
  s.score_near = j.value("score_near", s.score_near);
  s.score_far = j.value("score_far", s.score_far);
  s.score_range = j.value("score_range", s.score_range);
  s.score_jitter = j.value("score_jitter", s.score_jitter);
  s.occlusion_samples = j.value("occlusion_samples", s.occlusion_samples);
  s.seed = j.value("seed", s.seed);
  s.validate();
  return s;
}

double occluded_fraction(const std::vector<Agent>& agents, std::size_t index, int samples) {
  const OrientedBox& b = agents.at(index).box;
  const double c = std::cos(b.yaw);
  const double s = std::sin(b.yaw);
  int hidden = 0;
  for (int i = 0; i < samples; ++i) {
    for (int j = 0; j < samples; ++j) {
      const double u = ((i + 0.5) / samples - 0.5) * b.l;
      const double v = ((j + 0.5) / samples - 0.5) * b.w;
      const Vec2 p{b.cx + c * u - s * v, b.cy + s * u + c * v};
      for (std::size_t k = 0; k < agents.size(); ++k) {
        if (k == index) continue;
        if (clip_segment_to_box(agents[k].box, {0.0, 0.0}, p)) {
          ++hidden;
          break;
        }
      }
    }
  }
  return static_cast<double>(hidden) / (samples * samples);
}

std::vector<OrientedBox> visible_annotation(const SceneState& ego_scene, const GridSpec& grid) {
  std::vector<OrientedBox> out;
  for (const auto& a : ego_scene.agents) {
    if (a.kind != AgentKind::vehicle) continue;
    if (cell_of(grid, 1, a.box.center()) < 0) continue;
    out.push_back(a.box);
  }
  return out;
}

std::vector<Detection> target_proxy_perceive(const SceneState& ego_scene, const GridSpec& grid,
                                             const TargetProxySpec& spec) {
  Rng rng(derive_seed(derive_seed(spec.seed, "target_proxy"), static_cast<std::uint64_t>(ego_scene.id)));
  std::vector<Detection> out;
  auto score_for = [&](double dist) {
    const double ramp = spec.score_near + (spec.score_far - spec.score_near) * std::min(dist / spec.score_range, 1.0);
    const double jitter = spec.score_jitter > 0 ? uniform(rng, -spec.score_jitter, spec.score_jitter) : 0.0;
    return std::clamp(ramp + jitter, 0.0, 1.0);
  };

  for (std::size_t i = 0; i < ego_scene.agents.size(); ++i) {
    const Agent& a = ego_scene.agents[i];
    if (a.kind != AgentKind::vehicle || cell_of(grid, 1, a.box.center()) < 0) continue;
    const double dist = std::hypot(a.box.cx, a.box.cy);
    const double frac = occluded_fraction(ego_scene.agents, i, spec.occlusion_samples);
    const double p = spec.distance_curve(dist) * spec.occlusion_curve(frac);
    // Every agent consumes the same draws so one decision never shifts the
    // stream of the next.
    const double u = uniform(rng, 0.0, 1.0);
    const double nx = normal(rng, 0.0, spec.sigma_xy);
    const double ny = normal(rng, 0.0, spec.sigma_xy);
    const double nw = normal(rng, 0.0, spec.sigma_log_size);
    const double nl = normal(rng, 0.0, spec.sigma_log_size);
    const double nyaw = normal(rng, 0.0, spec.sigma_yaw);
    const double score = score_for(dist);
    if (!(u < p)) continue;
    Detection d;
    d.box = {a.box.cx + nx, a.box.cy + ny, a.box.w * std::exp(nw), a.box.l * std::exp(nl),
             normalize_angle(a.box.yaw + nyaw)};
    d.score = score;
    out.push_back(d);
  }

  if (spec.fp_rate > 0.0) {
    const int count = std::poisson_distribution<int>(spec.fp_rate)(rng);
    const double x_max = grid.anchor_row * grid.meters_per_px;
    const double y_lo = (grid.anchor_col - grid.width_px + 1) * grid.meters_per_px;
    const double y_hi = grid.anchor_col * grid.meters_per_px;
    for (int n = 0; n < count; ++n) {
      for (int attempt = 0; attempt < 50; ++attempt) {
        OrientedBox b{uniform(rng, 4.0, x_max), uniform(rng, y_lo, y_hi), 2.0, 4.5, normal(rng, 0.0, 0.1)};
        bool on_road = ego_scene.road.freespace.empty();
        for (const auto& poly : ego_scene.road.freespace) on_road = on_road || point_in_polygon(poly, b.center());
        bool clear = true;
        for (const auto& a : ego_scene.agents) clear = clear && iou_rotated(a.box, b) == 0.0;
        for (const auto& d : out) clear = clear && iou_rotated(d.box, b) == 0.0;
        if (!on_road || !clear) continue;
        out.push_back({b, score_for(std::hypot(b.cx, b.cy))});
        break;
      }
    }
  }
  return out;
}

// ---- Gaussian ---------------------------------------------------------------------

void GaussianNoiseSpec::validate() const {
  if (!(sigma >= 0.0)) throw std::invalid_argument("GaussianNoiseSpec.sigma: must be >= 0");
  if (!(fn_ratio >= 0.0 && fn_ratio <= 1.0)) throw std::invalid_argument("GaussianNoiseSpec.fn_ratio: must lie in [0, 1]");
}

std::vector<Detection> gaussian_baseline(const std::vector<OrientedBox>& boxes, const GaussianNoiseSpec& spec,
                                         std::uint64_t stream) {
  spec.validate();
  Rng rng(derive_seed(derive_seed(spec.seed, "gaussian"), stream));
  std::vector<Detection> out;
  for (const auto& b : boxes) {
    const double u = uniform(rng, 0.0, 1.0);
    double v[6] = {b.cx, b.cy, std::log(b.w), std::log(b.l), std::sin(b.yaw), std::cos(b.yaw)};
    for (double& x : v) x = normal(rng, x, spec.sigma);
    if (u < spec.fn_ratio) continue;
    double yaw = b.yaw;
    if (spec.sigma > 0.0) yaw = std::atan2(v[4], v[5]);
    out.push_back({{v[0], v[1], std::exp(v[2]), std::exp(v[3]), yaw}, 1.0});
  }
  return out;
}

// ---- GMM ----------------------------------------------------------------------------

namespace {

constexpr double kMinWeight = 1e-6;
constexpr double kMinVariance = 1e-12;
const double kLog2Pi = std::log(2.0 * std::numbers::pi);

double log_component(const GmmModel& m, int k, const Residual& x) {
  double acc = std::log(m.weights[k]);
  for (int d = 0; d < kResidualDims; ++d) {
    const double diff = x[d] - m.means[k][d];
    acc -= 0.5 * (kLog2Pi + std::log(m.variances[k][d]) + diff * diff / m.variances[k][d]);
  }
  return acc;
}

double log_sum_exp(const std::vector<double>& v) {
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

Residual global_variance(const std::vector<Residual>& data) {
  Residual mean{}, var{};
  for (const auto& x : data)
    for (int d = 0; d < kResidualDims; ++d) mean[d] += x[d];
  for (double& m : mean) m /= static_cast<double>(data.size());
  for (const auto& x : data)
    for (int d = 0; d < kResidualDims; ++d) var[d] += (x[d] - mean[d]) * (x[d] - mean[d]);
  for (double& v : var) v = std::max(v / static_cast<double>(data.size()), kMinVariance * 10);
  return var;
}

double sq_dist(const Residual& a, const Residual& b) {
  double s = 0.0;
  for (int d = 0; d < kResidualDims; ++d) s += (a[d] - b[d]) * (a[d] - b[d]);
  return s;
}

}  // namespace

void GmmModel::validate() const {
  if (weights.empty() || means.size() != weights.size() || variances.size() != weights.size()) {
    throw std::invalid_argument("GmmModel: inconsistent component count");
  }
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("GmmModel.weights: must be >= 0");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("GmmModel.weights: must sum to 1");
  for (const auto& v : variances) {
    for (double x : v) {
      if (!(x > 0.0)) throw std::invalid_argument("GmmModel.variances: must be > 0");
    }
  }
}

json to_json(const GmmModel& m) {
  return {{"weights", m.weights},     {"means", m.means},     {"variances", m.variances},
          {"log_likelihood", m.log_likelihood}, {"history", m.history}, {"iterations", m.iterations}};
}

GmmModel gmm_from_json(const json& j) {
  GmmModel m;
  m.weights = j.at("weights").get<std::vector<double>>();
  m.means = j.at("means").get<std::vector<Residual>>();
  m.variances = j.at("variances").get<std::vector<Residual>>();
  m.log_likelihood = j.value("log_likelihood", 0.0);
  m.history = j.value("history", std::vector<double>{});
  m.iterations = j.value("iterations", 0);
  m.validate();
  return m;
}

double gmm_log_likelihood(const GmmModel& m, const std::vector<Residual>& data) {
  std::vector<double> lp(m.components());
  double total = 0.0;
  for (const auto& x : data) {
    for (int k = 0; k < m.components(); ++k) lp[k] = log_component(m, k, x);
    total += log_sum_exp(lp);
  }
  return total;
}

GmmModel fit_gmm_em(const std::vector<Residual>& data, int k, std::uint64_t seed, int max_iter, double tol) {
  if (k < 1) throw std::invalid_argument("fit_gmm_em: K must be >= 1");
  {
    std::vector<Residual> distinct(data);
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (static_cast<int>(distinct.size()) < k) {
      throw std::invalid_argument("fit_gmm_em: need at least K distinct residuals, got " +
                                  std::to_string(distinct.size()));
    }
  }
  Rng rng(derive_seed(seed, "gmm"));
  const std::size_t n = data.size();
  const Residual var0 = global_variance(data);

  GmmModel m;
  m.weights.assign(k, 1.0 / k);
  m.variances.assign(k, var0);
  // k-means++ seeding of the means.
  m.means.push_back(data[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)]);
  std::vector<double> d2(n);
  while (static_cast<int>(m.means.size()) < k) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : m.means) best = std::min(best, sq_dist(data[i], c));
      d2[i] = best;
    }
    std::discrete_distribution<std::size_t> pick(d2.begin(), d2.end());
    m.means.push_back(data[pick(rng)]);
  }

  bool reseeded = false;
  std::vector<double> resp(n * k);
  std::vector<double> lp(k);
  double prev = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < max_iter; ++it) {
    // E step.
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < k; ++c) lp[c] = log_component(m, c, data[i]);
      const double z = log_sum_exp(lp);
      ll += z;
      for (int c = 0; c < k; ++c) resp[i * k + c] = std::exp(lp[c] - z);
    }
    m.history.push_back(ll);
    m.log_likelihood = ll;
    m.iterations = it + 1;
    if (it > 0 && ll - prev < tol) break;
    prev = ll;

    // M step.
    bool degenerate = false;
    for (int c = 0; c < k; ++c) {
      double nk = 0.0;
      Residual mean{}, var{};
      for (std::size_t i = 0; i < n; ++i) {
        const double r = resp[i * k + c];
        nk += r;
        for (int d = 0; d < kResidualDims; ++d) mean[d] += r * data[i][d];
      }
      const double w = nk / static_cast<double>(n);
      if (w < kMinWeight) {
        degenerate = true;
        continue;
      }
      for (double& x : mean) x /= nk;
      for (std::size_t i = 0; i < n; ++i) {
        const double r = resp[i * k + c];
        for (int d = 0; d < kResidualDims; ++d) var[d] += r * (data[i][d] - mean[d]) * (data[i][d] - mean[d]);
      }
      for (double& x : var) {
        x /= nk;
        if (x < kMinVariance) degenerate = true;
      }
      m.weights[c] = w;
      m.means[c] = mean;
      m.variances[c] = var;
    }
    if (degenerate) {
      if (reseeded) throw GmmError("fit_gmm_em: component collapsed after re-seeding");
      reseeded = true;
      for (int c = 0; c < k; ++c) {
        bool bad = m.weights[c] < kMinWeight;
        for (double x : m.variances[c]) bad = bad || x < kMinVariance;
        if (!bad) continue;
        m.means[c] = data[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)];
        m.variances[c] = var0;
        m.weights[c] = 1.0 / k;
      }
      double total = 0.0;
      for (double w : m.weights) total += w;
      for (double& w : m.weights) w /= total;
      prev = -std::numeric_limits<double>::infinity();
    }
  }
  double total = 0.0;
  for (double w : m.weights) total += w;
  for (double& w : m.weights) w /= total;
  return m;
}

std::vector<Detection> multimodal_baseline(const std::vector<OrientedBox>& boxes, const GmmModel& model,
                                           double fn_ratio, std::uint64_t seed, std::uint64_t stream) {
  model.validate();
  if (!(fn_ratio >= 0.0 && fn_ratio <= 1.0)) throw std::invalid_argument("multimodal_baseline: fn_ratio must lie in [0, 1]");
  Rng rng(derive_seed(derive_seed(seed, "multimodal"), stream));
  std::discrete_distribution<int> pick(model.weights.begin(), model.weights.end());
  std::vector<Detection> out;
  for (const auto& b : boxes) {
    const double u = uniform(rng, 0.0, 1.0);
    const int c = pick(rng);
    Residual r;
    for (int d = 0; d < kResidualDims; ++d) r[d] = normal(rng, model.means[c][d], std::sqrt(model.variances[c][d]));
    if (u < fn_ratio) continue;
    OrientedBox o{b.cx + r[0], b.cy + r[1], std::max(b.w + r[2], 0.1), std::max(b.l + r[3], 0.1),
                  normalize_angle(b.yaw + r[4])};
    out.push_back({o, 1.0});
  }
  return out;
}

ResidualStats collect_residuals(const std::vector<std::vector<Detection>>& target_dets,
                                const std::vector<std::vector<OrientedBox>>& annotations, double iou_threshold) {
  if (target_dets.size() != annotations.size()) throw std::invalid_argument("collect_residuals: scene count mismatch");
  ResidualStats st;
  for (std::size_t s = 0; s < annotations.size(); ++s) {
    const auto m = match_greedy(target_dets[s], annotations[s], iou_threshold);
    st.annotations += static_cast<int>(annotations[s].size());
    st.missed += static_cast<int>(m.fn.size());
    for (const auto& [pi, gi] : m.tp) {
      const auto& d = target_dets[s][pi].box;
      const auto& g = annotations[s][gi];
      st.residuals.push_back({d.cx - g.cx, d.cy - g.cy, d.w - g.w, d.l - g.l, normalize_angle(d.yaw - g.yaw)});
    }
  }
  return st;
}

}  // namespace pim
