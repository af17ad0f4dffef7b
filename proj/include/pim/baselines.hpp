#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pim/imitator.hpp"
#include "pim/scene.hpp"

namespace pim {

/// Piecewise-linear function through sorted knots (x, y); constant beyond
/// the first and last knot.
struct PiecewiseLinear {
  std::vector<std::pair<double, double>> knots;

  static PiecewiseLinear constant(double v) { return {{{0.0, v}}}; }
  double operator()(double x) const;
  void validate(const char* name) const;
};

// ---- target proxy ----------------------------------------------------------------

/// Desk-scale stand-in for a real detector. Detection probability is
/// distance_curve(d) * occlusion_curve(f) with d the range to the box center
/// and f the fraction of the box that is hidden behind other boxes.
struct TargetProxySpec {
  PiecewiseLinear distance_curve{{{0.0, 1.0}, {15.0, 1.0}, {30.0, 0.6}, {40.0, 0.15}, {50.0, 0.0}}};
  PiecewiseLinear occlusion_curve{{{0.0, 1.0}, {0.3, 1.0}, {0.6, 0.4}, {0.9, 0.0}}};
  double sigma_xy = 0.05;
  double sigma_log_size = 0.02;
  double sigma_yaw = 0.01;
  // Expected number of spurious boxes per scene.
  double fp_rate = 0.2;
  // Score ramp: score_near at the sensor, score_far at score_range meters.
  double score_near = 0.95;
  double score_far = 0.35;
  double score_range = 50.0;
  double score_jitter = 0.03;
  // Lattice resolution per box side for the occluded fraction.
  int occlusion_samples = 5;
  std::uint64_t seed = 0;

  void validate() const;
  static TargetProxySpec identity(std::uint64_t seed = 0);
};

nlohmann::json to_json(const TargetProxySpec& s);
TargetProxySpec target_proxy_spec_from_json(const nlohmann::json& j);

/// Fraction of lattice points of `agents[index]` whose line of sight from the
/// origin crosses another agent box.
double occluded_fraction(const std::vector<Agent>& agents, std::size_t index, int samples);

// Vehicle boxes whose center falls on the grid; pedestrians are ignored.
std::vector<OrientedBox> visible_annotation(const SceneState& ego_scene, const GridSpec& grid);

/// Deterministic in (scene.id, spec.seed). `ego_scene` must be in the ego
/// frame.
std::vector<Detection> target_proxy_perceive(const SceneState& ego_scene, const GridSpec& grid,
                                             const TargetProxySpec& spec);

// ---- Gaussian baseline ------------------------------------------------------------

struct GaussianNoiseSpec {
  double sigma = 0.1;
  double fn_ratio = 0.0;
  std::uint64_t seed = 0;
  void validate() const;
};

/// Adds N(0, sigma^2) to (cx, cy, log w, log l, sin yaw, cos yaw) of every
/// box, re-decodes, and drops boxes i.i.d. with probability fn_ratio. Scores
/// are 1. `stream` separates scenes sharing one spec.
std::vector<Detection> gaussian_baseline(const std::vector<OrientedBox>& boxes, const GaussianNoiseSpec& spec,
                                         std::uint64_t stream = 0);

// ---- mixture-of-Gaussians baseline ------------------------------------------------

inline constexpr int kResidualDims = 5;  // dcx, dcy, dw, dl, dyaw
using Residual = std::array<double, kResidualDims>;

struct GmmModel {
  std::vector<double> weights;
  std::vector<Residual> means;
  std::vector<Residual> variances;
  double log_likelihood = 0.0;
  std::vector<double> history;  // per-iteration total log-likelihood
  int iterations = 0;

  int components() const { return static_cast<int>(weights.size()); }
  void validate() const;
};

nlohmann::json to_json(const GmmModel& m);
GmmModel gmm_from_json(const nlohmann::json& j);

class GmmError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Total log-likelihood of the data under the model.
double gmm_log_likelihood(const GmmModel& m, const std::vector<Residual>& data);

/// EM with diagonal covariances and k-means++ initialisation. A degenerate
/// component (weight < 1e-6 or variance < 1e-12) is re-seeded once; a second
/// collapse throws GmmError.
GmmModel fit_gmm_em(const std::vector<Residual>& data, int k, std::uint64_t seed, int max_iter = 200,
                    double tol = 1e-8);

std::vector<Detection> multimodal_baseline(const std::vector<OrientedBox>& boxes, const GmmModel& model,
                                           double fn_ratio, std::uint64_t seed, std::uint64_t stream = 0);

/// Residual (det - gt) of every target detection matched to an annotation box
/// at IoU >= iou_threshold; optionally counts the unmatched annotations.
struct ResidualStats {
  std::vector<Residual> residuals;
  int annotations = 0;
  int missed = 0;
  double fn_ratio() const { return annotations > 0 ? static_cast<double>(missed) / annotations : 0.0; }
};

ResidualStats collect_residuals(const std::vector<std::vector<Detection>>& target_dets,
                                const std::vector<std::vector<OrientedBox>>& annotations, double iou_threshold = 0.5);

}  // namespace pim
