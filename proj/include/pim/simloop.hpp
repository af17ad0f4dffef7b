#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pim/baselines.hpp"
#include "pim/imitator.hpp"
#include "pim/raster.hpp"

namespace pim {

struct SimConfig {
  double dt = 0.1;
  int horizon = 300;
  double wheelbase = 2.7;
  double a_min = -6.0;
  double a_max = 3.0;
  double steer_max = 0.5;
  // Range sensor emulation.
  int bins = 31;
  double fov = 1.5707963267948966;
  double r_max = 50.0;
  // Reactive planner.
  double target_speed = 10.0;
  double kp = 1.0;
  double d_safe = 14.0;
  double forward_half_angle = 0.15;

  void validate() const;
};

nlohmann::json to_json(const SimConfig& c);
SimConfig sim_config_from_json(const nlohmann::json& j);

struct EgoAction {
  double accel = 0.0;
  double steer = 0.0;
};

struct RangeReading {
  std::vector<double> azimuths;
  std::vector<double> ranges;
};

/// For every azimuth bin, distance along the bin's center ray to the nearest
/// detection box boundary, capped at r_max. Bin centers are uniform over
/// [-fov/2, fov/2].
RangeReading to_range_readings(const std::vector<Detection>& dets, int bins, double fov, double r_max);

/// Full brake when the smallest range within forward_half_angle of the
/// heading is below d_safe; otherwise proportional speed control. Steering is 0.
EgoAction plan(const RangeReading& ranges, double ego_speed, const SimConfig& cfg);

/// Kinematic bicycle step for the ego (explicit Euler, speed clamped at 0)
/// and constant-velocity motion for agents along their heading.
SceneState step_world(const SceneState& state, const EgoAction& action, double dt, double wheelbase);

// Rotated-IoU overlap between the ego box and any agent box.
bool in_collision(const SceneState& state);

enum class PerceptionKind { annotation, proxy, imitator, gaussian, multimodal };

std::string to_string(PerceptionKind k);
PerceptionKind perception_kind_from_string(const std::string& s);

/// Everything a perception source may need. Pointers are non-owning and only
/// the ones relevant to `kind` must be set.
struct PerceptionSource {
  PerceptionKind kind = PerceptionKind::annotation;
  GridSpec grid;
  PosEncSpec posenc;
  const Imitator* imitator = nullptr;
  double imitator_threshold = 0.5;
  TargetProxySpec proxy;
  GaussianNoiseSpec gaussian;
  const GmmModel* gmm = nullptr;
  double fn_ratio = 0.0;
  std::uint64_t seed = 0;
};

/// Detections (ego frame) of one ego-frame scene. `stream` decorrelates the
/// random draws of successive calls.
std::vector<Detection> perceive(const PerceptionSource& src, const SceneState& ego_scene, std::uint64_t stream);

struct StepRecord {
  int step = 0;
  double t = 0.0;
  Pose2 ego;
  double speed = 0.0;
  int agents = 0;
  std::vector<Detection> dets;
  std::vector<double> ranges;
  EgoAction action;
  double step_distance = 0.0;
  double distance = 0.0;
  bool collision = false;
};

struct EpisodeLog {
  std::int64_t scene_id = 0;
  std::vector<StepRecord> steps;
  std::string terminal_cause;  // "horizon", "collision" or "perception_error: ..."
  double distance = 0.0;
  bool collision = false;
};

EpisodeLog run_episode(const SceneState& scene0, const PerceptionSource& src, const SimConfig& cfg,
                       std::uint64_t seed);

// Episodes in parallel; each depends only on its scenario and seed.
std::vector<EpisodeLog> run_batch(const std::vector<SceneState>& scenarios, const PerceptionSource& src,
                                  const SimConfig& cfg, std::uint64_t seed);

nlohmann::json step_to_json(const StepRecord& s);
void write_episode_jsonl(const std::vector<EpisodeLog>& logs, const std::filesystem::path& path,
                         const std::string& config_hash = {});

struct BatchSummary {
  int episodes = 0;
  double mean_distance = 0.0;
  double median_distance = 0.0;
  double collision_rate = 0.0;
  nlohmann::json to_json() const;
};

BatchSummary summarize(const std::vector<EpisodeLog>& logs);

struct ScenarioConfig {
  int num_lanes = 3;
  double lane_width = 3.5;
  double ego_speed = 8.0;
  double lead_x_min = 25.0;
  double lead_x_max = 40.0;
  double lead_speed_min = 2.0;
  double lead_speed_max = 5.0;
  int traffic_min = 2;
  int traffic_max = 6;
  double traffic_speed_min = 4.0;
  double traffic_speed_max = 12.0;
};

/// Straight corridor episodes: a slow lead vehicle in the ego lane plus
/// traffic in the other lanes; the road extends past anything reachable
/// within `horizon_m` meters.
std::vector<SceneState> make_corridor_scenarios(std::uint64_t seed, int count, const ScenarioConfig& cfg,
                                                double horizon_m);

}  // namespace pim
