#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "pim/geometry.hpp"

namespace pim {

struct Pose2 {
  double x = 0.0;
  double y = 0.0;
  double yaw = 0.0;
};

enum class AgentKind { vehicle, pedestrian };

std::string to_string(AgentKind k);
AgentKind agent_kind_from_string(const std::string& s);

struct Agent {
  std::int64_t id = 0;
  OrientedBox box;
  double speed = 0.0;
  AgentKind kind = AgentKind::vehicle;
};

using Polygon = std::vector<Vec2>;
using Polyline = std::vector<Vec2>;

struct RoadMap {
  std::vector<Polygon> freespace;
  std::vector<Polyline> waypoint_lines;
};

/// One timestep of a traffic scene. `id` identifies the scene inside a
/// corpus; `ego_speed` is carried so the closed loop can integrate the ego
/// vehicle from a bare SceneState.
struct SceneState {
  std::int64_t id = 0;
  double t = 0.0;
  Pose2 ego;
  double ego_speed = 0.0;
  OrientedBox ego_box;
  std::vector<Agent> agents;
  RoadMap road;
};

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Throws ValidationError naming the offending field.
void validate(const SceneState& s);

/// Line-delimited JSON corpus. Lines may carry an optional "config_hash"
/// string, which load_scenes reports through `config_hash` when non-null.
std::vector<SceneState> load_scenes(const std::filesystem::path& path, std::string* config_hash = nullptr);
void save_scenes(const std::vector<SceneState>& scenes, const std::filesystem::path& path,
                 const std::string& config_hash = {});

std::string scene_to_json_line(const SceneState& s, const std::string& config_hash = {});
SceneState scene_from_json_line(const std::string& line);

// Rigid transform taking the ego pose to the origin.
SceneState to_ego_frame(const SceneState& scene);

Vec2 world_to_ego(const Pose2& ego, Vec2 p);
OrientedBox world_to_ego(const Pose2& ego, const OrientedBox& b);

struct GeneratorConfig {
  int count = 100;
  int agents_min = 3;
  int agents_max = 10;
  // Spawn region in the ego frame (meters).
  double spawn_x_min = 4.0;
  double spawn_x_max = 46.0;
  double spawn_y_min = -5.25;
  double spawn_y_max = 5.25;
  // When true, agents sit on lane centers with small lateral jitter.
  bool lane_aligned = true;
  int num_lanes = 3;
  double lane_width = 3.5;
  double lateral_jitter = 0.3;
  double yaw_jitter = 0.1;
  double min_spacing = 3.0;
  double vehicle_w_min = 1.8;
  double vehicle_w_max = 2.2;
  double vehicle_l_min = 4.0;
  double vehicle_l_max = 5.0;
  double pedestrian_fraction = 0.0;
  double speed_max = 12.0;
  double road_back = 20.0;
  double road_ahead = 120.0;
  // Places the whole scene at a random world pose (exercises to_ego_frame).
  bool randomize_world_pose = true;
  int max_retries = 100;
};

/// Seeded corpus generator. Agents never overlap each other or the ego box.
/// Throws GenerationError naming the scene index when an agent cannot be
/// placed within `max_retries` attempts.
std::vector<SceneState> generate_scenes(std::uint64_t seed, const GeneratorConfig& cfg);

// Straight multi-lane corridor along +x, centered on y = 0.
RoadMap make_corridor(int num_lanes, double lane_width, double x_back, double x_ahead);

OrientedBox default_ego_box(const Pose2& ego);

}  // namespace pim
