#include "pim/scene.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pim/rng.hpp"

namespace pim {

using nlohmann::json;

std::string to_string(AgentKind k) { return k == AgentKind::vehicle ? "vehicle" : "pedestrian"; }

AgentKind agent_kind_from_string(const std::string& s) {
  if (s == "vehicle") return AgentKind::vehicle;
  if (s == "pedestrian") return AgentKind::pedestrian;
  throw ValidationError("Agent.kind: unknown kind '" + s + "'");
}

namespace {

void require_finite(double v, const std::string& field) {
  if (!std::isfinite(v)) throw ValidationError(field + ": value is not finite");
}

void validate_box(const OrientedBox& b, const std::string& field) {
  require_finite(b.cx, field + ".cx");
  require_finite(b.cy, field + ".cy");
  require_finite(b.yaw, field + ".yaw");
  if (!(b.w > 0.0) || !std::isfinite(b.w)) throw ValidationError(field + ".w: must be > 0");
  if (!(b.l > 0.0) || !std::isfinite(b.l)) throw ValidationError(field + ".l: must be > 0");
  if (b.yaw <= -std::numbers::pi || b.yaw > std::numbers::pi) {
    throw ValidationError(field + ".yaw: must lie in (-pi, pi]");
  }
}

json vec_list(const std::vector<Vec2>& pts) {
  json arr = json::array();
  for (const auto& p : pts) arr.push_back({p.x, p.y});
  return arr;
}

json box_json(const OrientedBox& b) {
  return {{"cx", b.cx}, {"cy", b.cy}, {"w", b.w}, {"l", b.l}, {"yaw", b.yaw}};
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ParseError(where + ": expected an object");
  for (const auto& [k, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw ParseError(where + ": unknown key '" + k + "'");
  }
}

double num(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ParseError(where + ": missing key '" + key + "'");
  const auto& v = j.at(key);
  if (!v.is_number()) throw ParseError(where + "." + key + ": expected a number");
  return v.get<double>();
}

OrientedBox box_from(const json& j, const std::string& where) {
  check_keys(j, {"cx", "cy", "w", "l", "yaw"}, where);
  return {num(j, "cx", where), num(j, "cy", where), num(j, "w", where), num(j, "l", where),
          num(j, "yaw", where)};
}

std::vector<Vec2> points_from(const json& j, const std::string& where) {
  if (!j.is_array()) throw ParseError(where + ": expected an array of points");
  std::vector<Vec2> out;
  for (const auto& p : j) {
    if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
      throw ParseError(where + ": point must be [x, y]");
    }
    out.push_back({p[0].get<double>(), p[1].get<double>()});
  }
  return out;
}

}  // namespace

void validate(const SceneState& s) {
  require_finite(s.t, "SceneState.t");
  if (s.t < 0.0) throw ValidationError("SceneState.t: must be >= 0");
  require_finite(s.ego.x, "Pose2.x");
  require_finite(s.ego.y, "Pose2.y");
  require_finite(s.ego.yaw, "Pose2.yaw");
  if (s.ego.yaw <= -std::numbers::pi || s.ego.yaw > std::numbers::pi) {
    throw ValidationError("Pose2.yaw: must lie in (-pi, pi]");
  }
  require_finite(s.ego_speed, "SceneState.ego_speed");
  validate_box(s.ego_box, "SceneState.ego_box");
  if (std::abs(s.ego_box.cx - s.ego.x) > 1e-9 || std::abs(s.ego_box.cy - s.ego.y) > 1e-9) {
    throw ValidationError("SceneState.ego_box: center must coincide with ego position");
  }
  std::set<std::int64_t> ids;
  for (const auto& a : s.agents) {
    validate_box(a.box, "Agent.box");
    require_finite(a.speed, "Agent.speed");
    if (a.speed < 0.0) throw ValidationError("Agent.speed: must be >= 0");
    if (!ids.insert(a.id).second) throw ValidationError("Agent.id: duplicate id " + std::to_string(a.id));
  }
  for (const auto& poly : s.road.freespace) {
    if (poly.size() < 3) throw ValidationError("RoadMap.freespace: polygon needs >= 3 vertices");
    if (std::abs(polygon_signed_area(poly)) <= 0.0) {
      throw ValidationError("RoadMap.freespace: polygon has zero area");
    }
  }
  for (const auto& line : s.road.waypoint_lines) {
    if (line.size() < 2) throw ValidationError("RoadMap.waypoint_lines: polyline needs >= 2 points");
  }
}

std::string scene_to_json_line(const SceneState& s, const std::string& config_hash) {
  json agents = json::array();
  for (const auto& a : s.agents) {
    agents.push_back({{"id", a.id}, {"kind", to_string(a.kind)}, {"speed", a.speed}, {"box", box_json(a.box)}});
  }
  json fs = json::array();
  for (const auto& p : s.road.freespace) fs.push_back(vec_list(p));
  json wl = json::array();
  for (const auto& p : s.road.waypoint_lines) wl.push_back(vec_list(p));
  json j = {{"id", s.id},
            {"t", s.t},
            {"ego", {{"x", s.ego.x}, {"y", s.ego.y}, {"yaw", s.ego.yaw}}},
            {"ego_speed", s.ego_speed},
            {"ego_box", box_json(s.ego_box)},
            {"agents", agents},
            {"road", {{"freespace", fs}, {"waypoint_lines", wl}}}};
  if (!config_hash.empty()) j["config_hash"] = config_hash;
  return j.dump();
}

SceneState scene_from_json_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("invalid JSON: ") + e.what());
  }
  check_keys(j, {"id", "t", "ego", "ego_speed", "ego_box", "agents", "road", "config_hash"}, "scene");
  SceneState s;
  if (j.contains("id")) s.id = j.at("id").get<std::int64_t>();
  s.t = num(j, "t", "scene");
  if (!j.contains("ego")) throw ParseError("scene: missing key 'ego'");
  check_keys(j.at("ego"), {"x", "y", "yaw"}, "ego");
  s.ego = {num(j["ego"], "x", "ego"), num(j["ego"], "y", "ego"), num(j["ego"], "yaw", "ego")};
  if (j.contains("ego_speed")) s.ego_speed = num(j, "ego_speed", "scene");
  if (!j.contains("ego_box")) throw ParseError("scene: missing key 'ego_box'");
  s.ego_box = box_from(j.at("ego_box"), "ego_box");
  if (!j.contains("agents") || !j.at("agents").is_array()) throw ParseError("scene: 'agents' must be an array");
  for (const auto& aj : j.at("agents")) {
    check_keys(aj, {"id", "kind", "speed", "box"}, "agent");
    Agent a;
    if (!aj.contains("id")) throw ParseError("agent: missing key 'id'");
    a.id = aj.at("id").get<std::int64_t>();
    a.kind = agent_kind_from_string(aj.value("kind", std::string("vehicle")));
    a.speed = num(aj, "speed", "agent");
    if (!aj.contains("box")) throw ParseError("agent: missing key 'box'");
    a.box = box_from(aj.at("box"), "agent.box");
    s.agents.push_back(a);
  }
  if (!j.contains("road")) throw ParseError("scene: missing key 'road'");
  const auto& rj = j.at("road");
  check_keys(rj, {"freespace", "waypoint_lines"}, "road");
  if (rj.contains("freespace")) {
    for (const auto& p : rj.at("freespace")) s.road.freespace.push_back(points_from(p, "road.freespace"));
  }
  if (rj.contains("waypoint_lines")) {
    for (const auto& p : rj.at("waypoint_lines")) {
      s.road.waypoint_lines.push_back(points_from(p, "road.waypoint_lines"));
    }
  }
  return s;
}

std::vector<SceneState> load_scenes(const std::filesystem::path& path, std::string* config_hash) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scene file '" + path.string() + "'");
  std::vector<SceneState> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    SceneState s;
    try {
      s = scene_from_json_line(line);
      if (config_hash != nullptr) {
        const auto j = json::parse(line);
        if (j.contains("config_hash")) *config_hash = j.at("config_hash").get<std::string>();
      }
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    try {
      validate(s);
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(std::move(s));
  }
  return out;
}

void save_scenes(const std::vector<SceneState>& scenes, const std::filesystem::path& path,
                 const std::string& config_hash) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write scene file '" + path.string() + "'");
  for (const auto& s : scenes) out << scene_to_json_line(s, config_hash) << '\n';
  out.flush();
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Vec2 world_to_ego(const Pose2& ego, Vec2 p) {
  const double c = std::cos(ego.yaw);
  const double s = std::sin(ego.yaw);
  const double dx = p.x - ego.x;
  const double dy = p.y - ego.y;
  return {c * dx + s * dy, -s * dx + c * dy};
}

OrientedBox world_to_ego(const Pose2& ego, const OrientedBox& b) {
  const Vec2 c = world_to_ego(ego, b.center());
  return {c.x, c.y, b.w, b.l, normalize_angle(b.yaw - ego.yaw)};
}

SceneState to_ego_frame(const SceneState& scene) {
  SceneState out = scene;
  const Pose2 ego = scene.ego;
  out.ego = {0.0, 0.0, 0.0};
  out.ego_box = world_to_ego(ego, scene.ego_box);
  out.ego_box.cx = 0.0;
  out.ego_box.cy = 0.0;
  for (auto& a : out.agents) a.box = world_to_ego(ego, a.box);
  for (auto& poly : out.road.freespace) {
    for (auto& p : poly) p = world_to_ego(ego, p);
  }
  for (auto& line : out.road.waypoint_lines) {
    for (auto& p : line) p = world_to_ego(ego, p);
  }
  return out;
}

RoadMap make_corridor(int num_lanes, double lane_width, double x_back, double x_ahead) {
  RoadMap road;
  const double half = 0.5 * num_lanes * lane_width;
  road.freespace.push_back({{-x_back, -half}, {x_ahead, -half}, {x_ahead, half}, {-x_back, half}});
  for (int k = 0; k < num_lanes; ++k) {
    const double y = -half + (k + 0.5) * lane_width;
    road.waypoint_lines.push_back({{-x_back, y}, {x_ahead, y}});
  }
  return road;
}

OrientedBox default_ego_box(const Pose2& ego) { return {ego.x, ego.y, 2.0, 4.5, ego.yaw}; }

namespace {

Vec2 ego_to_world(const Pose2& ego, Vec2 p) {
  const double c = std::cos(ego.yaw);
  const double s = std::sin(ego.yaw);
  return {ego.x + c * p.x - s * p.y, ego.y + s * p.x + c * p.y};
}

}  // namespace

std::vector<SceneState> generate_scenes(std::uint64_t seed, const GeneratorConfig& cfg) {
  if (cfg.agents_min < 0 || cfg.agents_max < cfg.agents_min) {
    throw GenerationError("generator: invalid agent count range");
  }
  std::vector<SceneState> out;
  out.reserve(static_cast<std::size_t>(cfg.count));
  for (int index = 0; index < cfg.count; ++index) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(index)));
    SceneState s;
    s.id = index;
    s.ego_box = default_ego_box(s.ego);
    s.road = make_corridor(cfg.num_lanes, cfg.lane_width, cfg.road_back, cfg.road_ahead);
    s.ego_speed = uniform(rng, 0.0, cfg.speed_max);

    const int n_agents = uniform_int(rng, cfg.agents_min, cfg.agents_max);
    const double road_half = 0.5 * cfg.num_lanes * cfg.lane_width;
    for (int k = 0; k < n_agents; ++k) {
      bool placed = false;
      for (int attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
        Agent a;
        a.id = k + 1;
        a.kind = uniform(rng, 0.0, 1.0) < cfg.pedestrian_fraction ? AgentKind::pedestrian : AgentKind::vehicle;
        const double x = uniform(rng, cfg.spawn_x_min, cfg.spawn_x_max);
        double y = 0.0;
        double yaw = normal(rng, 0.0, cfg.yaw_jitter);
        if (a.kind == AgentKind::pedestrian) {
          // Sidewalk strip just outside the road edge.
          const double side = uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0;
          y = side * (road_half + uniform(rng, 0.5, 2.5));
          yaw = uniform(rng, -std::numbers::pi, std::numbers::pi);
          a.box = {x, y, 0.6, 0.6, normalize_angle(yaw)};
          a.speed = uniform(rng, 0.0, 1.5);
        } else {
          if (cfg.lane_aligned) {
            const int lane = uniform_int(rng, 0, cfg.num_lanes - 1);
            y = -road_half + (lane + 0.5) * cfg.lane_width + uniform(rng, -cfg.lateral_jitter, cfg.lateral_jitter);
          } else {
            y = uniform(rng, cfg.spawn_y_min, cfg.spawn_y_max);
          }
          const double w = uniform(rng, cfg.vehicle_w_min, cfg.vehicle_w_max);
          const double l = uniform(rng, cfg.vehicle_l_min, cfg.vehicle_l_max);
          a.box = {x, y, w, l, normalize_angle(yaw)};
          a.speed = uniform(rng, 0.0, cfg.speed_max);
        }
        bool ok = iou_rotated(a.box, s.ego_box) == 0.0;
        for (const auto& other : s.agents) {
          if (!ok) break;
          const double d = std::hypot(other.box.cx - a.box.cx, other.box.cy - a.box.cy);
          ok = d >= cfg.min_spacing && iou_rotated(other.box, a.box) == 0.0;
        }
        if (ok) {
          s.agents.push_back(a);
          placed = true;
        }
      }
      if (!placed) {
        throw GenerationError("generator: could not place agent " + std::to_string(k) + " in scene " +
                              std::to_string(index) + " after " + std::to_string(cfg.max_retries) +
                              " retries");
      }
    }

    if (cfg.randomize_world_pose) {
      const Pose2 world{uniform(rng, -500.0, 500.0), uniform(rng, -500.0, 500.0),
                        normalize_angle(uniform(rng, -std::numbers::pi, std::numbers::pi))};
      auto place = [&](OrientedBox b) {
        const Vec2 c = ego_to_world(world, b.center());
        return OrientedBox{c.x, c.y, b.w, b.l, normalize_angle(b.yaw + world.yaw)};
      };
      s.ego = world;
      s.ego_box = default_ego_box(world);
      for (auto& a : s.agents) a.box = place(a.box);
      for (auto& poly : s.road.freespace) {
        for (auto& p : poly) p = ego_to_world(world, p);
      }
      for (auto& line : s.road.waypoint_lines) {
        for (auto& p : line) p = ego_to_world(world, p);
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace pim
