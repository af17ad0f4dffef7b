#include "pim/simloop.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "pim/rng.hpp"

namespace pim {

using nlohmann::json;

void SimConfig::validate() const {
  if (!(dt > 0.0)) throw std::invalid_argument("SimConfig.dt: must be > 0");
  if (horizon < 1) throw std::invalid_argument("SimConfig.horizon: must be >= 1");
  if (!(wheelbase > 0.0)) throw std::invalid_argument("SimConfig.wheelbase: must be > 0");
  if (!(a_min < 0.0 && a_max > 0.0)) throw std::invalid_argument("SimConfig: need a_min < 0 < a_max");
  if (!(steer_max >= 0.0)) throw std::invalid_argument("SimConfig.steer_max: must be >= 0");
  if (bins < 1) throw std::invalid_argument("SimConfig.bins: must be >= 1");
  if (!(fov > 0.0) || !(r_max > 0.0)) throw std::invalid_argument("SimConfig: fov and r_max must be > 0");
  if (!(d_safe > 0.0) || !(target_speed >= 0.0)) throw std::invalid_argument("SimConfig: d_safe must be > 0");
}

json to_json(const SimConfig& c) {
  return {{"dt", c.dt},           {"horizon", c.horizon},   {"wheelbase", c.wheelbase},
          {"a_min", c.a_min},     {"a_max", c.a_max},       {"steer_max", c.steer_max},
          {"bins", c.bins},       {"fov", c.fov},           {"r_max", c.r_max},
          {"target_speed", c.target_speed}, {"kp", c.kp},   {"d_safe", c.d_safe},
          {"forward_half_angle", c.forward_half_angle}};
}

SimConfig sim_config_from_json(const json& j) {
  SimConfig c;
  c.dt = j.value("dt", c.dt);
  c.horizon = j.value("horizon", c.horizon);
  c.wheelbase = j.value("wheelbase", c.wheelbase);
  c.a_min = j.value("a_min", c.a_min);
  c.a_max = j.value("a_max", c.a_max);
  c.steer_max = j.value("steer_max", c.steer_max);
  c.bins = j.value("bins", c.bins);
  c.fov = j.value("fov", c.fov);
  c.r_max = j.value("r_max", c.r_max);
  c.target_speed = j.value("target_speed", c.target_speed);
  c.kp = j.value("kp", c.kp);
  c.d_safe = j.value("d_safe", c.d_safe);
  c.forward_half_angle = j.value("forward_half_angle", c.forward_half_angle);
  c.validate();
  return c;
}

RangeReading to_range_readings(const std::vector<Detection>& dets, int bins, double fov, double r_max) {
  RangeReading out;
  out.azimuths.resize(bins);
  out.ranges.assign(bins, r_max);
  for (int i = 0; i < bins; ++i) {
    const double az = -0.5 * fov + (i + 0.5) * fov / bins;
    out.azimuths[i] = az;
    const Vec2 dir{std::cos(az), std::sin(az)};
    for (const auto& d : dets) {
      const auto hit = ray_box_distance(d.box, {0.0, 0.0}, dir);
      if (hit) out.ranges[i] = std::min(out.ranges[i], std::max(*hit, 1e-6));
    }
  }
  return out;
}

EgoAction plan(const RangeReading& ranges, double ego_speed, const SimConfig& cfg) {
  double nearest = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < ranges.ranges.size(); ++i) {
    if (std::abs(ranges.azimuths[i]) <= cfg.forward_half_angle) nearest = std::min(nearest, ranges.ranges[i]);
  }
  EgoAction a;
  if (nearest < cfg.d_safe) {
    a.accel = cfg.a_min;
  } else {
    a.accel = std::clamp(cfg.kp * (cfg.target_speed - ego_speed), cfg.a_min, cfg.a_max);
  }
  a.steer = 0.0;
  return a;
}

SceneState step_world(const SceneState& state, const EgoAction& action, double dt, double wheelbase) {
  if (!(dt > 0.0)) throw std::invalid_argument("step_world: dt must be > 0");
  SceneState s = state;
  const double v = state.ego_speed;
  s.ego.x += v * std::cos(state.ego.yaw) * dt;
  s.ego.y += v * std::sin(state.ego.yaw) * dt;
  s.ego.yaw = normalize_angle(state.ego.yaw + v / wheelbase * std::tan(action.steer) * dt);
  s.ego_speed = std::max(0.0, v + action.accel * dt);
  s.ego_box.cx = s.ego.x;
  s.ego_box.cy = s.ego.y;
  s.ego_box.yaw = s.ego.yaw;
  for (auto& a : s.agents) {
    a.box.cx += a.speed * std::cos(a.box.yaw) * dt;
    a.box.cy += a.speed * std::sin(a.box.yaw) * dt;
  }
  s.t = state.t + dt;
  return s;
}

bool in_collision(const SceneState& state) {
  for (const auto& a : state.agents) {
    if (may_overlap(state.ego_box, a.box) && iou_rotated(state.ego_box, a.box) > 0.0) return true;
  }
  return false;
}

std::string to_string(PerceptionKind k) {
  switch (k) {
    case PerceptionKind::annotation: return "annotation";
    case PerceptionKind::proxy: return "proxy";
    case PerceptionKind::imitator: return "imitator";
    case PerceptionKind::gaussian: return "gaussian";
    case PerceptionKind::multimodal: return "multimodal";
  }
  return "annotation";
}

PerceptionKind perception_kind_from_string(const std::string& s) {
  for (auto k : {PerceptionKind::annotation, PerceptionKind::proxy, PerceptionKind::imitator, PerceptionKind::gaussian,
                 PerceptionKind::multimodal}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown perception source '" + s + "'");
}

std::vector<Detection> perceive(const PerceptionSource& src, const SceneState& ego_scene, std::uint64_t stream) {
  switch (src.kind) {
    case PerceptionKind::annotation: {
      std::vector<Detection> out;
      for (const auto& b : visible_annotation(ego_scene, src.grid)) out.push_back({b, 1.0});
      return out;
    }
    case PerceptionKind::proxy: {
      SceneState keyed = ego_scene;
      keyed.id = static_cast<std::int64_t>(stream >> 1);
      return target_proxy_perceive(keyed, src.grid, src.proxy);
    }
    case PerceptionKind::imitator: {
      if (src.imitator == nullptr) throw std::invalid_argument("perceive: imitator source without a model");
      return src.imitator->perceive(build_stack(ego_scene, src.grid, src.posenc), src.imitator_threshold);
    }
    case PerceptionKind::gaussian:
      return gaussian_baseline(visible_annotation(ego_scene, src.grid), src.gaussian, stream);
    case PerceptionKind::multimodal:
      if (src.gmm == nullptr) throw std::invalid_argument("perceive: multimodal source without a model");
      return multimodal_baseline(visible_annotation(ego_scene, src.grid), *src.gmm, src.fn_ratio, src.seed, stream);
  }
  return {};
}

EpisodeLog run_episode(const SceneState& scene0, const PerceptionSource& src, const SimConfig& cfg,
                       std::uint64_t seed) {
  cfg.validate();
  EpisodeLog log;
  log.scene_id = scene0.id;
  SceneState state = scene0;
  const std::uint64_t episode_seed = derive_seed(seed, static_cast<std::uint64_t>(scene0.id));
  for (int step = 0; step < cfg.horizon; ++step) {
    StepRecord rec;
    rec.step = step;
    rec.t = state.t;
    rec.ego = state.ego;
    rec.speed = state.ego_speed;
    rec.agents = static_cast<int>(state.agents.size());
    try {
      rec.dets = perceive(src, to_ego_frame(state), derive_seed(episode_seed, static_cast<std::uint64_t>(step)));
    } catch (const std::exception& e) {
      log.terminal_cause = std::string("perception_error: ") + e.what();
      return log;
    }
    const RangeReading rr = to_range_readings(rec.dets, cfg.bins, cfg.fov, cfg.r_max);
    rec.ranges = rr.ranges;
    rec.action = plan(rr, state.ego_speed, cfg);
    rec.action.accel = std::clamp(rec.action.accel, cfg.a_min, cfg.a_max);
    rec.action.steer = std::clamp(rec.action.steer, -cfg.steer_max, cfg.steer_max);
    const SceneState next = step_world(state, rec.action, cfg.dt, cfg.wheelbase);
    rec.step_distance = std::hypot(next.ego.x - state.ego.x, next.ego.y - state.ego.y);
    log.distance += rec.step_distance;
    rec.distance = log.distance;
    rec.collision = in_collision(next);
    log.steps.push_back(std::move(rec));
    state = next;
    if (log.steps.back().collision) {
      log.collision = true;
      log.terminal_cause = "collision";
      return log;
    }
  }
  log.terminal_cause = "horizon";
  return log;
}

std::vector<EpisodeLog> run_batch(const std::vector<SceneState>& scenarios, const PerceptionSource& src,
                                  const SimConfig& cfg, std::uint64_t seed) {
  std::vector<EpisodeLog> logs(scenarios.size());
  const long n = static_cast<long>(scenarios.size());
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < n; ++i) logs[i] = run_episode(scenarios[i], src, cfg, seed);
  return logs;
}

json step_to_json(const StepRecord& s) {
  json dets = json::array();
  for (const auto& d : s.dets) dets.push_back({d.box.cx, d.box.cy, d.box.w, d.box.l, d.box.yaw, d.score});
  return {{"step", s.step},
          {"t", s.t},
          {"ego", {s.ego.x, s.ego.y, s.ego.yaw}},
          {"speed", s.speed},
          {"agents", s.agents},
          {"dets", dets},
          {"ranges", s.ranges},
          {"accel", s.action.accel},
          {"steer", s.action.steer},
          {"step_distance", s.step_distance},
          {"distance", s.distance},
          {"collision", s.collision}};
}

void write_episode_jsonl(const std::vector<EpisodeLog>& logs, const std::filesystem::path& path,
                         const std::string& config_hash) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  for (const auto& log : logs) {
    for (const auto& s : log.steps) {
      json j = step_to_json(s);
      j["scene_id"] = log.scene_id;
      if (!config_hash.empty()) j["config_hash"] = config_hash;
      out << j.dump() << '\n';
    }
    json end = {{"scene_id", log.scene_id},
                {"terminal_cause", log.terminal_cause},
                {"distance", log.distance},
                {"collision", log.collision},
                {"steps", log.steps.size()}};
    if (!config_hash.empty()) end["config_hash"] = config_hash;
    out << end.dump() << '\n';
  }
}

json BatchSummary::to_json() const {
  return {{"episodes", episodes},
          {"mean_distance", mean_distance},
          {"median_distance", median_distance},
          {"collision_rate", collision_rate}};
}

BatchSummary summarize(const std::vector<EpisodeLog>& logs) {
  BatchSummary s;
  s.episodes = static_cast<int>(logs.size());
  if (logs.empty()) return s;
  std::vector<double> d;
  int collisions = 0;
  for (const auto& l : logs) {
    d.push_back(l.distance);
    collisions += l.collision ? 1 : 0;
  }
  double total = 0.0;
  for (double x : d) total += x;
  s.mean_distance = total / static_cast<double>(d.size());
  std::sort(d.begin(), d.end());
  const std::size_t m = d.size() / 2;
  s.median_distance = d.size() % 2 == 1 ? d[m] : 0.5 * (d[m - 1] + d[m]);
  s.collision_rate = static_cast<double>(collisions) / static_cast<double>(logs.size());
  return s;
}

std::vector<SceneState> make_corridor_scenarios(std::uint64_t seed, int count, const ScenarioConfig& cfg,
                                                double horizon_m) {
  std::vector<SceneState> out;
  const double half = 0.5 * cfg.num_lanes * cfg.lane_width;
  const int ego_lane = cfg.num_lanes / 2;
  auto lane_y = [&](int k) { return -half + (k + 0.5) * cfg.lane_width; };
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(derive_seed(seed, "corridor"), static_cast<std::uint64_t>(i)));
    SceneState s;
    s.id = i;
    s.ego = {0.0, lane_y(ego_lane), 0.0};
    s.ego_box = default_ego_box(s.ego);
    s.ego_speed = cfg.ego_speed;
    s.road = make_corridor(cfg.num_lanes, cfg.lane_width, 30.0, horizon_m + 150.0);
    Agent lead;
    lead.id = 1;
    lead.box = {uniform(rng, cfg.lead_x_min, cfg.lead_x_max), lane_y(ego_lane), uniform(rng, 1.8, 2.2),
                uniform(rng, 4.0, 5.0), 0.0};
    lead.speed = uniform(rng, cfg.lead_speed_min, cfg.lead_speed_max);
    s.agents.push_back(lead);
    const int traffic = uniform_int(rng, cfg.traffic_min, cfg.traffic_max);
    for (int k = 0; k < traffic; ++k) {
      int lane = uniform_int(rng, 0, cfg.num_lanes - 2);
      if (lane >= ego_lane) ++lane;
      Agent a;
      a.id = k + 2;
      a.speed = uniform(rng, cfg.traffic_speed_min, cfg.traffic_speed_max);
      const double w = uniform(rng, 1.8, 2.2);
      const double l = uniform(rng, 4.0, 5.0);
      const double x = uniform(rng, -10.0, 60.0);
      a.box = {x, lane_y(lane) + uniform(rng, -0.2, 0.2), w, l, 0.0};
      bool clear = true;
      for (const auto& o : s.agents) {
        if (std::abs(o.box.cy - a.box.cy) < 2.5 && std::abs(o.box.cx - a.box.cx) < 8.0) clear = false;
      }
      if (std::abs(a.box.cy - s.ego.y) < 2.5 && std::abs(a.box.cx) < 8.0) clear = false;
      if (clear) s.agents.push_back(a);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace pim
