#include "pim/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "pim/rng.hpp"

namespace pim {

using nlohmann::json;

json to_json(const GridSpec& g) {
  return {{"height_px", g.height_px},   {"width_px", g.width_px},     {"meters_per_px", g.meters_per_px},
          {"anchor_row", g.anchor_row}, {"anchor_col", g.anchor_col}, {"sensor_origin", {g.sensor_origin.x, g.sensor_origin.y}}};
}

json to_json(const GeneratorConfig& g) {
  return {{"count", g.count},
          {"agents_min", g.agents_min},
          {"agents_max", g.agents_max},
          {"spawn_x_min", g.spawn_x_min},
          {"spawn_x_max", g.spawn_x_max},
          {"spawn_y_min", g.spawn_y_min},
          {"spawn_y_max", g.spawn_y_max},
          {"lane_aligned", g.lane_aligned},
          {"num_lanes", g.num_lanes},
          {"lane_width", g.lane_width},
          {"lateral_jitter", g.lateral_jitter},
          {"yaw_jitter", g.yaw_jitter},
          {"min_spacing", g.min_spacing},
          {"vehicle_w_min", g.vehicle_w_min},
          {"vehicle_w_max", g.vehicle_w_max},
          {"vehicle_l_min", g.vehicle_l_min},
          {"vehicle_l_max", g.vehicle_l_max},
          {"pedestrian_fraction", g.pedestrian_fraction},
          {"speed_max", g.speed_max},
          {"road_back", g.road_back},
          {"road_ahead", g.road_ahead},
          {"randomize_world_pose", g.randomize_world_pose},
          {"max_retries", g.max_retries}};
}

json to_json(const ScenarioConfig& s) {
  return {{"num_lanes", s.num_lanes},
          {"lane_width", s.lane_width},
          {"ego_speed", s.ego_speed},
          {"lead_x_min", s.lead_x_min},
          {"lead_x_max", s.lead_x_max},
          {"lead_speed_min", s.lead_speed_min},
          {"lead_speed_max", s.lead_speed_max},
          {"traffic_min", s.traffic_min},
          {"traffic_max", s.traffic_max},
          {"traffic_speed_min", s.traffic_speed_min},
          {"traffic_speed_max", s.traffic_speed_max}};
}

json to_json(const BaselineConfig& b) {
  return {{"sigma", b.sigma},
          {"gmm_components", b.gmm_components},
          {"gmm_max_iter", b.gmm_max_iter},
          {"gmm_tol", b.gmm_tol},
          {"fn_ratio", b.fn_ratio}};
}

json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"grid", to_json(c.grid)},
          {"posenc", {{"d_model", c.posenc.d_model}}},
          {"generator", to_json(c.generator)},
          {"proxy", to_json(c.proxy)},
          {"imitator", to_json(c.imitator)},
          {"train", to_json(c.train)},
          {"sim", to_json(c.sim)},
          {"scenario", to_json(c.scenario)},
          {"baseline", to_json(c.baseline)}};
}

namespace {

void check_keys(const json& given, const json& defaults, const std::string& path) {
  if (!given.is_object()) throw ConfigError("config: '" + (path.empty() ? "<root>" : path) + "' must be an object");
  for (const auto& [key, value] : given.items()) {
    const std::string p = path.empty() ? key : path + "." + key;
    if (!defaults.contains(key)) throw ConfigError("config: unknown key '" + p + "'");
    if (defaults.at(key).is_object()) check_keys(value, defaults.at(key), p);
  }
}

template <class T>
T section(const json& j, const char* name, T (*parse)(const json&)) {
  try {
    return parse(j.at(name));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: section '") + name + "': " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: section '") + name + "': " + e.what());
  }
}

GridSpec grid_from_json(const json& j) {
  GridSpec g;
  g.height_px = j.at("height_px").get<int>();
  g.width_px = j.at("width_px").get<int>();
  g.meters_per_px = j.at("meters_per_px").get<double>();
  g.anchor_row = j.at("anchor_row").get<int>();
  g.anchor_col = j.at("anchor_col").get<int>();
  g.sensor_origin = {j.at("sensor_origin").at(0).get<double>(), j.at("sensor_origin").at(1).get<double>()};
  g.validate();
  return g;
}

PosEncSpec posenc_from_json(const json& j) {
  PosEncSpec p;
  p.d_model = j.at("d_model").get<int>();
  p.validate();
  return p;
}

GeneratorConfig generator_from_json(const json& j) {
  GeneratorConfig g;
  g.count = j.at("count");
  g.agents_min = j.at("agents_min");
  g.agents_max = j.at("agents_max");
  g.spawn_x_min = j.at("spawn_x_min");
  g.spawn_x_max = j.at("spawn_x_max");
  g.spawn_y_min = j.at("spawn_y_min");
  g.spawn_y_max = j.at("spawn_y_max");
  g.lane_aligned = j.at("lane_aligned");
  g.num_lanes = j.at("num_lanes");
  g.lane_width = j.at("lane_width");
  g.lateral_jitter = j.at("lateral_jitter");
  g.yaw_jitter = j.at("yaw_jitter");
  g.min_spacing = j.at("min_spacing");
  g.vehicle_w_min = j.at("vehicle_w_min");
  g.vehicle_w_max = j.at("vehicle_w_max");
  g.vehicle_l_min = j.at("vehicle_l_min");
  g.vehicle_l_max = j.at("vehicle_l_max");
  g.pedestrian_fraction = j.at("pedestrian_fraction");
  g.speed_max = j.at("speed_max");
  g.road_back = j.at("road_back");
  g.road_ahead = j.at("road_ahead");
  g.randomize_world_pose = j.at("randomize_world_pose");
  g.max_retries = j.at("max_retries");
  if (g.count < 0 || g.agents_min < 0 || g.agents_max < g.agents_min) {
    throw std::invalid_argument("generator: need count >= 0 and 0 <= agents_min <= agents_max");
  }
  return g;
}

ScenarioConfig scenario_from_json(const json& j) {
  ScenarioConfig s;
  s.num_lanes = j.at("num_lanes");
  s.lane_width = j.at("lane_width");
  s.ego_speed = j.at("ego_speed");
  s.lead_x_min = j.at("lead_x_min");
  s.lead_x_max = j.at("lead_x_max");
  s.lead_speed_min = j.at("lead_speed_min");
  s.lead_speed_max = j.at("lead_speed_max");
  s.traffic_min = j.at("traffic_min");
  s.traffic_max = j.at("traffic_max");
  s.traffic_speed_min = j.at("traffic_speed_min");
  s.traffic_speed_max = j.at("traffic_speed_max");
  if (s.num_lanes < 2) throw std::invalid_argument("scenario.num_lanes: must be >= 2");
  return s;
}

BaselineConfig baseline_from_json(const json& j) {
  BaselineConfig b;
  b.sigma = j.at("sigma");
  b.gmm_components = j.at("gmm_components");
  b.gmm_max_iter = j.at("gmm_max_iter");
  b.gmm_tol = j.at("gmm_tol");
  b.fn_ratio = j.at("fn_ratio");
  if (b.sigma < 0 || b.gmm_components < 1 || b.fn_ratio > 1.0) throw std::invalid_argument("baseline: invalid values");
  return b;
}

}  // namespace

void RunConfig::validate() const {
  grid.validate();
  posenc.validate();
  proxy.validate();
  imitator.validate(grid);
  train.validate();
  sim.validate();
  if (imitator.in_channels != 4 + posenc.d_model) {
    throw ConfigError("config: imitator.in_channels must equal 4 + posenc.d_model");
  }
}

RunConfig run_config_from_json(const json& j) {
  const RunConfig defaults;
  json merged = to_json(defaults);
  check_keys(j, merged, "");
  const bool explicit_channels = j.contains("imitator") && j.at("imitator").contains("in_channels");
  merged.merge_patch(j);

  RunConfig c;
  try {
    c.seed = merged.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: seed: ") + e.what());
  }
  c.grid = section(merged, "grid", grid_from_json);
  c.posenc = section(merged, "posenc", posenc_from_json);
  c.generator = section(merged, "generator", generator_from_json);
  c.proxy = section(merged, "proxy", target_proxy_spec_from_json);
  c.imitator = section(merged, "imitator", imitator_config_from_json);
  c.train = section(merged, "train", train_config_from_json);
  c.sim = section(merged, "sim", sim_config_from_json);
  c.scenario = section(merged, "scenario", scenario_from_json);
  c.baseline = section(merged, "baseline", baseline_from_json);
  if (!explicit_channels) c.imitator.in_channels = 4 + c.posenc.d_model;
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  return run_config_from_json(j);
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  if (value.is_object() || value.is_array()) throw ConfigError("override '" + key + "': only scalars may be set by flag");
  json* node = &doc;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (const auto& p : parts) {
    if (!node->is_object() || !node->contains(p)) throw ConfigError("override '" + key + "': unknown key");
    node = &(*node)[p];
  }
  if (node->is_object() || node->is_array()) throw ConfigError("override '" + key + "': not a scalar setting");
  *node = value;
}

std::string config_hash(const RunConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json(c).dump())));
  return buf;
}

}  // namespace pim
