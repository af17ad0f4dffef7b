#include <fstream>

#include <json.hpp>

#include "pim/imitator.hpp"
#include "pim/scene.hpp"

namespace pim {

using nlohmann::json;

void save_detections(const std::vector<SceneDetections>& rows, const std::filesystem::path& path,
                     const std::string& config_hash) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write detections file '" + path.string() + "'");
  for (const auto& row : rows) {
    json dets = json::array();
    for (const auto& d : row.dets) {
      dets.push_back({{"cx", d.box.cx}, {"cy", d.box.cy}, {"w", d.box.w}, {"l", d.box.l}, {"yaw", d.box.yaw},
                      {"score", d.score}});
    }
    json j = {{"scene_id", row.scene_id}, {"dets", dets}};
    if (!config_hash.empty()) j["config_hash"] = config_hash;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::vector<SceneDetections> load_detections(const std::filesystem::path& path, std::string* config_hash) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open detections file '" + path.string() + "'");
  std::vector<SceneDetections> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      SceneDetections row;
      row.scene_id = j.at("scene_id").get<std::int64_t>();
      for (const auto& d : j.at("dets")) {
        Detection det;
        det.box = {d.at("cx").get<double>(), d.at("cy").get<double>(), d.at("w").get<double>(), d.at("l").get<double>(),
                   d.at("yaw").get<double>()};
        det.score = d.at("score").get<double>();
        if (!(det.box.w > 0.0) || !(det.box.l > 0.0)) throw ValidationError("Detection.box: extents must be > 0");
        if (det.score < 0.0 || det.score > 1.0) throw ValidationError("Detection.score: must lie in [0, 1]");
        row.dets.push_back(det);
      }
      if (config_hash != nullptr && j.contains("config_hash")) *config_hash = j.at("config_hash").get<std::string>();
      out.push_back(std::move(row));
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace pim
