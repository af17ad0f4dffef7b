#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "pim/scene.hpp"
#include "support.hpp"

using namespace pim;

TEST_CASE("scene JSON line roundtrip") {
  GeneratorConfig cfg;
  cfg.count = 5;
  const auto scenes = generate_scenes(42, cfg);
  for (const auto& s : scenes) {
    const auto back = scene_from_json_line(scene_to_json_line(s, "abc"));
    CHECK(back.id == s.id);
    CHECK(back.ego_speed == s.ego_speed);
    REQUIRE(back.agents.size() == s.agents.size());
    for (std::size_t i = 0; i < s.agents.size(); ++i) {
      CHECK(back.agents[i].box.cx == s.agents[i].box.cx);
      CHECK(back.agents[i].box.yaw == s.agents[i].box.yaw);
    }
    CHECK(scene_to_json_line(back, "abc") == scene_to_json_line(s, "abc"));
  }
}

TEST_CASE("scene parsing rejects unknown keys and bad values") {
  GeneratorConfig cfg;
  cfg.count = 1;
  const auto line = scene_to_json_line(generate_scenes(1, cfg)[0]);
  std::string bad = line;
  bad.insert(1, "\"bogus\":1,");
  CHECK_THROWS_AS(scene_from_json_line(bad), ParseError);
  CHECK_THROWS_AS(scene_from_json_line("{not json"), ParseError);

  SceneState s = testing::ego_scene({{5.0, 0.0, 2.0, 4.0, 0.0}});
  CHECK_NOTHROW(validate(s));
  s.agents[0].box.w = -1.0;
  CHECK_THROWS_AS(validate(s), ValidationError);
  s.agents[0].box.w = 2.0;
  s.agents.push_back(s.agents[0]);
  CHECK_THROWS_AS(validate(s), ValidationError);
}

TEST_CASE("save and load a corpus file") {
  GeneratorConfig cfg;
  cfg.count = 4;
  const auto scenes = generate_scenes(3, cfg);
  const auto path = std::filesystem::temp_directory_path() / "pim_scene_io.jsonl";
  save_scenes(scenes, path, "hash123");
  std::string hash;
  const auto back = load_scenes(path, &hash);
  CHECK(hash == "hash123");
  REQUIRE(back.size() == scenes.size());
  CHECK(back[2].agents.size() == scenes[2].agents.size());
  CHECK_THROWS_AS(load_scenes("/nonexistent/dir/x.jsonl"), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("generator is deterministic and places agents without overlap") {
  GeneratorConfig cfg;
  cfg.count = 30;
  const auto a = generate_scenes(9, cfg);
  const auto b = generate_scenes(9, cfg);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(scene_to_json_line(a[i]) == scene_to_json_line(b[i]));
  CHECK(scene_to_json_line(generate_scenes(10, cfg)[0]) != scene_to_json_line(a[0]));
  for (const auto& s : a) {
    CHECK_NOTHROW(validate(s));
    CHECK(static_cast<int>(s.agents.size()) >= cfg.agents_min);
    CHECK(static_cast<int>(s.agents.size()) <= cfg.agents_max);
    for (std::size_t i = 0; i < s.agents.size(); ++i) {
      CHECK(iou_rotated(s.agents[i].box, s.ego_box) == 0.0);
      for (std::size_t j = i + 1; j < s.agents.size(); ++j) CHECK(iou_rotated(s.agents[i].box, s.agents[j].box) == 0.0);
    }
  }
}

TEST_CASE("generator reports the scene it cannot fill") {
  GeneratorConfig cfg;
  cfg.count = 3;
  cfg.agents_min = cfg.agents_max = 60;
  cfg.max_retries = 5;
  CHECK_THROWS_WITH_AS(generate_scenes(1, cfg), doctest::Contains("scene 0"), GenerationError);
}

TEST_CASE("to_ego_frame puts the ego at the origin heading +x") {
  GeneratorConfig cfg;
  cfg.count = 10;
  for (const auto& s : generate_scenes(4, cfg)) {
    const auto e = to_ego_frame(s);
    CHECK(e.ego.x == 0.0);
    CHECK(e.ego.yaw == 0.0);
    CHECK(e.ego_box.yaw == doctest::Approx(0.0).epsilon(1e-12));
    for (std::size_t i = 0; i < s.agents.size(); ++i) {
      // Distances to the ego are preserved.
      const double d0 = std::hypot(s.agents[i].box.cx - s.ego.x, s.agents[i].box.cy - s.ego.y);
      CHECK(std::hypot(e.agents[i].box.cx, e.agents[i].box.cy) == doctest::Approx(d0));
      // Generated agents start ahead of the ego.
      CHECK(e.agents[i].box.cx > 0.0);
    }
  }
}
