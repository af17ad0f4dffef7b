#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "pim/trainer.hpp"
#include "support.hpp"

using namespace pim;

namespace {

GridSpec mid_grid() {
  GridSpec g;
  g.height_px = 32;
  g.width_px = 40;
  g.anchor_row = 31;
  g.anchor_col = 20;
  return g;
}

ImitatorConfig tiny_net() {
  ImitatorConfig c;
  c.in_channels = 4 + 4;
  c.widths = {4, 6, 8};
  return c;
}

std::vector<SceneState> corpus(int n) {
  GeneratorConfig cfg;
  cfg.count = n;
  cfg.spawn_x_max = 15.0;
  cfg.agents_min = 2;
  cfg.agents_max = 3;
  return generate_scenes(77, cfg);
}

std::string slurp(const std::filesystem::path& p) {
  std::ostringstream s;
  s << std::ifstream(p, std::ios::binary).rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("prepare_dataset builds one record per scene") {
  const auto scenes = corpus(6);
  const auto recs = prepare_dataset(scenes, TargetProxySpec::identity(1), mid_grid(), PosEncSpec{4}, 4);
  REQUIRE(recs.size() == scenes.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(recs[i].scene_id == scenes[i].id);
    CHECK(recs[i].stack.channels() == 8);
    CHECK(recs[i].target.target.height == 8);
    CHECK(recs[i].target.target.width == 10);
    // With the identity proxy the two pseudo maps agree.
    CHECK(recs[i].target.target.cls == recs[i].target.annotation.cls);
    CHECK(recs[i].proxy_dets.size() == recs[i].annotation.size());
  }
  CHECK_THROWS(prepare_dataset({}, TargetProxySpec::identity(1), mid_grid(), PosEncSpec{4}, 4));
}

TEST_CASE("splits are disjoint, cover the corpus and follow the seed") {
  std::vector<std::int64_t> ids(50);
  for (int i = 0; i < 50; ++i) ids[i] = 100 + i;
  TrainConfig cfg;
  cfg.seed = 3;
  const auto s = split_indices(ids, cfg);
  CHECK(s.train.size() == 35);
  CHECK(s.val.size() == 5);
  CHECK(s.test.size() == 10);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.test.begin(), s.test.end());
  CHECK(all.size() == 50);
  CHECK(split_indices(ids, cfg).train == s.train);
  cfg.seed = 4;
  CHECK(split_indices(ids, cfg).train != s.train);
  CHECK_THROWS(check_disjoint({1, 2}, {2, 3}, "train/test"));
  ids[7] = ids[8];
  CHECK_THROWS(split_indices(ids, cfg));
}

TEST_CASE("short training run is finite, logged and reproducible") {
  const auto scenes = corpus(6);
  const auto recs = prepare_dataset(scenes, TargetProxySpec(), mid_grid(), PosEncSpec{4}, 4);
  std::vector<const TrainRecord*> tr{&recs[0], &recs[1], &recs[2], &recs[3]};
  std::vector<const TrainRecord*> va{&recs[4], &recs[5]};
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.seed = 5;
  const auto dir = std::filesystem::temp_directory_path() / "pim_train_test";
  std::filesystem::create_directories(dir);
  TrainPaths paths{dir / "log.jsonl", dir / "best.ckpt", {}, "abc"};
  int calls = 0;
  const auto a = train(cfg, tiny_net(), tr, va, paths, [&](const StepLog&) { ++calls; });
  CHECK(a.steps == 4);
  CHECK(calls == 4);
  CHECK(a.log.size() == 4);
  for (const auto& l : a.log) CHECK(std::isfinite(l.loss.total));
  CHECK(a.best_epoch >= 0);
  CHECK(a.best_val_map >= 0.0);
  if (a.best_val_map > 0.0) CHECK(a.operating_threshold.has_value());
  CHECK(std::filesystem::exists(paths.checkpoint));
  const std::string ckpt = slurp(paths.checkpoint);
  std::ifstream log(paths.log_jsonl);
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("L_total"));
    ++lines;
  }
  CHECK(lines == 4);

  const auto b = train(cfg, tiny_net(), tr, va, paths);
  CHECK(slurp(paths.checkpoint) == ckpt);
  for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].loss.total == b.log[i].loss.total);
  std::filesystem::remove_all(dir);

  cfg.max_steps = 3;
  CHECK(train(cfg, tiny_net(), tr, va).steps == 3);
}

TEST_CASE("untrained zero-head model evaluates to a well-formed report") {
  const auto scenes = corpus(4);
  const auto recs = prepare_dataset(scenes, TargetProxySpec::identity(2), mid_grid(), PosEncSpec{4}, 4);
  std::vector<const TrainRecord*> ptrs;
  for (const auto& r : recs) ptrs.push_back(&r);
  const auto model = Imitator::init(tiny_net(), 1, true);
  const auto rep = evaluate_model(model, ptrs, 0.05, 0.5);
  CHECK(rep.scenes == 4);
  CHECK(rep.map_050 >= 0.0);
  CHECK(rep.map_050 <= 1.0);
  CHECK(rep.maxr_070 <= rep.maxr_050);
  const auto preds = predict(model, ptrs, 0.05);
  CHECK(preds.size() == 4);
  CHECK(proxy_detections(ptrs).size() == 4);

  auto bad = tiny_net();
  bad.in_channels = 9;
  CHECK_THROWS(evaluate_model(Imitator::init(bad, 1), ptrs, 0.05, 0.5));
}

TEST_CASE("train config JSON roundtrip and validation") {
  TrainConfig c;
  c.epochs = 7;
  c.loss.gamma = 4.0;
  const auto back = train_config_from_json(to_json(c));
  CHECK(back.epochs == 7);
  CHECK(back.loss.gamma == 4.0);
  c.train_fraction = 0.9;
  CHECK_THROWS(c.validate());
}
