// Command-line entry point: pim <subcommand> [options]
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "pim/baselines.hpp"
#include "pim/config.hpp"
#include "pim/metrics.hpp"
#include "pim/raster.hpp"
#include "pim/rng.hpp"
#include "pim/scene.hpp"
#include "pim/simloop.hpp"
#include "pim/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pim;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::int64_t seed = -1;
};

struct Resolved {
  RunConfig cfg;
  std::string hash;
};

Resolved resolve(const Common& c) {
  json doc = json::object();
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw IoError("cannot open config '" + c.config_path + "'");
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config '" + c.config_path + "': " + e.what());
    }
  }
  // Overrides apply to the fully resolved document so any default key can be set.
  const bool explicit_channels = doc.contains("imitator") && doc.at("imitator").contains("in_channels");
  json full = to_json(run_config_from_json(doc));
  bool channels_set = explicit_channels;
  for (const auto& o : c.overrides) {
    apply_override(full, o);
    channels_set = channels_set || o.rfind("imitator.in_channels=", 0) == 0;
  }
  if (!channels_set) full["imitator"].erase("in_channels");
  doc = std::move(full);
  if (c.seed >= 0) doc["seed"] = c.seed;
  Resolved r;
  r.cfg = run_config_from_json(doc);
  r.hash = config_hash(r.cfg);
  return r;
}

// Relative output paths land under $PIM_OUTPUT_ROOT when it is set.
fs::path out_path(const std::string& p) {
  fs::path path(p);
  if (const char* root = std::getenv("PIM_OUTPUT_ROOT"); root != nullptr && *root != '\0' && path.is_relative()) {
    path = fs::path(root) / path;
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  return path;
}

fs::path out_dir(const std::string& p) {
  fs::path path = out_path(p);
  fs::create_directories(path);
  return path;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

// The resolved configuration next to an artifact.
void echo_config(const fs::path& artifact, const Resolved& r) {
  fs::path p = artifact;
  if (fs::is_directory(p)) {
    p /= "config.json";
  } else {
    p += ".config.json";
  }
  json j = to_json(r.cfg);
  j["config_hash"] = r.hash;
  write_json(p, j);
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "JSON run configuration");
  app->add_option("--set", c.overrides, "Override a scalar, e.g. train.epochs=5")->take_all();
  app->add_option("--seed", c.seed, "Master seed");
}

std::vector<SceneState> ego_frames(const std::vector<SceneState>& scenes) {
  std::vector<SceneState> out;
  for (const auto& s : scenes) out.push_back(to_ego_frame(s));
  return out;
}

struct BaselineFile {
  GmmModel gmm;
  double fn_ratio = 0.0;
  bool has_gmm = false;
};

BaselineFile load_baseline(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open baseline file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  BaselineFile b;
  b.fn_ratio = j.at("fn_ratio").get<double>();
  if (j.contains("gmm")) {
    b.gmm = gmm_from_json(j.at("gmm"));
    b.has_gmm = true;
  }
  return b;
}

PerceptionSource make_source(const std::string& kind, const Resolved& r, const Imitator* imitator,
                             const BaselineFile* baseline, double threshold) {
  PerceptionSource src;
  src.kind = perception_kind_from_string(kind);
  src.grid = r.cfg.grid;
  src.posenc = r.cfg.posenc;
  src.imitator = imitator;
  src.imitator_threshold = threshold;
  src.proxy = r.cfg.proxy;
  src.proxy.seed = derive_seed(r.cfg.seed, "proxy");
  src.seed = derive_seed(r.cfg.seed, "baseline");
  double fn = r.cfg.baseline.fn_ratio;
  if (fn < 0.0) {
    if (baseline == nullptr) {
      if (src.kind == PerceptionKind::gaussian || src.kind == PerceptionKind::multimodal) {
        throw std::invalid_argument("--baseline is required unless baseline.fn_ratio is set");
      }
      fn = 0.0;
    } else {
      fn = baseline->fn_ratio;
    }
  }
  src.fn_ratio = fn;
  src.gaussian = {r.cfg.baseline.sigma, fn, src.seed};
  if (src.kind == PerceptionKind::multimodal) {
    if (baseline == nullptr || !baseline->has_gmm) throw std::invalid_argument("multimodal source needs --baseline with a fitted model");
    src.gmm = &baseline->gmm;
  }
  if (src.kind == PerceptionKind::imitator && imitator == nullptr) {
    throw std::invalid_argument("imitator source needs --checkpoint");
  }
  return src;
}

Imitator load_checked(const std::string& path, const Resolved& r, json* meta = nullptr) {
  Imitator m = Imitator::load(path, meta);
  if (m.config().in_channels != 4 + r.cfg.posenc.d_model) {
    throw nn::ShapeError("checkpoint expects " + std::to_string(m.config().in_channels) +
                         " input channels but the config yields " + std::to_string(4 + r.cfg.posenc.d_model));
  }
  return m;
}

// ---- render ---------------------------------------------------------------------

void render_scene(const RasterStack& st, const std::vector<Detection>& dets, const fs::path& path) {
  const GridSpec& g = st.grid;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(g.pixels()) * 3, 0);
  for (int i = 0; i < g.pixels(); ++i) {
    std::uint8_t v = st.freespace[i] ? 70 : 0;
    if (!st.occlusion[i]) v /= 2;
    std::uint8_t r = v, gr = v, b = v;
    if (st.waypoints[i]) r = gr = b = 200;
    if (st.vehicles[i]) {
      r = 230;
      gr = 60;
      b = 40;
    }
    rgb[3 * i] = r;
    rgb[3 * i + 1] = gr;
    rgb[3 * i + 2] = b;
  }
  // Detection outlines in green.
  for (const auto& d : dets) {
    const auto c = d.box.corners();
    for (int k = 0; k < 4; ++k) {
      const Vec2 a = c[k];
      const Vec2 bb = c[(k + 1) % 4];
      const int n = 64;
      for (int s = 0; s <= n; ++s) {
        const Vec2 p = a + (static_cast<double>(s) / n) * (bb - a);
        const Vec2 rc = g.to_pixel(p);
        const int row = static_cast<int>(std::lround(rc.x));
        const int col = static_cast<int>(std::lround(rc.y));
        if (row < 0 || col < 0 || row >= g.height_px || col >= g.width_px) continue;
        const std::size_t i = static_cast<std::size_t>(row) * g.width_px + col;
        rgb[3 * i] = 40;
        rgb[3 * i + 1] = 230;
        rgb[3 * i + 2] = 60;
      }
    }
  }
  write_ppm(path, g.height_px, g.width_px, rgb);
}

// ---- report -----------------------------------------------------------------------

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

int run(int argc, char** argv) {
  CLI::App app{"Perception imitation toolkit"};
  app.require_subcommand(1);

  Common common;
  std::string scenes_path, out, pred_path, target_path, checkpoint, baseline_path, source = "proxy", csv_path;
  int n = -1;
  int episodes = 100;
  int limit = -1;
  double threshold = -1.0;
  double fixed = 0.5;
  std::vector<std::string> inputs;

  auto* gen = app.add_subcommand("gen", "Generate a synthetic scene corpus");
  add_common(gen, common);
  gen->add_option("--n", n, "Number of scenes");
  gen->add_option("--out", out, "Output .jsonl")->required();

  auto* rast = app.add_subcommand("rasterize", "Dump every raster channel of each scene as PGM");
  add_common(rast, common);
  rast->add_option("--scenes", scenes_path)->required();
  rast->add_option("--out", out, "Output directory")->required();
  rast->add_option("--limit", limit, "Only the first N scenes");

  auto* render = app.add_subcommand("render", "Color composite (PPM) per scene, optionally with detections");
  add_common(render, common);
  render->add_option("--scenes", scenes_path)->required();
  render->add_option("--dets", pred_path, "Detections .jsonl to overlay");
  render->add_option("--out", out, "Output directory")->required();
  render->add_option("--limit", limit, "Only the first N scenes");

  auto* fit = app.add_subcommand("fit-baseline", "Measure FN ratio and fit the residual mixture model");
  add_common(fit, common);
  fit->add_option("--scenes", scenes_path)->required();
  fit->add_option("--out", out, "Output .json")->required();

  auto* perc = app.add_subcommand("perceive", "Run a perception source over a corpus");
  add_common(perc, common);
  perc->add_option("--scenes", scenes_path)->required();
  perc->add_option("--source", source, "annotation|proxy|imitator|gaussian|multimodal")
      ->check(CLI::IsMember({"annotation", "proxy", "imitator", "gaussian", "multimodal"}));
  perc->add_option("--checkpoint", checkpoint);
  perc->add_option("--baseline", baseline_path, "Output of fit-baseline");
  perc->add_option("--threshold", threshold, "Imitator decode threshold (default: train.eval_score_floor)");
  perc->add_option("--out", out, "Output .jsonl")->required();

  auto* tr = app.add_subcommand("train", "Train the imitator against the target proxy");
  add_common(tr, common);
  tr->add_option("--scenes", scenes_path)->required();
  tr->add_option("--out", out, "Output directory")->required();

  auto* ev = app.add_subcommand("eval", "Score detections against target detections");
  add_common(ev, common);
  ev->add_option("--pred", pred_path)->required();
  ev->add_option("--target", target_path)->required();
  ev->add_option("--fixed-threshold", fixed);
  ev->add_option("--csv", csv_path, "Also write PR points as CSV");
  ev->add_option("--out", out, "Output report .json")->required();

  auto* sim = app.add_subcommand("simulate", "Closed-loop corridor episodes");
  add_common(sim, common);
  sim->add_option("--perception", source)
      ->check(CLI::IsMember({"annotation", "proxy", "imitator", "gaussian", "multimodal"}));
  sim->add_option("--episodes", episodes);
  sim->add_option("--checkpoint", checkpoint);
  sim->add_option("--baseline", baseline_path);
  sim->add_option("--threshold", threshold, "Imitator decode threshold (default: the checkpoint's validation-F1 threshold, else imitator.score_threshold)");
  sim->add_option("--out", out, "Output directory")->required();

  auto* rep = app.add_subcommand("report", "Comparison table over eval reports");
  rep->add_option("--input", inputs, "name=report.json (repeatable)")->required();
  rep->add_option("--out", out, "Output .json (a .md table is written alongside)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (gen->parsed()) {
    if (n >= 0) common.overrides.push_back("generator.count=" + std::to_string(n));
    const Resolved r = resolve(common);
    const auto scenes = generate_scenes(derive_seed(r.cfg.seed, "gen"), r.cfg.generator);
    const fs::path p = out_path(out);
    save_scenes(scenes, p, r.hash);
    echo_config(p, r);
    std::cout << json{{"scenes", scenes.size()}, {"out", p.string()}, {"config_hash", r.hash}}.dump() << '\n';
    return 0;
  }
  if (rast->parsed() || render->parsed()) {
    const Resolved r = resolve(common);
    auto scenes = load_scenes(scenes_path);
    if (limit >= 0 && static_cast<std::size_t>(limit) < scenes.size()) scenes.resize(limit);
    std::map<std::int64_t, std::vector<Detection>> dets;
    if (!pred_path.empty()) {
      for (auto& row : load_detections(pred_path)) dets[row.scene_id] = std::move(row.dets);
    }
    const fs::path dir = out_dir(out);
    for (const auto& s : scenes) {
      const RasterStack st = build_stack(to_ego_frame(s), r.cfg.grid, r.cfg.posenc);
      if (rast->parsed()) {
        dump_channels(st, dir / ("scene_" + std::to_string(s.id)));
      } else {
        render_scene(st, dets[s.id], dir / ("scene_" + std::to_string(s.id) + ".ppm"));
      }
    }
    echo_config(dir, r);
    std::cout << json{{"scenes", scenes.size()}, {"out", dir.string()}}.dump() << '\n';
    return 0;
  }
  if (fit->parsed()) {
    const Resolved r = resolve(common);
    const auto scenes = ego_frames(load_scenes(scenes_path));
    TargetProxySpec proxy = r.cfg.proxy;
    proxy.seed = derive_seed(r.cfg.seed, "proxy");
    std::vector<std::vector<Detection>> tdets;
    std::vector<std::vector<OrientedBox>> ann;
    for (const auto& s : scenes) {
      tdets.push_back(target_proxy_perceive(s, r.cfg.grid, proxy));
      ann.push_back(visible_annotation(s, r.cfg.grid));
    }
    const ResidualStats st = collect_residuals(tdets, ann, 0.5);
    const GmmModel gmm = fit_gmm_em(st.residuals, r.cfg.baseline.gmm_components, derive_seed(r.cfg.seed, "gmm"),
                                    r.cfg.baseline.gmm_max_iter, r.cfg.baseline.gmm_tol);
    const fs::path p = out_path(out);
    json j = {{"fn_ratio", st.fn_ratio()},
              {"annotations", st.annotations},
              {"missed", st.missed},
              {"residuals", st.residuals.size()},
              {"sigma", r.cfg.baseline.sigma},
              {"gmm", to_json(gmm)},
              {"config_hash", r.hash}};
    write_json(p, j);
    echo_config(p, r);
    std::cout << json{{"fn_ratio", st.fn_ratio()}, {"log_likelihood", gmm.log_likelihood}}.dump() << '\n';
    return 0;
  }
  if (perc->parsed()) {
    const Resolved r = resolve(common);
    const auto scenes = ego_frames(load_scenes(scenes_path));
    std::optional<Imitator> model;
    if (!checkpoint.empty()) model = load_checked(checkpoint, r);
    std::optional<BaselineFile> bl;
    if (!baseline_path.empty()) bl = load_baseline(baseline_path);
    const double thr = threshold >= 0.0 ? threshold : r.cfg.train.eval_score_floor;
    const PerceptionSource src = make_source(source, r, model ? &*model : nullptr, bl ? &*bl : nullptr, thr);
    std::vector<SceneDetections> rows(scenes.size());
    const long count = static_cast<long>(scenes.size());
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < count; ++i) {
      rows[i] = {scenes[i].id, perceive(src, scenes[i], static_cast<std::uint64_t>(scenes[i].id))};
    }
    if (src.kind == PerceptionKind::proxy) {
      // The proxy keys its draws on the scene id itself.
      for (long i = 0; i < count; ++i) rows[i].dets = target_proxy_perceive(scenes[i], src.grid, src.proxy);
    }
    const fs::path p = out_path(out);
    save_detections(rows, p, r.hash);
    echo_config(p, r);
    std::cout << json{{"scenes", rows.size()}, {"source", source}, {"out", p.string()}}.dump() << '\n';
    return 0;
  }
  if (tr->parsed()) {
    const Resolved r = resolve(common);
    const auto scenes = load_scenes(scenes_path);
    std::vector<std::int64_t> ids;
    for (const auto& s : scenes) ids.push_back(s.id);
    {
      std::set<std::int64_t> uniq(ids.begin(), ids.end());
      if (uniq.size() != ids.size()) throw ValidationError("train: scene ids must be unique");
    }
    TrainConfig tc = r.cfg.train;
    tc.seed = derive_seed(r.cfg.seed, "train");
    const Splits sp = split_indices(ids, tc);
    TargetProxySpec proxy = r.cfg.proxy;
    proxy.seed = derive_seed(r.cfg.seed, "proxy");
    const auto records = prepare_dataset(scenes, proxy, r.cfg.grid, r.cfg.posenc, r.cfg.imitator.downsample());
    auto pick = [&](const std::vector<std::size_t>& idx) {
      std::vector<const TrainRecord*> v;
      for (auto i : idx) v.push_back(&records[i]);
      return v;
    };
    const fs::path dir = out_dir(out);
    TrainPaths paths{dir / "train_log.jsonl", dir / "best.ckpt", dir / "last_good.ckpt", r.hash};
    const auto res = train(tc, r.cfg.imitator, pick(sp.train), pick(sp.val), paths, [](const StepLog& s) {
      if (s.step % 50 == 0) {
        std::cerr << "step " << s.step << " epoch " << s.epoch << " loss " << s.loss.total << " cls " << s.loss.cls
                  << '\n';
      }
    });
    auto split_ids = [&](const std::vector<std::size_t>& idx) {
      std::vector<std::int64_t> v;
      for (auto i : idx) v.push_back(ids[i]);
      return v;
    };
    write_json(dir / "splits.json", {{"train", split_ids(sp.train)},
                                     {"val", split_ids(sp.val)},
                                     {"test", split_ids(sp.test)},
                                     {"config_hash", r.hash}});
    json summary = {{"steps", res.steps},
                    {"best_epoch", res.best_epoch},
                    {"best_val_map_050", res.best_val_map},
                    {"config_hash", r.hash}};
    if (res.operating_threshold) summary["operating_threshold"] = *res.operating_threshold;
    if (!sp.test.empty()) {
      const auto rep = evaluate_model(res.best_model, pick(sp.test), tc.eval_score_floor, r.cfg.imitator.score_threshold);
      json rj = rep.to_json(false);
      rj["config_hash"] = r.hash;
      write_json(dir / "test_report.json", rj);
      summary["test"] = rep.to_json(false);
    }
    write_json(dir / "summary.json", summary);
    echo_config(dir, r);
    std::cout << summary.dump() << '\n';
    return 0;
  }
  if (ev->parsed()) {
    std::string h1, h2;
    const auto preds = load_detections(pred_path, &h1);
    const auto targets = load_detections(target_path, &h2);
    const EvalReport rep = evaluate(preds, targets, fixed);
    json j = rep.to_json();
    j["config_hash"] = h1;
    j["target_config_hash"] = h2;
    const fs::path p = out_path(out);
    write_json(p, j);
    if (!csv_path.empty()) write_pr_csv(rep, out_path(csv_path));
    std::cout << rep.to_json(false).dump() << '\n';
    return 0;
  }
  if (sim->parsed()) {
    const Resolved r = resolve(common);
    std::optional<Imitator> model;
    json meta;
    if (!checkpoint.empty()) model = load_checked(checkpoint, r, &meta);
    std::optional<BaselineFile> bl;
    if (!baseline_path.empty()) bl = load_baseline(baseline_path);
    // Explicit flag, else the threshold picked on the validation split during
    // training, else the config default.
    double thr = r.cfg.imitator.score_threshold;
    if (threshold >= 0.0) {
      thr = threshold;
    } else if (meta.contains("operating_threshold")) {
      thr = meta.at("operating_threshold").get<double>();
    }
    const PerceptionSource src = make_source(source, r, model ? &*model : nullptr, bl ? &*bl : nullptr, thr);
    const double horizon_m = r.cfg.sim.horizon * r.cfg.sim.dt * std::max(r.cfg.sim.target_speed, 1.0) * 1.5;
    const auto scenarios = make_corridor_scenarios(derive_seed(r.cfg.seed, "scenarios"), episodes, r.cfg.scenario, horizon_m);
    const auto logs = run_batch(scenarios, src, r.cfg.sim, derive_seed(r.cfg.seed, "sim"));
    const fs::path dir = out_dir(out);
    write_episode_jsonl(logs, dir / "episodes.jsonl", r.hash);
    json s = summarize(logs).to_json();
    s["perception"] = source;
    if (src.kind == PerceptionKind::imitator) s["imitator_threshold"] = thr;
    s["config_hash"] = r.hash;
    write_json(dir / "summary.json", s);
    echo_config(dir, r);
    std::cout << s.dump() << '\n';
    return 0;
  }
  if (rep->parsed()) {
    json rows = json::array();
    std::string hash;
    for (const auto& in : inputs) {
      const auto eq = in.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("report: expected name=path, got '" + in + "'");
      const std::string name = in.substr(0, eq);
      const json j = load_json(in.substr(eq + 1));
      const std::string h = j.value("config_hash", "");
      if (hash.empty()) hash = h;
      if (h != hash) throw std::invalid_argument("report: config hash of '" + name + "' (" + h + ") differs from " + hash);
      rows.push_back({{"source", name},
                      {"map_050", j.at("map_050")},
                      {"map_070", j.at("map_070")},
                      {"maxr_050", j.at("maxr_050")},
                      {"maxr_070", j.at("maxr_070")},
                      {"precision_at_fixed", j.at("precision_at_fixed")},
                      {"recall_at_fixed", j.at("recall_at_fixed")}});
    }
    const fs::path p = out_path(out);
    write_json(p, {{"rows", rows}, {"config_hash", hash}});
    fs::path md = p;
    md.replace_extension(".md");
    std::ofstream t(md);
    t << "| source | mAP@0.5 | mAP@0.7 | maxR@0.5 | maxR@0.7 | P | R |\n|---|---|---|---|---|---|---|\n";
    t << std::fixed << std::setprecision(2);
    for (const auto& row : rows) {
      t << "| " << row["source"].get<std::string>();
      for (const char* k : {"map_050", "map_070", "maxr_050", "maxr_070", "precision_at_fixed", "recall_at_fixed"}) {
        t << " | " << 100.0 * row[k].get<double>();
      }
      t << " |\n";
    }
    std::cout << json{{"rows", rows.size()}, {"out", p.string()}}.dump() << '\n';
    return 0;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}}.dump() << '\n';
    return 1;
  }
}
