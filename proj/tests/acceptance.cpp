// Acceptance driver: prints one PASS/FAIL line per acceptance criterion and
// exits non-zero if any fails.
//
//   acceptance <pim> <gradient_suite> <config.json> [--work DIR] [--only NAME ...]
//
// The oracle checks run in-process. Training, perception and closed-loop
// criteria drive the command-line tool the way a user would.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metric_fixture.hpp"
#include "pim/kernels.hpp"
#include "pim/losses.hpp"
#include "pim/metrics.hpp"
#include "pim/raster.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pim;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Runner {
  std::string pim;
  std::string gradient_suite;
  fs::path work;
  std::string config;
  int calls = 0;

  // Runs the tool with `args`, output into a numbered log. Throws on failure.
  void run(const std::string& args, const std::string& env = "") {
    const fs::path log = work / "logs" / (std::to_string(++calls) + ".log");
    const std::string cmd = env + (env.empty() ? "" : " ") + "\"" + pim + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    if (std::system(cmd.c_str()) != 0) throw std::runtime_error("command failed (see " + log.string() + "): " + args);
  }
  std::string with_config(const std::string& args) const { return args + " --config \"" + config + "\""; }
};

// Keeps the lines of a scene or detection file whose id is in `ids`.
void subset_jsonl(const fs::path& in, const fs::path& out, const std::set<std::int64_t>& ids, const char* key) {
  std::ifstream f(in);
  std::ofstream o(out);
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    if (ids.count(j.at(key).get<std::int64_t>())) o << line << '\n';
  }
}

std::set<std::int64_t> id_set(const json& a) {
  std::set<std::int64_t> s;
  for (const auto& v : a) s.insert(v.get<std::int64_t>());
  return s;
}

// ---- in-process oracles ------------------------------------------------------

Outcome gradient_suite(const Runner& r) {
  const fs::path log = r.work / "logs" / "gradient_suite.log";
  const auto t0 = std::chrono::steady_clock::now();
  const int rc = std::system(("\"" + r.gradient_suite + "\" > \"" + log.string() + "\" 2>&1").c_str());
  const double secs = seconds_since(t0);
  const std::set<std::string> expected{"conv2d", "upsample2x", "relu", "sigmoid", "add", "sub", "mul",
                                       "scale", "sum", "mean", "sum_squares", "reduce_sum", "reduce_mean",
                                       "slice_channels", "bce", "smooth_l1_masked", "corner_loss", "mmd_box",
                                       "mmd_err", "weight_reg", "total_loss"};
  const std::regex line(R"(^(\S+)\s+(\d+) instances, worst relative error (\S+))");
  std::set<std::string> seen;
  double worst = 0.0;
  bool ok = rc == 0;
  std::istringstream in(slurp(log));
  std::string l;
  while (std::getline(in, l)) {
    std::smatch m;
    if (!std::regex_search(l, m, line)) continue;
    seen.insert(m[1]);
    ok = ok && std::stoi(m[2]) >= 100;
    const double e = std::stod(m[3]);
    worst = std::max(worst, e);
    ok = ok && e < 1e-4;
  }
  for (const auto& name : expected) ok = ok && seen.count(name);
  ok = ok && secs < 120.0;
  return {ok, std::to_string(seen.size()) + " ops, worst relative error " + fmt("%.2e", worst) + ", " +
                  fmt("%.1f", secs) + " s"};
}

Outcome mmd_oracle() {
  Rng rng(101);
  double worst = 0.0, self = 0.0;
  for (int t = 0; t < 50; ++t) {
    const auto x = testing::random_maps(rng, 8, 9, 0.3);
    const auto y = testing::random_maps(rng, 8, 9, 0.3);
    const auto z = testing::random_maps(rng, 8, 9, 0.3);
    const double sigma = uniform(rng, 0.3, 2.0);
    auto cells = union_positive_cells(y, z);
    if (cells.empty()) cells = {0};
    const auto fast = mmd2(x, y, z, sigma, cells);
    const auto ref = testing::brute_mmd_maps(x, y, z, sigma, cells);
    worst = std::max({worst, std::abs(fast.first - ref.first), std::abs(fast.second - ref.second)});
    const auto s = mmd2(x, x, z, sigma, cells);
    self = std::max({self, std::abs(s.first), std::abs(s.second)});
  }
  HeadMaps a(5, 5), b(5, 5), z(5, 5);
  for (int i = 0; i < a.cells(); ++i) a.reg_at(kDx, i) = 1.0;
  const auto [box, err] = mmd2(a, b, z, 1.0);
  const double closed = 2.0 * (1.0 - std::exp(-0.5));
  const double cdev = std::max(std::abs(box - closed), std::abs(err - closed));
  return {worst < 1e-10 && self <= 1e-12 && cdev < 1e-9,
          "50 triples max dev " + fmt("%.1e", worst) + ", MMD(X,X) " + fmt("%.1e", self) + ", constant maps dev " +
              fmt("%.1e", cdev)};
}

Outcome geometry() {
  Rng rng(202);
  double worst_iou = 0.0;
  for (int i = 0; i < 200; ++i) {
    const auto a = testing::random_box(rng, 1.0);
    const auto b = testing::random_box(rng, 1.0);
    worst_iou = std::max(worst_iou, std::abs(iou_rotated(a, b) - testing::monte_carlo_iou(a, b, 1000000, rng)));
  }
  GeneratorConfig cfg;
  cfg.count = 20;
  const auto g = GridSpec::desk();
  long foot_bad = 0, occ_bad = 0, hidden = 0;
  for (const auto& s : generate_scenes(303, cfg)) {
    const auto e = to_ego_frame(s);
    std::vector<OrientedBox> boxes;
    for (const auto& a : e.agents) boxes.push_back(a.box);
    const auto foot = rasterize_vehicles(e.agents, g);
    const auto occ = raycast_occlusion(e.agents, g);
    for (int r = 0; r < g.height_px; ++r) {
      for (int c = 0; c < g.width_px; ++c) {
        const Vec2 p = g.pixel_center(r, c);
        bool any = false;
        for (const auto& b : boxes) any = any || point_in_box(b, p);
        const bool vis = testing::ray_oracle_visible(boxes, p, g.meters_per_px);
        foot_bad += foot[r * g.width_px + c] != (any ? 1 : 0);
        occ_bad += occ[r * g.width_px + c] != (vis ? 1 : 0);
        hidden += !vis;
      }
    }
  }
  return {worst_iou <= 0.01 && foot_bad == 0 && occ_bad == 0 && hidden > 0,
          "IoU vs Monte Carlo max dev " + fmt("%.4f", worst_iou) + " on 200 pairs, footprint mismatches " +
              std::to_string(foot_bad) + ", occlusion mismatches " + std::to_string(occ_bad) + " over 20 scenes"};
}

Outcome roundtrip() {
  const auto g = GridSpec::desk();
  Rng rng(404);
  double worst = 0.0;
  bool counts = true;
  for (int scene = 0; scene < 1000; ++scene) {
    auto boxes = testing::one_box_per_cell(rng, g, 4, uniform_int(rng, 1, 12));
    const auto enc = encode_targets(boxes, g, 4);
    auto dets = decode(enc.maps, g, 4, 0.5);
    if (enc.collisions != 0 || dets.size() != boxes.size()) {
      counts = false;
      continue;
    }
    auto key = [&](const OrientedBox& b) { return cell_of(g, 4, {b.cx, b.cy}); };
    std::sort(boxes.begin(), boxes.end(), [&](auto& a, auto& b) { return key(a) < key(b); });
    std::sort(dets.begin(), dets.end(), [&](auto& a, auto& b) { return key(a.box) < key(b.box); });
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      const auto& a = boxes[i];
      const auto& b = dets[i].box;
      worst = std::max({worst, std::abs(a.cx - b.cx), std::abs(a.cy - b.cy), std::abs(a.w - b.w), std::abs(a.l - b.l),
                        std::abs(normalize_angle(a.yaw - b.yaw))});
    }
  }
  return {counts && worst < 1e-9, "1000 scenes, max parameter error " + fmt("%.1e", worst)};
}

Outcome metric_oracle() {
  std::vector<SceneDetections> p, t;
  testing::build_metric_fixture(p, t);
  const auto rep = evaluate(p, t, 0.5);
  bool exact = true;
  for (const auto& o : rep.overlaps) {
    const auto e = testing::fixture_expectation(o.iou_threshold);
    exact = exact && o.curve.size() == e.curve.size() && o.map == e.ap && o.maxr == e.maxr;
    for (std::size_t i = 0; exact && i < e.curve.size(); ++i) {
      exact = o.curve[i].score_threshold == e.curve[i].score_threshold &&
              o.curve[i].precision == e.curve[i].precision && o.curve[i].recall == e.curve[i].recall;
    }
  }
  bool invariant = true;
  for (auto f : std::vector<std::function<double(double)>>{[](double s) { return 0.5 * s * s; },
                                                            [](double s) { return 3.0 * s + 1.0; },
                                                            [](double s) { return std::log(s); }}) {
    auto q = p;
    for (auto& r : q)
      for (auto& d : r.dets) d.score = f(d.score);
    const auto s = evaluate(q, t, f(0.5));
    invariant = invariant && s.map_050 == rep.map_050 && s.map_070 == rep.map_070 && s.maxr_050 == rep.maxr_050 &&
                s.tp == rep.tp;
  }
  return {exact && invariant, "20-scene fixture " + std::string(exact ? "exact" : "differs") +
                                  ", AP under 3 monotone rescalings " + (invariant ? "unchanged" : "changed") +
                                  " (mAP@0.5 " + fmt("%.4f", rep.map_050) + ")"};
}

// ---- command-line pipelines ------------------------------------------------------

Outcome overfit(Runner& r) {
  const fs::path d = r.work / "overfit";
  fs::create_directories(d);
  const std::string seed = " --seed 3";
  r.run(r.with_config("gen --n 32 --out \"" + (d / "scenes.jsonl").string() + "\"" + seed));
  const auto t0 = std::chrono::steady_clock::now();
  r.run(r.with_config("train --scenes \"" + (d / "scenes.jsonl").string() + "\" --out \"" + (d / "model").string() +
                      "\"" + seed +
                      " --set train.train_fraction=1 train.val_fraction=0 train.test_fraction=0 "
                      "train.max_steps=2000 train.epochs=1000 train.learning_rate=0.003"));
  const double secs = seconds_since(t0);
  const int steps = read_json(d / "model" / "summary.json").at("steps");
  const std::string scenes = " --scenes \"" + (d / "scenes.jsonl").string() + "\"";
  r.run(r.with_config("perceive" + scenes + " --source proxy --out \"" + (d / "proxy.jsonl").string() + "\"" + seed));
  r.run(r.with_config("perceive" + scenes + " --source imitator --checkpoint \"" + (d / "model" / "best.ckpt").string() +
                      "\" --out \"" + (d / "imitator.jsonl").string() + "\"" + seed));
  r.run("eval --pred \"" + (d / "imitator.jsonl").string() + "\" --target \"" + (d / "proxy.jsonl").string() +
        "\" --out \"" + (d / "eval.json").string() + "\"");
  const json ev = read_json(d / "eval.json");
  const double map = ev.at("map_050"), maxr = ev.at("maxr_050");
  return {map >= 0.90 && maxr >= 0.90 && steps <= 2000 && secs < 900.0,
          "32 scenes, " + std::to_string(steps) + " steps in " + fmt("%.0f", secs) + " s: mAP@0.5 " + fmt("%.3f", map) +
              ", maxR@0.5 " + fmt("%.3f", maxr)};
}

// One trained imitator per seed plus baselines fitted on its training split.
struct SeedRun {
  fs::path dir;
  fs::path checkpoint;
  fs::path baseline;
  std::map<std::string, json> reports;
};

SeedRun table2_seed(Runner& r, int seed) {
  SeedRun s;
  s.dir = r.work / ("table2_seed" + std::to_string(seed));
  fs::create_directories(s.dir);
  const std::string sd = " --seed " + std::to_string(seed);
  const fs::path all = s.dir / "scenes.jsonl";
  s.checkpoint = s.dir / "model" / "best.ckpt";
  s.baseline = s.dir / "baseline.json";
  r.run(r.with_config("gen --n 1000 --out \"" + all.string() + "\"" + sd));
  r.run(r.with_config("train --scenes \"" + all.string() + "\" --out \"" + (s.dir / "model").string() + "\"" + sd));
  const json splits = read_json(s.dir / "model" / "splits.json");
  subset_jsonl(all, s.dir / "train.jsonl", id_set(splits.at("train")), "id");
  subset_jsonl(all, s.dir / "test.jsonl", id_set(splits.at("test")), "id");
  r.run(r.with_config("fit-baseline --scenes \"" + (s.dir / "train.jsonl").string() + "\" --out \"" +
                      s.baseline.string() + "\"" + sd));
  const std::string test = " --scenes \"" + (s.dir / "test.jsonl").string() + "\"";
  r.run(r.with_config("perceive" + test + " --source proxy --out \"" + (s.dir / "proxy.jsonl").string() + "\"" + sd));
  for (const std::string src : {"imitator", "gaussian", "multimodal"}) {
    const fs::path out = s.dir / (src + ".jsonl");
    std::string extra = src == "imitator" ? " --checkpoint \"" + s.checkpoint.string() + "\""
                                          : " --baseline \"" + s.baseline.string() + "\"";
    r.run(r.with_config("perceive" + test + " --source " + src + extra + " --out \"" + out.string() + "\"" + sd));
    const fs::path rep = s.dir / (src + "_eval.json");
    r.run("eval --pred \"" + out.string() + "\" --target \"" + (s.dir / "proxy.jsonl").string() + "\" --out \"" +
          rep.string() + "\"");
    s.reports[src] = read_json(rep);
  }
  return s;
}

std::map<int, SeedRun> seed_runs;

SeedRun& seed_run(Runner& r, int seed) {
  auto it = seed_runs.find(seed);
  if (it == seed_runs.end()) it = seed_runs.emplace(seed, table2_seed(r, seed)).first;
  return it->second;
}

Outcome table2(Runner& r) {
  bool ok = true;
  std::string detail;
  for (int seed : {1, 2, 3}) {
    const auto& s = seed_run(r, seed);
    auto m = [&](const std::string& src, const char* k) { return s.reports.at(src).at(k).get<double>(); };
    for (const char* k : {"map_050", "map_070"}) {
      ok = ok && m("imitator", k) > m("gaussian", k) && m("imitator", k) > m("multimodal", k);
    }
    detail += (seed > 1 ? "; " : "") + std::string("seed ") + std::to_string(seed) + " mAP@0.5/0.7 imitator " +
              fmt("%.3f", m("imitator", "map_050")) + "/" + fmt("%.3f", m("imitator", "map_070")) + " gaussian " +
              fmt("%.3f", m("gaussian", "map_050")) + "/" + fmt("%.3f", m("gaussian", "map_070")) + " multimodal " +
              fmt("%.3f", m("multimodal", "map_050")) + "/" + fmt("%.3f", m("multimodal", "map_070"));
  }
  return {ok, detail};
}

Outcome table3(Runner& r) {
  const auto& s = seed_run(r, 1);
  const fs::path d = r.work / "table3";
  fs::create_directories(d);
  std::map<std::string, json> sum;
  for (const std::string src : {"proxy", "imitator", "gaussian"}) {
    std::string extra;
    if (src == "imitator") extra = " --checkpoint \"" + s.checkpoint.string() + "\"";
    if (src == "gaussian") extra = " --baseline \"" + s.baseline.string() + "\"";
    const fs::path out = d / src;
    r.run(r.with_config("simulate --perception " + src + " --episodes 100 --seed 1" + extra + " --out \"" +
                        out.string() + "\""));
    sum[src] = read_json(out / "summary.json");
  }
  auto dist = [&](const std::string& src) { return sum[src].at("mean_distance").get<double>(); };
  auto coll = [&](const std::string& src) { return sum[src].at("collision_rate").get<double>(); };
  const double p = dist("proxy"), i = dist("imitator"), g = dist("gaussian");
  const double gap = std::abs(p - i) / p;
  return {p >= i && i > g && gap <= 0.15,
          "mean distance proxy " + fmt("%.1f", p) + " m, imitator " + fmt("%.1f", i) + " m, gaussian " +
              fmt("%.1f", g) + " m (imitator gap " + fmt("%.1f", 100 * gap) + "%; collision rates " +
              fmt("%.2f", coll("proxy")) + "/" + fmt("%.2f", coll("imitator")) + "/" + fmt("%.2f", coll("gaussian")) +
              ")"};
}

// Drops the wall-clock field, the only nondeterministic part of a train log.
std::string strip_wall_time(const std::string& log) {
  std::istringstream in(log);
  std::string out, line;
  while (std::getline(in, line)) {
    auto j = json::parse(line);
    j.erase("wall_seconds");
    out += j.dump() + '\n';
  }
  return out;
}

Outcome determinism(Runner& r) {
  const fs::path d = r.work / "determinism";
  fs::create_directories(d);
  std::vector<std::string> diffs;
  auto same = [&](const fs::path& a, const fs::path& b, bool log = false) {
    const std::string x = slurp(a), y = slurp(b);
    const bool eq = log ? strip_wall_time(x) == strip_wall_time(y) : x == y;
    if (!eq) diffs.push_back(a.filename().string());
  };
  for (int run = 0; run < 2; ++run) {
    const fs::path o = d / ("run" + std::to_string(run));
    fs::create_directories(o);
    r.run(r.with_config("gen --n 40 --out \"" + (o / "scenes.jsonl").string() + "\" --seed 9"));
    r.run(r.with_config("train --scenes \"" + (o / "scenes.jsonl").string() + "\" --out \"" + (o / "model").string() +
                        "\" --seed 9 --set train.epochs=2 train.max_steps=6"),
          "OMP_NUM_THREADS=1");
    r.run(r.with_config("fit-baseline --scenes \"" + (o / "scenes.jsonl").string() + "\" --out \"" +
                        (o / "baseline.json").string() + "\" --seed 9"));
    r.run(r.with_config("simulate --perception multimodal --episodes 10 --seed 9 --baseline \"" +
                        (o / "baseline.json").string() + "\" --out \"" + (o / "sim").string() + "\""));
    r.run(r.with_config("simulate --perception imitator --episodes 3 --seed 9 --checkpoint \"" +
                        (o / "model" / "best.ckpt").string() + "\" --out \"" + (o / "sim_imitator").string() + "\""));
  }
  const fs::path a = d / "run0", b = d / "run1";
  same(a / "scenes.jsonl", b / "scenes.jsonl");
  for (const char* f : {"best.ckpt", "splits.json", "summary.json", "test_report.json"}) same(a / "model" / f, b / "model" / f);
  same(a / "model" / "train_log.jsonl", b / "model" / "train_log.jsonl", true);
  for (const char* s : {"sim", "sim_imitator"}) {
    same(a / s / "episodes.jsonl", b / s / "episodes.jsonl");
    same(a / s / "summary.json", b / s / "summary.json");
  }
  std::string detail = "gen, single-threaded train and simulate reruns ";
  if (diffs.empty()) return {true, detail + "byte-identical (12 files)"};
  detail += "differ in:";
  for (const auto& f : diffs) detail += " " + f;
  return {false, detail};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 4) {
    std::cerr << "usage: acceptance <pim> <gradient_suite> <config.json> [--work DIR] [--only NAME ...]\n";
    return 2;
  }
  Runner r;
  r.pim = argv[1];
  r.gradient_suite = argv[2];
  r.config = fs::absolute(argv[3]).string();
  r.work = fs::temp_directory_path() / "pim_acceptance";
  std::set<std::string> only;
  for (int i = 4; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      r.work = argv[++i];
    } else if (a == "--only") {
      while (i + 1 < argc && argv[i + 1][0] != '-') only.insert(argv[++i]);
    } else {
      std::cerr << "unknown argument " << a << '\n';
      return 2;
    }
  }
  // Start from an empty work directory, but only remove one this driver made.
  const fs::path marker = r.work / ".pim_acceptance";
  if (fs::exists(r.work) && !fs::is_empty(r.work)) {
    if (!fs::exists(marker)) {
      std::cerr << r.work << " exists and was not created by this driver\n";
      return 2;
    }
    fs::remove_all(r.work);
  }
  fs::create_directories(r.work / "logs");
  std::ofstream{marker};

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient_suite", [&] { return gradient_suite(r); }},
      {"mmd_oracle", [] { return mmd_oracle(); }},
      {"geometry", [] { return geometry(); }},
      {"encode_decode_roundtrip", [] { return roundtrip(); }},
      {"metric_oracle", [] { return metric_oracle(); }},
      {"overfit", [&] { return overfit(r); }},
      {"table2_open_loop", [&] { return table2(r); }},
      {"table3_closed_loop", [&] { return table3(r); }},
      {"determinism", [&] { return determinism(r); }},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    if (!only.empty() && !only.count(name)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << " [" << fmt("%.0f", seconds_since(t0))
              << " s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
