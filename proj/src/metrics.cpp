#include "pim/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

#include "pim/scene.hpp"

namespace pim {

using nlohmann::json;

namespace {

std::vector<int> score_order(const std::vector<Detection>& preds) {
  std::vector<int> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return preds[a].score > preds[b].score; });
  return order;
}

}  // namespace

MatchResult match_greedy(const std::vector<Detection>& preds, const std::vector<OrientedBox>& gts,
                         double iou_threshold) {
  MatchResult res;
  std::vector<bool> used(gts.size(), false);
  for (int p : score_order(preds)) {
    double best = -1.0;
    int best_g = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double iou = iou_rotated(preds[p].box, gts[g]);
      if (iou >= iou_threshold && iou > best) {
        best = iou;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0) {
      used[best_g] = true;
      res.tp.emplace_back(p, best_g);
    } else {
      res.fp.push_back(p);
    }
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (!used[g]) res.fn.push_back(static_cast<int>(g));
  }
  return res;
}

std::vector<PrPoint> pr_curve(const std::vector<std::vector<Detection>>& preds,
                              const std::vector<std::vector<OrientedBox>>& gts, double iou_threshold) {
  if (preds.size() != gts.size()) throw std::invalid_argument("pr_curve: scene count mismatch");
  std::size_t total_gt = 0;
  for (const auto& g : gts) total_gt += g.size();

  // (score, scene) for every prediction, highest score first.
  std::vector<std::pair<double, std::size_t>> events;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    for (const auto& d : preds[s]) events.emplace_back(d.score, s);
  }
  std::stable_sort(events.begin(), events.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

  // Lowering the threshold only changes the scenes owning predictions at the
  // new score, so only those are re-matched.
  std::vector<int> tp_per_scene(preds.size(), 0);
  std::vector<Detection> filtered;
  long tp = 0;
  long kept = 0;
  std::vector<PrPoint> curve;
  std::size_t i = 0;
  while (i < events.size()) {
    const double s = events[i].first;
    std::set<std::size_t> touched;
    while (i < events.size() && events[i].first == s) {
      touched.insert(events[i].second);
      ++kept;
      ++i;
    }
    for (std::size_t scene : touched) {
      filtered.clear();
      for (const auto& d : preds[scene]) {
        if (d.score >= s) filtered.push_back(d);
      }
      const int now = static_cast<int>(match_greedy(filtered, gts[scene], iou_threshold).tp.size());
      tp += now - tp_per_scene[scene];
      tp_per_scene[scene] = now;
    }
    PrPoint p;
    p.score_threshold = s;
    p.precision = static_cast<double>(tp) / static_cast<double>(kept);
    p.recall = total_gt > 0 ? static_cast<double>(tp) / static_cast<double>(total_gt) : 0.0;
    curve.push_back(p);
  }
  return curve;
}

double average_precision(const std::vector<PrPoint>& curve) {
  if (curve.empty()) return 0.0;
  std::vector<PrPoint> pts(curve);
  std::stable_sort(pts.begin(), pts.end(), [](const PrPoint& a, const PrPoint& b) { return a.recall < b.recall; });
  // Precision envelope from the right.
  std::vector<double> env(pts.size());
  double run = 0.0;
  for (std::size_t i = pts.size(); i-- > 0;) {
    run = std::max(run, pts[i].precision);
    env[i] = run;
  }
  double ap = 0.0;
  double prev_r = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    ap += (pts[i].recall - prev_r) * env[i];
    prev_r = pts[i].recall;
  }
  return ap;
}

double max_recall(const std::vector<PrPoint>& curve) {
  double r = 0.0;
  for (const auto& p : curve) r = std::max(r, p.recall);
  return r;
}

std::optional<double> best_f1_threshold(const std::vector<PrPoint>& curve) {
  std::optional<double> out;
  double best = 0.0;
  for (const auto& p : curve) {
    if (p.precision + p.recall <= 0.0) continue;
    const double f1 = 2.0 * p.precision * p.recall / (p.precision + p.recall);
    if (f1 > best) {
      best = f1;
      out = p.score_threshold;
    }
  }
  return out;
}

json EvalReport::to_json(bool with_curves) const {
  json j = {{"map_050", map_050},
            {"map_070", map_070},
            {"maxr_050", maxr_050},
            {"maxr_070", maxr_070},
            {"fixed_threshold", fixed_threshold},
            {"precision_at_fixed", precision_at_fixed},
            {"recall_at_fixed", recall_at_fixed},
            {"counts", {{"tp", tp}, {"fp", fp}, {"fn", fn}}},
            {"scenes", scenes}};
  if (with_curves) {
    json curves = json::object();
    for (const auto& o : overlaps) {
      json pts = json::array();
      for (const auto& p : o.curve) pts.push_back({p.score_threshold, p.precision, p.recall});
      curves[o.iou_threshold == 0.5 ? "0.5" : o.iou_threshold == 0.7 ? "0.7" : std::to_string(o.iou_threshold)] = pts;
    }
    j["pr_curves"] = curves;
  }
  return j;
}

EvalReport evaluate(const std::vector<SceneDetections>& preds, const std::vector<SceneDetections>& targets,
                    double fixed_threshold) {
  std::map<std::int64_t, const SceneDetections*> by_id;
  for (const auto& t : targets) {
    if (!by_id.emplace(t.scene_id, &t).second) {
      throw std::invalid_argument("evaluate: duplicate target scene id " + std::to_string(t.scene_id));
    }
  }
  std::set<std::int64_t> pred_ids;
  for (const auto& p : preds) {
    if (!pred_ids.insert(p.scene_id).second) {
      throw std::invalid_argument("evaluate: duplicate prediction scene id " + std::to_string(p.scene_id));
    }
  }
  std::vector<std::int64_t> only;
  for (const auto& [id, _] : by_id) {
    if (!pred_ids.count(id)) only.push_back(id);
  }
  for (std::int64_t id : pred_ids) {
    if (!by_id.count(id)) only.push_back(id);
  }
  if (!only.empty()) {
    std::sort(only.begin(), only.end());
    std::string msg = "evaluate: scene ids differ between predictions and targets:";
    for (auto id : only) msg += " " + std::to_string(id);
    throw std::invalid_argument(msg);
  }

  std::vector<std::vector<Detection>> p_all;
  std::vector<std::vector<OrientedBox>> g_all;
  for (const auto& p : preds) {
    p_all.push_back(p.dets);
    std::vector<OrientedBox> g;
    for (const auto& d : by_id.at(p.scene_id)->dets) g.push_back(d.box);
    g_all.push_back(std::move(g));
  }

  EvalReport rep;
  rep.fixed_threshold = fixed_threshold;
  rep.scenes = static_cast<int>(preds.size());
  for (double t : {0.5, 0.7}) {
    OverlapReport o;
    o.iou_threshold = t;
    o.curve = pr_curve(p_all, g_all, t);
    o.map = average_precision(o.curve);
    o.maxr = max_recall(o.curve);
    rep.overlaps.push_back(o);
  }
  rep.map_050 = rep.overlaps[0].map;
  rep.maxr_050 = rep.overlaps[0].maxr;
  rep.map_070 = rep.overlaps[1].map;
  rep.maxr_070 = rep.overlaps[1].maxr;

  for (std::size_t s = 0; s < p_all.size(); ++s) {
    std::vector<Detection> kept;
    for (const auto& d : p_all[s]) {
      if (d.score >= fixed_threshold) kept.push_back(d);
    }
    const auto m = match_greedy(kept, g_all[s], 0.5);
    rep.tp += static_cast<int>(m.tp.size());
    rep.fp += static_cast<int>(m.fp.size());
    rep.fn += static_cast<int>(m.fn.size());
  }
  rep.precision_at_fixed = rep.tp + rep.fp > 0 ? static_cast<double>(rep.tp) / (rep.tp + rep.fp) : 0.0;
  rep.recall_at_fixed = rep.tp + rep.fn > 0 ? static_cast<double>(rep.tp) / (rep.tp + rep.fn) : 0.0;
  return rep;
}

void write_pr_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "iou_threshold,score_threshold,precision,recall\n";
  out.precision(17);
  for (const auto& o : report.overlaps) {
    for (const auto& p : o.curve) out << o.iou_threshold << ',' << p.score_threshold << ',' << p.precision << ',' << p.recall << '\n';
  }
}

}  // namespace pim
