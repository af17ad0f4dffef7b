#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "metric_fixture.hpp"
#include "pim/metrics.hpp"
#include "support.hpp"

using namespace pim;

namespace {

// Brute-force curve: for every distinct score, filter and match each scene
// from scratch with an independent greedy matcher.
std::vector<PrPoint> naive_curve(const std::vector<std::vector<Detection>>& preds,
                                 const std::vector<std::vector<OrientedBox>>& gts, double thr) {
  std::vector<double> scores;
  long total = 0;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    for (const auto& d : preds[s]) scores.push_back(d.score);
    total += static_cast<long>(gts[s].size());
  }
  std::sort(scores.rbegin(), scores.rend());
  scores.erase(std::unique(scores.begin(), scores.end()), scores.end());
  std::vector<PrPoint> out;
  for (double t : scores) {
    long tp = 0, kept = 0;
    for (std::size_t s = 0; s < preds.size(); ++s) {
      std::vector<Detection> f;
      for (const auto& d : preds[s])
        if (d.score >= t) f.push_back(d);
      std::stable_sort(f.begin(), f.end(), [](auto& a, auto& b) { return a.score > b.score; });
      std::vector<bool> used(gts[s].size(), false);
      for (const auto& d : f) {
        int best = -1;
        double best_iou = -1;
        for (std::size_t g = 0; g < gts[s].size(); ++g) {
          const double iou = iou_rotated(d.box, gts[s][g]);
          if (!used[g] && iou >= thr && iou > best_iou) {
            best = static_cast<int>(g);
            best_iou = iou;
          }
        }
        if (best >= 0) {
          used[best] = true;
          ++tp;
        }
      }
      kept += static_cast<long>(f.size());
    }
    out.push_back({t, static_cast<double>(tp) / kept, total > 0 ? static_cast<double>(tp) / total : 0.0});
  }
  return out;
}

}  // namespace

TEST_CASE("greedy matching worked example") {
  const std::vector<OrientedBox> gts{{0, 0, 2, 4, 0}, {10, 0, 2, 4, 0}};
  const std::vector<Detection> preds{{{0.5, 0, 2, 4, 0}, 0.6}, {{0, 0, 2, 4, 0}, 0.9}, {{30, 0, 2, 4, 0}, 0.8}};
  const auto m = match_greedy(preds, gts, 0.5);
  REQUIRE(m.tp.size() == 1);
  CHECK(m.tp[0] == std::pair<int, int>{1, 0});
  CHECK(m.fp == std::vector<int>{2, 0});
  CHECK(m.fn == std::vector<int>{1});
}

TEST_CASE("average precision hand cases") {
  CHECK(average_precision({}) == 0.0);
  CHECK(average_precision({{0.9, 1.0, 1.0}}) == 1.0);
  // TP, FP, TP over two ground truths.
  const std::vector<PrPoint> c{{0.9, 1.0, 0.5}, {0.8, 0.5, 0.5}, {0.7, 2.0 / 3.0, 1.0}};
  CHECK(average_precision(c) == doctest::Approx(0.5 * 1.0 + 0.5 * 2.0 / 3.0));
  CHECK(max_recall(c) == 1.0);
}

TEST_CASE("handmade fixture matches the counting oracle exactly") {
  std::vector<SceneDetections> p, t;
  testing::build_metric_fixture(p, t);
  REQUIRE(p.size() == 20);
  const auto rep = evaluate(p, t, 0.5);
  for (const auto& o : rep.overlaps) {
    const auto e = testing::fixture_expectation(o.iou_threshold);
    REQUIRE(o.curve.size() == e.curve.size());
    for (std::size_t i = 0; i < e.curve.size(); ++i) {
      CHECK(o.curve[i].score_threshold == e.curve[i].score_threshold);
      CHECK(o.curve[i].precision == e.curve[i].precision);
      CHECK(o.curve[i].recall == e.curve[i].recall);
    }
    CHECK(o.map == e.ap);
    CHECK(o.maxr == e.maxr);
  }
  CHECK(rep.map_050 == testing::fixture_expectation(0.5).ap);
  CHECK(rep.map_070 == testing::fixture_expectation(0.7).ap);
  CHECK(rep.map_070 < rep.map_050);
  // At score >= 0.5: exact hits 0.95 .9 .8 .7 .9 .65 .88 .82 .99 .58, shifted 0.55 .75 .6 .72.
  CHECK(rep.tp == 14);
  CHECK(rep.fp == 4);
  CHECK(rep.fn == 29 - 14);
}

TEST_CASE("incremental PR curve equals brute force on random scenes") {
  Rng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::vector<Detection>> preds(uniform_int(rng, 1, 6));
    std::vector<std::vector<OrientedBox>> gts(preds.size());
    for (std::size_t s = 0; s < preds.size(); ++s) {
      const int n = uniform_int(rng, 0, 5);
      for (int i = 0; i < n; ++i) gts[s].push_back(testing::random_box(rng, 5.0));
      const int m = uniform_int(rng, 0, 7);
      for (int i = 0; i < m; ++i) {
        OrientedBox b = gts[s].empty() || uniform(rng, 0, 1) < 0.3 ? testing::random_box(rng, 5.0)
                                                                     : gts[s][uniform_int(rng, 0, n - 1)];
        b.cx += normal(rng, 0, 0.3);
        b.cy += normal(rng, 0, 0.3);
        // Coarse scores produce ties.
        preds[s].push_back({b, std::round(uniform(rng, 0, 1) * 8) / 8});
      }
    }
    for (double thr : {0.5, 0.7}) {
      const auto a = pr_curve(preds, gts, thr);
      const auto b = naive_curve(preds, gts, thr);
      REQUIRE(a.size() == b.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].precision == b[i].precision);
        CHECK(a[i].recall == b[i].recall);
      }
      CHECK(average_precision(a) <= max_recall(a) + 1e-15);
    }
  }
}

TEST_CASE("AP is invariant under monotone score rescaling") {
  std::vector<SceneDetections> p, t;
  testing::build_metric_fixture(p, t);
  const auto base = evaluate(p, t, 0.5);
  for (auto& r : p)
    for (auto& d : r.dets) d.score = 0.5 * d.score * d.score;
  const auto scaled = evaluate(p, t, 0.5 * 0.25);
  CHECK(scaled.map_050 == base.map_050);
  CHECK(scaled.map_070 == base.map_070);
  CHECK(scaled.maxr_050 == base.maxr_050);
}

TEST_CASE("true positives at 0.7 never exceed those at 0.5") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<OrientedBox> gts;
    std::vector<Detection> preds;
    for (int i = 0; i < 6; ++i) gts.push_back(testing::random_box(rng, 8.0));
    for (int i = 0; i < 8; ++i) {
      OrientedBox b = gts[uniform_int(rng, 0, 5)];
      b.cx += normal(rng, 0, 0.5);
      preds.push_back({b, uniform(rng, 0, 1)});
    }
    CHECK(match_greedy(preds, gts, 0.7).tp.size() <= match_greedy(preds, gts, 0.5).tp.size());
  }
}

TEST_CASE("evaluate rejects mismatched scene ids and writes curves") {
  std::vector<SceneDetections> p, t;
  testing::build_metric_fixture(p, t);
  auto q = p;
  q.pop_back();
  q.push_back({99, {}});
  CHECK_THROWS_WITH_AS(evaluate(q, t, 0.5), doctest::Contains("99"), std::invalid_argument);
  auto dup = p;
  dup[1].scene_id = 0;
  CHECK_THROWS_AS(evaluate(dup, t, 0.5), std::invalid_argument);

  const auto rep = evaluate(p, t, 0.5);
  const auto path = std::filesystem::temp_directory_path() / "pim_pr_test.csv";
  write_pr_csv(rep, path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header.find("precision") != std::string::npos);
  std::filesystem::remove(path);
  CHECK(rep.to_json().contains("map_050"));
}

TEST_CASE("F1-best threshold") {
  const std::vector<PrPoint> curve{{0.9, 1.0, 0.2}, {0.5, 0.75, 0.6}, {0.1, 0.5, 0.7}};
  CHECK(best_f1_threshold(curve) == 0.5);
  CHECK_FALSE(best_f1_threshold({}).has_value());
  CHECK_FALSE(best_f1_threshold({{0.3, 0.0, 0.0}}).has_value());
  // Ties keep the higher threshold.
  CHECK(best_f1_threshold({{0.8, 0.5, 0.5}, {0.4, 0.5, 0.5}}) == 0.8);
}
