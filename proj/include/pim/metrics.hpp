#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pim/imitator.hpp"

namespace pim {

struct MatchResult {
  std::vector<std::pair<int, int>> tp;  // (pred index, gt index)
  std::vector<int> fp;
  std::vector<int> fn;
};

/// Predictions by score descending (ties keep input order); each takes the
/// highest-IoU unmatched gt with IoU >= iou_threshold.
MatchResult match_greedy(const std::vector<Detection>& preds, const std::vector<OrientedBox>& gts,
                         double iou_threshold);

struct PrPoint {
  double score_threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

/// One point per distinct prediction score (descending); at threshold s the
/// predictions with score >= s are re-matched scene by scene.
std::vector<PrPoint> pr_curve(const std::vector<std::vector<Detection>>& preds,
                              const std::vector<std::vector<OrientedBox>>& gts, double iou_threshold);

// All-point interpolated area under the precision envelope; 0 for an empty curve.
double average_precision(const std::vector<PrPoint>& curve);
double max_recall(const std::vector<PrPoint>& curve);
// Score threshold of the curve point with the highest F1; the higher threshold
// wins ties. nullopt when no point has a true positive.
std::optional<double> best_f1_threshold(const std::vector<PrPoint>& curve);

struct OverlapReport {
  double iou_threshold = 0.0;
  double map = 0.0;
  double maxr = 0.0;
  std::vector<PrPoint> curve;
};

struct EvalReport {
  double map_050 = 0.0;
  double map_070 = 0.0;
  double maxr_050 = 0.0;
  double maxr_070 = 0.0;
  double fixed_threshold = 0.5;
  double precision_at_fixed = 0.0;
  double recall_at_fixed = 0.0;
  int tp = 0;
  int fp = 0;
  int fn = 0;
  int scenes = 0;
  std::vector<OverlapReport> overlaps;

  nlohmann::json to_json(bool with_curves = true) const;
};

/// Scores predictions against target detections (their scores are ignored).
/// Scene ids must agree; otherwise std::invalid_argument lists the ids present
/// on one side only.
EvalReport evaluate(const std::vector<SceneDetections>& preds, const std::vector<SceneDetections>& targets,
                    double fixed_threshold);

void write_pr_csv(const EvalReport& report, const std::filesystem::path& path);

}  // namespace pim
