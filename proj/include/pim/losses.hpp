#pragma once

#include <vector>

#include <json.hpp>

#include "pim/imitator.hpp"
#include "pim/tensor.hpp"

namespace pim {

struct LossWeights {
  double lambda = 0.001;  // weight decay on conv kernels
  double alpha = 2.0;     // classification
  double beta = 0.01;     // masked smooth-L1 regression
  double gamma = 10.0;    // corner loss
  double omega1 = 0.005;  // MMD between imitator and target maps
  double omega2 = 0.001;  // MMD between error maps
  double kernel_sigma = 1.0;
  // Median pairwise distance of the pooled sample instead of kernel_sigma.
  bool median_heuristic = false;
  // MMD over every output cell instead of the union of positive cells.
  bool mmd_all_pixels = false;
  double corner_match_iou = 0.5;

  void validate() const;
};

nlohmann::json to_json(const LossWeights& w);
LossWeights loss_weights_from_json(const nlohmann::json& j);

inline constexpr double kSmoothL1Transition = 1.0;

struct LossReport {
  double total = 0.0;
  double cls = 0.0;
  double reg = 0.0;
  double corner = 0.0;
  double mmd_box = 0.0;
  double mmd_err = 0.0;
  double weight_reg = 0.0;
  int corner_matches = 0;
  bool no_matches = false;

  // Weighted sum of the parts, recomputed from the fields.
  double recombined(const LossWeights& w) const;
  nlohmann::json to_json() const;
};

double smooth_l1(double x);

// Per-sample supervision in pseudo-map form.
struct LossTarget {
  HeadMaps target;      // from the target perception model's detections
  HeadMaps annotation;  // from annotation boxes
};

/// Mean over all cells (and samples) of the binary cross entropy between
/// X_cls, clamped to [1e-7, 1 - 1e-7], and the 0/1 pseudo map.
nn::Tensor bce(const nn::Tensor& x_cls, const std::vector<const HeadMaps*>& y);

/// Smooth-L1 on Y_cls * (X_reg - Y_reg), summed over channels and averaged
/// over positive cells; zero without positives.
nn::Tensor smooth_l1_masked(const nn::Tensor& x_reg, const std::vector<const HeadMaps*>& y);

struct CornerLossResult {
  nn::Tensor loss;
  int matches = 0;
};

/// Smooth-L1 of the distance between canonical corners of matched boxes,
/// averaged over matched pairs. Candidates are cells with X_cls >= threshold
/// or Y_cls = 1; they are matched greedily by score to the target boxes at
/// IoU >= match_iou. Differentiable through the box decoding.
CornerLossResult corner_loss(const nn::Tensor& x_reg, const nn::Tensor& x_cls, const std::vector<const HeadMaps*>& y,
                             const GridSpec& grid, int downsample, double score_threshold, double match_iou);

// Corner loss between two already matched box lists (no autograd).
double corner_loss_boxes(const std::vector<OrientedBox>& pred, const std::vector<OrientedBox>& target);

struct MmdTerms {
  nn::Tensor box;  // sum over regression channels of MMD(X, Y), averaged over samples
  nn::Tensor err;  // sum over channels of MMD(X - Z, Y - Z), averaged over samples
};

MmdTerms mmd_terms(const nn::Tensor& x_reg, const std::vector<const LossTarget*>& targets, double sigma,
                   bool all_pixels, bool median_heuristic = false);

/// Plain-data version over maps of one sample: returns (M_box, M_err) summed
/// over regression channels, evaluated on the cells selected by `mask`
/// (all cells when empty).
std::pair<double, double> mmd2(const HeadMaps& x, const HeadMaps& y, const HeadMaps& z, double sigma,
                               const std::vector<int>& cells = {});

// Cells positive in either pseudo map.
std::vector<int> union_positive_cells(const HeadMaps& a, const HeadMaps& b);

// Median pairwise absolute difference of the pooled values.
double median_bandwidth(const std::vector<double>& pooled);

struct TotalLoss {
  nn::Tensor total;
  LossReport report;
};

/// Weighted objective over a batch: alpha*BCE + beta*masked smooth-L1 +
/// gamma*corner + omega1*M_box + omega2*M_err + lambda*||w||^2. Throws
/// std::runtime_error naming the first non-finite term.
TotalLoss total_loss(const HeadTensors& out, const std::vector<const LossTarget*>& targets,
                     const std::vector<nn::Tensor>& weights_for_decay, const LossWeights& w, const GridSpec& grid,
                     int downsample, double score_threshold);

}  // namespace pim
