#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pim/raster.hpp"
#include "pim/tensor.hpp"

namespace pim {

struct Detection {
  OrientedBox box;
  double score = 1.0;
};

// Regression channel order.
enum RegChannel : int { kDx = 0, kDy = 1, kLogW = 2, kLogL = 3, kSin = 4, kCos = 5 };
inline constexpr int kRegChannels = 6;

/// Classification map (after sigmoid) and 6-channel regression map on the
/// H/D x W/D output grid. Regression is channel-major: reg[ch * cells + i].
/// Used both for network outputs and for pseudo targets.
struct HeadMaps {
  int height = 0;
  int width = 0;
  std::vector<double> cls;
  std::vector<double> reg;

  HeadMaps() = default;
  HeadMaps(int h, int w)
      : height(h), width(w), cls(static_cast<std::size_t>(h) * w, 0.0), reg(static_cast<std::size_t>(h) * w * kRegChannels, 0.0) {}
  int cells() const { return height * width; }
  double& reg_at(int ch, int cell) { return reg[static_cast<std::size_t>(ch) * cells() + cell]; }
  double reg_at(int ch, int cell) const { return reg[static_cast<std::size_t>(ch) * cells() + cell]; }
};

struct ImitatorConfig {
  int in_channels = 4 + 64;
  // One stride-2 3x3 conv stage per entry; the last stage is merged back
  // into the previous one, so the output stride is 2^(stages - 1).
  std::vector<int> widths = {32, 64, 128};
  double score_threshold = 0.5;
  double nms_iou_threshold = 0.3;
  // Head initialisation: classification prior probability and the prior box
  // size encoded in the regression bias.
  double cls_prior = 0.02;
  double prior_w = 2.0;
  double prior_l = 4.5;

  int downsample() const { return 1 << (static_cast<int>(widths.size()) - 1); }
  void validate(const GridSpec& grid) const;
};

/// Center (ego frame, meters) of output cell (row, col).
Vec2 cell_center(const GridSpec& grid, int downsample, int row, int col);
// Output cell containing an ego-frame point, or -1 when outside the grid.
int cell_of(const GridSpec& grid, int downsample, Vec2 p);

struct EncodeResult {
  HeadMaps maps;
  int collisions = 0;
  int out_of_grid = 0;
};

/// Pseudo maps from boxes: the cell holding each box center gets cls = 1 and
/// reg = (dx, dy, log w, log l, sin yaw, cos yaw) with (dx, dy) the metric
/// offset from the cell center. When two boxes share a cell the one nearer
/// the ego is kept and the clash is counted.
EncodeResult encode_targets(const std::vector<OrientedBox>& boxes, const GridSpec& grid, int downsample);

/// Every cell with cls >= threshold becomes a detection. Throws
/// std::runtime_error on non-finite regression under an active cell.
std::vector<Detection> decode(const HeadMaps& maps, const GridSpec& grid, int downsample, double score_threshold);

/// Greedy rotated NMS: highest score first (ties keep input order); a box
/// survives iff its IoU with every kept box is below the threshold.
std::vector<Detection> nms_rotated(const std::vector<Detection>& dets, double iou_threshold);

// Output of a network forward pass.
struct HeadTensors {
  nn::Tensor cls;  // N x 1 x H' x W', after sigmoid
  nn::Tensor reg;  // N x 6 x H' x W'
};

class Imitator {
 public:
  Imitator() = default;
  Imitator(ImitatorConfig cfg, std::vector<nn::NamedTensor> params);

  /// He-normal backbone, small-normal heads with prior biases. With
  /// `zero_heads` the head weights and biases start at zero (cls = 0.5, reg = 0).
  static Imitator init(const ImitatorConfig& cfg, std::uint64_t seed, bool zero_heads = false);

  HeadTensors forward(const nn::Tensor& input) const;

  // Single-stack inference: forward, decode at `score_threshold`, NMS.
  std::vector<Detection> perceive(const RasterStack& stack, double score_threshold) const;
  std::vector<Detection> perceive(const RasterStack& stack) const { return perceive(stack, cfg_.score_threshold); }

  HeadMaps head_maps(const HeadTensors& out, int sample) const;

  const ImitatorConfig& config() const { return cfg_; }
  const std::vector<nn::NamedTensor>& params() const { return params_; }
  std::vector<nn::Tensor> tensors() const;
  // Conv kernels only (biases excluded); the weight-decay set.
  std::vector<nn::Tensor> weight_tensors() const;
  const nn::Tensor& param(const std::string& name) const;

  void save(const std::filesystem::path& path, const nlohmann::json& meta) const;
  static Imitator load(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

 private:
  ImitatorConfig cfg_;
  std::vector<nn::NamedTensor> params_;
};

// Stacks rasters into an N x C x H x W input tensor.
nn::Tensor make_input(const std::vector<const RasterStack*>& stacks);

nlohmann::json to_json(const ImitatorConfig& cfg);
ImitatorConfig imitator_config_from_json(const nlohmann::json& j);

// ---- detections file ------------------------------------------------------------

struct SceneDetections {
  std::int64_t scene_id = 0;
  std::vector<Detection> dets;
};

/// JSON lines `{scene_id, dets:[{cx,cy,w,l,yaw,score}], config_hash?}`.
void save_detections(const std::vector<SceneDetections>& rows, const std::filesystem::path& path,
                     const std::string& config_hash = {});
std::vector<SceneDetections> load_detections(const std::filesystem::path& path, std::string* config_hash = nullptr);

}  // namespace pim
