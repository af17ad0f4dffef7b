#include "pim/imitator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "pim/rng.hpp"

namespace pim {

using nlohmann::json;
using nn::Tensor;

void ImitatorConfig::validate(const GridSpec& grid) const {
  if (widths.size() < 2) throw std::invalid_argument("ImitatorConfig: need at least two backbone stages");
  for (int w : widths) {
    if (w <= 0) throw std::invalid_argument("ImitatorConfig: backbone widths must be positive");
  }
  const int full = 1 << static_cast<int>(widths.size());
  if (grid.height_px % full != 0 || grid.width_px % full != 0) {
    throw std::invalid_argument("ImitatorConfig: grid extents must be divisible by " + std::to_string(full));
  }
  if (score_threshold < 0.0 || score_threshold > 1.0 || nms_iou_threshold < 0.0 || nms_iou_threshold > 1.0) {
    throw std::invalid_argument("ImitatorConfig: thresholds must lie in [0, 1]");
  }
  if (!(cls_prior > 0.0 && cls_prior < 1.0)) throw std::invalid_argument("ImitatorConfig: cls_prior must be in (0, 1)");
}

Vec2 cell_center(const GridSpec& grid, int downsample, int row, int col) {
  const double r = downsample * row + 0.5 * (downsample - 1);
  const double c = downsample * col + 0.5 * (downsample - 1);
  return {(grid.anchor_row - r) * grid.meters_per_px, (grid.anchor_col - c) * grid.meters_per_px};
}

int cell_of(const GridSpec& grid, int downsample, Vec2 p) {
  const Vec2 rc = grid.to_pixel(p);
  const double row = std::floor((rc.x + 0.5) / downsample);
  const double col = std::floor((rc.y + 0.5) / downsample);
  const int h = grid.height_px / downsample;
  const int w = grid.width_px / downsample;
  if (row < 0 || col < 0 || row >= h || col >= w) return -1;
  return static_cast<int>(row) * w + static_cast<int>(col);
}

EncodeResult encode_targets(const std::vector<OrientedBox>& boxes, const GridSpec& grid, int downsample) {
  const int h = grid.height_px / downsample;
  const int w = grid.width_px / downsample;
  EncodeResult res{HeadMaps(h, w)};
  std::vector<double> owner_dist(static_cast<std::size_t>(h) * w, -1.0);
  for (const auto& b : boxes) {
    const int cell = cell_of(grid, downsample, b.center());
    if (cell < 0) {
      ++res.out_of_grid;
      continue;
    }
    const double dist = std::hypot(b.cx, b.cy);
    if (owner_dist[cell] >= 0.0) {
      ++res.collisions;
      if (dist >= owner_dist[cell]) continue;
    }
    owner_dist[cell] = dist;
    const Vec2 cc = cell_center(grid, downsample, cell / w, cell % w);
    res.maps.cls[cell] = 1.0;
    res.maps.reg_at(kDx, cell) = b.cx - cc.x;
    res.maps.reg_at(kDy, cell) = b.cy - cc.y;
    res.maps.reg_at(kLogW, cell) = std::log(b.w);
    res.maps.reg_at(kLogL, cell) = std::log(b.l);
    res.maps.reg_at(kSin, cell) = std::sin(b.yaw);
    res.maps.reg_at(kCos, cell) = std::cos(b.yaw);
  }
  return res;
}

std::vector<Detection> decode(const HeadMaps& maps, const GridSpec& grid, int downsample, double score_threshold) {
  std::vector<Detection> out;
  for (int cell = 0; cell < maps.cells(); ++cell) {
    if (!(maps.cls[cell] >= score_threshold)) continue;
    double r[kRegChannels];
    for (int ch = 0; ch < kRegChannels; ++ch) {
      r[ch] = maps.reg_at(ch, cell);
      if (!std::isfinite(r[ch])) throw std::runtime_error("decode: non-finite regression under an active cell");
    }
    const Vec2 cc = cell_center(grid, downsample, cell / maps.width, cell % maps.width);
    Detection d;
    d.box = {cc.x + r[kDx], cc.y + r[kDy], std::exp(r[kLogW]), std::exp(r[kLogL]), std::atan2(r[kSin], r[kCos])};
    d.box.yaw = normalize_angle(d.box.yaw);
    d.score = maps.cls[cell];
    out.push_back(d);
  }
  return out;
}

std::vector<Detection> nms_rotated(const std::vector<Detection>& dets, double iou_threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<Detection> kept;
  for (std::size_t i : order) {
    bool keep = true;
    for (const auto& k : kept) {
      if (iou_rotated(k.box, dets[i].box) >= iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(dets[i]);
  }
  return kept;
}

// ---- network ------------------------------------------------------------------

namespace {

Tensor he_normal(nn::Shape shape, Rng& rng) {
  const int fan_in = shape[1] * shape[2] * shape[3];
  const double sd = std::sqrt(2.0 / fan_in);
  std::vector<double> v(nn::numel(shape));
  for (auto& x : v) x = normal(rng, 0.0, sd);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor small_normal(nn::Shape shape, double sd, Rng& rng) {
  std::vector<double> v(nn::numel(shape));
  for (auto& x : v) x = normal(rng, 0.0, sd);
  return Tensor::from(std::move(shape), std::move(v), true);
}

std::string stage_name(std::size_t i) { return "stage" + std::to_string(i + 1); }

}  // namespace

Imitator::Imitator(ImitatorConfig cfg, std::vector<nn::NamedTensor> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  // Resolve every expected parameter once so a bad checkpoint fails early.
  for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
    const int cin = i == 0 ? cfg_.in_channels : cfg_.widths[i - 1];
    const auto& w = param(stage_name(i) + ".w");
    if (w.shape() != nn::Shape{cfg_.widths[i], cin, 3, 3}) {
      throw nn::ShapeError("imitator: " + stage_name(i) + ".w has shape " + nn::shape_str(w.shape()));
    }
  }
  param("lateral.w");
  param("fuse.w");
  param("cls.w");
  param("reg.w");
}

Imitator Imitator::init(const ImitatorConfig& cfg, std::uint64_t seed, bool zero_heads) {
  Rng rng(derive_seed(seed, "imitator.init"));
  std::vector<nn::NamedTensor> p;
  int cin = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
    p.push_back({stage_name(i) + ".w", he_normal({cfg.widths[i], cin, 3, 3}, rng)});
    p.push_back({stage_name(i) + ".b", Tensor::zeros({cfg.widths[i]}, true)});
    cin = cfg.widths[i];
  }
  const int top = cfg.widths.back();
  const int mid = cfg.widths[cfg.widths.size() - 2];
  p.push_back({"lateral.w", he_normal({mid, top, 1, 1}, rng)});
  p.push_back({"lateral.b", Tensor::zeros({mid}, true)});
  p.push_back({"fuse.w", he_normal({mid, mid, 3, 3}, rng)});
  p.push_back({"fuse.b", Tensor::zeros({mid}, true)});
  if (zero_heads) {
    p.push_back({"cls.w", Tensor::zeros({1, mid, 1, 1}, true)});
    p.push_back({"cls.b", Tensor::zeros({1}, true)});
    p.push_back({"reg.w", Tensor::zeros({kRegChannels, mid, 1, 1}, true)});
    p.push_back({"reg.b", Tensor::zeros({kRegChannels}, true)});
  } else {
    p.push_back({"cls.w", small_normal({1, mid, 1, 1}, 0.01, rng)});
    p.push_back({"cls.b", Tensor::from({1}, {std::log(cfg.cls_prior / (1.0 - cfg.cls_prior))}, true)});
    p.push_back({"reg.w", small_normal({kRegChannels, mid, 1, 1}, 0.01, rng)});
    p.push_back({"reg.b", Tensor::from({kRegChannels}, {0.0, 0.0, std::log(cfg.prior_w), std::log(cfg.prior_l), 0.0, 1.0}, true)});
  }
  return Imitator(cfg, std::move(p));
}

const Tensor& Imitator::param(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw std::invalid_argument("imitator: missing parameter '" + name + "'");
}

std::vector<Tensor> Imitator::tensors() const {
  std::vector<Tensor> out;
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

std::vector<Tensor> Imitator::weight_tensors() const {
  std::vector<Tensor> out;
  for (const auto& p : params_) {
    if (p.name.ends_with(".w")) out.push_back(p.tensor);
  }
  return out;
}

HeadTensors Imitator::forward(const Tensor& input) const {
  if (input.shape().size() != 4 || input.dim(1) != cfg_.in_channels) {
    throw nn::ShapeError("imitator: expected N x " + std::to_string(cfg_.in_channels) + " x H x W input, got " +
                         nn::shape_str(input.shape()));
  }
  const std::size_t stages = cfg_.widths.size();
  std::vector<Tensor> feats;
  Tensor x = input;
  for (std::size_t i = 0; i < stages; ++i) {
    x = nn::relu(nn::conv2d(x, param(stage_name(i) + ".w"), param(stage_name(i) + ".b"), 2, 1));
    feats.push_back(x);
  }
  // 1x1 lateral commutes with nearest upsampling, so apply it at low resolution.
  Tensor top = nn::conv2d(feats.back(), param("lateral.w"), param("lateral.b"), 1, 0);
  Tensor merged = nn::relu(nn::add(nn::upsample2x(top), feats[stages - 2]));
  Tensor h = nn::relu(nn::conv2d(merged, param("fuse.w"), param("fuse.b"), 1, 1));
  HeadTensors out;
  out.cls = nn::sigmoid(nn::conv2d(h, param("cls.w"), param("cls.b"), 1, 0));
  out.reg = nn::conv2d(h, param("reg.w"), param("reg.b"), 1, 0);
  return out;
}

HeadMaps Imitator::head_maps(const HeadTensors& out, int sample) const {
  const int h = out.cls.dim(2);
  const int w = out.cls.dim(3);
  HeadMaps m(h, w);
  const std::size_t cells = static_cast<std::size_t>(h) * w;
  const auto c = out.cls.data();
  const auto r = out.reg.data();
  std::copy_n(c.data() + sample * cells, cells, m.cls.data());
  std::copy_n(r.data() + sample * kRegChannels * cells, kRegChannels * cells, m.reg.data());
  return m;
}

std::vector<Detection> Imitator::perceive(const RasterStack& stack, double score_threshold) const {
  const Tensor input = make_input({&stack});
  const HeadTensors out = forward(input);
  const HeadMaps maps = head_maps(out, 0);
  return nms_rotated(decode(maps, stack.grid, cfg_.downsample(), score_threshold), cfg_.nms_iou_threshold);
}

Tensor make_input(const std::vector<const RasterStack*>& stacks) {
  if (stacks.empty()) throw std::invalid_argument("make_input: no stacks");
  const auto& g = stacks.front()->grid;
  const int c = stacks.front()->channels();
  const std::size_t per = static_cast<std::size_t>(c) * g.pixels();
  std::vector<double> data(per * stacks.size());
  for (std::size_t i = 0; i < stacks.size(); ++i) {
    const auto& s = *stacks[i];
    if (s.channels() != c || s.grid.height_px != g.height_px || s.grid.width_px != g.width_px) {
      throw nn::ShapeError("make_input: stacks differ in shape");
    }
    s.write_chw(std::span<double>(data.data() + i * per, per));
  }
  return Tensor::from({static_cast<int>(stacks.size()), c, g.height_px, g.width_px}, std::move(data));
}

json to_json(const ImitatorConfig& cfg) {
  return {{"in_channels", cfg.in_channels},     {"widths", cfg.widths},
          {"score_threshold", cfg.score_threshold}, {"nms_iou_threshold", cfg.nms_iou_threshold},
          {"cls_prior", cfg.cls_prior},         {"prior_w", cfg.prior_w},
          {"prior_l", cfg.prior_l}};
}

ImitatorConfig imitator_config_from_json(const json& j) {
  ImitatorConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.score_threshold = j.at("score_threshold").get<double>();
  c.nms_iou_threshold = j.at("nms_iou_threshold").get<double>();
  c.cls_prior = j.value("cls_prior", c.cls_prior);
  c.prior_w = j.value("prior_w", c.prior_w);
  c.prior_l = j.value("prior_l", c.prior_l);
  return c;
}

void Imitator::save(const std::filesystem::path& path, const json& meta) const {
  json m = meta;
  m["imitator"] = to_json(cfg_);
  nn::save_checkpoint(path, params_, m);
}

Imitator Imitator::load(const std::filesystem::path& path, json* meta) {
  auto ck = nn::load_checkpoint(path);
  if (!ck.meta.contains("imitator")) throw std::runtime_error("checkpoint '" + path.string() + "' lacks imitator config");
  ImitatorConfig cfg = imitator_config_from_json(ck.meta.at("imitator"));
  if (meta != nullptr) *meta = ck.meta;
  return Imitator(cfg, std::move(ck.params));
}

}  // namespace pim
