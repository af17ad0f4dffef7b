#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "pim/scene.hpp"

namespace pim {

/// BEV grid layout. Row 0 is the far edge; the ego anchor sits on the bottom
/// row, heading "up". Pixel (r, c) has its center at ego-frame
/// x = (anchor_row - r) * meters_per_px, y = (anchor_col - c) * meters_per_px.
struct GridSpec {
  int height_px = 96;
  int width_px = 112;
  double meters_per_px = 0.5;
  int anchor_row = 95;
  int anchor_col = 56;
  Vec2 sensor_origin{0.0, 0.0};
  // Metadata: false when the scene carried no road description.
  bool has_road = true;

  static GridSpec desk();
  static GridSpec paper_scale();

  void validate() const;
  int pixels() const { return height_px * width_px; }
  Vec2 pixel_center(int r, int c) const {
    return {(anchor_row - r) * meters_per_px, (anchor_col - c) * meters_per_px};
  }
  // Continuous pixel coordinates (row, col) of an ego-frame point.
  Vec2 to_pixel(Vec2 p) const {
    return {anchor_row - p.x / meters_per_px, anchor_col - p.y / meters_per_px};
  }
};

struct PosEncSpec {
  int d_model = 64;
  void validate() const;
};

using Channel = std::vector<std::uint8_t>;

/// Multi-channel BEV description. Binary channels are row-major H x W with
/// values in {0, 1}. The positional encoding is constant along each row, so
/// it is stored once per row (H x d_model) and expanded by pos_enc_at.
struct RasterStack {
  GridSpec grid;
  int d_model = 0;
  Channel freespace;
  Channel waypoints;
  Channel vehicles;
  Channel occlusion;
  std::vector<double> pos_enc_rows;

  int channels() const { return 4 + d_model; }
  double pos_enc_at(int r, int /*c*/, int ch) const { return pos_enc_rows[static_cast<std::size_t>(r) * d_model + ch]; }

  // Writes the stack as C x H x W doubles in channel order freespace,
  // waypoints, vehicles, occlusion, pe_0..pe_{d-1}.
  void write_chw(std::span<double> dst) const;
};

struct RoadChannels {
  Channel freespace;
  Channel waypoints;
};

RoadChannels rasterize_road(const RoadMap& road, const GridSpec& grid);

Channel rasterize_vehicles(const std::vector<Agent>& agents, const GridSpec& grid);

/// 1 = visible from the sensor origin. A pixel behind an agent box is
/// occluded; a pixel inside a box is visible only within one pixel of the
/// point where the ray enters that box.
Channel raycast_occlusion(const std::vector<Agent>& agents, const GridSpec& grid);

// H x d_model row table of sin/cos features of the longitudinal distance.
std::vector<double> positional_encoding(const GridSpec& grid, const PosEncSpec& spec);

RasterStack build_stack(const SceneState& ego_scene, const GridSpec& grid, const PosEncSpec& spec);

// Binary PGM (P5). Values are written as given.
void write_pgm(const std::filesystem::path& path, int height, int width, std::span<const std::uint8_t> pixels);
// Binary PPM (P6), rgb interleaved.
void write_ppm(const std::filesystem::path& path, int height, int width, std::span<const std::uint8_t> rgb);

// One PGM per channel under `dir`; pos_enc rescaled from [-1, 1] to [0, 255].
void dump_channels(const RasterStack& stack, const std::filesystem::path& dir);

}  // namespace pim
