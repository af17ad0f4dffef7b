#include "pim/raster.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "pim/kernels.hpp"

namespace pim {

GridSpec GridSpec::desk() { return GridSpec{}; }

GridSpec GridSpec::paper_scale() {
  GridSpec g;
  g.height_px = 352;
  g.width_px = 400;
  g.meters_per_px = 0.2;
  g.anchor_row = 351;
  g.anchor_col = 200;
  return g;
}

void GridSpec::validate() const {
  if (height_px <= 0 || width_px <= 0) throw std::invalid_argument("GridSpec: extents must be > 0");
  if (!(meters_per_px > 0.0)) throw std::invalid_argument("GridSpec: meters_per_px must be > 0");
  if (anchor_row < 0 || anchor_row >= height_px || anchor_col < 0 || anchor_col >= width_px) {
    throw std::invalid_argument("GridSpec: ego anchor must lie inside the grid");
  }
}

void PosEncSpec::validate() const {
  if (d_model <= 0 || d_model % 2 != 0) throw std::invalid_argument("PosEncSpec: d_model must be even and positive");
}

void RasterStack::write_chw(std::span<double> dst) const {
  const std::size_t hw = static_cast<std::size_t>(grid.pixels());
  if (dst.size() != hw * static_cast<std::size_t>(channels())) {
    throw std::invalid_argument("RasterStack::write_chw: destination size mismatch");
  }
  const Channel* binary[4] = {&freespace, &waypoints, &vehicles, &occlusion};
  for (int ch = 0; ch < 4; ++ch) {
    double* d = dst.data() + ch * hw;
    const auto& src = *binary[ch];
    for (std::size_t i = 0; i < hw; ++i) d[i] = src[i];
  }
  for (int ch = 0; ch < d_model; ++ch) {
    double* d = dst.data() + (4 + ch) * hw;
    for (int r = 0; r < grid.height_px; ++r) {
      const double v = pos_enc_rows[static_cast<std::size_t>(r) * d_model + ch];
      std::fill(d + r * grid.width_px, d + (r + 1) * grid.width_px, v);
    }
  }
}

namespace {

struct PixelIndex {
  int r;
  int c;
};

PixelIndex nearest_pixel(const GridSpec& grid, Vec2 p) {
  const Vec2 rc = grid.to_pixel(p);
  return {static_cast<int>(std::lround(rc.x)), static_cast<int>(std::lround(rc.y))};
}

void bresenham(PixelIndex a, PixelIndex b, const GridSpec& grid, Channel& out) {
  int r0 = a.r;
  int c0 = a.c;
  const int dr = std::abs(b.r - a.r);
  const int dc = -std::abs(b.c - a.c);
  const int sr = a.r < b.r ? 1 : -1;
  const int sc = a.c < b.c ? 1 : -1;
  int err = dr + dc;
  while (true) {
    if (r0 >= 0 && r0 < grid.height_px && c0 >= 0 && c0 < grid.width_px) {
      out[static_cast<std::size_t>(r0) * grid.width_px + c0] = 1;
    }
    if (r0 == b.r && c0 == b.c) break;
    const int e2 = 2 * err;
    if (e2 >= dc) {
      err += dc;
      r0 += sr;
    }
    if (e2 <= dr) {
      err += dr;
      c0 += sc;
    }
  }
}

std::vector<OrientedBox> boxes_of(const std::vector<Agent>& agents) {
  std::vector<OrientedBox> out;
  out.reserve(agents.size());
  for (const auto& a : agents) out.push_back(a.box);
  return out;
}

}  // namespace

RoadChannels rasterize_road(const RoadMap& road, const GridSpec& grid) {
  grid.validate();
  RoadChannels out{Channel(grid.pixels(), 0), Channel(grid.pixels(), 0)};
#pragma omp parallel for schedule(static)
  for (int r = 0; r < grid.height_px; ++r) {
    for (int c = 0; c < grid.width_px; ++c) {
      const Vec2 p = grid.pixel_center(r, c);
      for (const auto& poly : road.freespace) {
        if (point_in_polygon(poly, p)) {
          out.freespace[static_cast<std::size_t>(r) * grid.width_px + c] = 1;
          break;
        }
      }
    }
  }
  for (const auto& line : road.waypoint_lines) {
    for (std::size_t i = 0; i + 1 < line.size(); ++i) {
      bresenham(nearest_pixel(grid, line[i]), nearest_pixel(grid, line[i + 1]), grid, out.waypoints);
    }
  }
  return out;
}

Channel rasterize_vehicles(const std::vector<Agent>& agents, const GridSpec& grid) {
  grid.validate();
  Channel out(grid.pixels(), 0);
  const auto boxes = boxes_of(agents);
  kernels::footprint_parallel(boxes, grid, out);
  return out;
}

Channel raycast_occlusion(const std::vector<Agent>& agents, const GridSpec& grid) {
  grid.validate();
  Channel out(grid.pixels(), 1);
  const auto boxes = boxes_of(agents);
  kernels::occlusion_parallel(boxes, grid, out);
  return out;
}

std::vector<double> positional_encoding(const GridSpec& grid, const PosEncSpec& spec) {
  grid.validate();
  spec.validate();
  std::vector<double> rows(static_cast<std::size_t>(grid.height_px) * spec.d_model);
  for (int r = 0; r < grid.height_px; ++r) {
    const double pos = (grid.anchor_row - r) * grid.meters_per_px;
    for (int i = 0; i < spec.d_model / 2; ++i) {
      const double freq = std::pow(10000.0, 2.0 * i / spec.d_model);
      rows[static_cast<std::size_t>(r) * spec.d_model + 2 * i] = std::sin(pos / freq);
      rows[static_cast<std::size_t>(r) * spec.d_model + 2 * i + 1] = std::cos(pos / freq);
    }
  }
  return rows;
}

RasterStack build_stack(const SceneState& ego_scene, const GridSpec& grid, const PosEncSpec& spec) {
  RasterStack s;
  s.grid = grid;
  s.grid.has_road = !ego_scene.road.freespace.empty() || !ego_scene.road.waypoint_lines.empty();
  s.d_model = spec.d_model;
  auto road = rasterize_road(ego_scene.road, grid);
  s.freespace = std::move(road.freespace);
  s.waypoints = std::move(road.waypoints);
  s.vehicles = rasterize_vehicles(ego_scene.agents, grid);
  s.occlusion = raycast_occlusion(ego_scene.agents, grid);
  s.pos_enc_rows = positional_encoding(grid, spec);
  return s;
}

void write_pgm(const std::filesystem::path& path, int height, int width, std::span<const std::uint8_t> pixels) {
  if (pixels.size() != static_cast<std::size_t>(height) * width) {
    throw std::invalid_argument("write_pgm: pixel count mismatch");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void write_ppm(const std::filesystem::path& path, int height, int width, std::span<const std::uint8_t> rgb) {
  if (rgb.size() != static_cast<std::size_t>(height) * width * 3) {
    throw std::invalid_argument("write_ppm: pixel count mismatch");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "P6\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void dump_channels(const RasterStack& stack, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const int h = stack.grid.height_px;
  const int w = stack.grid.width_px;
  auto scaled = [](const Channel& ch) {
    Channel out(ch.size());
    for (std::size_t i = 0; i < ch.size(); ++i) out[i] = ch[i] ? 255 : 0;
    return out;
  };
  write_pgm(dir / "freespace.pgm", h, w, scaled(stack.freespace));
  write_pgm(dir / "waypoints.pgm", h, w, scaled(stack.waypoints));
  write_pgm(dir / "vehicles.pgm", h, w, scaled(stack.vehicles));
  write_pgm(dir / "occlusion.pgm", h, w, scaled(stack.occlusion));
  for (int ch = 0; ch < stack.d_model; ++ch) {
    Channel img(static_cast<std::size_t>(h) * w);
    for (int r = 0; r < h; ++r) {
      const double v = stack.pos_enc_at(r, 0, ch);
      const auto byte = static_cast<std::uint8_t>(std::lround((v + 1.0) * 127.5));
      std::fill(img.begin() + static_cast<std::ptrdiff_t>(r) * w, img.begin() + static_cast<std::ptrdiff_t>(r + 1) * w,
                byte);
    }
    write_pgm(dir / ("pos_enc_" + std::to_string(ch) + ".pgm"), h, w, img);
  }
}

}  // namespace pim
