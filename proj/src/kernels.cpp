#include "pim/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "pim/raster.hpp"

namespace pim::kernels {

bool pixel_visible(std::span<const OrientedBox> boxes, Vec2 origin, Vec2 p, double face_depth) {
  const double len = std::hypot(p.x - origin.x, p.y - origin.y);
  for (const auto& b : boxes) {
    const auto hit = clip_segment_to_box(b, origin, p);
    if (!hit) continue;
    if (point_in_box_interior(b, p)) {
      // Inside this box: only the near-face layer is seen.
      if ((1.0 - (*hit)[0]) * len > face_depth) return false;
    } else {
      return false;
    }
  }
  return true;
}

namespace {

void occlusion_row(std::span<const OrientedBox> boxes, const GridSpec& grid, int r, std::uint8_t* row) {
  for (int c = 0; c < grid.width_px; ++c) {
    row[c] = pixel_visible(boxes, grid.sensor_origin, grid.pixel_center(r, c), grid.meters_per_px) ? 1 : 0;
  }
}

void footprint_row(std::span<const OrientedBox> boxes, const GridSpec& grid, int r, std::uint8_t* row) {
  for (int c = 0; c < grid.width_px; ++c) {
    const Vec2 p = grid.pixel_center(r, c);
    std::uint8_t v = 0;
    for (const auto& b : boxes) {
      if (point_in_box(b, p)) {
        v = 1;
        break;
      }
    }
    row[c] = v;
  }
}

void check_grid_out(const GridSpec& grid, std::span<std::uint8_t> out) {
  if (out.size() != static_cast<std::size_t>(grid.pixels())) {
    throw std::invalid_argument("raster kernel: output size does not match grid");
  }
}

}  // namespace

void occlusion_reference(std::span<const OrientedBox> boxes, const GridSpec& grid, std::span<std::uint8_t> out) {
  check_grid_out(grid, out);
  for (int r = 0; r < grid.height_px; ++r) occlusion_row(boxes, grid, r, out.data() + r * grid.width_px);
}

void occlusion_parallel(std::span<const OrientedBox> boxes, const GridSpec& grid, std::span<std::uint8_t> out) {
  check_grid_out(grid, out);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < grid.height_px; ++r) occlusion_row(boxes, grid, r, out.data() + r * grid.width_px);
}

void footprint_reference(std::span<const OrientedBox> boxes, const GridSpec& grid, std::span<std::uint8_t> out) {
  check_grid_out(grid, out);
  for (int r = 0; r < grid.height_px; ++r) footprint_row(boxes, grid, r, out.data() + r * grid.width_px);
}

void footprint_parallel(std::span<const OrientedBox> boxes, const GridSpec& grid, std::span<std::uint8_t> out) {
  check_grid_out(grid, out);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < grid.height_px; ++r) footprint_row(boxes, grid, r, out.data() + r * grid.width_px);
}

// ---- convolution ------------------------------------------------------------

namespace {

void check_conv(const ConvShape& s, std::size_t in, std::size_t wt, std::size_t bias) {
  if (s.stride < 1 || s.k < 1 || s.pad < 0) throw std::invalid_argument("conv2d: invalid kernel/stride/pad");
  if (s.h + 2 * s.pad < s.k || s.w + 2 * s.pad < s.k) throw std::invalid_argument("conv2d: kernel larger than input");
  if (in != s.in_size()) throw std::invalid_argument("conv2d: input size does not match NCHW shape");
  if (wt != s.weight_size()) throw std::invalid_argument("conv2d: weight size does not match (c_out, c_in, k, k)");
  if (bias != 0 && bias != static_cast<std::size_t>(s.c_out)) {
    throw std::invalid_argument("conv2d: bias size does not match c_out");
  }
}

// Fixed-order dot product with eight independent accumulators.
double dot8(const double* a, const double* b, std::size_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int u = 0; u < 8; ++u) acc[u] += a[i + u] * b[i + u];
  }
  double tail = 0.0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

void im2col(const ConvShape& s, const double* img, double* col) {
  const int ho = s.h_out();
  const int wo = s.w_out();
  for (int c = 0; c < s.c_in; ++c) {
    for (int ki = 0; ki < s.k; ++ki) {
      for (int kj = 0; kj < s.k; ++kj) {
        double* dst = col + (static_cast<std::size_t>(c) * s.k * s.k + ki * s.k + kj) * ho * wo;
        const double* src = img + static_cast<std::size_t>(c) * s.h * s.w;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * s.stride - s.pad + ki;
          double* d = dst + oy * wo;
          if (iy < 0 || iy >= s.h) {
            std::fill(d, d + wo, 0.0);
            continue;
          }
          const double* srow = src + iy * s.w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * s.stride - s.pad + kj;
            d[ox] = (ix >= 0 && ix < s.w) ? srow[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_channel(const ConvShape& s, const double* col, double* img, int c) {
  const int ho = s.h_out();
  const int wo = s.w_out();
  double* dst = img + static_cast<std::size_t>(c) * s.h * s.w;
  for (int ki = 0; ki < s.k; ++ki) {
    for (int kj = 0; kj < s.k; ++kj) {
      const double* src = col + (static_cast<std::size_t>(c) * s.k * s.k + ki * s.k + kj) * ho * wo;
      for (int oy = 0; oy < ho; ++oy) {
        const int iy = oy * s.stride - s.pad + ki;
        if (iy < 0 || iy >= s.h) continue;
        double* drow = dst + iy * s.w;
        const double* srow = src + oy * wo;
        for (int ox = 0; ox < wo; ++ox) {
          const int ix = ox * s.stride - s.pad + kj;
          if (ix >= 0 && ix < s.w) drow[ix] += srow[ox];
        }
      }
    }
  }
}

}  // namespace

void conv2d_forward_reference(const ConvShape& s, std::span<const double> input, std::span<const double> weight,
                              std::span<const double> bias, std::span<double> out) {
  check_conv(s, input.size(), weight.size(), bias.size());
  const int ho = s.h_out();
  const int wo = s.w_out();
  for (int n = 0; n < s.n; ++n) {
    for (int co = 0; co < s.c_out; ++co) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          double acc = bias.empty() ? 0.0 : bias[co];
          for (int ci = 0; ci < s.c_in; ++ci) {
            for (int ki = 0; ki < s.k; ++ki) {
              for (int kj = 0; kj < s.k; ++kj) {
                const int iy = oy * s.stride - s.pad + ki;
                const int ix = ox * s.stride - s.pad + kj;
                if (iy < 0 || iy >= s.h || ix < 0 || ix >= s.w) continue;
                acc += weight[((co * s.c_in + ci) * s.k + ki) * s.k + kj] *
                       input[((static_cast<std::size_t>(n) * s.c_in + ci) * s.h + iy) * s.w + ix];
              }
            }
          }
          out[((static_cast<std::size_t>(n) * s.c_out + co) * ho + oy) * wo + ox] = acc;
        }
      }
    }
  }
}

void conv2d_backward_reference(const ConvShape& s, std::span<const double> input, std::span<const double> weight,
                               std::span<const double> grad_out, std::span<double> grad_input,
                               std::span<double> grad_weight, std::span<double> grad_bias) {
  check_conv(s, input.size(), weight.size(), 0);
  const int ho = s.h_out();
  const int wo = s.w_out();
  for (int n = 0; n < s.n; ++n) {
    for (int co = 0; co < s.c_out; ++co) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          const double g = grad_out[((static_cast<std::size_t>(n) * s.c_out + co) * ho + oy) * wo + ox];
          if (!grad_bias.empty()) grad_bias[co] += g;
          for (int ci = 0; ci < s.c_in; ++ci) {
            for (int ki = 0; ki < s.k; ++ki) {
              for (int kj = 0; kj < s.k; ++kj) {
                const int iy = oy * s.stride - s.pad + ki;
                const int ix = ox * s.stride - s.pad + kj;
                if (iy < 0 || iy >= s.h || ix < 0 || ix >= s.w) continue;
                const std::size_t wi = ((co * s.c_in + ci) * s.k + ki) * s.k + kj;
                const std::size_t ii = ((static_cast<std::size_t>(n) * s.c_in + ci) * s.h + iy) * s.w + ix;
                if (!grad_weight.empty()) grad_weight[wi] += g * input[ii];
                if (!grad_input.empty()) grad_input[ii] += g * weight[wi];
              }
            }
          }
        }
      }
    }
  }
}

void conv2d_forward(const ConvShape& s, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> out, std::vector<double>& cols) {
  check_conv(s, input.size(), weight.size(), bias.size());
  if (out.size() != s.out_size()) throw std::invalid_argument("conv2d: output size mismatch");
  const std::size_t rows = s.col_rows();
  const std::size_t ncol = s.col_cols();
  cols.resize(static_cast<std::size_t>(s.n) * rows * ncol);
  for (int n = 0; n < s.n; ++n) {
    const double* img = input.data() + static_cast<std::size_t>(n) * s.c_in * s.h * s.w;
    double* col = cols.data() + static_cast<std::size_t>(n) * rows * ncol;
    im2col(s, img, col);
    double* o = out.data() + static_cast<std::size_t>(n) * s.c_out * ncol;
#pragma omp parallel for schedule(static)
    for (int co = 0; co < s.c_out; ++co) {
      double* orow = o + static_cast<std::size_t>(co) * ncol;
      const double b = bias.empty() ? 0.0 : bias[co];
      std::fill(orow, orow + ncol, b);
      const double* wrow = weight.data() + static_cast<std::size_t>(co) * rows;
      for (std::size_t q = 0; q < rows; ++q) {
        const double wv = wrow[q];
        if (wv == 0.0) continue;
        const double* crow = col + q * ncol;
        for (std::size_t p = 0; p < ncol; ++p) orow[p] += wv * crow[p];
      }
    }
  }
}

void conv2d_backward(const ConvShape& s, std::span<const double> cols, std::span<const double> weight,
                     std::span<const double> grad_out, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias) {
  const std::size_t rows = s.col_rows();
  const std::size_t ncol = s.col_cols();
  if (cols.size() != static_cast<std::size_t>(s.n) * rows * ncol) {
    throw std::invalid_argument("conv2d_backward: column cache does not match shape");
  }
  std::vector<double> gcol(grad_input.empty() ? 0 : rows * ncol);
  for (int n = 0; n < s.n; ++n) {
    const double* col = cols.data() + static_cast<std::size_t>(n) * rows * ncol;
    const double* go = grad_out.data() + static_cast<std::size_t>(n) * s.c_out * ncol;
    if (!grad_weight.empty() || !grad_bias.empty()) {
#pragma omp parallel for schedule(static)
      for (int co = 0; co < s.c_out; ++co) {
        const double* grow = go + static_cast<std::size_t>(co) * ncol;
        if (!grad_bias.empty()) {
          double acc = 0.0;
          for (std::size_t p = 0; p < ncol; ++p) acc += grow[p];
          grad_bias[co] += acc;
        }
        if (!grad_weight.empty()) {
          double* gw = grad_weight.data() + static_cast<std::size_t>(co) * rows;
          for (std::size_t q = 0; q < rows; ++q) gw[q] += dot8(grow, col + q * ncol, ncol);
        }
      }
    }
    if (!grad_input.empty()) {
#pragma omp parallel for schedule(static)
      for (std::size_t q = 0; q < rows; ++q) {
        double* gc = gcol.data() + q * ncol;
        std::fill(gc, gc + ncol, 0.0);
        for (int co = 0; co < s.c_out; ++co) {
          const double wv = weight[static_cast<std::size_t>(co) * rows + q];
          if (wv == 0.0) continue;
          const double* grow = go + static_cast<std::size_t>(co) * ncol;
          for (std::size_t p = 0; p < ncol; ++p) gc[p] += wv * grow[p];
        }
      }
      double* gi = grad_input.data() + static_cast<std::size_t>(n) * s.c_in * s.h * s.w;
#pragma omp parallel for schedule(static)
      for (int c = 0; c < s.c_in; ++c) col2im_channel(s, gcol.data(), gi, c);
    }
  }
}

// ---- MMD ----------------------------------------------------------------------

namespace {

struct MmdRow {
  double xx = 0.0;
  double yy = 0.0;
  double xy = 0.0;
};

// Row i of the three kernel sums plus the derivative contributions of x_i
// and y_i. Each row is independent of the others.
MmdRow mmd_row(std::span<const double> x, std::span<const double> y, double inv_s2, std::size_t i, double* gx,
               double* gy) {
  MmdRow r;
  double dxi = 0.0;
  double dyi = 0.0;
  const std::size_t n = x.size();
  for (std::size_t j = 0; j < n; ++j) {
    const double a = x[i] - x[j];
    const double kxx = std::exp(-0.5 * a * a * inv_s2);
    r.xx += kxx;
    const double b = y[i] - y[j];
    const double kyy = std::exp(-0.5 * b * b * inv_s2);
    r.yy += kyy;
    const double c = x[i] - y[j];
    const double kxy = std::exp(-0.5 * c * c * inv_s2);
    r.xy += kxy;
    // d/dx_i: 2 * sum_j dk(x_i,x_j) - 2 * sum_j dk(x_i,y_j); dk(a) = -a/s^2 k.
    dxi += -2.0 * a * inv_s2 * kxx + 2.0 * c * inv_s2 * kxy;
    const double e = y[i] - x[j];
    const double kyx = std::exp(-0.5 * e * e * inv_s2);
    dyi += -2.0 * b * inv_s2 * kyy + 2.0 * e * inv_s2 * kyx;
  }
  if (gx != nullptr) *gx = dxi;
  if (gy != nullptr) *gy = dyi;
  return r;
}

double mmd_impl(std::span<const double> x, std::span<const double> y, double sigma, std::span<double> grad_x,
                std::span<double> grad_y, bool parallel) {
  if (x.size() != y.size()) throw std::invalid_argument("mmd: samples must have equal size");
  if (!(sigma > 0.0)) throw std::invalid_argument("mmd: sigma must be > 0");
  const std::size_t n = x.size();
  if (n == 0) {
    return 0.0;
  }
  if ((!grad_x.empty() && grad_x.size() != n) || (!grad_y.empty() && grad_y.size() != n)) {
    throw std::invalid_argument("mmd: gradient buffer size mismatch");
  }
  const double inv_s2 = 1.0 / (sigma * sigma);
  std::vector<MmdRow> rows(n);
  std::vector<double> gx(n);
  std::vector<double> gy(n);
  if (parallel) {
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) rows[i] = mmd_row(x, y, inv_s2, i, &gx[i], &gy[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) rows[i] = mmd_row(x, y, inv_s2, i, &gx[i], &gy[i]);
  }
  double sxx = 0.0;
  double syy = 0.0;
  double sxy = 0.0;
  for (const auto& r : rows) {
    sxx += r.xx;
    syy += r.yy;
    sxy += r.xy;
  }
  const double inv_n2 = 1.0 / (static_cast<double>(n) * static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    if (!grad_x.empty()) grad_x[i] = gx[i] * inv_n2;
    if (!grad_y.empty()) grad_y[i] = gy[i] * inv_n2;
  }
  return (sxx + syy - 2.0 * sxy) * inv_n2;
}

}  // namespace

double mmd_reference(std::span<const double> x, std::span<const double> y, double sigma, std::span<double> grad_x,
                     std::span<double> grad_y) {
  return mmd_impl(x, y, sigma, grad_x, grad_y, false);
}

double mmd_parallel(std::span<const double> x, std::span<const double> y, double sigma, std::span<double> grad_x,
                    std::span<double> grad_y) {
  return mmd_impl(x, y, sigma, grad_x, grad_y, true);
}

}  // namespace pim::kernels
