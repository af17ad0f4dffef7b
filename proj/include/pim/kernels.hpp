#pragma once

// Data-parallel inner loops. Each kernel comes as an OpenMP version used by
// the library and a plain serial reference kept for tests and benchmarks.
// Parallel versions partition output elements only, so every output is
// summed in a fixed order and results do not depend on the thread count.

#include <cstdint>
#include <span>
#include <vector>

#include "pim/geometry.hpp"

namespace pim {
struct GridSpec;
}

namespace pim::kernels {

// ---- BEV rasterization ----------------------------------------------------

// Visibility rule for one pixel center (see raycast_occlusion).
bool pixel_visible(std::span<const OrientedBox> boxes, Vec2 origin, Vec2 p, double face_depth);

void occlusion_reference(std::span<const OrientedBox> boxes, const GridSpec& grid, std::span<std::uint8_t> out);
void occlusion_parallel(std::span<const OrientedBox> boxes, const GridSpec& grid, std::span<std::uint8_t> out);

void footprint_reference(std::span<const OrientedBox> boxes, const GridSpec& grid, std::span<std::uint8_t> out);
void footprint_parallel(std::span<const OrientedBox> boxes, const GridSpec& grid, std::span<std::uint8_t> out);

// ---- 2-D convolution (NCHW, cross-correlation, zero padding) ---------------

struct ConvShape {
  int n = 1;
  int c_in = 1;
  int h = 1;
  int w = 1;
  int c_out = 1;
  int k = 1;
  int stride = 1;
  int pad = 0;

  int h_out() const { return (h + 2 * pad - k) / stride + 1; }
  int w_out() const { return (w + 2 * pad - k) / stride + 1; }
  std::size_t in_size() const { return static_cast<std::size_t>(n) * c_in * h * w; }
  std::size_t out_size() const { return static_cast<std::size_t>(n) * c_out * h_out() * w_out(); }
  std::size_t weight_size() const { return static_cast<std::size_t>(c_out) * c_in * k * k; }
  std::size_t col_rows() const { return static_cast<std::size_t>(c_in) * k * k; }
  std::size_t col_cols() const { return static_cast<std::size_t>(h_out()) * w_out(); }
};

void conv2d_forward_reference(const ConvShape& s, std::span<const double> input, std::span<const double> weight,
                              std::span<const double> bias, std::span<double> out);

// Accumulates into grad_input / grad_weight / grad_bias (any may be empty).
void conv2d_backward_reference(const ConvShape& s, std::span<const double> input, std::span<const double> weight,
                               std::span<const double> grad_out, std::span<double> grad_input,
                               std::span<double> grad_weight, std::span<double> grad_bias);

// im2col + GEMM. `cols` receives the unfolded input of every sample
// (n * col_rows * col_cols) and is reused by conv2d_backward.
void conv2d_forward(const ConvShape& s, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> out, std::vector<double>& cols);

void conv2d_backward(const ConvShape& s, std::span<const double> cols, std::span<const double> weight,
                     std::span<const double> grad_out, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias);

// ---- Gaussian-kernel MMD ---------------------------------------------------

/// Biased squared MMD between equally sized samples x and y:
///   (1/n^2) [sum k(x_i,x_j) + sum k(y_i,y_j) - 2 sum k(x_i,y_j)]
/// with k(a,b) = exp(-(a-b)^2 / (2 sigma^2)). When non-empty, grad_x and
/// grad_y receive (not accumulate) the partial derivatives.
double mmd_reference(std::span<const double> x, std::span<const double> y, double sigma,
                     std::span<double> grad_x = {}, std::span<double> grad_y = {});
double mmd_parallel(std::span<const double> x, std::span<const double> y, double sigma,
                    std::span<double> grad_x = {}, std::span<double> grad_y = {});

}  // namespace pim::kernels
