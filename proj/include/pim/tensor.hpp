#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace pim::nn {

using Shape = std::vector<int>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

/// Graph node: value, lazily allocated gradient, and the closure that pushes
/// this node's gradient into its parents.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::string op;
  std::vector<NodePtr> parents;
  BackwardFn backward;

  std::span<double> ensure_grad();
};

/// Handle to a dense row-major float64 tensor. Copies share the node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  // Empty span until a gradient has been accumulated.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad();
  double item() const;

  Node* node() const { return node_.get(); }
  const NodePtr& ptr() const { return node_; }

 private:
  NodePtr node_;
};

/// Creates an op result. The backward closure is kept only when some parent
/// requires a gradient; values are checked for NaN/Inf.
Tensor make_result(std::string op, Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                   BackwardFn backward);

// ---- primitives ----------------------------------------------------------------

// x: N x C x H x W, weight: O x C x k x k, bias: O (may be undefined).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad);
// Nearest-neighbour 2x upsampling of the two trailing axes.
Tensor upsample2x(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// Elementwise with broadcasting of b when b is a scalar, or when b has shape
// (C) or (1, C, 1, 1) and a is N x C x H x W.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Sum over one axis; the axis is dropped from the shape.
Tensor reduce_sum(const Tensor& a, int axis);
Tensor reduce_mean(const Tensor& a, int axis);
Tensor sum_squares(const Tensor& a);
// Channels [c0, c1) of an N x C x H x W tensor.
Tensor slice_channels(const Tensor& x, int c0, int c1);

/// Reverse pass from a scalar. Gradients accumulate on every node that
/// requires them; afterwards the recorded graph is released so only leaf
/// gradients remain.
void backward(const Tensor& loss);

// ---- optimizer -----------------------------------------------------------------

struct AdamState {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient (a parameter without gradient is treated as zero gradient).
void adam_step(std::span<Tensor> params, AdamState& state);

// ---- checkpoints ---------------------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Flat binary: one JSON header line `{"format", "meta", "params":[{name,
/// shape}]}` followed by little-endian float64 values in header order.
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& params,
                     const nlohmann::json& meta);

struct Checkpoint {
  nlohmann::json meta;
  std::vector<NamedTensor> params;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pim::nn
