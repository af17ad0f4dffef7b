#include "pim/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_set>

#include "pim/kernels.hpp"

namespace pim::nn {

using nlohmann::json;

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("shape extents must be positive, got " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

std::span<double> Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value.assign(nn::numel(shape), v);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  node->op = "leaf";
  return Tensor(node);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (values.size() != nn::numel(shape)) {
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->op = "leaf";
  return Tensor(node);
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

Tensor make_result(std::string op, Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                   BackwardFn backward) {
  if (value.size() != numel(shape)) throw ShapeError(op + ": value count does not match shape");
  for (double v : value) {
    if (!std::isfinite(v)) throw NonFiniteError(op + ": produced a non-finite value");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = std::move(op);
  bool any = false;
  for (const auto& p : parents) any = any || (p.defined() && p.requires_grad());
  if (any) {
    node->requires_grad = true;
    for (auto& p : parents) node->parents.push_back(p.ptr());
    node->backward = std::move(backward);
  }
  return Tensor(node);
}

namespace {

bool wants(const NodePtr& p) { return p && p->requires_grad; }

void require_4d(const Tensor& t, const char* op) {
  if (t.shape().size() != 4) throw ShapeError(std::string(op) + ": expected N x C x H x W, got " + shape_str(t.shape()));
}

enum class Bcast { same, scalar, channel };

Bcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::same;
  if (b.numel() == 1) return Bcast::scalar;
  if (a.shape().size() == 4) {
    const int c = a.dim(1);
    const bool flat = b.shape().size() == 1 && b.dim(0) == c;
    const bool nchw = b.shape().size() == 4 && b.dim(0) == 1 && b.dim(1) == c && b.dim(2) == 1 && b.dim(3) == 1;
    if (flat || nchw) return Bcast::channel;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
}

// Index of b's element paired with a[i].
struct BIndex {
  Bcast kind;
  std::size_t hw = 1;
  std::size_t c = 1;
  std::size_t operator()(std::size_t i) const {
    switch (kind) {
      case Bcast::same:
        return i;
      case Bcast::scalar:
        return 0;
      case Bcast::channel:
        return (i / hw) % c;
    }
    return 0;
  }
};

BIndex make_index(const Tensor& a, Bcast kind) {
  BIndex ix{kind};
  if (kind == Bcast::channel) {
    ix.c = static_cast<std::size_t>(a.dim(1));
    ix.hw = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  }
  return ix;
}

template <class Fwd, class Da, class Db>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd f, Da da, Db db) {
  const Bcast kind = broadcast_kind(a, b, op);
  const BIndex bi = make_index(a, kind);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[bi(i)]);
  return make_result(op, a.shape(), std::move(out), {a, b}, [bi, da, db](Node& self) {
    const NodePtr& pa = self.parents[0];
    const NodePtr& pb = self.parents[1];
    const auto& g = self.grad;
    if (wants(pa)) {
      auto ga = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(pa->value[i], pb->value[bi(i)]);
    }
    if (wants(pb)) {
      auto gb = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[bi(i)] += g[i] * db(pa->value[i], pb->value[bi(i)]);
    }
  });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
  require_4d(x, "conv2d");
  require_4d(weight, "conv2d weight");
  if (weight.dim(2) != weight.dim(3)) throw ShapeError("conv2d: only square kernels are supported");
  if (weight.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  kernels::ConvShape s{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), stride, pad};
  if (s.h + 2 * pad < s.k || s.w + 2 * pad < s.k) throw ShapeError("conv2d: kernel larger than padded input");
  if (bias.defined() && bias.numel() != static_cast<std::size_t>(s.c_out)) {
    throw ShapeError("conv2d: bias has " + std::to_string(bias.numel()) + " entries, expected " +
                     std::to_string(s.c_out));
  }
  std::vector<double> out(s.out_size());
  auto cols = std::make_shared<std::vector<double>>();
  const std::span<const double> b = bias.defined() ? bias.data() : std::span<const double>{};
  kernels::conv2d_forward(s, x.data(), weight.data(), b, out, *cols);
  std::vector<Tensor> parents = {x, weight};
  if (bias.defined()) parents.push_back(bias);
  const bool has_bias = bias.defined();
  return make_result("conv2d", {s.n, s.c_out, s.h_out(), s.w_out()}, std::move(out), parents,
                     [s, cols, has_bias](Node& self) {
                       const NodePtr& px = self.parents[0];
                       const NodePtr& pw = self.parents[1];
                       std::span<double> gx = wants(px) ? px->ensure_grad() : std::span<double>{};
                       std::span<double> gw = wants(pw) ? pw->ensure_grad() : std::span<double>{};
                       std::span<double> gb;
                       if (has_bias && wants(self.parents[2])) gb = self.parents[2]->ensure_grad();
                       kernels::conv2d_backward(s, *cols, pw->value, self.grad, gx, gw, gb);
                     });
}

Tensor upsample2x(const Tensor& x) {
  require_4d(x, "upsample2x");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int h2 = 2 * h, w2 = 2 * w;
  std::vector<double> out(static_cast<std::size_t>(n) * c * h2 * w2);
  const auto xv = x.data();
  for (int nc = 0; nc < n * c; ++nc) {
    for (int r = 0; r < h2; ++r) {
      for (int q = 0; q < w2; ++q) {
        out[(static_cast<std::size_t>(nc) * h2 + r) * w2 + q] = xv[(static_cast<std::size_t>(nc) * h + r / 2) * w + q / 2];
      }
    }
  }
  return make_result("upsample2x", {n, c, h2, w2}, std::move(out), {x}, [n, c, h, w](Node& self) {
    auto gx = self.parents[0]->ensure_grad();
    const int h2 = 2 * h, w2 = 2 * w;
    for (int nc = 0; nc < n * c; ++nc) {
      for (int r = 0; r < h2; ++r) {
        for (int q = 0; q < w2; ++q) {
          gx[(static_cast<std::size_t>(nc) * h + r / 2) * w + q / 2] +=
              self.grad[(static_cast<std::size_t>(nc) * h2 + r) * w2 + q];
        }
      }
    }
  });
}

Tensor relu(const Tensor& x) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return make_result("relu", x.shape(), std::move(out), {x}, [](Node& self) {
    const NodePtr& p = self.parents[0];
    auto g = p->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p->value[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return make_result("sigmoid", x.shape(), std::move(out), {x}, [](Node& self) {
    auto g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = self.value[i];
      g[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double s) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = s * av[i];
  return make_result("scale", a.shape(), std::move(out), {a}, [s](Node& self) {
    auto g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return make_result("sum", {1}, {acc}, {a}, [](Node& self) {
    auto g = self.parents[0]->ensure_grad();
    const double up = self.grad[0];
    for (auto& v : g) v += up;
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor reduce_sum(const Tensor& a, int axis) {
  const auto& sh = a.shape();
  if (axis < 0 || axis >= static_cast<int>(sh.size())) throw ShapeError("reduce_sum: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= sh[i];
  for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
  const std::size_t len = sh[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < sh.size(); ++i) {
    if (static_cast<int>(i) != axis) out_shape.push_back(sh[i]);
  }
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(outer * inner, 0.0);
  const auto av = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < len; ++k) {
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * len + k) * inner + i];
    }
  }
  return make_result("reduce_sum", out_shape, std::move(out), {a}, [outer, inner, len](Node& self) {
    auto g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t k = 0; k < len; ++k) {
        for (std::size_t i = 0; i < inner; ++i) g[(o * len + k) * inner + i] += self.grad[o * inner + i];
      }
    }
  });
}

Tensor reduce_mean(const Tensor& a, int axis) {
  if (axis < 0 || axis >= static_cast<int>(a.shape().size())) throw ShapeError("reduce_mean: axis out of range");
  return scale(reduce_sum(a, axis), 1.0 / a.dim(static_cast<std::size_t>(axis)));
}

Tensor sum_squares(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v * v;
  return make_result("sum_squares", {1}, {acc}, {a}, [](Node& self) {
    const NodePtr& p = self.parents[0];
    auto g = p->ensure_grad();
    const double up = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * p->value[i] * up;
  });
}

Tensor slice_channels(const Tensor& x, int c0, int c1) {
  require_4d(x, "slice_channels");
  const int n = x.dim(0), c = x.dim(1);
  if (c0 < 0 || c1 > c || c0 >= c1) throw ShapeError("slice_channels: bad channel range");
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const int cs = c1 - c0;
  std::vector<double> out(static_cast<std::size_t>(n) * cs * hw);
  const auto xv = x.data();
  for (int i = 0; i < n; ++i) {
    std::copy_n(xv.data() + (static_cast<std::size_t>(i) * c + c0) * hw, cs * hw,
                out.data() + static_cast<std::size_t>(i) * cs * hw);
  }
  return make_result("slice_channels", {n, cs, x.dim(2), x.dim(3)}, std::move(out), {x},
                     [n, c, c0, cs, hw](Node& self) {
                       auto g = self.parents[0]->ensure_grad();
                       for (int i = 0; i < n; ++i) {
                         const double* src = self.grad.data() + static_cast<std::size_t>(i) * cs * hw;
                         double* dst = g.data() + (static_cast<std::size_t>(i) * c + c0) * hw;
                         for (std::size_t k = 0; k < cs * hw; ++k) dst[k] += src[k];
                       }
                     });
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  Node* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack = {{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (Node* n : order) {
    if (!n->parents.empty()) {
      n->parents.clear();
      n->backward = nullptr;
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

void adam_step(std::span<Tensor> params, AdamState& st) {
  if (st.m.size() != params.size()) {
    st.m.assign(params.size(), {});
    st.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      st.m[i].assign(params[i].numel(), 0.0);
      st.v[i].assign(params[i].numel(), 0.0);
    }
  }
  st.t += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_data();
    const auto g = params[i].grad();
    auto& m = st.m[i];
    auto& v = st.v[i];
    if (m.size() != w.size()) throw ShapeError("adam_step: moment shape does not match parameter");
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g.empty() ? 0.0 : g[k];
      m[k] = st.beta1 * m[k] + (1.0 - st.beta1) * gk;
      v[k] = st.beta2 * v[k] + (1.0 - st.beta2) * gk * gk;
      const double mh = m[k] / bc1;
      const double vh = v[k] / bc2;
      w[k] -= st.lr * mh / (std::sqrt(vh) + st.eps);
    }
  }
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& params, const json& meta) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  json header = {{"format", "pim-checkpoint-v1"}, {"meta", meta}, {"params", json::array()}};
  for (const auto& p : params) header["params"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path.string() + "'");
  out << header.dump() << '\n';
  for (const auto& p : params) {
    const auto d = p.tensor.data();
    out.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failed for checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("checkpoint '" + path.string() + "' is empty");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint header is not valid JSON: " + std::string(e.what()));
  }
  if (header.value("format", "") != "pim-checkpoint-v1") {
    throw std::runtime_error("checkpoint '" + path.string() + "' has an unknown format");
  }
  Checkpoint ck;
  ck.meta = header.value("meta", json::object());
  for (const auto& p : header.at("params")) {
    Shape shape = p.at("shape").get<Shape>();
    std::vector<double> values(numel(shape));
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint '" + path.string() + "' is truncated");
    ck.params.push_back({p.at("name").get<std::string>(), Tensor::from(std::move(shape), std::move(values), true)});
  }
  in.peek();
  if (!in.eof()) throw std::runtime_error("checkpoint '" + path.string() + "' has trailing bytes");
  return ck;
}

}  // namespace pim::nn
