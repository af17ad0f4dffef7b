// Finite-difference checks of every differentiable primitive and loss term.
// Each case draws 100 random instances away from kinks and clamps.

#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "pim/losses.hpp"
#include "support.hpp"

using namespace pim;
using nn::Tensor;
using Inputs = std::vector<Tensor>;

namespace {

constexpr int kInstances = 100;
constexpr double kTolerance = 1e-4;

// Runs `make` for each instance and returns the worst relative error.
template <class Make>
double worst_error(std::uint64_t seed, Make make) {
  Rng rng(seed);
  double worst = 0.0;
  for (int i = 0; i < kInstances; ++i) {
    auto [f, inputs] = make(rng);
    worst = std::max(worst, testing::gradient_error(f, inputs));
  }
  return worst;
}

using Fn = std::function<Tensor(const Inputs&)>;

// Values kept at least `gap` away from zero.
Tensor away_from_zero(Rng& rng, nn::Shape shape, double gap) {
  Tensor t = testing::random_tensor(rng, std::move(shape));
  for (auto& v : t.mutable_data()) v = v >= 0 ? v + gap : v - gap;
  return t;
}

// Random weighting so every output element contributes differently.
Fn weighted(Rng& rng, const nn::Shape& out_shape, std::function<Tensor(const Inputs&)> op) {
  const Tensor w = testing::random_tensor(rng, out_shape, -1, 1, false);
  return [w, op](const Inputs& in) { return nn::sum(nn::mul(op(in), w)); };
}

void report(const char* name, double err) {
  std::printf("%-22s %d instances, worst relative error %.3e\n", name, kInstances, err);
  CHECK(err < kTolerance);
}

struct MapBatch {
  std::vector<LossTarget> targets;
  Tensor reg;
  Tensor cls_logits;
};

// Pseudo maps from a few boxes on the small grid, with regression
// predictions near the targets so the corner loss finds matches.
MapBatch map_batch(Rng& rng, int n, double noise) {
  const auto g = testing::small_grid();
  MapBatch b;
  b.targets.resize(n);
  std::vector<double> reg, logits;
  for (auto& t : b.targets) {
    std::vector<OrientedBox> ann;
    const int count = uniform_int(rng, 1, 3);
    for (int k = 0; k < count; ++k) {
      ann.push_back({uniform(rng, 0.5, 7.0), uniform(rng, -5.5, 5.5), uniform(rng, 1.6, 2.4), uniform(rng, 3.5, 5.0),
                     uniform(rng, -0.5, 0.5)});
    }
    std::vector<OrientedBox> det;
    for (const auto& a : ann) {
      if (uniform(rng, 0, 1) < 0.8) det.push_back({a.cx + normal(rng, 0, 0.1), a.cy + normal(rng, 0, 0.1), a.w, a.l, a.yaw});
    }
    t.target = encode_targets(det, g, 4).maps;
    t.annotation = encode_targets(ann, g, 4).maps;
    for (int ch = 0; ch < kRegChannels; ++ch) {
      for (int c = 0; c < t.target.cells(); ++c) {
        const double base = t.target.cls[c] > 0.5 ? t.target.reg_at(ch, c) : (ch == kCos ? 1.0 : 0.0);
        reg.push_back(base + uniform(rng, -noise, noise));
      }
    }
    for (int c = 0; c < t.target.cells(); ++c) logits.push_back(uniform(rng, -3, 3));
  }
  const int h = b.targets[0].target.height, w = b.targets[0].target.width;
  b.reg = Tensor::from({n, kRegChannels, h, w}, reg, true);
  b.cls_logits = Tensor::from({n, 1, h, w}, logits, true);
  return b;
}

}  // namespace

TEST_CASE("gradient: conv2d") {
  report("conv2d", worst_error(1, [](Rng& rng) {
    const int n = uniform_int(rng, 1, 2), c = uniform_int(rng, 1, 3), o = uniform_int(rng, 1, 3);
    const int k = uniform_int(rng, 0, 1) ? 3 : 1;
    const int stride = uniform_int(rng, 1, 2);
    const int pad = k == 3 ? uniform_int(rng, 0, 1) : 0;
    const int h = uniform_int(rng, 4, 6), w = uniform_int(rng, 4, 6);
    Inputs in{testing::random_tensor(rng, {n, c, h, w}), testing::random_tensor(rng, {o, c, k, k}),
              testing::random_tensor(rng, {o})};
    const int ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
    return std::pair{weighted(rng, {n, o, ho, wo},
                              [=](const Inputs& x) { return nn::conv2d(x[0], x[1], x[2], stride, pad); }),
                     in};
  }));
}

TEST_CASE("gradient: upsample2x") {
  report("upsample2x", worst_error(2, [](Rng& rng) {
    Inputs in{testing::random_tensor(rng, {2, 2, 3, 4})};
    return std::pair{weighted(rng, {2, 2, 6, 8}, [](const Inputs& x) { return nn::upsample2x(x[0]); }), in};
  }));
}

TEST_CASE("gradient: relu") {
  report("relu", worst_error(3, [](Rng& rng) {
    Inputs in{away_from_zero(rng, {2, 3, 4}, 1e-3)};
    return std::pair{weighted(rng, {2, 3, 4}, [](const Inputs& x) { return nn::relu(x[0]); }), in};
  }));
}

TEST_CASE("gradient: sigmoid") {
  report("sigmoid", worst_error(4, [](Rng& rng) {
    Inputs in{testing::random_tensor(rng, {2, 3, 4}, -4, 4)};
    return std::pair{weighted(rng, {2, 3, 4}, [](const Inputs& x) { return nn::sigmoid(x[0]); }), in};
  }));
}

TEST_CASE("gradient: add, sub, mul with broadcasting") {
  const char* names[] = {"add", "sub", "mul"};
  for (int op = 0; op < 3; ++op) {
    int form = 0;
    report(names[op], worst_error(5 + 100 * op, [&](Rng& rng) {
      const int f = form++ % 3;
      nn::Shape bs = f == 0 ? nn::Shape{2, 3, 2, 2} : f == 1 ? nn::Shape{3} : nn::Shape{1};
      Inputs in{testing::random_tensor(rng, {2, 3, 2, 2}), testing::random_tensor(rng, bs)};
      return std::pair{weighted(rng, {2, 3, 2, 2},
                                [op](const Inputs& x) {
                                  if (op == 0) return nn::add(x[0], x[1]);
                                  if (op == 1) return nn::sub(x[0], x[1]);
                                  return nn::mul(x[0], x[1]);
                                }),
                       in};
    }));
  }
}

TEST_CASE("gradient: scale, sum, mean, sum_squares") {
  const char* names[] = {"scale", "sum", "mean", "sum_squares"};
  for (int op = 0; op < 4; ++op) {
    report(names[op], worst_error(6 + 100 * op, [&](Rng& rng) {
      const double s = uniform(rng, -2, 2);
      Inputs in{testing::random_tensor(rng, {3, 5})};
      // Non-linear outer products so reductions see a non-constant upstream gradient.
      Fn f = [op, s](const Inputs& x) {
        if (op == 0) return nn::sum(nn::mul(nn::scale(x[0], s), x[0]));
        if (op == 1) return nn::mul(nn::sum(x[0]), nn::sum(x[0]));
        if (op == 2) return nn::mul(nn::mean(x[0]), nn::sum(x[0]));
        return nn::sum_squares(x[0]);
      };
      return std::pair{f, in};
    }));
  }
}

TEST_CASE("gradient: reduce_sum, reduce_mean") {
  for (bool mean : {false, true}) {
    int which = 0;
    report(mean ? "reduce_mean" : "reduce_sum", worst_error(7 + mean, [&](Rng& rng) {
      const int axis = which++ % 3;
      Inputs in{testing::random_tensor(rng, {2, 3, 4})};
      nn::Shape out{2, 3, 4};
      out.erase(out.begin() + axis);
      return std::pair{weighted(rng, out,
                                [=](const Inputs& x) {
                                  return mean ? nn::reduce_mean(x[0], axis) : nn::reduce_sum(x[0], axis);
                                }),
                       in};
    }));
  }
}

TEST_CASE("gradient: slice_channels") {
  report("slice_channels", worst_error(8, [](Rng& rng) {
    const int c0 = uniform_int(rng, 0, 3);
    const int c1 = uniform_int(rng, c0 + 1, 5);
    Inputs in{testing::random_tensor(rng, {2, 5, 2, 3})};
    return std::pair{weighted(rng, {2, c1 - c0, 2, 3}, [=](const Inputs& x) { return nn::slice_channels(x[0], c0, c1); }),
                     in};
  }));
}

TEST_CASE("gradient: classification BCE") {
  report("bce", worst_error(9, [](Rng& rng) {
    auto b = std::make_shared<MapBatch>(map_batch(rng, 2, 0.3));
    Inputs in{b->cls_logits};
    Fn f = [b](const Inputs& x) {
      return bce(nn::sigmoid(x[0]), {&b->targets[0].target, &b->targets[1].target});
    };
    return std::pair{f, in};
  }));
}

TEST_CASE("gradient: masked smooth-L1") {
  report("smooth_l1_masked", worst_error(10, [](Rng& rng) {
    // Offsets straddle the transition at 1 without landing on it.
    auto b = std::make_shared<MapBatch>(map_batch(rng, 2, 2.0));
    Inputs in{b->reg};
    Fn f = [b](const Inputs& x) { return smooth_l1_masked(x[0], {&b->targets[0].target, &b->targets[1].target}); };
    return std::pair{f, in};
  }));
}

TEST_CASE("gradient: corner loss") {
  int matched = 0;
  report("corner_loss", worst_error(11, [&](Rng& rng) {
    auto b = std::make_shared<MapBatch>(map_batch(rng, 2, 0.15));
    const auto g = testing::small_grid();
    Inputs in{b->reg};
    const Tensor cls = nn::sigmoid(b->cls_logits);
    matched += corner_loss(b->reg, cls, {&b->targets[0].target, &b->targets[1].target}, g, 4, 0.5, 0.5).matches;
    Fn f = [b, g, cls](const Inputs& x) {
      return corner_loss(x[0], cls, {&b->targets[0].target, &b->targets[1].target}, g, 4, 0.5, 0.5).loss;
    };
    return std::pair{f, in};
  }));
  CHECK(matched > kInstances);
}

TEST_CASE("gradient: MMD box and error terms") {
  for (bool err : {false, true}) {
    report(err ? "mmd_err" : "mmd_box", worst_error(12 + err, [err](Rng& rng) {
      auto b = std::make_shared<MapBatch>(map_batch(rng, 2, 0.5));
      Inputs in{b->reg};
      Fn f = [b, err](const Inputs& x) {
        const auto t = mmd_terms(x[0], {&b->targets[0], &b->targets[1]}, 1.0, false);
        return err ? t.err : t.box;
      };
      return std::pair{f, in};
    }));
  }
}

TEST_CASE("gradient: weight decay") {
  report("weight_reg", worst_error(14, [](Rng& rng) {
    Inputs in{testing::random_tensor(rng, {3, 2, 3, 3}), testing::random_tensor(rng, {4, 3, 1, 1})};
    Fn f = [](const Inputs& x) { return nn::scale(nn::add(nn::sum_squares(x[0]), nn::sum_squares(x[1])), 0.001); };
    return std::pair{f, in};
  }));
}

TEST_CASE("gradient: total loss") {
  report("total_loss", worst_error(15, [](Rng& rng) {
    auto b = std::make_shared<MapBatch>(map_batch(rng, 2, 0.2));
    const auto g = testing::small_grid();
    Inputs in{b->reg, b->cls_logits, testing::random_tensor(rng, {2, 2, 3, 3})};
    Fn f = [b, g](const Inputs& x) {
      HeadTensors out{nn::sigmoid(x[1]), x[0]};
      return total_loss(out, {&b->targets[0], &b->targets[1]}, {x[2]}, LossWeights{}, g, 4, 0.5).total;
    };
    return std::pair{f, in};
  }));
}
