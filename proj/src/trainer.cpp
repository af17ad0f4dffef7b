#include "pim/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

#include "pim/rng.hpp"

namespace pim {

using nlohmann::json;

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("TrainConfig.epochs: must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig.batch_size: must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig.learning_rate: must be > 0");
  for (double f : {train_fraction, val_fraction, test_fraction}) {
    if (f < 0.0 || f > 1.0) throw std::invalid_argument("TrainConfig: split fractions must lie in [0, 1]");
  }
  if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
    throw std::invalid_argument("TrainConfig: split fractions must sum to 1");
  }
  if (validate_every < 0 || checkpoint_every < 0 || max_steps < 0) {
    throw std::invalid_argument("TrainConfig: cadences must be >= 0");
  }
  loss.validate();
}

json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"seed", c.seed},
          {"loss", to_json(c.loss)},
          {"train_fraction", c.train_fraction},
          {"val_fraction", c.val_fraction},
          {"test_fraction", c.test_fraction},
          {"validate_every", c.validate_every},
          {"checkpoint_every", c.checkpoint_every},
          {"max_steps", c.max_steps},
          {"eval_score_floor", c.eval_score_floor},
          {"zero_heads", c.zero_heads}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  if (j.contains("loss")) c.loss = loss_weights_from_json(j.at("loss"));
  c.train_fraction = j.value("train_fraction", c.train_fraction);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.test_fraction = j.value("test_fraction", c.test_fraction);
  c.validate_every = j.value("validate_every", c.validate_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.eval_score_floor = j.value("eval_score_floor", c.eval_score_floor);
  c.zero_heads = j.value("zero_heads", c.zero_heads);
  c.validate();
  return c;
}

std::vector<TrainRecord> prepare_dataset(const std::vector<SceneState>& scenes, const TargetProxySpec& proxy,
                                         const GridSpec& grid, const PosEncSpec& posenc, int downsample) {
  if (scenes.empty()) throw std::invalid_argument("prepare_dataset: empty corpus");
  proxy.validate();
  std::vector<TrainRecord> out(scenes.size());
  const long n = static_cast<long>(scenes.size());
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < n; ++i) {
    const SceneState ego = to_ego_frame(scenes[i]);
    TrainRecord& r = out[i];
    r.scene_id = ego.id;
    r.stack = build_stack(ego, grid, posenc);
    r.proxy_dets = target_proxy_perceive(ego, grid, proxy);
    r.annotation = visible_annotation(ego, grid);
    std::vector<OrientedBox> boxes;
    for (const auto& d : r.proxy_dets) boxes.push_back(d.box);
    r.target.target = encode_targets(boxes, grid, downsample).maps;
    r.target.annotation = encode_targets(r.annotation, grid, downsample).maps;
  }
  return out;
}

void check_disjoint(const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b, const char* what) {
  std::set<std::int64_t> sa(a.begin(), a.end());
  for (auto id : b) {
    if (sa.count(id)) throw std::runtime_error(std::string(what) + ": scene id " + std::to_string(id) + " in both splits");
  }
}

Splits split_indices(const std::vector<std::int64_t>& scene_ids, const TrainConfig& cfg) {
  cfg.validate();
  std::vector<std::size_t> idx(scene_ids.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(cfg.seed, "split"));
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t n = idx.size();
  const auto n_train = static_cast<std::size_t>(std::floor(cfg.train_fraction * n + 1e-9));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::floor(cfg.val_fraction * n + 1e-9)));
  Splits s;
  s.train.assign(idx.begin(), idx.begin() + n_train);
  s.val.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
  s.test.assign(idx.begin() + n_train + n_val, idx.end());
  auto ids = [&](const std::vector<std::size_t>& v) {
    std::vector<std::int64_t> out;
    for (auto i : v) out.push_back(scene_ids[i]);
    return out;
  };
  check_disjoint(ids(s.train), ids(s.val), "train/val");
  check_disjoint(ids(s.train), ids(s.test), "train/test");
  check_disjoint(ids(s.val), ids(s.test), "val/test");
  return s;
}

Imitator clone(const Imitator& m) {
  std::vector<nn::NamedTensor> params;
  for (const auto& p : m.params()) {
    const auto d = p.tensor.data();
    params.push_back({p.name, nn::Tensor::from(p.tensor.shape(), std::vector<double>(d.begin(), d.end()), true)});
  }
  return Imitator(m.config(), std::move(params));
}

std::vector<SceneDetections> predict(const Imitator& model, const std::vector<const TrainRecord*>& records,
                                     double score_floor) {
  std::vector<SceneDetections> out;
  for (const auto* r : records) out.push_back({r->scene_id, model.perceive(r->stack, score_floor)});
  return out;
}

std::vector<SceneDetections> proxy_detections(const std::vector<const TrainRecord*>& records) {
  std::vector<SceneDetections> out;
  for (const auto* r : records) out.push_back({r->scene_id, r->proxy_dets});
  return out;
}

EvalReport evaluate_model(const Imitator& model, const std::vector<const TrainRecord*>& records, double score_floor,
                          double fixed_threshold) {
  for (const auto* r : records) {
    if (r->stack.channels() != model.config().in_channels) {
      throw nn::ShapeError("evaluate_model: records have " + std::to_string(r->stack.channels()) +
                           " channels, model expects " + std::to_string(model.config().in_channels));
    }
  }
  return evaluate(predict(model, records, score_floor), proxy_detections(records), fixed_threshold);
}

namespace {

json step_json(const StepLog& s) {
  json j = s.loss.to_json();
  j["step"] = s.step;
  j["epoch"] = s.epoch;
  j["wall_seconds"] = s.wall_seconds;
  return j;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const ImitatorConfig& icfg, const std::vector<const TrainRecord*>& train_set,
                  const std::vector<const TrainRecord*>& val_set, const TrainPaths& paths,
                  const std::function<void(const StepLog&)>& on_step) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  const GridSpec& grid = train_set.front()->stack.grid;
  icfg.validate(grid);
  {
    std::vector<std::int64_t> a, b;
    for (const auto* r : train_set) a.push_back(r->scene_id);
    for (const auto* r : val_set) b.push_back(r->scene_id);
    check_disjoint(a, b, "train/val");
  }

  TrainResult res;
  res.final_model = Imitator::init(icfg, derive_seed(cfg.seed, "init"), cfg.zero_heads);
  res.best_model = clone(res.final_model);
  Imitator& model = res.final_model;
  auto params = model.tensors();
  const auto decay = model.weight_tensors();
  nn::AdamState adam;
  adam.lr = cfg.learning_rate;

  std::ofstream log_out;
  if (!paths.log_jsonl.empty()) {
    log_out.open(paths.log_jsonl, std::ios::binary | std::ios::trunc);
    if (!log_out) throw IoError("cannot write '" + paths.log_jsonl.string() + "'");
  }
  json meta = {{"train", to_json(cfg)}};
  if (!paths.config_hash.empty()) meta["config_hash"] = paths.config_hash;

  Rng rng(derive_seed(cfg.seed, "shuffle"));
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  bool done = false;
  int last_epoch = 0;
  for (int epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    last_epoch = epoch;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b0 = 0; b0 < order.size() && !done; b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      std::vector<const RasterStack*> stacks;
      std::vector<const LossTarget*> targets;
      for (std::size_t k = b0; k < b1; ++k) {
        stacks.push_back(&train_set[order[k]]->stack);
        targets.push_back(&train_set[order[k]]->target);
      }
      TotalLoss tl;
      try {
        const HeadTensors out = model.forward(make_input(stacks));
        tl = total_loss(out, targets, decay, cfg.loss, grid, icfg.downsample(), icfg.score_threshold);
        for (auto& p : params) p.zero_grad();
        nn::backward(tl.total);
        for (const auto& p : params) {
          for (double g : p.grad()) {
            if (!std::isfinite(g)) throw nn::NonFiniteError("non-finite gradient");
          }
        }
      } catch (const std::runtime_error& e) {
        if (!paths.last_good.empty()) model.save(paths.last_good, meta);
        throw std::runtime_error(std::string("train: diverged at step ") + std::to_string(res.steps) + ": " + e.what());
      }
      nn::adam_step(params, adam);
      StepLog sl;
      sl.step = res.steps++;
      sl.epoch = epoch;
      sl.loss = tl.report;
      sl.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (log_out) log_out << step_json(sl).dump() << '\n';
      if (on_step) on_step(sl);
      res.log.push_back(sl);
      if (cfg.max_steps > 0 && res.steps >= cfg.max_steps) done = true;
    }
    const bool last = done || epoch + 1 == cfg.epochs;
    if (cfg.validate_every > 0 && !val_set.empty() && ((epoch + 1) % cfg.validate_every == 0 || last)) {
      const EvalReport rep = evaluate_model(model, val_set, cfg.eval_score_floor, icfg.score_threshold);
      const double m = rep.map_050;
      if (m > res.best_val_map) {
        res.best_val_map = m;
        res.best_epoch = epoch;
        res.best_model = clone(model);
        res.operating_threshold.reset();
        for (const auto& o : rep.overlaps) {
          if (o.iou_threshold == 0.5) res.operating_threshold = best_f1_threshold(o.curve);
        }
        if (!paths.checkpoint.empty()) {
          json bm = meta;
          bm["epoch"] = epoch;
          bm["val_map_050"] = m;
          if (res.operating_threshold) bm["operating_threshold"] = *res.operating_threshold;
          res.best_model.save(paths.checkpoint, bm);
        }
      }
    }
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && !paths.checkpoint.empty()) {
      auto p = paths.checkpoint;
      p.replace_extension(".epoch" + std::to_string(epoch + 1) + ".ckpt");
      json em = meta;
      em["epoch"] = epoch;
      model.save(p, em);
    }
  }
  if (res.best_epoch < 0) {
    res.best_model = clone(model);
    res.best_epoch = last_epoch;
    if (!paths.checkpoint.empty()) model.save(paths.checkpoint, meta);
  }
  return res;
}

}  // namespace pim
