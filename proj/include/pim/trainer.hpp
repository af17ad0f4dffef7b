#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "pim/baselines.hpp"
#include "pim/imitator.hpp"
#include "pim/losses.hpp"
#include "pim/metrics.hpp"
#include "pim/raster.hpp"

namespace pim {

struct TrainConfig {
  int epochs = 50;
  int batch_size = 8;
  double learning_rate = 0.001;
  std::uint64_t seed = 0;
  LossWeights loss;
  double train_fraction = 0.7;
  double val_fraction = 0.1;
  double test_fraction = 0.2;
  // Validate (and keep the best checkpoint) every this many epochs; 0 disables.
  int validate_every = 1;
  // Save the current parameters every this many epochs; 0 disables.
  int checkpoint_every = 0;
  // Stop after this many optimizer steps when > 0.
  int max_steps = 0;
  // Low decode floor used when sweeping PR curves.
  double eval_score_floor = 0.05;
  bool zero_heads = false;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct TrainRecord {
  std::int64_t scene_id = 0;
  RasterStack stack;
  LossTarget target;
  std::vector<Detection> proxy_dets;
  std::vector<OrientedBox> annotation;
};

/// One record per scene (world frame in, ego frame internally): raster stack,
/// pseudo maps from the proxy detections and from the annotation boxes.
/// Throws on an empty corpus.
std::vector<TrainRecord> prepare_dataset(const std::vector<SceneState>& scenes, const TargetProxySpec& proxy,
                                         const GridSpec& grid, const PosEncSpec& posenc, int downsample);

struct Splits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Seeded shuffle of the indices cut by the configured fractions. Throws if
/// two splits would share a scene id.
Splits split_indices(const std::vector<std::int64_t>& scene_ids, const TrainConfig& cfg);
void check_disjoint(const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b, const char* what);

struct StepLog {
  int step = 0;
  int epoch = 0;
  LossReport loss;
  double wall_seconds = 0.0;
};

struct TrainResult {
  Imitator final_model;
  Imitator best_model;
  double best_val_map = -1.0;
  int best_epoch = -1;
  // F1-best decode threshold of the best model on the validation set.
  std::optional<double> operating_threshold;
  int steps = 0;
  std::vector<StepLog> log;
};

struct TrainPaths {
  std::filesystem::path log_jsonl;    // optional
  std::filesystem::path checkpoint;   // best checkpoint, optional
  std::filesystem::path last_good;    // written on divergence, optional
  std::string config_hash;
};

// Deep copy of the parameters.
Imitator clone(const Imitator& m);

/// Adam over seeded mini-batches. Non-finite loss aborts with
/// std::runtime_error after writing the last good parameters (if a path is
/// given).
TrainResult train(const TrainConfig& cfg, const ImitatorConfig& icfg, const std::vector<const TrainRecord*>& train_set,
                  const std::vector<const TrainRecord*>& val_set, const TrainPaths& paths = {},
                  const std::function<void(const StepLog&)>& on_step = {});

/// Detections of the model on each record (decoded at `score_floor`, NMS).
std::vector<SceneDetections> predict(const Imitator& model, const std::vector<const TrainRecord*>& records,
                                     double score_floor);

// Evaluates against the proxy detections of the records.
EvalReport evaluate_model(const Imitator& model, const std::vector<const TrainRecord*>& records, double score_floor,
                          double fixed_threshold);

std::vector<SceneDetections> proxy_detections(const std::vector<const TrainRecord*>& records);

}  // namespace pim
