#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ubcl/analysis.hpp"
#include "ubcl/datapipe.hpp"
#include "ubcl/model.hpp"
#include "ubcl/training.hpp"

namespace ubcl {

/// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 0);

  void add(int truth, int predicted);
  std::size_t at(int truth, int predicted) const;
  std::size_t total() const;
  int num_classes() const { return n_; }
  const std::vector<std::size_t>& counts() const { return counts_; }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  int n_ = 0;
  std::vector<std::size_t> counts_;
};

/// Per-class F1 = 2PR/(P+R); a class with no true positives scores 0.
std::vector<double> per_class_f1(const ConfusionMatrix& cm);
/// Unweighted mean of per_class_f1 over every class.
double macro_f1(const ConfusionMatrix& cm);

int predict(const ModelConfig& config, const WeightsF& weights, const TensorF& window);
std::vector<int> predict_all(const ModelConfig& config, const WeightsF& weights,
                             const WindowedDataset& data);
ConfusionMatrix confusion_from(std::span<const int> truth, std::span<const int> predicted,
                               int num_classes);
ConfusionMatrix evaluate(const ModelConfig& config, const WeightsF& weights,
                         const WindowedDataset& data);

struct SeedRun {
  int index = 0;
  double macro_f1 = 0.0;
  double best_val_f1 = 0.0;
  int best_epoch = 0;
  ConfusionMatrix confusion;
  std::vector<EpochRecord> history;
  WeightsF weights;
};

struct ExperimentReport {
  static constexpr int kSchemaVersion = 1;
  ModelConfig config;
  TrainConfig train;
  std::vector<SeedRun> per_seed;
  double mean_f1 = 0.0;
  double std_f1 = 0.0;  // population standard deviation
  CostReport cost;
  std::optional<std::string> perturbation;

  std::size_t best_seed() const;
};

/// Trains train.num_seeds models; seed i draws init, shuffling and dropout
/// from rng_derive(train.master_seed, i) and is scored on `splits.test`.
ExperimentReport multi_seed_run(const ModelConfig& config, const TrainConfig& train,
                                const DataSplits& splits, int jobs = 1);

/// Mean and population standard deviation.
std::pair<double, double> mean_and_std(std::span<const double> values);

/// Drops timesteps 4, 9, 14, ... and restores length T by linear
/// interpolation over the surviving samples' original positions.
TensorF perturb_jitter(const TensorF& window);

/// Zeroes the listed channels. Throws std::out_of_range on an invalid index.
TensorF perturb_channel_dropout(const TensorF& window, const std::set<int>& channels);

WindowedDataset map_windows(const WindowedDataset& data, const std::function<TensorF(const TensorF&)>& fn);

struct AblationEntry {
  Variant variant = Variant::kA0Base;
  ExperimentReport report;
  std::int64_t params_delta = 0;  // vs A0
  double macs_ratio = 1.0;        // vs A0
  double f1_delta_pct = 0.0;      // vs A0, percentage points
};

/// Trains and evaluates every variant with the same seeds and protocol.
std::vector<AblationEntry> ablation_suite(const ModelConfig& base, const TrainConfig& train,
                                          const DataSplits& splits, int jobs = 1);

struct RobustnessEntry {
  std::string perturbation;
  double f1_clean = 0.0;
  double f1_perturbed = 0.0;
  double delta_pct = 0.0;  // (clean - perturbed) * 100
};

/// Clean, jitter and channel-dropout evaluations of fixed weights. Perturbations
/// apply to already-normalized windows.
std::vector<RobustnessEntry> robustness_suite(const WeightsF& weights, const ModelConfig& config,
                                              const WindowedDataset& test,
                                              const std::set<int>& dropped_channels);

// --- Serialization of reports ------------------------------------------------

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& train);
nlohmann::json to_json(const CostReport& report);
nlohmann::json to_json(const ConfusionMatrix& cm);
nlohmann::json to_json(const ExperimentReport& report);
nlohmann::json to_json(const std::vector<AblationEntry>& entries);
nlohmann::json to_json(const std::vector<RobustnessEntry>& entries);

/// One row per seed: variant,seed,macro_f1,best_epoch.
std::string report_to_csv(const ExperimentReport& report);

/// Text table laid out like the published per-dataset F1 comparison, with
/// the published figure for `preset_key` (if any) beside the measured one.
std::string render_f1_table(const std::string& dataset_name, const ExperimentReport& report,
                            const std::string& preset_key = {});

}  // namespace ubcl
