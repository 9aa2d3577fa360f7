#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ubcl/model.hpp"

namespace ubcl {

struct WindowedDataset;

struct TrainConfig {
  int max_epochs = 200;
  int patience = 10;
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  double weight_decay = 1e-4;
  int batch_size = 32;
  double dropout = 0.0;
  bool class_weighting = false;
  std::uint64_t master_seed = 42;
  int num_seeds = 5;

  /// lr_min defaults to lr_max / 100 when left unset by callers.
  static TrainConfig with_lr(double lr_max);
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

template <typename T>
using Gradients = ModelWeights<T>;

/// Counts probabilities clamped at 1e-12 inside the loss.
struct LossDiagnostics {
  std::size_t clamped = 0;
};

inline constexpr double kProbabilityFloor = 1e-12;

/// -class_weight[label] * log(probs[label]), with probs[label] clamped at 1e-12.
template <typename T>
double weighted_cross_entropy(std::span<const T> probs, int label, std::span<const T> class_weights,
                              LossDiagnostics* diag = nullptr);

/// w_k = N_total / (num_classes * count_k). Throws on a zero count.
std::vector<double> inverse_frequency_weights(std::span<const std::size_t> counts);

template <typename T>
struct BatchLoss {
  double loss = 0.0;        // mean over samples
  Tensor<T> logit_grad;     // [B x classes], d(loss)/d(logits)
};

/// Mean weighted cross-entropy over a batch plus its gradient w.r.t. logits.
template <typename T>
BatchLoss<T> batch_loss(const Tensor<T>& probs, std::span<const int> labels,
                        std::span<const T> class_weights, LossDiagnostics* diag = nullptr);

/// Exact reverse-mode gradient of the network for the cached forward pass.
///
/// `logit_grad` is d(loss)/d(logits) for every sample [B x classes]. The
/// result has the layout of ModelWeights; running-statistic entries are zero.
template <typename T>
Gradients<T> backward(const ModelConfig& config, const ModelWeights<T>& weights,
                         const ForwardCache<T>& cache, const Tensor<T>& logit_grad);

struct AdamMoments {
  WeightsF m;
  WeightsF v;
  static AdamMoments zeros_like(const WeightsF& w);
};

struct AdamWParams {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One decoupled-weight-decay Adam step. `step` counts from 1.
void adamw_step(WeightsF& weights, const WeightsF& grads, AdamMoments& moments, long step,
                const AdamWParams& params);

/// lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi * epoch / total_epochs)).
double cosine_lr(int epoch, int total_epochs, double lr_max, double lr_min);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  double val_macro_f1 = 0.0;
  double best_so_far = 0.0;
};

struct FitResult {
  WeightsF best_weights;
  int best_epoch = 0;
  double best_val_f1 = 0.0;
  std::vector<EpochRecord> history;
};

/// Optional overrides, used to exercise the stopping contract.
struct FitHooks {
  /// Replaces the validation macro-F1 computation when set.
  std::function<double(int epoch, const WeightsF&)> val_metric;
};

/// Trains with AdamW, per-epoch cosine annealing and early stopping on
/// validation macro-F1; returns the weights of the best validation epoch.
FitResult fit(const ModelConfig& config, const TrainConfig& train, const WindowedDataset& train_set,
              const WindowedDataset& val_set, Rng& rng, const FitHooks& hooks = {});

std::string history_to_jsonl(const std::vector<EpochRecord>& history);

struct SearchSpace {
  double lr_lo = 1e-4, lr_hi = 1e-2;        // log-uniform
  double wd_lo = 1e-5, wd_hi = 5e-2;        // log-uniform
  double dropout_lo = 0.0, dropout_hi = 0.5;  // uniform
};

struct TrialResult {
  int index = 0;
  double lr = 0.0;
  double weight_decay = 0.0;
  double dropout = 0.0;
  double val_macro_f1 = 0.0;
};

struct SearchResult {
  TrainConfig best;
  int best_trial = 0;
  std::vector<TrialResult> trials;
};

inline constexpr int kSearchEpochs = 10;
inline constexpr int kSearchPatience = 5;

/// Draws `trials` hyperparameter samples from `space` (stream derived from
/// base.master_seed). Trials train for 10 epochs with patience 5 unless
/// `evaluate` overrides scoring. Ties on validation F1 go to the lower index.
SearchResult random_search(const ModelConfig& config, const TrainConfig& base,
                           const SearchSpace& space, int trials, const WindowedDataset& train_set,
                           const WindowedDataset& val_set, int jobs = 1,
                           std::function<double(const TrialResult&)> evaluate = {});

}  // namespace ubcl
