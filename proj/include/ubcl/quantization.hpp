#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ubcl/datapipe.hpp"
#include "ubcl/model.hpp"

namespace ubcl {

enum class QuantScheme : std::uint8_t { kSymmetricWeight = 0, kAffineActivation = 1 };

struct QuantParams {
  double scale = 1.0;
  int zero_point = 0;
  QuantScheme scheme = QuantScheme::kSymmetricWeight;

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

inline constexpr double kMinQuantScale = 1e-8;
inline constexpr std::size_t kDefaultCalibrationSamples = 256;

/// scale = max|x| / 127 (floored at 1e-8), zero point 0.
QuantParams symmetric_params(std::span<const float> values);
/// Affine over [lo, hi] widened to contain 0; scale = (hi - lo) / 255.
QuantParams affine_params(double lo, double hi);

std::int8_t quantize_value(double x, const QuantParams& p);
double dequantize_value(std::int8_t q, const QuantParams& p);
/// quantize then dequantize.
float fake_quantize(float x, const QuantParams& p);

Tensor<std::int8_t> quantize_tensor(const TensorF& t, const QuantParams& p);
TensorF dequantize_tensor(const Tensor<std::int8_t>& q, const QuantParams& p);

struct ActivationRange {
  double lo = 0.0;
  double hi = 0.0;
  friend bool operator==(const ActivationRange&, const ActivationRange&) = default;
};

/// Keyed by boundary: "input", "conv1.out", "conv2.out" (when present),
/// "lstm.h", "aggregate".
using ActivationRanges = std::map<std::string, ActivationRange>;

/// Eval-mode min/max at every boundary over min(max_samples, |set|) windows.
/// When the set is larger than max_samples, the windows are a seed-selected
/// subset. Every range contains 0.
ActivationRanges calibrate(const WeightsF& weights, const ModelConfig& config,
                           const WindowedDataset& calibration_set,
                           std::size_t max_samples = kDefaultCalibrationSamples,
                           std::uint64_t seed = 0);

/// Folds eval-mode batch norm into the preceding convolution. The returned
/// weights have identity batch norm (gamma 1, beta 0, mean 0, var 1 - eps).
WeightsF fold_batch_norm(const WeightsF& weights);

struct QuantizedTensor {
  std::string name;
  Tensor<std::int8_t> values;
  QuantParams params;

  friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

/// Batch-norm-folded network with per-tensor int8 weights. Tensors: conv{i}.weight,
/// conv{i}.bias, then the recurrent and head tensors in canonical order.
struct QuantizedModel {
  ModelConfig config;
  std::vector<QuantizedTensor> tensors;
  std::map<std::string, QuantParams> activations;

  const QuantizedTensor& tensor(const std::string& name) const;
  friend bool operator==(const QuantizedModel&, const QuantizedModel&) = default;
};

QuantizedModel quantize_model(const WeightsF& weights, const ModelConfig& config,
                              const ActivationRanges& ranges);

/// Simulated-quantized inference: int8 operands, int32 accumulation,
/// activations requantized at every calibrated boundary, nonlinearities in float.
TensorF quantized_forward(const QuantizedModel& qmodel, const TensorF& window);
int quantized_predict(const QuantizedModel& qmodel, const TensorF& window);

struct DegradationReport {
  double fp32_f1 = 0.0;
  double int8_f1 = 0.0;
  double delta_pct = 0.0;   // (fp32 - int8) * 100
  double agreement = 0.0;   // fraction of windows with equal argmax
};

DegradationReport degradation_report(const WeightsF& weights, const QuantizedModel& qmodel,
                                     const WindowedDataset& test);

}  // namespace ubcl
