#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ubcl/model.hpp"

namespace ubcl {

struct BlockCount {
  std::string name;
  std::int64_t value = 0;
  friend bool operator==(const BlockCount&, const BlockCount&) = default;
};

struct ReceptiveField {
  int no_stride = 0;    // 1 + sum(K_i - 1)
  int with_stride = 0;  // 1 + sum((K_i - 1) * prod_{j<i} S_j), S = pooling strides
};

struct CostReport {
  std::vector<BlockCount> params_by_block;
  std::int64_t total_params = 0;
  std::int64_t lstm_params_single_bias = 0;
  std::int64_t total_params_single_bias = 0;
  std::vector<BlockCount> macs_by_block;
  std::int64_t total_macs = 0;
  ReceptiveField receptive_field;
  std::size_t quantized_tensors = 0;
  double int8_footprint_kb = 0.0;
};

/// Learnable parameters per block (batch-norm running statistics excluded).
/// The recurrent block uses two bias vectors per direction.
std::vector<BlockCount> count_params(const ModelConfig& config);

/// Single-bias recurrent count: directions * 4 * H * (F_in + H + 1).
std::int64_t lstm_params_single_bias(const ModelConfig& config);

/// Multiply-accumulates per window. Pooling, batch norm and activations cost 0.
std::vector<BlockCount> count_macs(const ModelConfig& config);

ReceptiveField receptive_field(const ModelConfig& config);

/// Learnable tensors that carry their own quantization parameters.
std::size_t quantized_tensor_count(const ModelConfig& config);

inline constexpr std::size_t kContainerHeaderBytes = 256;
inline constexpr std::size_t kQuantParamBytes = 8;

/// params * 1 byte + 8 bytes per quantized tensor + 256-byte header.
double int8_footprint_bytes(std::int64_t params, std::size_t tensors);
double int8_footprint_kb(const ModelConfig& config);

std::int64_t sum_blocks(std::span<const BlockCount> blocks);

CostReport analyze(const ModelConfig& config);

struct EfficiencyMetrics {
  double f1_per_kparams = 0.0;
  double f1_per_mmacs = 0.0;
};

/// `mean_f1` is a fraction in [0, 1]; ratios use percent, as the published table does.
EfficiencyMetrics efficiency_metrics(double mean_f1, std::int64_t params, std::int64_t macs);

// --- Dataset presets and published reference values ------------------------

struct DatasetPreset {
  std::string_view key;
  std::string_view display;
  int channels;
  int window;
  int classes;
  int subjects;
  double rate_hz;
  std::optional<double> cutoff_hz;
  double published_macs_k;       // per-dataset MAC table, thousands
  double published_int8_kb;      // per-dataset INT8 footprint table
  double published_f1;           // macro F1 %, mean over seeds
  double published_f1_std;
  std::optional<double> published_fp32_f1;  // quantization table, fraction
  std::optional<double> published_int8_f1;
};

std::span<const DatasetPreset> dataset_presets();
const DatasetPreset* find_preset(std::string_view key);
std::string preset_list();

ModelConfig preset_config(const DatasetPreset& preset, Variant variant = Variant::kA0Base);

/// Reference values for the efficiency comparison of the base model.
struct PublishedEfficiency {
  static constexpr double kParamsK = 11.4;
  static constexpr double kMacsK = 485.0;
  static constexpr double kF1PerKParams = 7.34;
  static constexpr double kF1PerMMacs = 172.5;
  static constexpr double kMeanF1Pct = 83.68;
  static constexpr double kAvgInt8Kb = 23.0;
  static constexpr double kAvgQuantDegradationPct = 0.21;
  static constexpr double kNoPoolMacRatio = 3.1;
};

/// Tolerance inside which a MAC total is considered to match the table.
inline constexpr double kMacMatchTolerance = 0.01;

struct MacComparison {
  std::int64_t computed = 0;
  double published = 0.0;  // absolute MACs
  double relative_error = 0.0;
  bool matches = false;
  std::string note;  // deviation note when outside tolerance
};

MacComparison compare_with_published(const DatasetPreset& preset, const CostReport& report);

/// Plain-text table with per-preset params, MACs and INT8 footprint next to
/// the published figures.
std::string render_cost_table(std::span<const std::pair<std::string, CostReport>> rows);

}  // namespace ubcl
