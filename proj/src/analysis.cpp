#include "ubcl/analysis.hpp"

#include <array>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace ubcl {

namespace {

constexpr std::array<DatasetPreset, 8> kPresets = {{
    {"uci-har", "UCI-HAR", 9, 128, 6, 30, 50.0, std::nullopt, 420, 21.2, 93.41, 0.35, 0.9269, 0.9269},
    {"motionsense", "MotionSense", 6, 128, 6, 24, 50.0, std::nullopt, 389, 20.7, 91.65, 0.43, 0.9088,
     0.9046},
    {"wisdm", "WISDM", 3, 128, 6, 36, 20.0, std::nullopt, 359, 20.2, 73.17, 12.4, 0.7684, 0.7682},
    {"pamap2", "PAMAP2", 19, 128, 12, 9, 100.0, 10.0, 523, 23.4, 60.75, 1.76, 0.6373, 0.6379},
    {"opportunity", "Opportunity", 79, 128, 5, 4, 30.0, std::nullopt, 1140, 32.4, 87.58, 0.73, 0.8703,
     0.8709},
    {"unimib", "UniMiB", 3, 128, 9, 30, 50.0, std::nullopt, 359, 20.5, 79.43, 1.66, std::nullopt,
     std::nullopt},
    {"skoda", "SKODA", 30, 98, 11, 1, 98.0, 5.0, 444, 25.1, 94.46, 1.31, 0.9571, 0.9564},
    {"daphnet", "Daphnet", 9, 64, 2, 10, 64.0, 12.0, 245, 20.8, 88.98, 1.64, 0.8813, 0.8705},
}};

std::int64_t i64(int v) { return static_cast<std::int64_t>(v); }

}  // namespace

std::int64_t sum_blocks(std::span<const BlockCount> blocks) {
  std::int64_t total = 0;
  for (const auto& b : blocks) total += b.value;
  return total;
}

std::vector<BlockCount> count_params(const ModelConfig& config) {
  config.validate();
  const std::int64_t F = config.conv_filters, K = config.kernel, H = config.lstm_hidden;
  std::vector<BlockCount> blocks;
  std::int64_t in = config.channels;
  for (int b = 0; b < config.num_conv_blocks(); ++b) {
    const std::string idx = std::to_string(b + 1);
    blocks.push_back({"conv" + idx, F * in * K + F});
    blocks.push_back({"bn" + idx, 2 * F});
    in = F;
  }
  const std::int64_t dirs = config.directions();
  blocks.push_back({config.directions() == 2 ? "bilstm" : "lstm",
                    dirs * (4 * H * (F + H) + 2 * 4 * H)});
  const std::int64_t D = config.feature_dim(), classes = config.num_classes;
  blocks.push_back({"head", D * classes + classes});
  return blocks;
}

std::int64_t lstm_params_single_bias(const ModelConfig& config) {
  const std::int64_t F = config.conv_filters, H = config.lstm_hidden;
  return i64(config.directions()) * 4 * H * (F + H + 1);
}

std::vector<BlockCount> count_macs(const ModelConfig& config) {
  config.validate();
  const std::int64_t F = config.conv_filters, K = config.kernel, H = config.lstm_hidden;
  std::vector<BlockCount> blocks;
  std::int64_t in = config.channels;
  for (int b = 0; b < config.num_conv_blocks(); ++b) {
    blocks.push_back({"conv" + std::to_string(b + 1), F * in * K * i64(config.seq_len_at(b))});
    in = F;
  }
  blocks.push_back({config.directions() == 2 ? "bilstm" : "lstm",
                    i64(config.directions()) * 4 * H * (F + H) * i64(config.lstm_steps())});
  blocks.push_back({"head", i64(config.feature_dim()) * config.num_classes});
  return blocks;
}

ReceptiveField receptive_field(const ModelConfig& config) {
  ReceptiveField rf{1, 1};
  int stride_product = 1;
  for (int b = 0; b < config.num_conv_blocks(); ++b) {
    rf.no_stride += config.kernel - 1;
    rf.with_stride += (config.kernel - 1) * stride_product;
    if (config.pools()) stride_product *= 2;
  }
  return rf;
}

std::size_t quantized_tensor_count(const ModelConfig& config) {
  return static_cast<std::size_t>(4 * config.num_conv_blocks() + 4 * config.directions() + 2);
}

double int8_footprint_bytes(std::int64_t params, std::size_t tensors) {
  return static_cast<double>(params) + static_cast<double>(kQuantParamBytes * tensors) +
         static_cast<double>(kContainerHeaderBytes);
}

double int8_footprint_kb(const ModelConfig& config) {
  const auto blocks = count_params(config);
  return int8_footprint_bytes(sum_blocks(blocks), quantized_tensor_count(config)) / 1024.0;
}

CostReport analyze(const ModelConfig& config) {
  CostReport r;
  r.params_by_block = count_params(config);
  r.total_params = sum_blocks(r.params_by_block);
  r.lstm_params_single_bias = lstm_params_single_bias(config);
  std::int64_t two_bias_lstm = 0;
  for (const auto& b : r.params_by_block) {
    if (b.name == "bilstm" || b.name == "lstm") two_bias_lstm = b.value;
  }
  r.total_params_single_bias = r.total_params - two_bias_lstm + r.lstm_params_single_bias;
  r.macs_by_block = count_macs(config);
  r.total_macs = sum_blocks(r.macs_by_block);
  r.receptive_field = receptive_field(config);
  r.quantized_tensors = quantized_tensor_count(config);
  r.int8_footprint_kb = int8_footprint_bytes(r.total_params, r.quantized_tensors) / 1024.0;
  return r;
}

EfficiencyMetrics efficiency_metrics(double mean_f1, std::int64_t params, std::int64_t macs) {
  if (params <= 0 || macs <= 0) {
    throw std::invalid_argument("efficiency metrics need positive parameter and MAC counts");
  }
  const double pct = mean_f1 * 100.0;
  return {pct / (static_cast<double>(params) / 1000.0), pct / (static_cast<double>(macs) / 1e6)};
}

std::span<const DatasetPreset> dataset_presets() { return kPresets; }

const DatasetPreset* find_preset(std::string_view key) {
  for (const auto& p : kPresets) {
    if (p.key == key) return &p;
  }
  return nullptr;
}

std::string preset_list() {
  std::string out;
  for (const auto& p : kPresets) {
    if (!out.empty()) out += ", ";
    out += p.key;
  }
  return out;
}

ModelConfig preset_config(const DatasetPreset& preset, Variant variant) {
  ModelConfig c;
  c.channels = preset.channels;
  c.window_len = preset.window;
  c.num_classes = preset.classes;
  c.variant = variant;
  return c;
}

MacComparison compare_with_published(const DatasetPreset& preset, const CostReport& report) {
  MacComparison cmp;
  cmp.computed = report.total_macs;
  cmp.published = preset.published_macs_k * 1000.0;
  cmp.relative_error = (static_cast<double>(cmp.computed) - cmp.published) / cmp.published;
  cmp.matches = std::abs(cmp.relative_error) <= kMacMatchTolerance;
  if (!cmp.matches) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << "closed-form MACs deviate "
       << cmp.relative_error * 100.0 << "% from the published " << preset.published_macs_k
       << "K for " << preset.display << " (T=" << preset.window << ", C=" << preset.channels
       << "); the published row is not reproduced by the per-layer formula";
    cmp.note = os.str();
  }
  return cmp;
}

std::string render_cost_table(std::span<const std::pair<std::string, CostReport>> rows) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "Dataset" << std::right << std::setw(10) << "Params"
     << std::setw(12) << "MACs(K)" << std::setw(12) << "Ref(K)" << std::setw(9) << "Dev%"
     << std::setw(10) << "INT8 KB" << std::setw(10) << "Ref KB" << std::setw(6) << "RF" << '\n';
  os << std::string(83, '-') << '\n';
  for (const auto& [name, r] : rows) {
    const DatasetPreset* p = find_preset(name);
    os << std::left << std::setw(14) << (p ? std::string(p->display) : name) << std::right
       << std::setw(10) << r.total_params << std::setw(12) << std::fixed << std::setprecision(1)
       << static_cast<double>(r.total_macs) / 1000.0;
    if (p) {
      const auto cmp = compare_with_published(*p, r);
      os << std::setw(12) << p->published_macs_k << std::setw(9) << std::setprecision(2)
         << cmp.relative_error * 100.0 << std::setw(10) << std::setprecision(1)
         << r.int8_footprint_kb << std::setw(10) << p->published_int8_kb;
    } else {
      os << std::setw(12) << "-" << std::setw(9) << "-" << std::setw(10) << std::setprecision(1)
         << r.int8_footprint_kb << std::setw(10) << "-";
    }
    os << std::setw(6) << r.receptive_field.no_stride << '\n';
  }
  return os.str();
}

}  // namespace ubcl
