#include "ubcl/quantization.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "ubcl/evalkit.hpp"

namespace ubcl {

QuantParams symmetric_params(std::span<const float> values) {
  double max_abs = 0.0;
  for (float v : values) max_abs = std::max(max_abs, static_cast<double>(std::fabs(v)));
  return {std::max(max_abs / 127.0, kMinQuantScale), 0, QuantScheme::kSymmetricWeight};
}

QuantParams affine_params(double lo, double hi) {
  if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi) {
    throw std::invalid_argument("invalid activation range");
  }
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  const double scale = std::max((hi - lo) / 255.0, kMinQuantScale);
  const long zp = std::clamp<long>(std::lround(-128.0 - lo / scale), -128, 127);
  return {scale, static_cast<int>(zp), QuantScheme::kAffineActivation};
}

std::int8_t quantize_value(double x, const QuantParams& p) {
  const long q = std::lround(x / p.scale) + p.zero_point;
  return static_cast<std::int8_t>(std::clamp<long>(q, -128, 127));
}

double dequantize_value(std::int8_t q, const QuantParams& p) {
  return (static_cast<int>(q) - p.zero_point) * p.scale;
}

float fake_quantize(float x, const QuantParams& p) {
  return static_cast<float>(dequantize_value(quantize_value(x, p), p));
}

Tensor<std::int8_t> quantize_tensor(const TensorF& t, const QuantParams& p) {
  Tensor<std::int8_t> q(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) q[i] = quantize_value(t[i], p);
  return q;
}

TensorF dequantize_tensor(const Tensor<std::int8_t>& q, const QuantParams& p) {
  TensorF t(q.shape());
  for (std::size_t i = 0; i < q.size(); ++i) t[i] = static_cast<float>(dequantize_value(q[i], p));
  return t;
}

namespace {

void widen(ActivationRanges& ranges, const std::string& key, std::span<const float> values) {
  auto [it, inserted] = ranges.try_emplace(key, ActivationRange{0.0, 0.0});
  for (float v : values) {
    it->second.lo = std::min(it->second.lo, static_cast<double>(v));
    it->second.hi = std::max(it->second.hi, static_cast<double>(v));
  }
}

std::string conv_out_key(std::size_t block) { return "conv" + std::to_string(block + 1) + ".out"; }

}  // namespace

ActivationRanges calibrate(const WeightsF& weights, const ModelConfig& config,
                           const WindowedDataset& calibration_set, std::size_t max_samples,
                           std::uint64_t seed) {
  if (calibration_set.empty() || max_samples == 0) {
    throw DataError("calibration set is empty");
  }
  std::vector<std::size_t> idx(calibration_set.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (idx.size() > max_samples) {
    Rng rng(seed);
    rng.shuffle(idx);
    idx.resize(max_samples);
    std::sort(idx.begin(), idx.end());
  }
  WeightsF w = weights;
  ActivationRanges ranges;
  for (std::size_t i : idx) {
    const TensorF& window = calibration_set.windows[i];
    check_window(config, window);
    widen(ranges, "input", window.values());
    TensorF h = window;
    for (std::size_t b = 0; b < w.conv.size(); ++b) {
      h = conv_block_forward(h, w.conv[b], false, config.pools());
      widen(ranges, conv_out_key(b), h.values());
    }
    const TensorF seq = bilstm_forward<float>(h, w.lstm);
    widen(ranges, "lstm.h", seq.values());
    const TensorF agg = aggregate(seq, config.mean_aggregation());
    widen(ranges, "aggregate", agg.values());
  }
  for (const auto& [key, r] : ranges) {
    if (!std::isfinite(r.lo) || !std::isfinite(r.hi)) {
      throw DataError("non-finite activation range at " + key);
    }
  }
  return ranges;
}

WeightsF fold_batch_norm(const WeightsF& weights) {
  WeightsF out = weights;
  for (auto& blk : out.conv) {
    const std::size_t F = blk.weight.dim(0), per_filter = blk.weight.size() / F;
    for (std::size_t f = 0; f < F; ++f) {
      const double s = static_cast<double>(blk.gamma[f]) /
                       std::sqrt(static_cast<double>(blk.running_var[f]) + kBatchNormEps);
      for (std::size_t j = 0; j < per_filter; ++j) {
        auto& v = blk.weight[f * per_filter + j];
        v = static_cast<float>(v * s);
      }
      blk.bias[f] = static_cast<float>((static_cast<double>(blk.bias[f]) - blk.running_mean[f]) * s +
                                       blk.beta[f]);
      blk.gamma[f] = 1.0f;
      blk.beta[f] = 0.0f;
      blk.running_mean[f] = 0.0f;
      blk.running_var[f] = static_cast<float>(1.0 - kBatchNormEps);
    }
  }
  return out;
}

const QuantizedTensor& QuantizedModel::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw std::out_of_range("quantized model has no tensor '" + name + "'");
}

QuantizedModel quantize_model(const WeightsF& weights, const ModelConfig& config,
                              const ActivationRanges& ranges) {
  config.validate();
  QuantizedModel q;
  q.config = config;
  const WeightsF folded = fold_batch_norm(weights);
  folded.for_each([&](const std::string& name, const TensorF& t, bool learnable) {
    if (!learnable || name.starts_with("bn")) return;
    const QuantParams p = symmetric_params(t.values());
    q.tensors.push_back({name, quantize_tensor(t, p), p});
  });
  std::vector<std::string> boundaries = {"input", "lstm.h", "aggregate"};
  for (std::size_t b = 0; b < weights.conv.size(); ++b) boundaries.push_back(conv_out_key(b));
  for (const auto& key : boundaries) {
    const auto it = ranges.find(key);
    if (it == ranges.end()) throw std::invalid_argument("missing calibration range for " + key);
    q.activations[key] = affine_params(it->second.lo, it->second.hi);
  }
  return q;
}

namespace {

/// Activation codes after affine quantization, stored as (q - zero_point).
struct QActs {
  std::vector<std::int32_t> centered;  // row-major [rows x cols]
  std::size_t rows = 0, cols = 0;
  double scale = 1.0;
};

QActs quantize_acts(const TensorF& x, const QuantParams& p) {
  QActs a;
  a.rows = x.dim(0);
  a.cols = x.dim(1);
  a.scale = p.scale;
  a.centered.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    a.centered[i] = static_cast<std::int32_t>(quantize_value(x[i], p)) - p.zero_point;
  }
  return a;
}

TensorF conv_int(const QActs& x, const QuantizedTensor& w, const QuantizedTensor& b) {
  const std::size_t F = w.values.dim(0), Cin = w.values.dim(1), K = w.values.dim(2);
  const std::size_t L = x.rows;
  const auto pad = static_cast<std::ptrdiff_t>((K - 1) / 2);
  TensorF out({L, F});
  const double s = x.scale * w.params.scale;
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t f = 0; f < F; ++f) {
      std::int32_t acc = 0;
      for (std::size_t k = 0; k < K; ++k) {
        const auto src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(k) - pad;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;  // zero padding
        for (std::size_t c = 0; c < Cin; ++c) {
          acc += static_cast<std::int32_t>(w.values(f, c, k)) *
                 x.centered[static_cast<std::size_t>(src) * Cin + c];
        }
      }
      out(t, f) = static_cast<float>(acc * s + dequantize_value(b.values[f], b.params));
    }
  }
  return out;
}

/// Row-vector product W[rows x n] * x[n] with int32 accumulation, rescaled.
void matvec_int(const QuantizedTensor& w, const std::int32_t* x, double x_scale, double* out) {
  const std::size_t R = w.values.dim(0), N = w.values.dim(1);
  const double s = x_scale * w.params.scale;
  for (std::size_t r = 0; r < R; ++r) {
    std::int32_t acc = 0;
    const std::int8_t* row = w.values.data() + r * N;
    for (std::size_t j = 0; j < N; ++j) acc += static_cast<std::int32_t>(row[j]) * x[j];
    out[r] += acc * s;
  }
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TensorF quantized_forward(const QuantizedModel& qm, const TensorF& window) {
  const ModelConfig& cfg = qm.config;
  check_window(cfg, window);
  TensorF h = window;
  QActs x = quantize_acts(h, qm.activations.at("input"));
  for (int b = 0; b < cfg.num_conv_blocks(); ++b) {
    const std::string c = "conv" + std::to_string(b + 1);
    TensorF z = conv_int(x, qm.tensor(c + ".weight"), qm.tensor(c + ".bias"));
    for (auto& v : z.values()) v = v > 0.0f ? v : 0.0f;
    if (cfg.pools()) z = maxpool2(z);
    x = quantize_acts(z, qm.activations.at(c + ".out"));
  }

  const std::size_t steps = x.rows, Fin = x.cols, H = static_cast<std::size_t>(cfg.lstm_hidden);
  const int dirs = cfg.directions();
  const QuantParams& hp = qm.activations.at("lstm.h");
  TensorF seq({steps, H * static_cast<std::size_t>(dirs)});
  for (int d = 0; d < dirs; ++d) {
    const std::string p = d == 0 ? "lstm.fwd." : "lstm.bwd.";
    const auto& w_ih = qm.tensor(p + "w_ih");
    const auto& w_hh = qm.tensor(p + "w_hh");
    const auto& b_ih = qm.tensor(p + "b_ih");
    const auto& b_hh = qm.tensor(p + "b_hh");
    if (w_ih.values.dim(1) != Fin) throw ShapeError("quantized LSTM input width mismatch");
    std::vector<double> c(H, 0.0), pre(4 * H);
    std::vector<std::int32_t> hq(H, 0);  // centered codes of h_{t-1}; exact zero state
    for (std::size_t s = 0; s < steps; ++s) {
      const std::size_t t = d == 1 ? steps - 1 - s : s;
      for (std::size_t r = 0; r < 4 * H; ++r) {
        pre[r] = dequantize_value(b_ih.values[r], b_ih.params) +
                 dequantize_value(b_hh.values[r], b_hh.params);
      }
      matvec_int(w_ih, x.centered.data() + t * Fin, x.scale, pre.data());
      matvec_int(w_hh, hq.data(), hp.scale, pre.data());
      for (std::size_t j = 0; j < H; ++j) {
        const double i = sigm(pre[j]);
        const double f = sigm(pre[H + j]);
        const double g = std::tanh(pre[2 * H + j]);
        const double o = sigm(pre[3 * H + j]);
        c[j] = f * c[j] + i * g;
        const double hv = o * std::tanh(c[j]);
        hq[j] = static_cast<std::int32_t>(quantize_value(hv, hp)) - hp.zero_point;
        seq(t, static_cast<std::size_t>(d) * H + j) = static_cast<float>(hq[j] * hp.scale);
      }
    }
  }

  const TensorF agg = aggregate(seq, cfg.mean_aggregation());
  const QActs a = quantize_acts(agg.reshape({1, agg.size()}), qm.activations.at("aggregate"));
  const auto& hw = qm.tensor("head.weight");
  const auto& hb = qm.tensor("head.bias");
  const std::size_t K = hw.values.dim(0);
  std::vector<double> logits(K);
  for (std::size_t k = 0; k < K; ++k) logits[k] = dequantize_value(hb.values[k], hb.params);
  matvec_int(hw, a.centered.data(), a.scale, logits.data());
  std::vector<float> lf(logits.begin(), logits.end());
  return softmax<float>(lf);
}

int quantized_predict(const QuantizedModel& qmodel, const TensorF& window) {
  const TensorF p = quantized_forward(qmodel, window);
  const auto v = p.values();
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

DegradationReport degradation_report(const WeightsF& weights, const QuantizedModel& qmodel,
                                     const WindowedDataset& test) {
  const ModelConfig& cfg = qmodel.config;
  const auto fp32 = predict_all(cfg, weights, test);
  std::vector<int> int8;
  int8.reserve(test.size());
  for (const auto& w : test.windows) int8.push_back(quantized_predict(qmodel, w));
  DegradationReport r;
  r.fp32_f1 = macro_f1(confusion_from(test.labels, fp32, cfg.num_classes));
  r.int8_f1 = macro_f1(confusion_from(test.labels, int8, cfg.num_classes));
  r.delta_pct = (r.fp32_f1 - r.int8_f1) * 100.0;
  std::size_t agree = 0;
  for (std::size_t i = 0; i < fp32.size(); ++i) agree += fp32[i] == int8[i];
  r.agreement = fp32.empty() ? 1.0 : static_cast<double>(agree) / static_cast<double>(fp32.size());
  return r;
}

}  // namespace ubcl
