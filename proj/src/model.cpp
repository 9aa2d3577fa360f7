#include "ubcl/model.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace ubcl {

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::kA0Base: return "a0";
    case Variant::kA1NoPool: return "a1";
    case Variant::kA2UniDir: return "a2";
    case Variant::kA3SingleConv: return "a3";
    case Variant::kA4MeanPool: return "a4";
  }
  return "?";
}

std::string_view variant_label(Variant v) {
  switch (v) {
    case Variant::kA0Base: return "A0 (Base)";
    case Variant::kA1NoPool: return "A1 (No Pool)";
    case Variant::kA2UniDir: return "A2 (UniDir)";
    case Variant::kA3SingleConv: return "A3 (Single Conv)";
    case Variant::kA4MeanPool: return "A4 (Mean Pool)";
  }
  return "?";
}

Variant parse_variant(std::string_view text) {
  std::string s(text);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  for (auto v : kAllVariants) {
    if (s == variant_name(v)) return v;
  }
  throw ConfigError("unknown variant '" + std::string(text) + "' (expected a0..a4)");
}

int ModelConfig::pool_factor() const {
  if (!pools()) return 1;
  return num_conv_blocks() == 1 ? 2 : 4;
}

int ModelConfig::seq_len_at(int block) const {
  int len = window_len;
  for (int b = 0; b < block; ++b) {
    if (pools()) len /= 2;
  }
  return len;
}

bool ModelConfig::pooling_truncates() const {
  if (!pools()) return false;
  int len = window_len;
  for (int b = 0; b < num_conv_blocks(); ++b) {
    if (len % 2 != 0) return true;
    len /= 2;
  }
  return false;
}

void ModelConfig::validate() const {
  if (channels <= 0) throw ConfigError("channels must be positive");
  if (window_len <= 0) throw ConfigError("window length must be positive");
  if (num_classes < 2) throw ConfigError("need at least two classes");
  if (conv_filters <= 0) throw ConfigError("conv filters must be positive");
  if (kernel <= 0 || kernel % 2 == 0) throw ConfigError("kernel must be a positive odd integer");
  if (lstm_hidden <= 0) throw ConfigError("LSTM hidden size must be positive");
  if (kernel > window_len) throw ConfigError("kernel longer than window");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (lstm_steps() < 1) throw ConfigError("window too short for the pooling stages");
}

template <typename T>
std::size_t ModelWeights<T>::learnable_scalars() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor<T>& t, bool learnable) {
    if (learnable) n += t.size();
  });
  return n;
}

template <typename T>
std::size_t ModelWeights<T>::total_scalars() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor<T>& t, bool) { n += t.size(); });
  return n;
}

template <typename T>
ModelWeights<T> ModelWeights<T>::zeros_like() const {
  ModelWeights<T> out = *this;
  out.for_each([](const std::string&, Tensor<T>& t, bool) { t.fill(T{0}); });
  return out;
}

namespace {

template <typename T>
void fill_uniform(Tensor<T>& t, double bound, Rng& rng) {
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
}

}  // namespace

WeightsF build_model(const ModelConfig& config, Rng& rng) {
  config.validate();
  const auto F = static_cast<std::size_t>(config.conv_filters);
  const auto K = static_cast<std::size_t>(config.kernel);
  const auto H = static_cast<std::size_t>(config.lstm_hidden);
  const auto classes = static_cast<std::size_t>(config.num_classes);

  WeightsF w;
  std::size_t in = static_cast<std::size_t>(config.channels);
  for (int b = 0; b < config.num_conv_blocks(); ++b) {
    ConvBlock<float> blk{TensorF({F, in, K}), TensorF({F}), TensorF({F}, 1.0f), TensorF({F}),
                         TensorF({F}), TensorF({F}, 1.0f)};
    w.conv.push_back(std::move(blk));
    in = F;
  }
  for (int d = 0; d < config.directions(); ++d) {
    LstmDirection<float> dir{TensorF({4 * H, F}), TensorF({4 * H, H}), TensorF({4 * H}),
                             TensorF({4 * H})};
    for (std::size_t j = 0; j < H; ++j) {
      dir.b_ih[static_cast<std::size_t>(Gate::kForget) * H + j] = 1.0f;
    }
    w.lstm.push_back(std::move(dir));
  }
  w.head_weight = TensorF({classes, static_cast<std::size_t>(config.feature_dim())});
  w.head_bias = TensorF({classes});

  w.for_each([&](const std::string& name, TensorF& t, bool) {
    if (name.ends_with(".weight") || name.ends_with("w_ih") || name.ends_with("w_hh")) {
      const std::size_t fan_in = t.size() / t.dim(0);
      fill_uniform(t, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
    }
  });
  return w;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv1d_same(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 3 || weight.dim(1) != x.dim(1) ||
      bias.size() != weight.dim(0)) {
    throw ShapeError("conv channel mismatch: input " + shape_to_string(x.shape()) + ", weight " +
                     shape_to_string(weight.shape()));
  }
  const std::size_t L = x.dim(0), C = x.dim(1), F = weight.dim(0), K = weight.dim(2);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(K - 1) / 2;
  Tensor<T> out({L, F});
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t f = 0; f < F; ++f) {
      T acc = bias[f];
      for (std::size_t c = 0; c < C; ++c) {
        const T* wrow = weight.data() + (f * C + c) * K;
        for (std::size_t k = 0; k < K; ++k) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - pad;
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
          acc += wrow[k] * x(static_cast<std::size_t>(src), c);
        }
      }
      out(t, f) = acc;
    }
  }
  return out;
}

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x, std::vector<std::uint32_t>* argmax) {
  if (x.rank() != 2 || x.dim(0) < 2) {
    throw ShapeError("maxpool2 needs at least 2 timesteps, got " + shape_to_string(x.shape()));
  }
  const std::size_t L = x.dim(0) / 2, F = x.dim(1);
  Tensor<T> out({L, F});
  if (argmax) argmax->assign(L * F, 0);
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t f = 0; f < F; ++f) {
      const T a = x(2 * t, f), b = x(2 * t + 1, f);
      const bool first = a >= b;
      out(t, f) = first ? a : b;
      if (argmax) (*argmax)[t * F + f] = static_cast<std::uint32_t>(first ? 2 * t : 2 * t + 1);
    }
  }
  return out;
}

namespace {

/// In-place batch norm followed by ReLU with the given per-filter statistics.
template <typename T>
void normalize_relu(Tensor<T>& z, const ConvBlock<T>& block, std::span<const T> mean,
                    std::span<const T> var) {
  const std::size_t L = z.dim(0), F = z.dim(1);
  for (std::size_t f = 0; f < F; ++f) {
    const T inv = T{1} / std::sqrt(var[f] + static_cast<T>(kBatchNormEps));
    for (std::size_t t = 0; t < L; ++t) {
      const T y = block.gamma[f] * (z(t, f) - mean[f]) * inv + block.beta[f];
      z(t, f) = y > T{0} ? y : T{0};
    }
  }
}

template <typename T>
Tensor<T> conv_block_eval(const Tensor<T>& x, const ConvBlock<T>& block, bool pool) {
  Tensor<T> z = conv1d_same(x, block.weight, block.bias);
  normalize_relu<T>(z, block, block.running_mean.values(), block.running_var.values());
  return pool ? maxpool2(z) : z;
}

}  // namespace

template <typename T>
Tensor<T> conv_block_forward(const Tensor<T>& x, ConvBlock<T>& block, bool training, bool pool) {
  if (!training) return conv_block_eval(x, block, pool);
  Tensor<T> z = conv1d_same(x, block.weight, block.bias);
  const std::size_t L = z.dim(0), F = z.dim(1);
  std::vector<T> mean(F, T{0}), var(F, T{0});
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t f = 0; f < F; ++f) mean[f] += z(t, f);
  for (auto& m : mean) m /= static_cast<T>(L);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t f = 0; f < F; ++f) var[f] += (z(t, f) - mean[f]) * (z(t, f) - mean[f]);
  for (auto& v : var) v /= static_cast<T>(L);
  const T m = static_cast<T>(kBatchNormMomentum);
  const T unbias = L > 1 ? static_cast<T>(L) / static_cast<T>(L - 1) : T{1};
  for (std::size_t f = 0; f < F; ++f) {
    block.running_mean[f] = (T{1} - m) * block.running_mean[f] + m * mean[f];
    block.running_var[f] = (T{1} - m) * block.running_var[f] + m * var[f] * unbias;
  }
  normalize_relu<T>(z, block, mean, var);
  return pool ? maxpool2(z) : z;
}

template <typename T>
LstmState<T> lstm_cell(std::span<const T> x, const LstmState<T>& prev, const LstmDirection<T>& dir) {
  const std::size_t H = dir.w_hh.dim(1), in = dir.w_ih.dim(1);
  if (x.size() != in || prev.h.size() != H || prev.c.size() != H) {
    throw ShapeError("lstm_cell: input " + std::to_string(x.size()) + " / state " +
                     std::to_string(prev.h.size()) + " vs weights " +
                     shape_to_string(dir.w_ih.shape()));
  }
  std::vector<T> pre(4 * H);
  for (std::size_t r = 0; r < 4 * H; ++r) {
    T acc = dir.b_ih[r] + dir.b_hh[r];
    const T* wi = dir.w_ih.data() + r * in;
    for (std::size_t j = 0; j < in; ++j) acc += wi[j] * x[j];
    const T* wh = dir.w_hh.data() + r * H;
    for (std::size_t j = 0; j < H; ++j) acc += wh[j] * prev.h[j];
    pre[r] = acc;
  }
  LstmState<T> next{Tensor<T>({H}), Tensor<T>({H})};
  for (std::size_t j = 0; j < H; ++j) {
    const T i = sigmoid_scalar(pre[j]);
    const T f = sigmoid_scalar(pre[H + j]);
    const T g = std::tanh(pre[2 * H + j]);
    const T o = sigmoid_scalar(pre[3 * H + j]);
    next.c[j] = f * prev.c[j] + i * g;
    next.h[j] = o * std::tanh(next.c[j]);
  }
  return next;
}

namespace {

/// Scans one direction over `x`, writing hidden states into columns
/// [col, col+H) of `out` and, when given, the full trace.
template <typename T>
void run_direction(const Tensor<T>& x, const LstmDirection<T>& dir, bool reverse, Tensor<T>& out,
                   std::size_t col, LstmTrace<T>* trace) {
  const std::size_t steps = x.dim(0), in = x.dim(1), H = dir.w_hh.dim(1);
  if (dir.w_ih.dim(1) != in) {
    throw ShapeError("LSTM input width " + std::to_string(in) + " vs weight " +
                     shape_to_string(dir.w_ih.shape()));
  }
  if (trace) {
    trace->gates = Tensor<T>({steps, 4 * H});
    trace->cell = Tensor<T>({steps, H});
    trace->hidden = Tensor<T>({steps, H});
  }
  std::vector<T> h(H, T{0}), c(H, T{0}), pre(4 * H);
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t t = reverse ? steps - 1 - s : s;
    const T* xt = x.data() + t * in;
    for (std::size_t r = 0; r < 4 * H; ++r) {
      T acc = dir.b_ih[r] + dir.b_hh[r];
      const T* wi = dir.w_ih.data() + r * in;
      for (std::size_t j = 0; j < in; ++j) acc += wi[j] * xt[j];
      const T* wh = dir.w_hh.data() + r * H;
      for (std::size_t j = 0; j < H; ++j) acc += wh[j] * h[j];
      pre[r] = acc;
    }
    for (std::size_t j = 0; j < H; ++j) {
      const T i = sigmoid_scalar(pre[j]);
      const T f = sigmoid_scalar(pre[H + j]);
      const T g = std::tanh(pre[2 * H + j]);
      const T o = sigmoid_scalar(pre[3 * H + j]);
      c[j] = f * c[j] + i * g;
      h[j] = o * std::tanh(c[j]);
      out(t, col + j) = h[j];
      if (trace) {
        trace->gates(t, j) = i;
        trace->gates(t, H + j) = f;
        trace->gates(t, 2 * H + j) = g;
        trace->gates(t, 3 * H + j) = o;
        trace->cell(t, j) = c[j];
        trace->hidden(t, j) = h[j];
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> bilstm_forward(const Tensor<T>& x, std::span<const LstmDirection<T>> dirs) {
  if (dirs.empty()) throw std::invalid_argument("bilstm_forward: no directions");
  const std::size_t H = dirs[0].w_hh.dim(1);
  Tensor<T> out({x.dim(0), dirs.size() * H});
  for (std::size_t d = 0; d < dirs.size(); ++d) {
    run_direction(x, dirs[d], d == 1, out, d * H, static_cast<LstmTrace<T>*>(nullptr));
  }
  return out;
}

template <typename T>
Tensor<T> aggregate(const Tensor<T>& seq, bool mean) {
  if (seq.rank() != 2 || seq.dim(0) == 0) throw std::invalid_argument("aggregate: empty sequence");
  const std::size_t L = seq.dim(0), D = seq.dim(1);
  Tensor<T> out({D});
  if (!mean) {
    for (std::size_t j = 0; j < D; ++j) out[j] = seq(L - 1, j);
    return out;
  }
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t j = 0; j < D; ++j) out[j] += seq(t, j);
  for (std::size_t j = 0; j < D; ++j) out[j] /= static_cast<T>(L);
  return out;
}

template <typename T>
Tensor<T> softmax(std::span<const T> logits) {
  Tensor<T> out({logits.size()});
  T mx = logits[0];
  for (auto v : logits) mx = std::max(mx, v);
  T sum{0};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (auto& v : out.values()) v /= sum;
  return out;
}

template <typename T>
void check_window(const ModelConfig& config, const Tensor<T>& window) {
  if (window.rank() != 2 || window.dim(0) != static_cast<std::size_t>(config.window_len) ||
      window.dim(1) != static_cast<std::size_t>(config.channels)) {
    throw ShapeError("window shape " + shape_to_string(window.shape()) + " does not match [" +
                     std::to_string(config.window_len) + "x" + std::to_string(config.channels) +
                     "]");
  }
  for (auto v : window.values()) {
    if (!std::isfinite(v)) throw std::invalid_argument("window contains NaN or infinite values");
  }
}

namespace {

template <typename T>
Tensor<T> head_logits(const ModelWeights<T>& w, std::span<const T> features) {
  const std::size_t K = w.head_weight.dim(0), D = w.head_weight.dim(1);
  Tensor<T> logits({K});
  for (std::size_t k = 0; k < K; ++k) {
    T acc = w.head_bias[k];
    const T* row = w.head_weight.data() + k * D;
    for (std::size_t j = 0; j < D; ++j) acc += row[j] * features[j];
    logits[k] = acc;
  }
  return logits;
}

}  // namespace

template <typename T>
Tensor<T> model_logits(const ModelConfig& config, const ModelWeights<T>& weights,
                       const Tensor<T>& window) {
  check_window(config, window);
  Tensor<T> h = window;
  for (const auto& blk : weights.conv) h = conv_block_eval(h, blk, config.pools());
  const Tensor<T> seq = bilstm_forward<T>(h, weights.lstm);
  const Tensor<T> agg = aggregate(seq, config.mean_aggregation());
  return head_logits(weights, agg.values());
}

template <typename T>
Tensor<T> model_forward(const ModelConfig& config, const ModelWeights<T>& weights,
                        const Tensor<T>& window) {
  const Tensor<T> logits = model_logits(config, weights, window);
  return softmax<T>(logits.values());
}

template <typename T>
ForwardCache<T> forward_train(const ModelConfig& config, const ModelWeights<T>& weights,
                              std::span<const Tensor<T>> windows, Rng& rng) {
  if (windows.empty()) throw std::invalid_argument("forward_train: empty batch");
  for (const auto& w : windows) check_window(config, w);
  const std::size_t B = windows.size();
  const T eps = static_cast<T>(kBatchNormEps);

  ForwardCache<T> cache;
  cache.config = config;
  cache.batch = B;
  std::vector<Tensor<T>> current(windows.begin(), windows.end());

  for (const auto& blk : weights.conv) {
    ConvStageCache<T> sc;
    sc.input = current;
    std::vector<Tensor<T>> z(B);
    for (std::size_t b = 0; b < B; ++b) z[b] = conv1d_same(current[b], blk.weight, blk.bias);
    const std::size_t L = z[0].dim(0), F = z[0].dim(1);
    sc.count = B * L;
    sc.batch_mean.assign(F, T{0});
    sc.batch_var.assign(F, T{0});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < L; ++t)
        for (std::size_t f = 0; f < F; ++f) sc.batch_mean[f] += z[b](t, f);
    for (auto& m : sc.batch_mean) m /= static_cast<T>(sc.count);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < L; ++t)
        for (std::size_t f = 0; f < F; ++f) {
          const T d = z[b](t, f) - sc.batch_mean[f];
          sc.batch_var[f] += d * d;
        }
    for (auto& v : sc.batch_var) v /= static_cast<T>(sc.count);

    sc.xhat.resize(B);
    sc.activated.resize(B);
    sc.argmax.resize(B);
    for (std::size_t b = 0; b < B; ++b) {
      Tensor<T> xhat({L, F}), act({L, F});
      for (std::size_t f = 0; f < F; ++f) {
        const T inv = T{1} / std::sqrt(sc.batch_var[f] + eps);
        for (std::size_t t = 0; t < L; ++t) {
          const T xh = (z[b](t, f) - sc.batch_mean[f]) * inv;
          xhat(t, f) = xh;
          const T y = blk.gamma[f] * xh + blk.beta[f];
          act(t, f) = y > T{0} ? y : T{0};
        }
      }
      current[b] = config.pools() ? maxpool2(act, &sc.argmax[b]) : act;
      sc.xhat[b] = std::move(xhat);
      sc.activated[b] = std::move(act);
    }
    cache.conv.push_back(std::move(sc));
  }

  cache.lstm_input = current;
  const std::size_t H = static_cast<std::size_t>(config.lstm_hidden);
  const std::size_t D = weights.lstm.size() * H;
  cache.lstm.assign(weights.lstm.size(), std::vector<LstmTrace<T>>(B));
  cache.lstm_output.resize(B);
  for (std::size_t b = 0; b < B; ++b) {
    Tensor<T> out({current[b].dim(0), D});
    for (std::size_t d = 0; d < weights.lstm.size(); ++d) {
      run_direction(current[b], weights.lstm[d], d == 1, out, d * H, &cache.lstm[d][b]);
    }
    cache.lstm_output[b] = std::move(out);
  }

  const std::size_t classes = static_cast<std::size_t>(config.num_classes);
  cache.probs = Tensor<T>({B, classes});
  const double p = config.dropout;
  for (std::size_t b = 0; b < B; ++b) {
    Tensor<T> agg = aggregate(cache.lstm_output[b], config.mean_aggregation());
    Tensor<T> scale({D}, T{1});
    if (p > 0.0) {
      const T keep = static_cast<T>(1.0 / (1.0 - p));
      for (auto& s : scale.values()) s = rng.uniform() < 1.0 - p ? keep : T{0};
    }
    Tensor<T> dropped = mul(agg, scale);
    const Tensor<T> logits = head_logits<T>(weights, std::as_const(dropped).values());
    const Tensor<T> probs = softmax<T>(logits.values());
    for (std::size_t k = 0; k < classes; ++k) cache.probs(b, k) = probs[k];
    cache.aggregated.push_back(std::move(agg));
    cache.dropout_scale.push_back(std::move(scale));
    cache.head_input.push_back(std::move(dropped));
  }
  return cache;
}

template <typename T>
void commit_batch_norm_stats(ModelWeights<T>& weights, const ForwardCache<T>& cache,
                             double momentum) {
  const T m = static_cast<T>(momentum);
  for (std::size_t i = 0; i < weights.conv.size() && i < cache.conv.size(); ++i) {
    auto& blk = weights.conv[i];
    const auto& sc = cache.conv[i];
    const T unbias = sc.count > 1 ? static_cast<T>(sc.count) / static_cast<T>(sc.count - 1) : T{1};
    for (std::size_t f = 0; f < sc.batch_mean.size(); ++f) {
      blk.running_mean[f] = (T{1} - m) * blk.running_mean[f] + m * sc.batch_mean[f];
      blk.running_var[f] = (T{1} - m) * blk.running_var[f] + m * sc.batch_var[f] * unbias;
    }
  }
}

template <typename T>
ForwardCache<T> model_forward_train(const ModelConfig& config, ModelWeights<T>& weights,
                                    const Tensor<T>& window, Rng& rng) {
  ForwardCache<T> cache = forward_train<T>(config, weights, std::span<const Tensor<T>>(&window, 1), rng);
  commit_batch_norm_stats(weights, cache);
  return cache;
}

#define UBCL_INSTANTIATE_MODEL(T)                                                              \
  template struct ModelWeights<T>;                                                             \
  template Tensor<T> conv1d_same(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> maxpool2(const Tensor<T>&, std::vector<std::uint32_t>*);                  \
  template Tensor<T> conv_block_forward(const Tensor<T>&, ConvBlock<T>&, bool, bool);          \
  template LstmState<T> lstm_cell(std::span<const T>, const LstmState<T>&,                     \
                                  const LstmDirection<T>&);                                    \
  template Tensor<T> bilstm_forward(const Tensor<T>&, std::span<const LstmDirection<T>>);      \
  template Tensor<T> aggregate(const Tensor<T>&, bool);                                        \
  template Tensor<T> softmax(std::span<const T>);                                              \
  template void check_window(const ModelConfig&, const Tensor<T>&);                            \
  template Tensor<T> model_logits(const ModelConfig&, const ModelWeights<T>&, const Tensor<T>&); \
  template Tensor<T> model_forward(const ModelConfig&, const ModelWeights<T>&, const Tensor<T>&); \
  template ForwardCache<T> forward_train(const ModelConfig&, const ModelWeights<T>&,           \
                                         std::span<const Tensor<T>>, Rng&);                    \
  template void commit_batch_norm_stats(ModelWeights<T>&, const ForwardCache<T>&, double);     \
  template ForwardCache<T> model_forward_train(const ModelConfig&, ModelWeights<T>&,           \
                                               const Tensor<T>&, Rng&);

UBCL_INSTANTIATE_MODEL(float)
UBCL_INSTANTIATE_MODEL(double)

}  // namespace ubcl
