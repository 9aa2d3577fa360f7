#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ubcl/rng.hpp"
#include "ubcl/tensor.hpp"

namespace ubcl {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Architecture variants used in the ablation study.
enum class Variant {
  kA0Base,        // two conv blocks, 4x pooling, BiLSTM, last-step aggregation
  kA1NoPool,      // pooling removed
  kA2UniDir,      // forward LSTM only
  kA3SingleConv,  // second conv block removed
  kA4MeanPool,    // mean over time instead of last step
};

inline constexpr std::array<Variant, 5> kAllVariants = {
    Variant::kA0Base, Variant::kA1NoPool, Variant::kA2UniDir, Variant::kA3SingleConv,
    Variant::kA4MeanPool};

std::string_view variant_name(Variant v);   // "a0" .. "a4"
std::string_view variant_label(Variant v);  // "A0 (Base)" ..
Variant parse_variant(std::string_view text);

struct ModelConfig {
  int channels = 0;
  int window_len = 0;
  int num_classes = 0;
  int conv_filters = 16;
  int kernel = 5;
  int lstm_hidden = 24;
  double dropout = 0.0;
  Variant variant = Variant::kA0Base;

  int num_conv_blocks() const { return variant == Variant::kA3SingleConv ? 1 : 2; }
  bool pools() const { return variant != Variant::kA1NoPool; }
  int directions() const { return variant == Variant::kA2UniDir ? 1 : 2; }
  bool mean_aggregation() const { return variant == Variant::kA4MeanPool; }
  int pool_factor() const;
  /// Sequence length entering conv block `block` (0-based); block == num_conv_blocks()
  /// gives the LSTM sequence length. Odd lengths floor-divide at each pool.
  int seq_len_at(int block) const;
  int lstm_steps() const { return seq_len_at(num_conv_blocks()); }
  int feature_dim() const { return directions() * lstm_hidden; }
  /// True when some pooling stage drops a trailing odd timestep.
  bool pooling_truncates() const;

  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct ConvBlock {
  Tensor<T> weight;  // [F x C_in x K]
  Tensor<T> bias;    // [F]
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

/// Gate rows inside the 4H axis are ordered (input, forget, cell, output).
template <typename T>
struct LstmDirection {
  Tensor<T> w_ih;  // [4H x F_in]
  Tensor<T> w_hh;  // [4H x H]
  Tensor<T> b_ih;  // [4H]
  Tensor<T> b_hh;  // [4H]
};

enum class Gate : std::size_t { kInput = 0, kForget = 1, kCell = 2, kOutput = 3 };

/// Every learnable tensor of the network plus batch-norm running statistics.
///
/// for_each() visits tensors in the canonical order shared by serialization,
/// initialization, gradient checks and the optimizer.
template <typename T>
struct ModelWeights {
  std::vector<ConvBlock<T>> conv;       // 1 (A3) or 2 blocks
  std::vector<LstmDirection<T>> lstm;   // fwd, then bwd when bidirectional
  Tensor<T> head_weight;                // [classes x D]
  Tensor<T> head_bias;                  // [classes]

  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn) {
    for (std::size_t b = 0; b < self.conv.size(); ++b) {
      const std::string c = "conv" + std::to_string(b + 1);
      const std::string n = "bn" + std::to_string(b + 1);
      auto& blk = self.conv[b];
      fn(c + ".weight", blk.weight, true);
      fn(c + ".bias", blk.bias, true);
      fn(n + ".gamma", blk.gamma, true);
      fn(n + ".beta", blk.beta, true);
      fn(n + ".running_mean", blk.running_mean, false);
      fn(n + ".running_var", blk.running_var, false);
    }
    for (std::size_t d = 0; d < self.lstm.size(); ++d) {
      const std::string p = d == 0 ? "lstm.fwd." : "lstm.bwd.";
      auto& dir = self.lstm[d];
      fn(p + "w_ih", dir.w_ih, true);
      fn(p + "w_hh", dir.w_hh, true);
      fn(p + "b_ih", dir.b_ih, true);
      fn(p + "b_hh", dir.b_hh, true);
    }
    fn(std::string("head.weight"), self.head_weight, true);
    fn(std::string("head.bias"), self.head_bias, true);
  }

  /// fn(const std::string& name, Tensor<T>& tensor, bool learnable)
  template <typename Fn>
  void for_each(Fn&& fn) { visit(*this, std::forward<Fn>(fn)); }
  template <typename Fn>
  void for_each(Fn&& fn) const { visit(*this, std::forward<Fn>(fn)); }

  std::size_t learnable_scalars() const;
  std::size_t total_scalars() const;

  template <typename U>
  ModelWeights<U> cast() const {
    ModelWeights<U> out;
    for (const auto& b : conv) {
      out.conv.push_back({b.weight.template cast<U>(), b.bias.template cast<U>(),
                          b.gamma.template cast<U>(), b.beta.template cast<U>(),
                          b.running_mean.template cast<U>(), b.running_var.template cast<U>()});
    }
    for (const auto& d : lstm) {
      out.lstm.push_back({d.w_ih.template cast<U>(), d.w_hh.template cast<U>(),
                          d.b_ih.template cast<U>(), d.b_hh.template cast<U>()});
    }
    out.head_weight = head_weight.template cast<U>();
    out.head_bias = head_bias.template cast<U>();
    return out;
  }

  /// Same layout with every value zero.
  ModelWeights zeros_like() const;

  friend bool operator==(const ModelWeights& a, const ModelWeights& b) {
    bool eq = a.conv.size() == b.conv.size() && a.lstm.size() == b.lstm.size();
    if (!eq) return false;
    std::vector<const Tensor<T>*> lhs, rhs;
    a.for_each([&](const std::string&, const Tensor<T>& t, bool) { lhs.push_back(&t); });
    b.for_each([&](const std::string&, const Tensor<T>& t, bool) { rhs.push_back(&t); });
    for (std::size_t i = 0; i < lhs.size(); ++i) {
      if (!(*lhs[i] == *rhs[i])) return false;
    }
    return true;
  }
};

using WeightsF = ModelWeights<float>;
using WeightsD = ModelWeights<double>;

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Initializes weights for `config`.
///
/// Conv and linear weights draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) in
/// canonical tensor order. The forget-gate slice of b_ih starts at 1.0 so the
/// effective forget bias (b_ih + b_hh) is 1.0; all other biases are zero.
WeightsF build_model(const ModelConfig& config, Rng& rng);

// ---------------------------------------------------------------------------
// Layer primitives. Sequences are [time x features].

/// Same-padded 1-D convolution with symmetric zero padding (K-1)/2.
template <typename T>
Tensor<T> conv1d_same(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Non-overlapping max over pairs of timesteps; an odd trailing step is dropped.
/// When `argmax` is non-null it receives the source timestep of every output.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x, std::vector<std::uint32_t>* argmax = nullptr);

/// conv -> batch norm -> ReLU -> optional pool for a single sequence.
/// In training mode the sequence's own statistics normalize it and the block's
/// running statistics are updated with momentum 0.1.
template <typename T>
Tensor<T> conv_block_forward(const Tensor<T>& x, ConvBlock<T>& block, bool training, bool pool);

template <typename T>
struct LstmState {
  Tensor<T> h;
  Tensor<T> c;
};

template <typename T>
LstmState<T> lstm_cell(std::span<const T> x, const LstmState<T>& prev, const LstmDirection<T>& dir);

/// Runs every direction from zero state. Output row t is concat(h_fwd[t], h_bwd[t]).
template <typename T>
Tensor<T> bilstm_forward(const Tensor<T>& x, std::span<const LstmDirection<T>> dirs);

/// Last row, or the per-column mean when `mean` is set.
template <typename T>
Tensor<T> aggregate(const Tensor<T>& seq, bool mean);

template <typename T>
Tensor<T> aggregate(const Tensor<T>& seq, Variant variant) {
  return aggregate(seq, variant == Variant::kA4MeanPool);
}

template <typename T>
Tensor<T> softmax(std::span<const T> logits);

// ---------------------------------------------------------------------------
// Whole-model forward.

/// Eval-mode forward for one window [T x C]; returns class probabilities.
/// Pure: weights are not modified and no randomness is consumed.
template <typename T>
Tensor<T> model_forward(const ModelConfig& config, const ModelWeights<T>& weights,
                        const Tensor<T>& window);

/// Eval-mode logits (pre-softmax) for one window.
template <typename T>
Tensor<T> model_logits(const ModelConfig& config, const ModelWeights<T>& weights,
                       const Tensor<T>& window);

template <typename T>
struct ConvStageCache {
  std::vector<Tensor<T>> input;      // [L x C_in] per sample
  std::vector<Tensor<T>> xhat;       // normalized conv output [L x F]
  std::vector<Tensor<T>> activated;  // after ReLU [L x F]
  std::vector<std::vector<std::uint32_t>> argmax;
  std::vector<T> batch_mean;  // per filter
  std::vector<T> batch_var;   // biased, per filter
  std::size_t count = 0;      // batch * L
};

/// Per-sample trace of one LSTM direction, indexed by absolute timestep.
template <typename T>
struct LstmTrace {
  Tensor<T> gates;   // [T' x 4H], activated (i, f, g, o)
  Tensor<T> cell;    // [T' x H]
  Tensor<T> hidden;  // [T' x H]
};

/// Activations recorded by a training-mode forward, consumed by backward().
template <typename T>
struct ForwardCache {
  ModelConfig config;
  std::size_t batch = 0;
  std::vector<ConvStageCache<T>> conv;
  std::vector<Tensor<T>> lstm_input;                // [T' x F] per sample
  std::vector<std::vector<LstmTrace<T>>> lstm;      // [direction][sample]
  std::vector<Tensor<T>> lstm_output;               // [T' x D] per sample
  std::vector<Tensor<T>> aggregated;                // [D]
  std::vector<Tensor<T>> dropout_scale;             // 0 or 1/(1-p), [D]
  std::vector<Tensor<T>> head_input;                // aggregated * dropout_scale
  Tensor<T> probs;                                  // [B x classes]
};

/// Training-mode forward over a mini-batch. Batch norm uses statistics over
/// every (sample, timestep) pair; dropout masks come from `rng`. Weights are
/// not touched; call commit_batch_norm_stats() to update running statistics.
template <typename T>
ForwardCache<T> forward_train(const ModelConfig& config, const ModelWeights<T>& weights,
                              std::span<const Tensor<T>> windows, Rng& rng);

template <typename T>
void commit_batch_norm_stats(ModelWeights<T>& weights, const ForwardCache<T>& cache,
                             double momentum = kBatchNormMomentum);

/// Single-window training-mode forward: returns the cache (probabilities in
/// cache.probs) and updates the running statistics in `weights`.
template <typename T>
ForwardCache<T> model_forward_train(const ModelConfig& config, ModelWeights<T>& weights,
                                    const Tensor<T>& window, Rng& rng);

/// Throws ShapeError/invalid_argument on wrong window shape or non-finite input.
template <typename T>
void check_window(const ModelConfig& config, const Tensor<T>& window);

}  // namespace ubcl
