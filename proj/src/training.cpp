#include "ubcl/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include <nlohmann/json.hpp>

#include "ubcl/datapipe.hpp"
#include "ubcl/evalkit.hpp"
#include "ubcl/parallel.hpp"

namespace ubcl {

TrainConfig TrainConfig::with_lr(double lr_max) {
  TrainConfig t;
  t.lr_max = lr_max;
  t.lr_min = lr_max / 100.0;
  return t;
}

void TrainConfig::validate() const {
  if (max_epochs < 1) throw ConfigError("max epochs must be at least 1");
  if (patience < 1) throw ConfigError("patience must be at least 1");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (!(lr_min <= lr_max)) throw ConfigError("lr_min must not exceed lr_max");
  if (lr_min < 0.0) throw ConfigError("learning rate must be non-negative");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (num_seeds < 1) throw ConfigError("need at least one seed");
}

// --- Loss -------------------------------------------------------------------

template <typename T>
double weighted_cross_entropy(std::span<const T> probs, int label, std::span<const T> class_weights,
                              LossDiagnostics* diag) {
  if (label < 0 || static_cast<std::size_t>(label) >= probs.size()) {
    throw std::out_of_range("label " + std::to_string(label) + " outside class range");
  }
  double p = static_cast<double>(probs[static_cast<std::size_t>(label)]);
  if (p < kProbabilityFloor) {
    p = kProbabilityFloor;
    if (diag) ++diag->clamped;
  }
  const double w = class_weights.empty() ? 1.0 : static_cast<double>(class_weights[static_cast<std::size_t>(label)]);
  return -w * std::log(p);
}

std::vector<double> inverse_frequency_weights(std::span<const std::size_t> counts) {
  if (counts.empty()) throw std::invalid_argument("no classes");
  std::size_t total = 0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] == 0) {
      throw std::invalid_argument("class " + std::to_string(k) +
                                  " has no samples; drop or merge it before weighting");
    }
    total += counts[k];
  }
  std::vector<double> w(counts.size());
  for (std::size_t k = 0; k < counts.size(); ++k) {
    w[k] = static_cast<double>(total) /
           (static_cast<double>(counts.size()) * static_cast<double>(counts[k]));
  }
  return w;
}

template <typename T>
BatchLoss<T> batch_loss(const Tensor<T>& probs, std::span<const int> labels,
                        std::span<const T> class_weights, LossDiagnostics* diag) {
  const std::size_t B = probs.dim(0), K = probs.dim(1);
  if (labels.size() != B) throw ShapeError("batch_loss: labels/probs size mismatch");
  BatchLoss<T> out;
  out.logit_grad = Tensor<T>({B, K});
  for (std::size_t b = 0; b < B; ++b) {
    out.loss += weighted_cross_entropy<T>(probs.row(b), labels[b], class_weights, diag);
    const T w = class_weights.empty() ? T{1} : class_weights[static_cast<std::size_t>(labels[b])];
    const T scale = w / static_cast<T>(B);
    for (std::size_t k = 0; k < K; ++k) {
      const T target = static_cast<int>(k) == labels[b] ? T{1} : T{0};
      out.logit_grad(b, k) = scale * (probs(b, k) - target);
    }
  }
  out.loss /= static_cast<double>(B);
  return out;
}

// --- Backward ---------------------------------------------------------------

namespace {

/// Backpropagation through time for one direction of one sample.
/// `dseq` holds d(loss)/d(output) with this direction's hidden states in
/// columns [col, col+H). Accumulates into `g` and `dx`.
template <typename T>
void lstm_direction_backward(const Tensor<T>& x, const LstmTrace<T>& trace,
                             const LstmDirection<T>& w, const Tensor<T>& dseq, std::size_t col,
                             bool reverse, LstmDirection<T>& g, Tensor<T>& dx) {
  const std::size_t steps = x.dim(0), in = x.dim(1), H = w.w_hh.dim(1);
  std::vector<T> dh_next(H, T{0}), dc_next(H, T{0}), dh_rec(H), da(4 * H);
  std::vector<T> zeros(H, T{0});
  for (std::size_t s = steps; s-- > 0;) {
    const std::size_t t = reverse ? steps - 1 - s : s;
    const bool first = s == 0;
    const std::size_t tp = reverse ? t + 1 : t - 1;
    const T* h_prev = first ? zeros.data() : trace.hidden.data() + tp * H;
    const T* c_prev = first ? zeros.data() : trace.cell.data() + tp * H;
    for (std::size_t j = 0; j < H; ++j) {
      const T i = trace.gates(t, j);
      const T f = trace.gates(t, H + j);
      const T gg = trace.gates(t, 2 * H + j);
      const T o = trace.gates(t, 3 * H + j);
      const T tc = std::tanh(trace.cell(t, j));
      const T dh = dseq(t, col + j) + dh_next[j];
      const T d_o = dh * tc;
      const T dc = dc_next[j] + dh * o * (T{1} - tc * tc);
      da[j] = dc * gg * i * (T{1} - i);
      da[H + j] = dc * c_prev[j] * f * (T{1} - f);
      da[2 * H + j] = dc * i * (T{1} - gg * gg);
      da[3 * H + j] = d_o * o * (T{1} - o);
      dc_next[j] = dc * f;
    }
    std::fill(dh_rec.begin(), dh_rec.end(), T{0});
    const T* xt = x.data() + t * in;
    T* dxt = dx.data() + t * in;
    for (std::size_t r = 0; r < 4 * H; ++r) {
      const T a = da[r];
      g.b_ih[r] += a;
      g.b_hh[r] += a;
      T* gwi = g.w_ih.data() + r * in;
      const T* wi = w.w_ih.data() + r * in;
      for (std::size_t j = 0; j < in; ++j) {
        gwi[j] += a * xt[j];
        dxt[j] += wi[j] * a;
      }
      T* gwh = g.w_hh.data() + r * H;
      const T* wh = w.w_hh.data() + r * H;
      for (std::size_t j = 0; j < H; ++j) {
        gwh[j] += a * h_prev[j];
        dh_rec[j] += wh[j] * a;
      }
    }
    dh_next.swap(dh_rec);
  }
}

/// Gradient of a same-padded convolution. `dx` may be null.
template <typename T>
void conv1d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dz,
                     Tensor<T>& dweight, Tensor<T>& dbias, Tensor<T>* dx) {
  const std::size_t L = x.dim(0), C = x.dim(1), F = weight.dim(0), K = weight.dim(2);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(K - 1) / 2;
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t f = 0; f < F; ++f) {
      const T d = dz(t, f);
      dbias[f] += d;
      for (std::size_t c = 0; c < C; ++c) {
        T* dw = dweight.data() + (f * C + c) * K;
        const T* w = weight.data() + (f * C + c) * K;
        for (std::size_t k = 0; k < K; ++k) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - pad;
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
          const auto s = static_cast<std::size_t>(src);
          dw[k] += d * x(s, c);
          if (dx) (*dx)(s, c) += d * w[k];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Gradients<T> backward(const ModelConfig& config, const ModelWeights<T>& weights,
                      const ForwardCache<T>& cache, const Tensor<T>& logit_grad) {
  if (!(cache.config == config) || cache.conv.size() != weights.conv.size() ||
      cache.lstm.size() != weights.lstm.size()) {
    throw std::invalid_argument("backward: cache does not belong to these weights/config");
  }
  const std::size_t B = cache.batch;
  const std::size_t K = static_cast<std::size_t>(config.num_classes);
  if (logit_grad.rank() != 2 || logit_grad.dim(0) != B || logit_grad.dim(1) != K) {
    throw ShapeError("backward: logit gradient " + shape_to_string(logit_grad.shape()) +
                     " vs batch " + std::to_string(B) + "x" + std::to_string(K));
  }
  const std::size_t H = static_cast<std::size_t>(config.lstm_hidden);
  const std::size_t D = weights.lstm.size() * H;
  Gradients<T> g = weights.zeros_like();

  // Head, dropout and aggregation.
  std::vector<Tensor<T>> dseq(B);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t steps = cache.lstm_output[b].dim(0);
    Tensor<T> dagg({D});
    for (std::size_t k = 0; k < K; ++k) {
      const T dl = logit_grad(b, k);
      g.head_bias[k] += dl;
      for (std::size_t j = 0; j < D; ++j) {
        g.head_weight(k, j) += dl * cache.head_input[b][j];
        dagg[j] += weights.head_weight(k, j) * dl;
      }
    }
    for (std::size_t j = 0; j < D; ++j) dagg[j] *= cache.dropout_scale[b][j];
    Tensor<T> d({steps, D});
    if (config.mean_aggregation()) {
      const T inv = T{1} / static_cast<T>(steps);
      for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t j = 0; j < D; ++j) d(t, j) = dagg[j] * inv;
    } else {
      for (std::size_t j = 0; j < D; ++j) d(steps - 1, j) = dagg[j];
    }
    dseq[b] = std::move(d);
  }

  // Recurrent layer.
  std::vector<Tensor<T>> dcur(B);
  for (std::size_t b = 0; b < B; ++b) {
    dcur[b] = Tensor<T>(cache.lstm_input[b].shape());
    for (std::size_t dir = 0; dir < weights.lstm.size(); ++dir) {
      lstm_direction_backward(cache.lstm_input[b], cache.lstm[dir][b], weights.lstm[dir], dseq[b],
                              dir * H, dir == 1, g.lstm[dir], dcur[b]);
    }
  }

  // Conv blocks, last to first.
  for (std::size_t i = weights.conv.size(); i-- > 0;) {
    const auto& sc = cache.conv[i];
    const auto& blk = weights.conv[i];
    auto& gb = g.conv[i];
    const std::size_t L = sc.activated[0].dim(0), F = sc.activated[0].dim(1);
    const T N = static_cast<T>(sc.count);

    std::vector<Tensor<T>> dy(B);
    for (std::size_t b = 0; b < B; ++b) {
      Tensor<T> d({L, F});
      if (config.pools()) {
        const std::size_t Lp = dcur[b].dim(0);
        for (std::size_t t = 0; t < Lp; ++t)
          for (std::size_t f = 0; f < F; ++f) d(sc.argmax[b][t * F + f], f) += dcur[b](t, f);
      } else {
        d = dcur[b];
      }
      for (std::size_t k = 0; k < d.size(); ++k) {
        if (!(sc.activated[b][k] > T{0})) d[k] = T{0};
      }
      dy[b] = std::move(d);
    }

    // Batch-norm with batch statistics over all (sample, timestep) pairs.
    std::vector<T> sum_dxhat(F, T{0}), sum_dxhat_xhat(F, T{0});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < L; ++t)
        for (std::size_t f = 0; f < F; ++f) {
          const T d = dy[b](t, f);
          const T xh = sc.xhat[b](t, f);
          gb.gamma[f] += d * xh;
          gb.beta[f] += d;
          const T dxh = d * blk.gamma[f];
          sum_dxhat[f] += dxh;
          sum_dxhat_xhat[f] += dxh * xh;
        }
    for (std::size_t b = 0; b < B; ++b) {
      Tensor<T> dz({L, F});
      for (std::size_t f = 0; f < F; ++f) {
        const T inv = T{1} / std::sqrt(sc.batch_var[f] + static_cast<T>(kBatchNormEps));
        for (std::size_t t = 0; t < L; ++t) {
          const T dxh = dy[b](t, f) * blk.gamma[f];
          dz(t, f) = inv / N * (N * dxh - sum_dxhat[f] - sc.xhat[b](t, f) * sum_dxhat_xhat[f]);
        }
      }
      if (i > 0) {
        Tensor<T> dx(sc.input[b].shape());
        conv1d_backward(sc.input[b], blk.weight, dz, gb.weight, gb.bias, &dx);
        dcur[b] = std::move(dx);
      } else {
        conv1d_backward<T>(sc.input[b], blk.weight, dz, gb.weight, gb.bias, nullptr);
      }
    }
  }
  return g;
}

// --- Optimizer --------------------------------------------------------------

AdamMoments AdamMoments::zeros_like(const WeightsF& w) { return {w.zeros_like(), w.zeros_like()}; }

void adamw_step(WeightsF& weights, const WeightsF& grads, AdamMoments& moments, long step,
                const AdamWParams& p) {
  if (step < 1) throw std::invalid_argument("adamw_step: step counts from 1");
  std::vector<TensorF*> w, m, v;
  std::vector<const TensorF*> g;
  std::vector<bool> learn;
  weights.for_each([&](const std::string&, TensorF& t, bool l) {
    w.push_back(&t);
    learn.push_back(l);
  });
  grads.for_each([&](const std::string&, const TensorF& t, bool) { g.push_back(&t); });
  moments.m.for_each([&](const std::string&, TensorF& t, bool) { m.push_back(&t); });
  moments.v.for_each([&](const std::string&, TensorF& t, bool) { v.push_back(&t); });
  if (g.size() != w.size() || m.size() != w.size() || v.size() != w.size()) {
    throw std::invalid_argument("adamw_step: gradient layout does not match weights");
  }
  const double bc1 = 1.0 - std::pow(p.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(p.beta2, static_cast<double>(step));
  const float decay = static_cast<float>(1.0 - p.lr * p.weight_decay);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!learn[i]) continue;
    auto& wt = *w[i];
    const auto& gt = *g[i];
    auto& mt = *m[i];
    auto& vt = *v[i];
    for (std::size_t k = 0; k < wt.size(); ++k) {
      const double gk = gt[k];
      mt[k] = static_cast<float>(p.beta1 * mt[k] + (1.0 - p.beta1) * gk);
      vt[k] = static_cast<float>(p.beta2 * vt[k] + (1.0 - p.beta2) * gk * gk);
      const double mhat = mt[k] / bc1;
      const double vhat = vt[k] / bc2;
      if (p.weight_decay != 0.0) wt[k] *= decay;
      wt[k] -= static_cast<float>(p.lr * mhat / (std::sqrt(vhat) + p.eps));
    }
  }
}

double cosine_lr(int epoch, int total_epochs, double lr_max, double lr_min) {
  if (total_epochs <= 0) return lr_max;
  const double frac = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

// --- Fit --------------------------------------------------------------------

FitResult fit(const ModelConfig& config, const TrainConfig& train, const WindowedDataset& train_set,
              const WindowedDataset& val_set, Rng& rng, const FitHooks& hooks) {
  train.validate();
  if (train_set.empty()) throw DataError("training set is empty");
  if (val_set.empty() && !hooks.val_metric) throw DataError("validation set is empty");
  ModelConfig cfg = config;
  cfg.dropout = train.dropout;
  cfg.validate();

  WeightsF weights = build_model(cfg, rng);
  AdamMoments moments = AdamMoments::zeros_like(weights);
  std::vector<float> class_weights;
  if (train.class_weighting) {
    const auto counts = train_set.class_counts();
    for (double w : inverse_frequency_weights(counts)) class_weights.push_back(static_cast<float>(w));
  }

  FitResult result;
  result.best_weights = weights;
  result.best_val_f1 = -std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch = static_cast<std::size_t>(train.batch_size);
  long step = 0;
  int since_best = 0;

  std::vector<TensorF> xb;
  std::vector<int> yb;
  for (int epoch = 1; epoch <= train.max_epochs; ++epoch) {
    const double lr = cosine_lr(epoch - 1, train.max_epochs, train.lr_max, train.lr_min);
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      xb.clear();
      yb.clear();
      for (std::size_t k = start; k < end; ++k) {
        xb.push_back(train_set.windows[order[k]]);
        yb.push_back(train_set.labels[order[k]]);
      }
      ForwardCache<float> cache = forward_train<float>(cfg, weights, xb, rng);
      const BatchLoss<float> bl = batch_loss<float>(cache.probs, yb, class_weights);
      const WeightsF grads = backward(cfg, weights, cache, bl.logit_grad);
      adamw_step(weights, grads, moments, ++step, {lr, train.weight_decay});
      commit_batch_norm_stats(weights, cache);
      loss_sum += bl.loss * static_cast<double>(end - start);
    }

    const double val = hooks.val_metric ? hooks.val_metric(epoch, weights)
                                        : macro_f1(evaluate(cfg, weights, val_set));
    if (val > result.best_val_f1) {
      result.best_val_f1 = val;
      result.best_weights = weights;
      result.best_epoch = epoch;
      since_best = 0;
    } else {
      ++since_best;
    }
    result.history.push_back({epoch, lr, loss_sum / static_cast<double>(order.size()), val,
                              result.best_val_f1});
    if (since_best >= train.patience) break;
  }
  return result;
}

std::string history_to_jsonl(const std::vector<EpochRecord>& history) {
  std::string out;
  for (const auto& r : history) {
    nlohmann::json j = {{"epoch", r.epoch},
                        {"lr", r.lr},
                        {"trainLoss", r.train_loss},
                        {"valMacroF1", r.val_macro_f1},
                        {"bestSoFar", r.best_so_far}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

// --- Random search ----------------------------------------------------------

namespace {
constexpr std::uint64_t kSearchStream = 0x5EA4C8;
}

SearchResult random_search(const ModelConfig& config, const TrainConfig& base,
                           const SearchSpace& space, int trials, const WindowedDataset& train_set,
                           const WindowedDataset& val_set, int jobs,
                           std::function<double(const TrialResult&)> evaluate) {
  if (trials < 1) throw ConfigError("random search needs at least one trial");
  Rng sampler = rng_derive(base.master_seed, kSearchStream);
  SearchResult result;
  for (int i = 0; i < trials; ++i) {
    TrialResult t;
    t.index = i;
    t.lr = std::exp(sampler.uniform(std::log(space.lr_lo), std::log(space.lr_hi)));
    t.weight_decay = std::exp(sampler.uniform(std::log(space.wd_lo), std::log(space.wd_hi)));
    t.dropout = sampler.uniform(space.dropout_lo, space.dropout_hi);
    result.trials.push_back(t);
  }

  auto trial_config = [&](const TrialResult& t, bool search_budget) {
    TrainConfig tc = base;
    tc.lr_max = t.lr;
    tc.lr_min = t.lr / 100.0;
    tc.weight_decay = t.weight_decay;
    tc.dropout = t.dropout;
    if (search_budget) {
      tc.max_epochs = kSearchEpochs;
      tc.patience = kSearchPatience;
    }
    return tc;
  };

  parallel_for(result.trials.size(), jobs, [&](std::size_t i) {
    auto& t = result.trials[i];
    if (evaluate) {
      t.val_macro_f1 = evaluate(t);
      return;
    }
    Rng rng = rng_derive(base.master_seed, static_cast<std::uint64_t>(i));
    t.val_macro_f1 = fit(config, trial_config(t, true), train_set, val_set, rng).best_val_f1;
  });

  result.best_trial = 0;
  for (std::size_t i = 1; i < result.trials.size(); ++i) {
    if (result.trials[i].val_macro_f1 > result.trials[result.best_trial].val_macro_f1) {
      result.best_trial = static_cast<int>(i);
    }
  }
  result.best = trial_config(result.trials[result.best_trial], false);
  return result;
}

#define UBCL_INSTANTIATE_TRAINING(T)                                                          \
  template double weighted_cross_entropy(std::span<const T>, int, std::span<const T>,       \
                                         LossDiagnostics*);                                 \
  template BatchLoss<T> batch_loss(const Tensor<T>&, std::span<const int>, std::span<const T>, \
                                   LossDiagnostics*);                                       \
  template Gradients<T> backward(const ModelConfig&, const ModelWeights<T>&,                \
                                 const ForwardCache<T>&, const Tensor<T>&);

UBCL_INSTANTIATE_TRAINING(float)
UBCL_INSTANTIATE_TRAINING(double)

}  // namespace ubcl
