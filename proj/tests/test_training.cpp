#include <doctest.h>

#include <cmath>
#include <numbers>

#include "gradcheck.hpp"
#include "ubcl/datapipe.hpp"
#include "ubcl/evalkit.hpp"
#include "ubcl/training.hpp"

using namespace ubcl;

namespace {

DataSplits small_synthetic(std::uint64_t seed = 5) {
  SynthSpec spec;
  spec.channels = 3;
  spec.window_len = 32;
  spec.samples_per_class = 24;
  return prepare_synthetic(spec, seed);
}

ModelConfig config_for(const DataSplits& d) {
  ModelConfig c;
  c.channels = static_cast<int>(d.train.channels());
  c.window_len = static_cast<int>(d.train.window_len());
  c.num_classes = d.train.num_classes;
  return c;
}

}  // namespace

TEST_CASE("weighted cross-entropy examples") {
  const std::vector<double> unit = {1.0, 1.0};
  CHECK(weighted_cross_entropy<double>(std::vector<double>{0.5, 0.5}, 0, unit) ==
        doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(weighted_cross_entropy<double>(std::vector<double>{1.0, 0.0}, 0, unit) == 0.0);
  const std::vector<double> w = {1.0, 2.0, 1.0, 1.0};
  CHECK(weighted_cross_entropy<double>(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 1, w) ==
        doctest::Approx(2.772589).epsilon(1e-6));
  LossDiagnostics diag;
  const double clamped = weighted_cross_entropy<double>(std::vector<double>{1.0, 0.0}, 1, unit, &diag);
  CHECK(diag.clamped == 1);
  CHECK(clamped == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("inverse frequency weights") {
  const auto a = inverse_frequency_weights(std::vector<std::size_t>{50, 50});
  CHECK(a[0] == doctest::Approx(1.0));
  CHECK(a[1] == doctest::Approx(1.0));
  const auto b = inverse_frequency_weights(std::vector<std::size_t>{90, 10});
  CHECK(b[0] == doctest::Approx(0.5556).epsilon(1e-4));
  CHECK(b[1] == doctest::Approx(5.0));
  for (double v : inverse_frequency_weights(std::vector<std::size_t>{1, 1, 1, 1})) CHECK(v == 1.0);
  CHECK_THROWS(inverse_frequency_weights(std::vector<std::size_t>{4, 0}));
}

TEST_CASE("batch loss gradient is the softmax residual") {
  const TensorD probs({2, 2}, {0.7, 0.3, 0.2, 0.8});
  const std::vector<int> labels = {0, 0};
  const auto bl = batch_loss<double>(probs, labels, {});
  CHECK(bl.loss == doctest::Approx((-std::log(0.7) - std::log(0.2)) / 2));
  CHECK(bl.logit_grad(0, 0) == doctest::Approx((0.7 - 1.0) / 2));
  CHECK(bl.logit_grad(1, 1) == doctest::Approx(0.8 / 2));
}

TEST_CASE("zero loss gradient gives zero gradients") {
  const ModelConfig c = testing::tiny_config(Variant::kA0Base);
  Rng rng(1);
  const WeightsD w = build_model(c, rng).cast<double>();
  std::vector<TensorD> xs(2, TensorD({8, 2}, 0.3));
  xs[1](2, 1) = -1.0;
  const auto cache = forward_train<double>(c, w, xs, rng);
  const auto g = backward<double>(c, w, cache, TensorD({2, 2}));
  g.for_each([](const std::string&, const TensorD& t, bool) {
    for (double v : t.values()) CHECK(v == 0.0);
  });
}

TEST_CASE("conv1 weight gradient vanishes for an all-zero input with zero biases") {
  const ModelConfig c = testing::tiny_config(Variant::kA0Base);
  Rng rng(2);
  WeightsD w = build_model(c, rng).cast<double>();
  for (auto& b : w.conv[0].bias.values()) b = 0.0;
  std::vector<TensorD> xs(2, TensorD({8, 2}));
  const auto cache = forward_train<double>(c, w, xs, rng);
  const auto bl = batch_loss<double>(cache.probs, std::vector<int>{0, 1}, {});
  const auto g = backward<double>(c, w, cache, bl.logit_grad);
  for (double v : g.conv[0].weight.values()) CHECK(v == 0.0);
}

TEST_CASE("gradient check, one seed per variant") {
  for (Variant v : kAllVariants) {
    CAPTURE(variant_name(v));
    const auto r = testing::gradient_check(testing::tiny_config(v, 0.25), 3);
    CAPTURE(r.worst_name);
    CHECK(r.worst < 1e-4);
    CHECK(r.attempts < testing::kMaxGradCheckAttempts);
    Rng rng(0);
    std::size_t learnable = 0;
    build_model(testing::tiny_config(v), rng).for_each(
        [&](const std::string&, const TensorF&, bool l) { learnable += l; });
    CHECK(r.tensors.size() == learnable);
  }
}

TEST_CASE("AdamW step contract") {
  Rng rng(1);
  const WeightsF w0 = build_model(testing::tiny_config(Variant::kA0Base), rng);

  WeightsF w = w0;
  AdamMoments m = AdamMoments::zeros_like(w);
  adamw_step(w, w.zeros_like(), m, 1, {0.1, 0.0});
  CHECK(w == w0);

  w = w0;
  m = AdamMoments::zeros_like(w);
  WeightsF g = w.zeros_like();
  g.for_each([](const std::string&, TensorF& t, bool) { t.fill(1.0f); });
  adamw_step(w, g, m, 1, {0.1, 0.0});
  std::vector<const TensorF*> a, b;
  w.for_each([&](const std::string&, const TensorF& t, bool l) { if (l) a.push_back(&t); });
  w0.for_each([&](const std::string&, const TensorF& t, bool l) { if (l) b.push_back(&t); });
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i]->size(); ++j)
      CHECK((*b[i])[j] - (*a[i])[j] == doctest::Approx(0.1).epsilon(1e-5));

  w = w0;
  m = AdamMoments::zeros_like(w);
  adamw_step(w, w.zeros_like(), m, 1, {0.1, 0.01});
  for (std::size_t j = 0; j < w.head_weight.size(); ++j)
    CHECK(w.head_weight[j] == doctest::Approx(w0.head_weight[j] * (1.0 - 0.1 * 0.01)).epsilon(1e-6));
  // running statistics are not parameters
  CHECK(w.conv[0].running_var == w0.conv[0].running_var);

  w = w0;
  m = AdamMoments::zeros_like(w);
  Rng gr(4);
  g.for_each([&](const std::string&, TensorF& t, bool) {
    for (auto& v : t.values()) v = static_cast<float>(gr.normal());
  });
  adamw_step(w, g, m, 1, {0.0, 0.0});
  CHECK(w == w0);
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 100, 1e-3, 1e-5) == doctest::Approx(1e-3));
  CHECK(cosine_lr(100, 100, 1e-3, 1e-5) == doctest::Approx(1e-5));
  CHECK(cosine_lr(50, 100, 1e-3, 1e-5) == doctest::Approx((1e-3 + 1e-5) / 2));
  for (int e = 1; e <= 100; ++e) CHECK(cosine_lr(e, 100, 1e-3, 1e-5) <= cosine_lr(e - 1, 100, 1e-3, 1e-5));
}

TEST_CASE("train config validation") {
  TrainConfig t = TrainConfig::with_lr(1e-2);
  CHECK(t.lr_min == doctest::Approx(1e-4));
  t.patience = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.lr_min = 1.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("full-batch descent is monotone on the tiny config") {
  const ModelConfig c = testing::tiny_config(Variant::kA0Base);
  Rng rng(6);
  WeightsF w = build_model(c, rng);
  std::vector<TensorF> xs;
  std::vector<int> ys;
  for (int i = 0; i < 6; ++i) {
    TensorF x({8, 2});
    for (auto& v : x.values()) v = static_cast<float>(rng.normal());
    xs.push_back(x);
    ys.push_back(i % 2);
  }
  double prev = 1e300;
  for (int step = 1; step <= 20; ++step) {
    const auto cache = forward_train<float>(c, w, xs, rng);
    const auto bl = batch_loss<float>(cache.probs, ys, {});
    CHECK(bl.loss <= prev + 1e-7);
    prev = bl.loss;
    const auto g = backward<float>(c, w, cache, bl.logit_grad);
    // plain gradient descent: the learnable tensors move against the gradient
    std::vector<TensorF*> ps;
    std::vector<const TensorF*> gs;
    w.for_each([&](const std::string&, TensorF& t, bool l) { if (l) ps.push_back(&t); });
    g.for_each([&](const std::string&, const TensorF& t, bool l) { if (l) gs.push_back(&t); });
    for (std::size_t i = 0; i < ps.size(); ++i)
      for (std::size_t j = 0; j < ps[i]->size(); ++j) (*ps[i])[j] -= 1e-3f * (*gs[i])[j];
  }
}

TEST_CASE("fit stops after patience and returns the best epoch's weights") {
  const DataSplits d = small_synthetic();
  const ModelConfig c = config_for(d);
  TrainConfig t;
  t.max_epochs = 20;
  t.patience = 1;
  std::vector<WeightsF> snapshots;
  FitHooks hooks;
  hooks.val_metric = [&](int epoch, const WeightsF& w) {
    snapshots.push_back(w);
    return 1.0 - 0.1 * epoch;
  };
  Rng rng(1);
  const FitResult r = fit(c, t, d.train, d.val, rng, hooks);
  CHECK(r.history.size() == 2);
  CHECK(r.best_epoch == 1);
  CHECK(r.best_weights == snapshots[0]);

  const std::vector<double> metric = {0.2, 0.5, 0.4, 0.5, 0.3, 0.1};
  snapshots.clear();
  t.patience = 3;
  hooks.val_metric = [&](int epoch, const WeightsF& w) {
    snapshots.push_back(w);
    return metric[static_cast<std::size_t>(epoch - 1)];
  };
  Rng rng2(1);
  const FitResult r2 = fit(c, t, d.train, d.val, rng2, hooks);
  CHECK(r2.best_epoch == 2);
  CHECK(r2.history.size() == 5);
  CHECK(r2.best_weights == snapshots[1]);
  for (const auto& h : r2.history) CHECK(h.best_so_far <= 0.5);
}

TEST_CASE("fit is deterministic and learns the small synthetic task") {
  const DataSplits d = small_synthetic();
  const ModelConfig c = config_for(d);
  TrainConfig t;
  t.max_epochs = 8;
  Rng a(3), b(3);
  const FitResult r1 = fit(c, t, d.train, d.val, a);
  const FitResult r2 = fit(c, t, d.train, d.val, b);
  REQUIRE(r1.history.size() == r2.history.size());
  for (std::size_t i = 0; i < r1.history.size(); ++i) {
    CHECK(r1.history[i].train_loss == r2.history[i].train_loss);
    CHECK(r1.history[i].val_macro_f1 == r2.history[i].val_macro_f1);
  }
  CHECK(r1.best_weights == r2.best_weights);
  CHECK(r1.history.back().train_loss < r1.history.front().train_loss);
  const std::string jsonl = history_to_jsonl(r1.history);
  CHECK(jsonl.find("\"valMacroF1\"") != std::string::npos);
  CHECK(std::count(jsonl.begin(), jsonl.end(), '\n') == static_cast<long>(r1.history.size()));
}

TEST_CASE("fit rejects empty sets") {
  const DataSplits d = small_synthetic();
  Rng rng(1);
  CHECK_THROWS_AS(fit(config_for(d), TrainConfig{}, WindowedDataset{}, d.val, rng), DataError);
}

TEST_CASE("random search contract") {
  const DataSplits d = small_synthetic();
  const ModelConfig c = config_for(d);
  TrainConfig base;
  base.max_epochs = 50;
  const SearchSpace space;
  auto constant = [](const TrialResult&) { return 0.5; };
  const SearchResult one = random_search(c, base, space, 1, d.train, d.val, 1, constant);
  REQUIRE(one.trials.size() == 1);
  CHECK(one.best_trial == 0);
  CHECK(one.best.lr_max == one.trials[0].lr);

  const SearchResult many = random_search(c, base, space, 40, d.train, d.val, 2, constant);
  CHECK(many.best_trial == 0);
  for (const auto& t : many.trials) {
    CHECK(t.lr >= 1e-4);
    CHECK(t.lr <= 1e-2);
    CHECK(t.weight_decay >= 1e-5);
    CHECK(t.weight_decay <= 5e-2);
    CHECK(t.dropout >= 0.0);
    CHECK(t.dropout <= 0.5);
  }
  CHECK(many.best.max_epochs == 50);

  auto pick_three = [](const TrialResult& t) { return t.index == 3 ? 0.9 : 0.1; };
  const SearchResult r = random_search(c, base, space, 5, d.train, d.val, 1, pick_three);
  CHECK(r.best_trial == 3);
  CHECK(r.best.weight_decay == r.trials[3].weight_decay);
  CHECK(r.best.dropout == r.trials[3].dropout);
  CHECK(r.best.lr_min == doctest::Approx(r.trials[3].lr / 100));
}
