#include <doctest.h>

#include <cmath>

#include "ubcl/quantization.hpp"
#include "ubcl/rng.hpp"

using namespace ubcl;

namespace {

ModelConfig small_config(Variant v = Variant::kA0Base) {
  ModelConfig c;
  c.channels = 3;
  c.window_len = 32;
  c.num_classes = 4;
  c.variant = v;
  return c;
}

// Non-trivial batch-norm state so that folding has something to fold.
WeightsF randomized_model(const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  WeightsF w = build_model(c, rng);
  for (auto& blk : w.conv) {
    for (auto& v : blk.gamma.values()) v = static_cast<float>(rng.uniform(0.5, 1.5));
    for (auto& v : blk.beta.values()) v = static_cast<float>(rng.uniform(-0.3, 0.3));
    for (auto& v : blk.running_mean.values()) v = static_cast<float>(rng.uniform(-0.2, 0.2));
    for (auto& v : blk.running_var.values()) v = static_cast<float>(rng.uniform(0.5, 2.0));
  }
  return w;
}

WindowedDataset small_set(std::uint64_t seed, std::size_t n = 20) {
  Rng rng(seed);
  WindowedDataset d;
  for (std::size_t i = 0; i < n; ++i) {
    TensorF w({32, 3});
    for (auto& v : w.values()) v = static_cast<float>(rng.normal());
    d.push(std::move(w), static_cast<int>(i % 4), "S" + std::to_string(i % 2));
  }
  d.num_classes = 4;
  return d;
}

}  // namespace

TEST_CASE("symmetric weight parameters") {
  const std::vector<float> v = {-1.0f, 0.25f, 1.0f};
  const QuantParams p = symmetric_params(v);
  CHECK(p.scale == doctest::Approx(1.0 / 127));
  CHECK(p.zero_point == 0);
  CHECK(quantize_value(1.0, p) == 127);
  CHECK(quantize_value(-1.0, p) == -127);
  CHECK(quantize_value(5.0, p) == 127);
  const std::vector<float> zeros(8, 0.0f);
  const QuantParams z = symmetric_params(zeros);
  CHECK(z.scale == kMinQuantScale);
  CHECK(quantize_value(0.0, z) == 0);
}

TEST_CASE("affine activation parameters") {
  const QuantParams p = affine_params(-1.0, 3.0);
  CHECK(p.scale == doctest::Approx(4.0 / 255));
  CHECK(std::abs(dequantize_value(quantize_value(0.0, p), p)) <= p.scale / 2);
  CHECK(quantize_value(-1.0, p) == -128);
  CHECK(quantize_value(3.0, p) == 127);
  // range widened to include zero
  const QuantParams q = affine_params(2.0, 5.0);
  CHECK(q.scale == doctest::Approx(5.0 / 255));
  CHECK(quantize_value(0.0, q) == -128);
}

TEST_CASE("round trip error within half a step, and idempotence") {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    TensorF t({64});
    const double spread = rng.uniform(0.01, 10.0);
    for (auto& v : t.values()) v = static_cast<float>(rng.uniform(-spread, spread));
    const QuantParams p = symmetric_params(t.values());
    const TensorF once = dequantize_tensor(quantize_tensor(t, p), p);
    for (std::size_t i = 0; i < t.size(); ++i) {
      CHECK(std::abs(once.values()[i] - t.values()[i]) <= p.scale / 2 * (1 + 1e-5));
    }
    const TensorF twice = dequantize_tensor(quantize_tensor(once, p), p);
    CHECK(twice == once);
  }
}

TEST_CASE("scale grows with the range") {
  double prev = 0;
  for (double r : {0.1, 0.5, 1.0, 4.0, 100.0}) {
    const std::vector<float> v = {static_cast<float>(-r), static_cast<float>(r / 3)};
    const double s = symmetric_params(v).scale;
    CHECK(s > prev);
    prev = s;
    CHECK(affine_params(-r, r).scale > affine_params(-r / 2, r / 2).scale);
  }
}

TEST_CASE("batch-norm folding preserves eval outputs") {
  for (Variant v : kAllVariants) {
    const ModelConfig c = small_config(v);
    const WeightsF w = randomized_model(c, 4);
    const WeightsF folded = fold_batch_norm(w);
    for (const auto& blk : folded.conv) {
      for (float g : blk.gamma.values()) CHECK(g == 1.0f);
      for (float m : blk.running_mean.values()) CHECK(m == 0.0f);
    }
    const WindowedDataset d = small_set(5, 5);
    for (const auto& x : d.windows) {
      const TensorF a = model_forward(c, w, x), b = model_forward(c, folded, x);
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.values()[i] - b.values()[i]) <= 1e-4);
    }
  }
}

TEST_CASE("calibration ranges contain zero and grow with the data") {
  const ModelConfig c = small_config();
  const WeightsF w = randomized_model(c, 6);
  const WindowedDataset d = small_set(7);
  const ActivationRanges r = calibrate(w, c, d);
  for (const char* key : {"input", "conv1.out", "conv2.out", "lstm.h", "aggregate"}) {
    REQUIRE(r.count(key) == 1);
    CHECK(r.at(key).lo <= 0.0);
    CHECK(r.at(key).hi >= 0.0);
  }
  CHECK(r.at("conv1.out").lo == 0.0);  // after ReLU
  CHECK(r.at("lstm.h").hi <= 1.0);
  // a superset of windows never shrinks a range
  WindowedDataset more = d;
  const WindowedDataset extra = small_set(8, 10);
  for (std::size_t i = 0; i < extra.size(); ++i) {
    TensorF big = extra.windows[i];
    for (auto& v : big.values()) v *= 3.0f;
    more.push(big, extra.labels[i], extra.subjects[i]);
  }
  const ActivationRanges r2 = calibrate(w, c, more, more.size());
  for (const auto& [k, range] : r) {
    CHECK(r2.at(k).lo <= range.lo);
    CHECK(r2.at(k).hi >= range.hi);
  }
  CHECK(calibrate(w, c, more, 4, 1) == calibrate(w, c, more, 4, 1));
  CHECK_THROWS(calibrate(w, c, WindowedDataset{}));
}

TEST_CASE("quantized model structure and inference") {
  const ModelConfig c = small_config();
  const WeightsF w = randomized_model(c, 9);
  const WindowedDataset d = small_set(10);
  const QuantizedModel q = quantize_model(w, c, calibrate(w, c, d));
  CHECK(q.tensors.size() == 2 * 2 + 2 * 4 + 2);
  CHECK(q.tensor("conv1.weight").values.shape() == w.conv[0].weight.shape());
  CHECK_THROWS(q.tensor("bn1.gamma"));
  for (const auto& x : d.windows) {
    const TensorF p = quantized_forward(q, x);
    double sum = 0;
    for (float v : p.values()) {
      CHECK(v >= 0.0f);
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
  }
  const DegradationReport rep = degradation_report(w, q, d);
  CHECK(rep.agreement >= 0.8);
  CHECK(rep.delta_pct == doctest::Approx((rep.fp32_f1 - rep.int8_f1) * 100));
}

TEST_CASE("zero weights quantize to a uniform prediction") {
  const ModelConfig c = small_config();
  WeightsF w = randomized_model(c, 12).zeros_like();
  for (auto& blk : w.conv) {
    blk.gamma.fill(1.0f);
    blk.running_var.fill(1.0f);
  }
  const WindowedDataset d = small_set(13, 4);
  const QuantizedModel q = quantize_model(w, c, calibrate(w, c, d));
  const TensorF p = quantized_forward(q, d.windows[0]);
  for (float v : p.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-6));
}
