#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "ubcl/datapipe.hpp"
#include "ubcl/rng.hpp"

using namespace ubcl;
namespace fs = std::filesystem;

namespace {

double steady_amplitude_ratio(double freq, double cutoff, double fs) {
  const std::size_t n = static_cast<std::size_t>(fs * 40);
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = std::sin(2 * std::numbers::pi * freq * i / fs);
  const auto y = butterworth_lowpass(x, cutoff, fs);
  double peak = 0;
  for (std::size_t i = n / 2; i < n; ++i) peak = std::max(peak, std::abs(y[i]));
  return peak;
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ubcl_tests";
  fs::create_directories(dir);
  return dir / name;
}

RawRecording recording(std::size_t n, std::size_t c, const std::string& subject, Rng& rng,
                       double shift = 0.0) {
  RawRecording r;
  r.samples = TensorF({n, c});
  for (auto& v : r.samples.values()) v = static_cast<float>(rng.normal(shift, 1.0));
  r.labels.assign(n, 0);
  for (std::size_t i = n / 2; i < n; ++i) r.labels[i] = 1;
  r.subject = subject;
  r.sample_rate_hz = 50.0;
  return r;
}

}  // namespace

TEST_CASE("Butterworth: -3.01 dB at cutoff") {
  for (double fc : {2.0, 5.0, 10.0, 12.0}) {
    const auto s = butterworth_sections(4, fc, 100.0);
    CHECK(s.size() == 2);
    const double db = 20 * std::log10(cascade_gain(s, fc, 100.0));
    CHECK(std::abs(db + 3.0103) <= 0.1);
  }
}

TEST_CASE("Butterworth: DC gain and steady-state sinusoids") {
  std::vector<double> dc(2000, 3.5);
  const auto y = butterworth_lowpass(dc, 5.0, 100.0);
  for (std::size_t i = 1000; i < y.size(); ++i) CHECK(std::abs(y[i] - 3.5) < 1e-6);
  CHECK(steady_amplitude_ratio(2.0, 2.0, 100.0) == doctest::Approx(std::sqrt(0.5)).epsilon(0.01));
}

TEST_CASE("Butterworth: 4x cutoff against the analog 8th-power formula") {
  const double fc = 1.0, fs = 100.0;
  const double analytic_db = -10 * std::log10(1 + std::pow(4.0, 8));
  const auto s = butterworth_sections(4, fc, fs);
  CHECK(std::abs(20 * std::log10(cascade_gain(s, 4 * fc, fs)) - analytic_db) <= 2.0);
  CHECK(std::abs(20 * std::log10(steady_amplitude_ratio(4 * fc, fc, fs)) - analytic_db) <= 2.0);
}

TEST_CASE("Butterworth: odd order and invalid cutoffs") {
  const auto s = butterworth_sections(3, 5.0, 100.0);
  CHECK(s.size() == 2);
  CHECK(s.back().a2 == 0.0);
  CHECK(20 * std::log10(cascade_gain(s, 5.0, 100.0)) == doctest::Approx(-3.0103).epsilon(0.01));
  CHECK_THROWS(butterworth_sections(4, 50.0, 100.0));
  CHECK_THROWS(butterworth_sections(4, 0.0, 100.0));
}

TEST_CASE("z-score on the training set") {
  Rng rng(1);
  WindowedDataset train, test;
  for (int i = 0; i < 10; ++i) {
    TensorF w({16, 3});
    for (std::size_t t = 0; t < 16; ++t) {
      w(t, 0) = static_cast<float>(rng.normal(5.0, 2.0));
      w(t, 1) = 7.0f;  // constant channel
      w(t, 2) = static_cast<float>(rng.normal(-1.0, 0.1));
    }
    train.push(w, 0, "A");
    for (auto& v : w.values()) v += 10.0f;
    test.push(w, 0, "B");
  }
  WindowedDataset* others[] = {&test};
  const NormStats stats = zscore_fit_apply(train, others);
  CHECK(stats.constant[1]);
  CHECK_FALSE(stats.constant[0]);
  for (std::size_t c : {0u, 2u}) {
    double s = 0, sq = 0, n = 0;
    for (const auto& w : train.windows)
      for (std::size_t t = 0; t < 16; ++t) {
        s += w(t, c);
        sq += w(t, c) * w(t, c);
        ++n;
      }
    CHECK(std::abs(s / n) < 1e-6);
    CHECK(std::abs(std::sqrt(sq / n - (s / n) * (s / n)) - 1.0) < 1e-6);
  }
  for (const auto& w : train.windows)
    for (std::size_t t = 0; t < 16; ++t) CHECK(w(t, 1) == 0.0f);
  // test set shifted by +10 raw units: its normalized mean reflects train stats
  double s0 = 0;
  for (const auto& w : test.windows)
    for (std::size_t t = 0; t < 16; ++t) s0 += w(t, 0);
  CHECK(s0 / 160.0 == doctest::Approx(10.0 / stats.stddev[0]).epsilon(1e-3));
  CHECK_THROWS_AS(fit_zscore(std::vector<TensorF>{}), DataError);
}

TEST_CASE("sliding windows") {
  Rng rng(2);
  RawRecording r = recording(256, 2, "A", rng);
  const auto w = sliding_windows(r, 128);
  CHECK(w.size() == 3);
  CHECK(w.windows[1](0, 0) == r.samples(64, 0));
  CHECK(w.windows[2](0, 1) == r.samples(128, 1));
  CHECK(sliding_windows(recording(128, 2, "A", rng), 128).size() == 1);
  CHECK_THROWS_AS(sliding_windows(r, 300), DataError);
  CHECK_THROWS_AS(sliding_windows(r, 128, 1.0), DataError);
}

TEST_CASE("window labels") {
  CHECK(window_label(std::vector<int>{1, 1, 2}) == 1);
  // half-and-half: center (index 2) decides
  CHECK(window_label(std::vector<int>{3, 3, 4, 4}) == 4);
  CHECK(window_label(std::vector<int>{4, 4, 3, 3}) == 3);
  CHECK(window_label(std::vector<int>{5, 5, 5, 6, 6, 6}) == 6);
}

TEST_CASE("window count formula on random cases") {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const std::size_t T = 2 + rng.below(100);
    const std::size_t N = T + rng.below(1000);
    const std::size_t stride = std::max<std::size_t>(1, T / 2);
    std::size_t brute = 0;
    for (std::size_t start = 0; start + T <= N; start += stride) ++brute;
    CHECK(window_count(N, T, stride) == brute);
    CHECK(window_count(N, T, stride) == (N - T) / stride + 1);
  }
  CHECK(window_count(5, 10, 2) == 0);
}

TEST_CASE("subject split") {
  WindowedDataset d;
  for (const char* s : {"A", "B", "C", "A", "C"}) d.push(TensorF({4, 1}), 0, s);
  auto [train, test] = subject_split(d, {"C"});
  CHECK(train.subject_set() == std::set<std::string>{"A", "B"});
  CHECK(test.subject_set() == std::set<std::string>{"C"});
  CHECK(train.size() + test.size() == d.size());
  CHECK_THROWS_AS(subject_split(d, {"A", "B", "C"}), DataError);
  CHECK_THROWS_AS(subject_split(d, {"Z"}), DataError);
  CHECK_THROWS_AS(subject_split(d, {}), DataError);
}

TEST_CASE("CSV load, errors and round trip") {
  const fs::path p = temp_path("two_subjects.csv");
  {
    std::ofstream f(p);
    f << "ax,ay,label,subject\n0.5,1,0,s1\n-2,3.25,1,s1\n4,5,1,s2\n";
  }
  CsvSchema schema;
  const auto recs = load_csv(p, schema);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].subject == "s1");
  CHECK(recs[0].samples.shape() == Shape{2, 2});
  CHECK(recs[0].samples(1, 1) == 3.25f);
  CHECK(recs[1].labels == std::vector<int>{1});

  const fs::path header_only = temp_path("header.csv");
  { std::ofstream(header_only) << "ax,label,subject\n"; }
  CHECK_THROWS_AS(load_csv(header_only, schema), DataError);

  const fs::path bad = temp_path("bad.csv");
  { std::ofstream(bad) << "ax,label,subject\n1,0,a\nxyz,0,a\n"; }
  try {
    (void)load_csv(bad, schema);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":3:") != std::string::npos);
  }
  CsvSchema other = schema;
  other.label_column = "activity";
  CHECK_THROWS_AS(load_csv(p, other), DataError);
  CHECK_THROWS_AS(load_csv(temp_path("missing.csv"), schema), DataError);

  Rng rng(4);
  std::vector<RawRecording> orig = {recording(50, 3, "x", rng), recording(30, 3, "y", rng)};
  const fs::path rt = temp_path("roundtrip.csv");
  write_csv(rt, orig, schema);
  const auto back = load_csv(rt, schema);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].samples == orig[i].samples);
    CHECK(back[i].labels == orig[i].labels);
    CHECK(back[i].subject == orig[i].subject);
  }
}

TEST_CASE("synthetic generator") {
  const SynthSpec spec;
  const WindowedDataset a = synth_generate(spec, 7), b = synth_generate(spec, 7);
  CHECK(a.windows == b.windows);
  CHECK(a.labels == b.labels);
  CHECK(synth_generate(spec, 8).windows != a.windows);
  const auto counts = a.class_counts();
  REQUIRE(counts.size() == 4);
  for (auto n : counts) CHECK(n == 200);
  CHECK(a.subject_set().size() == 4);
  CHECK(a.windows[0].shape() == Shape{128, 6});
  SynthSpec bad;
  bad.num_classes = 1;
  CHECK_THROWS_AS(synth_generate(bad, 1), DataError);
}

TEST_CASE("synthetic pipeline: disjoint subjects, train-only normalization") {
  const DataSplits s = prepare_synthetic(SynthSpec{}, 42);
  CHECK(s.test.subject_set() == std::set<std::string>{"S3"});
  CHECK(s.val.subject_set() == std::set<std::string>{"S2"});
  CHECK(s.train.subject_set() == std::set<std::string>{"S0", "S1"});
  const NormStats refit = fit_zscore(s.train.windows);
  for (double m : refit.mean) CHECK(std::abs(m) < 1e-5);
  for (double sd : refit.stddev) CHECK(std::abs(sd - 1.0) < 1e-5);
}

TEST_CASE("recording pipeline order and leakage") {
  Rng rng(9);
  std::vector<RawRecording> recs = {recording(300, 2, "a", rng, 0.0), recording(300, 2, "b", rng, 0.0),
                                    recording(300, 2, "c", rng, 50.0), recording(300, 2, "d", rng, 80.0)};
  PipelineOptions po;
  po.window_len = 64;
  po.cutoff_hz = 10.0;
  const DataSplits s = prepare_recordings(recs, po);
  CHECK(s.test.subject_set() == std::set<std::string>{"d"});
  CHECK(s.val.subject_set() == std::set<std::string>{"c"});
  // stats come from a and b only, so the shifted test subject stays far from 0
  for (double m : s.train.norm.mean) CHECK(std::abs(m) < 1.0);
  double test_mean = 0;
  for (const auto& w : s.test.windows) test_mean += w(10, 0);
  CHECK(test_mean / static_cast<double>(s.test.size()) > 20.0);
  CHECK(s.train.num_classes == 2);
  CHECK(s.train.size() == 2 * window_count(300, 64, 32));
}
