#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ubcl/tensor.hpp"

namespace ubcl {

/// Problems with input data: unreadable files, bad cells, invalid splits.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;
  std::vector<bool> constant;  // channel had zero variance; stddev forced to 1
};

struct RawRecording {
  TensorF samples;  // [N x C]
  double sample_rate_hz = 0.0;
  std::string subject;
  std::vector<int> labels;  // per sample
};

struct WindowedDataset {
  std::vector<TensorF> windows;  // [T x C] each
  std::vector<int> labels;
  std::vector<std::string> subjects;
  NormStats norm;
  int num_classes = 0;

  std::size_t size() const { return windows.size(); }
  bool empty() const { return windows.empty(); }
  std::size_t window_len() const { return windows.empty() ? 0 : windows[0].dim(0); }
  std::size_t channels() const { return windows.empty() ? 0 : windows[0].dim(1); }

  void push(TensorF window, int label, std::string subject);
  WindowedDataset subset(std::span<const std::size_t> indices) const;
  std::set<std::string> subject_set() const;
  std::vector<std::size_t> class_counts() const;
  /// Throws DataError when the parallel arrays disagree or shapes differ.
  void validate() const;
};

// --- Butterworth low-pass -------------------------------------------------

/// Direct-form II transposed biquad, a0 normalized to 1.
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;
};

/// Second-order sections of a digital Butterworth low-pass designed by the
/// bilinear transform with the cutoff pre-warped. Odd orders end with a
/// first-order section (b2 = a2 = 0).
std::vector<Biquad> butterworth_sections(int order, double cutoff_hz, double sample_rate_hz);

/// |H(e^{jw})| of a section cascade at `freq_hz`.
double cascade_gain(std::span<const Biquad> sections, double freq_hz, double sample_rate_hz);

/// Causal single-pass filtering of one channel, zero initial state.
std::vector<double> filter_cascade(std::span<const Biquad> sections, std::span<const double> x);

std::vector<double> butterworth_lowpass(std::span<const double> x, double cutoff_hz,
                                        double sample_rate_hz, int order = 4);

/// Filters every channel of an [N x C] signal independently.
TensorF butterworth_lowpass(const TensorF& samples, double cutoff_hz, double sample_rate_hz,
                            int order = 4);

// --- Normalization ---------------------------------------------------------

/// Per-channel mean and population standard deviation over every row of every
/// [rows x C] tensor. Zero-variance channels get stddev 1 and are flagged.
NormStats fit_zscore(std::span<const TensorF> tensors);
void apply_zscore(TensorF& tensor, const NormStats& stats);

/// Fits on `train`, normalizes `train` and each of `others` with those
/// statistics and stores them in every dataset's `norm` field.
NormStats zscore_fit_apply(WindowedDataset& train, std::span<WindowedDataset* const> others);

// --- Windowing and splits ---------------------------------------------------

/// floor((N - T) / stride) + 1, or 0 when N < T.
std::size_t window_count(std::size_t n, std::size_t window, std::size_t stride);

/// Majority label; ties resolve to the label at the window center (index T/2).
int window_label(std::span<const int> labels);

WindowedDataset sliding_windows(const RawRecording& recording, std::size_t window,
                                double overlap = 0.5);

std::pair<WindowedDataset, WindowedDataset> subject_split(const WindowedDataset& dataset,
                                                          const std::set<std::string>& test_subjects);

std::pair<std::vector<RawRecording>, std::vector<RawRecording>> subject_split(
    const std::vector<RawRecording>& recordings, const std::set<std::string>& test_subjects);

// --- CSV -------------------------------------------------------------------

struct CsvSchema {
  std::vector<std::string> channel_columns;  // empty: every column but label/subject
  std::string label_column = "label";
  std::string subject_column = "subject";
  double rate_hz = 50.0;
};

/// One recording per subject in order of first appearance, rows in file order.
std::vector<RawRecording> load_csv(const std::filesystem::path& path, const CsvSchema& schema);

void write_csv(const std::filesystem::path& path, const std::vector<RawRecording>& recordings,
               const CsvSchema& schema);

// --- Synthetic data ---------------------------------------------------------

struct SynthSpec {
  int num_classes = 4;
  int channels = 6;
  int window_len = 128;
  int samples_per_class = 200;
  int subject_count = 4;
  std::vector<int> episodic_classes = {2, 3};
  double noise_std = 0.3;

  friend bool operator==(const SynthSpec&, const SynthSpec&) = default;
};

/// Seed-deterministic synthetic HAR-like windows (not normalized).
///
/// Periodic classes carry a class-specific frequency and per-channel phase
/// pattern; episodic classes are a flat baseline with a class-specific burst
/// somewhere in the final quarter of the window. Subjects differ by
/// per-channel gain and offset. Window i of each class belongs to subject
/// i mod subject_count; subjects are named S0, S1, ...
WindowedDataset synth_generate(const SynthSpec& spec, std::uint64_t seed);

// --- Pipeline ---------------------------------------------------------------

struct DataSplits {
  WindowedDataset train;
  WindowedDataset val;
  WindowedDataset test;
};

struct PipelineOptions {
  std::size_t window_len = 128;
  double overlap = 0.5;
  std::optional<double> cutoff_hz;  // Butterworth order 4 when set
  std::set<std::string> test_subjects;  // empty: last subject
  std::set<std::string> val_subjects;   // empty: last remaining subject
};

/// split subjects -> filter -> fit z-score on train -> apply -> window.
DataSplits prepare_recordings(const std::vector<RawRecording>& recordings,
                              const PipelineOptions& options);

/// Synthetic windows split by subject (test = last, val = second-to-last),
/// normalized with statistics of the training subjects only.
DataSplits prepare_synthetic(const SynthSpec& spec, std::uint64_t seed);

}  // namespace ubcl
