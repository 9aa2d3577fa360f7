#include "ubcl/datapipe.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <complex>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "ubcl/rng.hpp"

namespace ubcl {

void WindowedDataset::push(TensorF window, int label, std::string subject) {
  windows.push_back(std::move(window));
  labels.push_back(label);
  subjects.push_back(std::move(subject));
}

WindowedDataset WindowedDataset::subset(std::span<const std::size_t> indices) const {
  WindowedDataset out;
  out.norm = norm;
  out.num_classes = num_classes;
  for (auto i : indices) out.push(windows.at(i), labels.at(i), subjects.at(i));
  return out;
}

std::set<std::string> WindowedDataset::subject_set() const {
  return {subjects.begin(), subjects.end()};
}

std::vector<std::size_t> WindowedDataset::class_counts() const {
  int n = num_classes;
  for (int l : labels) n = std::max(n, l + 1);
  std::vector<std::size_t> counts(static_cast<std::size_t>(n), 0);
  for (int l : labels) ++counts[static_cast<std::size_t>(l)];
  return counts;
}

void WindowedDataset::validate() const {
  if (labels.size() != windows.size() || subjects.size() != windows.size()) {
    throw DataError("dataset arrays have different lengths");
  }
  for (const auto& w : windows) {
    if (w.shape() != windows.front().shape()) throw DataError("windows differ in shape");
  }
  for (int l : labels) {
    if (l < 0 || (num_classes > 0 && l >= num_classes)) {
      throw DataError("label " + std::to_string(l) + " outside class range");
    }
  }
}

// --- Butterworth ------------------------------------------------------------

std::vector<Biquad> butterworth_sections(int order, double cutoff_hz, double sample_rate_hz) {
  if (order < 1) throw std::invalid_argument("filter order must be positive");
  if (!(cutoff_hz > 0.0) || !(cutoff_hz < sample_rate_hz / 2.0)) {
    throw std::invalid_argument("cutoff must lie strictly between 0 and Nyquist (" +
                                std::to_string(sample_rate_hz / 2.0) + " Hz)");
  }
  // Pre-warped analog cutoff, expressed through K = tan(pi fc / fs).
  const double K = std::tan(std::numbers::pi * cutoff_hz / sample_rate_hz);
  const double K2 = K * K;
  std::vector<Biquad> sections;
  for (int k = 0; k < order / 2; ++k) {
    // Pole pair damping: -2 Re(p_k) = 2 sin(pi (2k+1) / (2n)).
    const double a = 2.0 * std::sin(std::numbers::pi * (2.0 * k + 1.0) / (2.0 * order));
    const double norm = 1.0 + a * K + K2;
    Biquad s;
    s.b0 = K2 / norm;
    s.b1 = 2.0 * s.b0;
    s.b2 = s.b0;
    s.a1 = 2.0 * (K2 - 1.0) / norm;
    s.a2 = (1.0 - a * K + K2) / norm;
    sections.push_back(s);
  }
  if (order % 2 == 1) {
    const double norm = 1.0 + K;
    Biquad s;
    s.b0 = K / norm;
    s.b1 = s.b0;
    s.b2 = 0.0;
    s.a1 = (K - 1.0) / norm;
    s.a2 = 0.0;
    sections.push_back(s);
  }
  return sections;
}

double cascade_gain(std::span<const Biquad> sections, double freq_hz, double sample_rate_hz) {
  const double w = 2.0 * std::numbers::pi * freq_hz / sample_rate_hz;
  const std::complex<double> z1 = std::polar(1.0, -w);
  const std::complex<double> z2 = z1 * z1;
  std::complex<double> h{1.0, 0.0};
  for (const auto& s : sections) {
    h *= (s.b0 + s.b1 * z1 + s.b2 * z2) / (1.0 + s.a1 * z1 + s.a2 * z2);
  }
  return std::abs(h);
}

std::vector<double> filter_cascade(std::span<const Biquad> sections, std::span<const double> x) {
  std::vector<double> y(x.begin(), x.end());
  for (const auto& s : sections) {
    double z1 = 0.0, z2 = 0.0;
    for (auto& v : y) {
      const double in = v;
      const double out = s.b0 * in + z1;
      z1 = s.b1 * in - s.a1 * out + z2;
      z2 = s.b2 * in - s.a2 * out;
      v = out;
    }
  }
  return y;
}

std::vector<double> butterworth_lowpass(std::span<const double> x, double cutoff_hz,
                                        double sample_rate_hz, int order) {
  const auto sections = butterworth_sections(order, cutoff_hz, sample_rate_hz);
  return filter_cascade(sections, x);
}

TensorF butterworth_lowpass(const TensorF& samples, double cutoff_hz, double sample_rate_hz,
                            int order) {
  const auto sections = butterworth_sections(order, cutoff_hz, sample_rate_hz);
  const std::size_t N = samples.dim(0), C = samples.dim(1);
  TensorF out(samples.shape());
  std::vector<double> channel(N);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t n = 0; n < N; ++n) channel[n] = samples(n, c);
    const auto y = filter_cascade(sections, channel);
    for (std::size_t n = 0; n < N; ++n) out(n, c) = static_cast<float>(y[n]);
  }
  return out;
}

// --- Normalization ------------------------------------------------------------

NormStats fit_zscore(std::span<const TensorF> tensors) {
  if (tensors.empty()) throw DataError("cannot fit normalization on an empty training set");
  const std::size_t C = tensors.front().dim(1);
  NormStats stats;
  stats.mean.assign(C, 0.0);
  stats.stddev.assign(C, 0.0);
  stats.constant.assign(C, false);
  std::size_t rows = 0;
  for (const auto& t : tensors) {
    if (t.dim(1) != C) throw DataError("channel count differs between training tensors");
    for (std::size_t r = 0; r < t.dim(0); ++r)
      for (std::size_t c = 0; c < C; ++c) stats.mean[c] += t(r, c);
    rows += t.dim(0);
  }
  if (rows == 0) throw DataError("cannot fit normalization on zero rows");
  for (auto& m : stats.mean) m /= static_cast<double>(rows);
  for (const auto& t : tensors) {
    for (std::size_t r = 0; r < t.dim(0); ++r)
      for (std::size_t c = 0; c < C; ++c) {
        const double d = t(r, c) - stats.mean[c];
        stats.stddev[c] += d * d;
      }
  }
  for (std::size_t c = 0; c < C; ++c) {
    stats.stddev[c] = std::sqrt(stats.stddev[c] / static_cast<double>(rows));
    if (!(stats.stddev[c] > 1e-12)) {
      stats.stddev[c] = 1.0;
      stats.constant[c] = true;
    }
  }
  return stats;
}

void apply_zscore(TensorF& tensor, const NormStats& stats) {
  const std::size_t C = tensor.dim(1);
  if (stats.mean.size() != C) throw DataError("normalization statistics do not match channels");
  for (std::size_t r = 0; r < tensor.dim(0); ++r)
    for (std::size_t c = 0; c < C; ++c) {
      tensor(r, c) = static_cast<float>((tensor(r, c) - stats.mean[c]) / stats.stddev[c]);
    }
}

NormStats zscore_fit_apply(WindowedDataset& train, std::span<WindowedDataset* const> others) {
  NormStats stats = fit_zscore(train.windows);
  for (auto& w : train.windows) apply_zscore(w, stats);
  train.norm = stats;
  for (auto* d : others) {
    for (auto& w : d->windows) apply_zscore(w, stats);
    d->norm = stats;
  }
  return stats;
}

// --- Windowing ----------------------------------------------------------------

std::size_t window_count(std::size_t n, std::size_t window, std::size_t stride) {
  if (stride == 0) throw DataError("window stride must be positive");
  if (n < window) return 0;
  return (n - window) / stride + 1;
}

int window_label(std::span<const int> labels) {
  if (labels.empty()) throw DataError("cannot label an empty window");
  std::map<int, std::size_t> votes;
  for (int l : labels) ++votes[l];
  std::size_t best = 0;
  for (const auto& [label, n] : votes) best = std::max(best, n);
  const int center = labels[labels.size() / 2];
  if (votes[center] == best) return center;
  for (const auto& [label, n] : votes) {
    if (n == best) return label;
  }
  return center;
}

WindowedDataset sliding_windows(const RawRecording& rec, std::size_t window, double overlap) {
  const std::size_t N = rec.samples.dim(0), C = rec.samples.dim(1);
  if (rec.labels.size() != N) throw DataError("recording labels do not match sample count");
  if (window == 0 || window > N) {
    throw DataError("window length " + std::to_string(window) + " exceeds recording length " +
                    std::to_string(N) + " for subject " + rec.subject);
  }
  const double stride_real = std::round(static_cast<double>(window) * (1.0 - overlap));
  if (!(stride_real >= 1.0)) throw DataError("overlap leaves a non-positive stride");
  const auto stride = static_cast<std::size_t>(stride_real);
  WindowedDataset out;
  const std::size_t count = window_count(N, window, stride);
  for (std::size_t w = 0; w < count; ++w) {
    const std::size_t start = w * stride;
    std::vector<float> data(rec.samples.data() + start * C, rec.samples.data() + (start + window) * C);
    const int label =
        window_label(std::span<const int>(rec.labels).subspan(start, window));
    out.push(TensorF({window, C}, std::move(data)), label, rec.subject);
  }
  return out;
}

namespace {

void check_test_subjects(const std::set<std::string>& all, const std::set<std::string>& test) {
  if (test.empty()) throw DataError("test subject set is empty");
  for (const auto& s : test) {
    if (!all.contains(s)) throw DataError("unknown subject id '" + s + "'");
  }
  if (test.size() >= all.size()) throw DataError("test subjects must be a proper subset");
}

}  // namespace

std::pair<WindowedDataset, WindowedDataset> subject_split(const WindowedDataset& dataset,
                                                          const std::set<std::string>& test_subjects) {
  check_test_subjects(dataset.subject_set(), test_subjects);
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    (test_subjects.contains(dataset.subjects[i]) ? test_idx : train_idx).push_back(i);
  }
  return {dataset.subset(train_idx), dataset.subset(test_idx)};
}

std::pair<std::vector<RawRecording>, std::vector<RawRecording>> subject_split(
    const std::vector<RawRecording>& recordings, const std::set<std::string>& test_subjects) {
  std::set<std::string> all;
  for (const auto& r : recordings) all.insert(r.subject);
  check_test_subjects(all, test_subjects);
  std::pair<std::vector<RawRecording>, std::vector<RawRecording>> out;
  for (const auto& r : recordings) {
    (test_subjects.contains(r.subject) ? out.second : out.first).push_back(r);
  }
  return out;
}

// --- CSV ------------------------------------------------------------------------

namespace {

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    cells.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

template <typename Num>
bool parse_number(const std::string& text, Num& out) {
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

std::vector<RawRecording> load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open CSV file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
  const auto header = split_row(line);
  auto find_col = [&](const std::string& name) -> std::size_t {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError(path.string() + ": missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t label_col = find_col(schema.label_column);
  const std::size_t subject_col = find_col(schema.subject_column);
  std::vector<std::size_t> channel_cols;
  if (schema.channel_columns.empty()) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i != label_col && i != subject_col) channel_cols.push_back(i);
    }
  } else {
    for (const auto& c : schema.channel_columns) channel_cols.push_back(find_col(c));
  }
  if (channel_cols.empty()) throw DataError(path.string() + ": no channel columns");

  struct Acc {
    std::vector<float> values;
    std::vector<int> labels;
  };
  std::vector<std::string> order;
  std::map<std::string, Acc> by_subject;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_row(line);
    if (cells.size() != header.size()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " cells, got " + std::to_string(cells.size()));
    }
    const std::string& subject = cells[subject_col];
    auto [it, inserted] = by_subject.try_emplace(subject);
    if (inserted) order.push_back(subject);
    for (auto c : channel_cols) {
      float v = 0.0f;
      if (!parse_number(cells[c], v)) {
        throw DataError(path.string() + ":" + std::to_string(line_no) + ": non-numeric value '" +
                        cells[c] + "' in column '" + header[c] + "'");
      }
      it->second.values.push_back(v);
    }
    int label = 0;
    if (!parse_number(cells[label_col], label) || label < 0) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": invalid label '" +
                      cells[label_col] + "'");
    }
    it->second.labels.push_back(label);
  }
  if (order.empty()) throw DataError(path.string() + ": file has a header but no data rows");

  std::vector<RawRecording> out;
  for (const auto& s : order) {
    auto& acc = by_subject[s];
    RawRecording r;
    const std::size_t n = acc.labels.size();
    r.samples = TensorF({n, channel_cols.size()}, std::move(acc.values));
    r.labels = std::move(acc.labels);
    r.sample_rate_hz = schema.rate_hz;
    r.subject = s;
    out.push_back(std::move(r));
  }
  return out;
}

void write_csv(const std::filesystem::path& path, const std::vector<RawRecording>& recordings,
               const CsvSchema& schema) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write CSV file " + path.string());
  const std::size_t C = recordings.empty() ? 0 : recordings.front().samples.dim(1);
  std::vector<std::string> names = schema.channel_columns;
  for (std::size_t c = names.size(); c < C; ++c) names.push_back("ch" + std::to_string(c));
  for (std::size_t c = 0; c < C; ++c) out << names[c] << ',';
  out << schema.label_column << ',' << schema.subject_column << '\n';
  char buf[64];
  for (const auto& r : recordings) {
    for (std::size_t n = 0; n < r.samples.dim(0); ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        const auto res = std::to_chars(buf, buf + sizeof buf, r.samples(n, c));
        out.write(buf, res.ptr - buf);
        out << ',';
      }
      out << r.labels[n] << ',' << r.subject << '\n';
    }
  }
}

// --- Synthetic ----------------------------------------------------------------

WindowedDataset synth_generate(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.num_classes < 2) throw DataError("synthetic data needs at least two classes");
  if (spec.channels < 1 || spec.window_len < 8 || spec.samples_per_class < 1 ||
      spec.subject_count < 1) {
    throw DataError("invalid synthetic dataset dimensions");
  }
  const auto C = static_cast<std::size_t>(spec.channels);
  const auto T = static_cast<std::size_t>(spec.window_len);
  const double two_pi = 2.0 * std::numbers::pi;
  const std::set<int> episodic(spec.episodic_classes.begin(), spec.episodic_classes.end());

  // Class signatures.
  Rng sig = rng_derive(seed, 0);
  struct Signature {
    bool episodic = false;
    double cycles = 0.0;  // per window
    std::vector<double> phase, amplitude, sign;
  };
  std::vector<Signature> classes(static_cast<std::size_t>(spec.num_classes));
  int periodic_index = 0, episodic_index = 0;
  for (int k = 0; k < spec.num_classes; ++k) {
    auto& s = classes[static_cast<std::size_t>(k)];
    s.episodic = episodic.contains(k);
    s.phase.resize(C);
    s.amplitude.resize(C);
    s.sign.resize(C);
    for (std::size_t c = 0; c < C; ++c) {
      s.phase[c] = sig.uniform(0.0, two_pi);
      s.amplitude[c] = sig.uniform(0.6, 1.4);
    }
    if (s.episodic) {
      const int e = episodic_index++;
      for (std::size_t c = 0; c < C; ++c) {
        const auto group = static_cast<int>(c) / (e / 2 + 1);
        s.sign[c] = (group + e) % 2 == 0 ? 1.0 : -1.0;
      }
    } else {
      s.cycles = 2.5 + 3.5 * periodic_index++;
    }
  }

  // Subject gain/offset per channel.
  Rng subj = rng_derive(seed, 1);
  std::vector<std::vector<double>> gain(static_cast<std::size_t>(spec.subject_count)),
      offset(static_cast<std::size_t>(spec.subject_count));
  for (int s = 0; s < spec.subject_count; ++s) {
    for (std::size_t c = 0; c < C; ++c) {
      gain[static_cast<std::size_t>(s)].push_back(subj.uniform(0.8, 1.2));
      offset[static_cast<std::size_t>(s)].push_back(subj.normal(0.0, 0.2));
    }
  }

  constexpr double kBurstAmplitude = 2.5;
  constexpr double kBurstWidth = 3.0;
  Rng gen = rng_derive(seed, 2);
  WindowedDataset out;
  out.num_classes = spec.num_classes;
  for (int k = 0; k < spec.num_classes; ++k) {
    const auto& sigk = classes[static_cast<std::size_t>(k)];
    for (int i = 0; i < spec.samples_per_class; ++i) {
      const auto s = static_cast<std::size_t>(i % spec.subject_count);
      TensorF w({T, C});
      if (sigk.episodic) {
        const double lo = 0.75 * static_cast<double>(T);
        const double center = std::floor(gen.uniform(lo, static_cast<double>(T)));
        const double amp = kBurstAmplitude * gen.uniform(0.8, 1.2);
        for (std::size_t t = 0; t < T; ++t) {
          const double d = (static_cast<double>(t) - center) / kBurstWidth;
          const double env = std::exp(-0.5 * d * d);
          for (std::size_t c = 0; c < C; ++c) {
            w(t, c) = static_cast<float>(gain[s][c] * amp * sigk.sign[c] * env + offset[s][c] +
                                         gen.normal(0.0, spec.noise_std));
          }
        }
      } else {
        const double theta = gen.uniform(0.0, two_pi);
        const double tempo = 1.0 + gen.uniform(-0.05, 0.05);
        for (std::size_t t = 0; t < T; ++t) {
          const double base = two_pi * sigk.cycles * tempo * static_cast<double>(t) /
                              static_cast<double>(T);
          for (std::size_t c = 0; c < C; ++c) {
            w(t, c) = static_cast<float>(gain[s][c] * sigk.amplitude[c] *
                                             std::sin(base + sigk.phase[c] + theta) +
                                         offset[s][c] + gen.normal(0.0, spec.noise_std));
          }
        }
      }
      out.push(std::move(w), k, "S" + std::to_string(s));
    }
  }
  return out;
}

// --- Pipeline -------------------------------------------------------------------

DataSplits prepare_synthetic(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.subject_count < 3) {
    throw DataError("synthetic split needs at least 3 subjects (train, validation, test)");
  }
  const WindowedDataset all = synth_generate(spec, seed);
  const std::string test = "S" + std::to_string(spec.subject_count - 1);
  const std::string val = "S" + std::to_string(spec.subject_count - 2);
  auto [rest, test_set] = subject_split(all, {test});
  auto [train_set, val_set] = subject_split(rest, {val});
  DataSplits splits{std::move(train_set), std::move(val_set), std::move(test_set)};
  WindowedDataset* others[] = {&splits.val, &splits.test};
  zscore_fit_apply(splits.train, others);
  return splits;
}

DataSplits prepare_recordings(const std::vector<RawRecording>& recordings,
                              const PipelineOptions& options) {
  if (recordings.empty()) throw DataError("no recordings");
  std::vector<std::string> order;
  for (const auto& r : recordings) {
    if (std::find(order.begin(), order.end(), r.subject) == order.end()) order.push_back(r.subject);
  }
  std::set<std::string> test = options.test_subjects;
  if (test.empty()) {
    if (order.size() < 3) throw DataError("need at least 3 subjects for train/val/test splits");
    test.insert(order.back());
  }
  auto [rest, test_recs] = subject_split(recordings, test);
  std::set<std::string> val = options.val_subjects;
  if (val.empty()) {
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if (!test.contains(*it)) {
        val.insert(*it);
        break;
      }
    }
  }
  auto [train_recs, val_recs] = subject_split(rest, val);

  auto condition = [&](std::vector<RawRecording>& recs) {
    if (!options.cutoff_hz) return;
    for (auto& r : recs) {
      r.samples = butterworth_lowpass(r.samples, *options.cutoff_hz, r.sample_rate_hz);
    }
  };
  condition(train_recs);
  condition(val_recs);
  condition(test_recs);

  std::vector<TensorF> train_samples;
  for (const auto& r : train_recs) train_samples.push_back(r.samples);
  const NormStats stats = fit_zscore(train_samples);

  int num_classes = 0;
  for (const auto& r : recordings)
    for (int l : r.labels) num_classes = std::max(num_classes, l + 1);

  auto assemble = [&](std::vector<RawRecording>& recs) {
    WindowedDataset ds;
    ds.norm = stats;
    ds.num_classes = num_classes;
    for (auto& r : recs) {
      apply_zscore(r.samples, stats);
      auto w = sliding_windows(r, options.window_len, options.overlap);
      for (std::size_t i = 0; i < w.size(); ++i) {
        ds.push(std::move(w.windows[i]), w.labels[i], std::move(w.subjects[i]));
      }
    }
    return ds;
  };
  DataSplits splits{assemble(train_recs), assemble(val_recs), assemble(test_recs)};
  if (splits.train.empty() || splits.val.empty() || splits.test.empty()) {
    throw DataError("a split produced no windows; recordings shorter than the window?");
  }
  return splits;
}

}  // namespace ubcl
