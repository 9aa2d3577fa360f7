#include "cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ubcl/analysis.hpp"
#include "ubcl/datapipe.hpp"
#include "ubcl/evalkit.hpp"
#include "ubcl/quantization.hpp"
#include "ubcl/serialize.hpp"
#include "ubcl/training.hpp"

namespace ubcl::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kDefaultMasterSeed = 42;

class UsageError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

struct Options {
  std::string preset;
  int channels = 0, window = 0, classes = 0;
  std::string variant = "a0";
  std::uint64_t seed = kDefaultMasterSeed;
  int seeds = 5;
  int epochs = 200;
  int patience = 10;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double dropout = 0.0;
  int batch = 32;
  bool class_weighting = false;
  std::string synthetic;
  std::string csv;
  std::string label_col = "label";
  std::string subject_col = "subject";
  double rate = 0.0;
  double cutoff_hz = 0.0;
  std::string out;
  int jobs = 1;
  // command-specific
  std::string model;
  std::size_t calib_samples = kDefaultCalibrationSamples;
  std::string drop_channels;
  int trials = 20;
};

struct Flags {
  CLI::Option* seed = nullptr;
  CLI::Option* channels = nullptr;
  CLI::Option* window = nullptr;
  CLI::Option* classes = nullptr;
  CLI::Option* rate = nullptr;
  CLI::Option* cutoff = nullptr;
};

void add_common(CLI::App& app, Options& o, Flags& f) {
  app.add_option("--preset", o.preset, "Dataset preset (" + preset_list() + ")");
  f.channels = app.add_option("--channels", o.channels, "Sensor channels")->check(CLI::PositiveNumber);
  f.window = app.add_option("--window", o.window, "Window length in samples")->check(CLI::PositiveNumber);
  f.classes = app.add_option("--classes", o.classes, "Number of classes")->check(CLI::PositiveNumber);
  app.add_option("--variant", o.variant, "Architecture variant a0..a4");
  f.seed = app.add_option("--seed", o.seed, "Master seed (default 42 or $UBCL_MASTER_SEED)");
  app.add_option("--out", o.out, "Output directory");
}

void add_train_flags(CLI::App& app, Options& o) {
  app.add_option("--seeds", o.seeds, "Number of seeds")->check(CLI::PositiveNumber);
  app.add_option("--epochs", o.epochs, "Maximum epochs")->check(CLI::PositiveNumber);
  app.add_option("--patience", o.patience, "Early-stopping patience")->check(CLI::PositiveNumber);
  app.add_option("--lr", o.lr, "Peak learning rate")->check(CLI::PositiveNumber);
  app.add_option("--weight-decay", o.weight_decay, "AdamW weight decay")->check(CLI::NonNegativeNumber);
  app.add_option("--dropout", o.dropout, "Dropout before the classifier")->check(CLI::Range(0.0, 0.95));
  app.add_option("--batch", o.batch, "Mini-batch size")->check(CLI::PositiveNumber);
  app.add_flag("--class-weighting", o.class_weighting, "Inverse-frequency class weights");
  app.add_option("--jobs", o.jobs, "Parallel seeds/trials")->check(CLI::PositiveNumber);
}

void add_data_flags(CLI::App& app, Options& o, Flags& f) {
  app.add_option("--synthetic", o.synthetic, "Synthetic spec JSON path, or 'default'");
  app.add_option("--csv", o.csv, "CSV recording file");
  app.add_option("--label-col", o.label_col, "CSV label column");
  app.add_option("--subject-col", o.subject_col, "CSV subject column");
  f.rate = app.add_option("--rate", o.rate, "CSV sample rate in Hz")->check(CLI::PositiveNumber);
  f.cutoff = app.add_option("--cutoff-hz", o.cutoff_hz, "Butterworth low-pass cutoff")
                 ->check(CLI::PositiveNumber);
}

// --- Hashing / output -----------------------------------------------------------

std::string hex(const unsigned char* p, std::size_t n) {
  std::ostringstream os;
  for (std::size_t i = 0; i < n; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int{p[i]};
  return os.str();
}

std::string sha256_bytes(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 failed");
  }
  return hex(md, len);
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Owns the output directory and the manifest for one command.
class Run {
 public:
  Run(std::string command, const Options& o, std::vector<std::string> argv)
      : command_(std::move(command)), dir_(o.out), argv_(std::move(argv)), seed_(o.seed) {
    if (dir_.empty()) throw UsageError(command_ + ": --out <dir> is required");
    fs::create_directories(dir_);
  }

  fs::path path(const std::string& name) const { return dir_ / name; }

  void text(const std::string& name, const std::string& content) {
    std::ofstream f(path(name), std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path(name).string());
    f << content;
    f.close();
    record(name);
  }
  void write_json(const std::string& name, const json& j) { text(name, j.dump(2) + "\n"); }
  /// Registers a file that was written by another module.
  void record(const std::string& name) {
    std::ifstream f(path(name), std::ios::binary);
    std::ostringstream os;
    os << f.rdbuf();
    outputs_[name] = sha256_bytes(os.str());
  }
  void input(const fs::path& p) { inputs_[p.string()] = sha256_file(p); }
  void config(const std::string& key, json value) { config_[key] = std::move(value); }

  void finish() {
    json inputs = json::array();
    for (const auto& [p, d] : inputs_) inputs.push_back({{"path", p}, {"sha256", d}});
    json outputs = json::array();
    for (const auto& [p, d] : outputs_) outputs.push_back({{"file", p}, {"sha256", d}});
    const json manifest = {{"command", command_},
                           {"argv", argv_},
                           {"config", config_},
                           {"masterSeed", seed_},
                           {"toolVersion", kToolVersion},
                           {"inputs", inputs},
                           {"outputs", outputs},
                           {"timestamp", utc_timestamp()}};
    std::ofstream f(path("manifest.json"), std::ios::trunc);
    f << manifest.dump(2) << '\n';
  }

 private:
  std::string command_;
  fs::path dir_;
  std::vector<std::string> argv_;
  std::uint64_t seed_;
  json config_ = json::object();
  std::map<std::string, std::string> inputs_, outputs_;
};

// --- Config resolution ----------------------------------------------------------

const DatasetPreset* resolve_preset(const Options& o) {
  if (o.preset.empty()) return nullptr;
  const DatasetPreset* p = find_preset(o.preset);
  if (!p) throw UsageError("unknown preset '" + o.preset + "'; available: " + preset_list());
  return p;
}

Variant resolve_variant(const Options& o) {
  try {
    return parse_variant(o.variant);
  } catch (const std::exception&) {
    throw UsageError("unknown variant '" + o.variant + "'; expected a0, a1, a2, a3 or a4");
  }
}

/// Dimensions from --preset and/or --channels/--window/--classes.
ModelConfig config_from_flags(const Options& o, const Flags& f, const DatasetPreset* p) {
  ModelConfig c;
  if (p) c = preset_config(*p);
  if (f.channels->count()) c.channels = o.channels;
  if (f.window->count()) c.window_len = o.window;
  if (f.classes->count()) c.num_classes = o.classes;
  c.variant = resolve_variant(o);
  if (c.channels <= 0 || c.window_len <= 0 || c.num_classes <= 0) {
    throw UsageError("model dimensions missing: pass --preset or --channels, --window and --classes");
  }
  c.validate();
  return c;
}

TrainConfig train_config(const Options& o) {
  TrainConfig t = TrainConfig::with_lr(o.lr);
  t.max_epochs = o.epochs;
  t.patience = o.patience;
  t.weight_decay = o.weight_decay;
  t.batch_size = o.batch;
  t.dropout = o.dropout;
  t.class_weighting = o.class_weighting;
  t.master_seed = o.seed;
  t.num_seeds = o.seeds;
  t.validate();
  return t;
}

json synth_spec_json(const SynthSpec& s) {
  return {{"numClasses", s.num_classes},         {"channels", s.channels},
          {"windowLen", s.window_len},           {"samplesPerClass", s.samples_per_class},
          {"subjectCount", s.subject_count},     {"episodicClasses", s.episodic_classes},
          {"noiseStd", s.noise_std}};
}

SynthSpec synth_spec_from_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open synthetic spec " + path.string());
  SynthSpec s;
  try {
    const json j = json::parse(in);
    s.num_classes = j.value("numClasses", s.num_classes);
    s.channels = j.value("channels", s.channels);
    s.window_len = j.value("windowLen", s.window_len);
    s.samples_per_class = j.value("samplesPerClass", s.samples_per_class);
    s.subject_count = j.value("subjectCount", s.subject_count);
    s.episodic_classes = j.value("episodicClasses", s.episodic_classes);
    s.noise_std = j.value("noiseStd", s.noise_std);
  } catch (const json::exception& e) {
    throw DataError("invalid synthetic spec " + path.string() + ": " + e.what());
  }
  return s;
}

struct Data {
  DataSplits splits;
  std::string name;
  json descriptor;
};

Data load_data(const Options& o, const Flags& f, const DatasetPreset* preset, Run* run) {
  if (!o.synthetic.empty() && !o.csv.empty()) throw UsageError("--synthetic and --csv are exclusive");
  Data d;
  if (!o.synthetic.empty()) {
    SynthSpec spec;
    if (o.synthetic != "default") {
      spec = synth_spec_from_file(o.synthetic);
      if (run) run->input(o.synthetic);
    }
    d.splits = prepare_synthetic(spec, o.seed);
    d.name = "synthetic";
    d.descriptor = {{"kind", "synthetic"}, {"spec", synth_spec_json(spec)}, {"seed", o.seed},
                    {"source", o.synthetic}};
  } else if (!o.csv.empty()) {
    CsvSchema schema;
    schema.label_column = o.label_col;
    schema.subject_column = o.subject_col;
    schema.rate_hz = f.rate->count() ? o.rate : (preset ? preset->rate_hz : 50.0);
    PipelineOptions po;
    po.window_len = static_cast<std::size_t>(
        f.window->count() ? o.window : (preset ? preset->window : 128));
    if (f.cutoff->count()) {
      po.cutoff_hz = o.cutoff_hz;
    } else if (preset && preset->cutoff_hz) {
      po.cutoff_hz = preset->cutoff_hz;
    }
    const auto recordings = load_csv(o.csv, schema);
    if (run) run->input(o.csv);
    try {
      if (po.cutoff_hz) butterworth_sections(4, *po.cutoff_hz, schema.rate_hz);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    d.splits = prepare_recordings(recordings, po);
    d.name = preset ? std::string(preset->display) : fs::path(o.csv).stem().string();
    d.descriptor = {{"kind", "csv"},
                    {"path", o.csv},
                    {"labelColumn", schema.label_column},
                    {"subjectColumn", schema.subject_column},
                    {"rateHz", schema.rate_hz},
                    {"windowLen", po.window_len},
                    {"cutoffHz", po.cutoff_hz ? json(*po.cutoff_hz) : json(nullptr)}};
  } else {
    throw UsageError("no data source: pass --synthetic <spec.json|default> or --csv <path>");
  }
  for (const auto* s : {&d.splits.train, &d.splits.val, &d.splits.test}) s->validate();
  return d;
}

/// Model dimensions come from the data; explicit flags or a preset must agree.
ModelConfig config_for_data(const Options& o, const Flags& f, const DatasetPreset* preset,
                            const Data& d) {
  ModelConfig c;
  c.channels = static_cast<int>(d.splits.train.channels());
  c.window_len = static_cast<int>(d.splits.train.window_len());
  c.num_classes = std::max({d.splits.train.num_classes, d.splits.val.num_classes,
                            d.splits.test.num_classes});
  c.variant = resolve_variant(o);
  auto agree = [&](const char* what, bool given, int want, int have) {
    if (given && want != have) {
      throw UsageError(std::string(what) + " " + std::to_string(want) + " disagrees with data (" +
                       std::to_string(have) + ")");
    }
  };
  agree("--channels", f.channels->count() > 0, o.channels, c.channels);
  agree("--window", f.window->count() > 0, o.window, c.window_len);
  agree("--classes", f.classes->count() > 0, o.classes, c.num_classes);
  if (preset && o.csv.empty()) {
    agree("preset channels", true, preset->channels, c.channels);
    agree("preset window", true, preset->window, c.window_len);
    agree("preset classes", true, preset->classes, c.num_classes);
  }
  c.validate();
  return c;
}

std::vector<std::string> canonical_argv(const std::vector<std::string>& args, const Flags& f,
                                        std::uint64_t seed) {
  std::vector<std::string> argv = args;
  if (f.seed && f.seed->count() == 0) {
    argv.push_back("--seed");
    argv.push_back(std::to_string(seed));
  }
  return argv;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// --- Commands -------------------------------------------------------------------

int cmd_analyze(const Options& o, const Flags& f, const std::vector<std::string>& argv,
                std::ostream& out) {
  std::vector<std::pair<std::string, CostReport>> rows;
  json body;
  if (o.preset == "all") {
    body = json::array();
    for (const auto& p : dataset_presets()) {
      ModelConfig c = preset_config(p, resolve_variant(o));
      CostReport r = analyze(c);
      const MacComparison cmp = compare_with_published(p, r);
      body.push_back({{"preset", std::string(p.key)},
                      {"config", to_json(c)},
                      {"cost", to_json(r)},
                      {"publishedMacs", cmp.published},
                      {"relativeError", cmp.relative_error},
                      {"matchesPublished", cmp.matches},
                      {"note", cmp.note}});
      rows.emplace_back(std::string(p.key), std::move(r));
    }
  } else {
    const DatasetPreset* p = resolve_preset(o);
    const ModelConfig c = config_from_flags(o, f, p);
    const CostReport r = analyze(c);
    body = {{"config", to_json(c)}, {"cost", to_json(r)}};
    // Explicit dimensions that coincide with a preset are compared to it too.
    const DatasetPreset* ref = p;
    if (!ref) {
      for (const auto& q : dataset_presets()) {
        if (q.channels == c.channels && q.window == c.window_len && q.classes == c.num_classes) {
          ref = &q;
          break;
        }
      }
    }
    if (ref && c.variant == Variant::kA0Base) {
      const MacComparison cmp = compare_with_published(*ref, r);
      body["preset"] = std::string(ref->key);
      body["publishedMacs"] = cmp.published;
      body["relativeError"] = cmp.relative_error;
      body["matchesPublished"] = cmp.matches;
      body["note"] = cmp.note;
      rows.emplace_back(std::string(ref->key), r);
    } else {
      rows.emplace_back("custom", r);
    }
  }
  const std::string table = render_cost_table(rows);
  out << table;
  auto print_notes = [&](const json& entry) {
    if (entry.contains("note") && !entry["note"].get<std::string>().empty()) {
      out << "note: " << entry["note"].get<std::string>() << '\n';
    }
  };
  if (body.is_array()) {
    for (const auto& e : body) print_notes(e);
  } else {
    print_notes(body);
  }
  if (!o.out.empty()) {
    Run run("analyze", o, argv);
    run.config("model", body.is_array() ? json("all presets") : body["config"]);
    run.write_json("analysis.json", body);
    run.text("analysis.txt", table);
    run.finish();
  }
  return kExitOk;
}

int cmd_train(const Options& o, const Flags& f, const std::vector<std::string>& argv,
              std::ostream& out) {
  const DatasetPreset* preset = resolve_preset(o);
  const TrainConfig tc = train_config(o);
  Run run("train", o, argv);
  const Data d = load_data(o, f, preset, &run);
  ModelConfig cfg = config_for_data(o, f, preset, d);
  cfg.dropout = tc.dropout;
  run.config("model", to_json(cfg));
  run.config("train", to_json(tc));
  run.config("data", d.descriptor);

  const ExperimentReport report = multi_seed_run(cfg, tc, d.splits, o.jobs);
  const std::size_t best = report.best_seed();
  save_model(run.path("model.ubcl"), cfg, report.per_seed[best].weights);
  run.record("model.ubcl");
  run.record("model.ubcl.json");
  for (const auto& s : report.per_seed) {
    run.text("history_seed" + std::to_string(s.index) + ".jsonl", history_to_jsonl(s.history));
  }
  json rj = to_json(report);
  rj["dataset"] = d.name;
  rj["bestSeed"] = report.per_seed[best].index;
  if (preset) {
    rj["published"] = {{"macroF1Pct", preset->published_f1}, {"stdPct", preset->published_f1_std}};
  }
  run.write_json("report.json", rj);
  run.text("report.csv", report_to_csv(report));
  const std::string table = render_f1_table(d.name, report, preset ? o.preset : "");
  run.text("f1_table.txt", table);
  run.finish();
  out << table;
  for (const auto& s : report.per_seed) {
    out << "seed " << s.index << ": test macro-F1 " << fixed(s.macro_f1, 4) << " (best epoch "
        << s.best_epoch << ", val " << fixed(s.best_val_f1, 4) << ")\n";
  }
  out << "model: " << run.path("model.ubcl").string() << " (seed " << report.per_seed[best].index
      << ")\n";
  return kExitOk;
}

int cmd_quantize(const Options& o, const Flags& f, const std::vector<std::string>& argv,
                 std::ostream& out) {
  if (o.model.empty()) throw UsageError("quantize: --model <file> is required");
  const DatasetPreset* preset = resolve_preset(o);
  Run run("quantize", o, argv);
  const LoadedModel m = load_model(o.model);
  run.input(o.model);
  const Data d = load_data(o, f, preset, &run);
  if (static_cast<int>(d.splits.train.channels()) != m.config.channels ||
      static_cast<int>(d.splits.train.window_len()) != m.config.window_len) {
    throw DataError("calibration data shape does not match the model configuration");
  }
  run.config("model", to_json(m.config));
  run.config("data", d.descriptor);
  run.config("calibrationSamples", o.calib_samples);

  const ActivationRanges ranges = calibrate(m.weights, m.config, d.splits.train, o.calib_samples, o.seed);
  const QuantizedModel q = quantize_model(m.weights, m.config, ranges);
  save_quantized(run.path("model_int8.ubcl"), q);
  run.record("model_int8.ubcl");
  run.record("model_int8.ubcl.json");
  const DegradationReport r = degradation_report(m.weights, q, d.splits.test);
  json ranges_json = json::object();
  for (const auto& [k, v] : ranges) ranges_json[k] = {v.lo, v.hi};
  json rj = {{"dataset", d.name},
             {"fp32F1", r.fp32_f1},
             {"int8F1", r.int8_f1},
             {"deltaPct", r.delta_pct},
             {"agreement", r.agreement},
             {"int8FileBytes", fs::file_size(run.path("model_int8.ubcl"))},
             {"int8FootprintKb", int8_footprint_kb(m.config)},
             {"activationRanges", ranges_json}};
  if (preset && preset->published_fp32_f1) {
    rj["published"] = {{"fp32F1", *preset->published_fp32_f1},
                       {"int8F1", *preset->published_int8_f1},
                       {"averageDeltaPct", PublishedEfficiency::kAvgQuantDegradationPct}};
  }
  run.write_json("quantize_report.json", rj);
  std::ostringstream table;
  table << std::left << std::setw(14) << "Dataset" << std::right << std::setw(10) << "FP32 F1"
        << std::setw(10) << "INT8 F1" << std::setw(10) << "Delta%" << std::setw(11) << "Agreement"
        << '\n'
        << std::string(55, '-') << '\n'
        << std::left << std::setw(14) << d.name << std::right << std::setw(10) << fixed(r.fp32_f1, 4)
        << std::setw(10) << fixed(r.int8_f1, 4) << std::setw(10) << fixed(r.delta_pct, 2)
        << std::setw(11) << fixed(r.agreement, 4) << '\n';
  run.text("quantize.txt", table.str());
  run.finish();
  out << table.str();
  return kExitOk;
}

int cmd_ablate(const Options& o, const Flags& f, const std::vector<std::string>& argv,
               std::ostream& out) {
  const DatasetPreset* preset = resolve_preset(o);
  const TrainConfig tc = train_config(o);
  Run run("ablate", o, argv);
  const Data d = load_data(o, f, preset, &run);
  ModelConfig cfg = config_for_data(o, f, preset, d);
  cfg.variant = Variant::kA0Base;
  run.config("model", to_json(cfg));
  run.config("train", to_json(tc));
  run.config("data", d.descriptor);
  const auto entries = ablation_suite(cfg, tc, d.splits, o.jobs);
  run.write_json("ablation.json", to_json(entries));
  run.finish();
  out << std::left << std::setw(18) << "Variant" << std::right << std::setw(10) << "Params"
      << std::setw(12) << "MACs(K)" << std::setw(10) << "F1 (%)" << std::setw(10) << "dF1" << '\n';
  for (const auto& e : entries) {
    out << std::left << std::setw(18) << variant_label(e.variant) << std::right << std::setw(10)
        << e.report.cost.total_params << std::setw(12)
        << fixed(static_cast<double>(e.report.cost.total_macs) / 1000.0, 1) << std::setw(10)
        << fixed(e.report.mean_f1 * 100.0, 2) << std::setw(10) << fixed(e.f1_delta_pct, 2) << '\n';
  }
  return kExitOk;
}

std::set<int> parse_channels(const std::string& text, int channels) {
  std::set<int> out;
  if (text.empty() || text == "all") {
    for (int c = 0; c < channels; ++c) out.insert(c);
    return out;
  }
  std::istringstream is(text);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    try {
      std::size_t used = 0;
      const int c = std::stoi(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      out.insert(c);
    } catch (const std::exception&) {
      throw UsageError("invalid channel index '" + tok + "'");
    }
  }
  for (int c : out) {
    if (c < 0 || c >= channels) {
      throw UsageError("channel " + std::to_string(c) + " outside [0, " + std::to_string(channels) + ")");
    }
  }
  return out;
}

int cmd_robustness(const Options& o, const Flags& f, const std::vector<std::string>& argv,
                   std::ostream& out) {
  const DatasetPreset* preset = resolve_preset(o);
  Run run("robustness", o, argv);
  const Data d = load_data(o, f, preset, &run);
  ModelConfig cfg;
  WeightsF weights;
  if (!o.model.empty()) {
    LoadedModel m = load_model(o.model);
    run.input(o.model);
    cfg = m.config;
    weights = std::move(m.weights);
    if (static_cast<int>(d.splits.test.channels()) != cfg.channels ||
        static_cast<int>(d.splits.test.window_len()) != cfg.window_len) {
      throw DataError("test data shape does not match the model configuration");
    }
  } else {
    const TrainConfig tc = train_config(o);
    cfg = config_for_data(o, f, preset, d);
    cfg.dropout = tc.dropout;
    run.config("train", to_json(tc));
    ExperimentReport report = multi_seed_run(cfg, tc, d.splits, o.jobs);
    weights = std::move(report.per_seed[report.best_seed()].weights);
  }
  const std::set<int> dropped = parse_channels(o.drop_channels, cfg.channels);
  run.config("model", to_json(cfg));
  run.config("data", d.descriptor);
  run.config("droppedChannels", dropped);
  const auto entries = robustness_suite(weights, cfg, d.splits.test, dropped);
  json rj = {{"dataset", d.name},
             {"droppedChannels", dropped},
             {"appliedAfterNormalization", true},
             {"entries", to_json(entries)}};
  run.write_json("robustness.json", rj);
  run.finish();
  for (const auto& e : entries) {
    out << std::left << std::setw(18) << e.perturbation << " F1 " << fixed(e.f1_perturbed, 4)
        << "  delta " << fixed(e.delta_pct, 2) << " pts\n";
  }
  return kExitOk;
}

int cmd_hpo(const Options& o, const Flags& f, const std::vector<std::string>& argv,
            std::ostream& out) {
  const DatasetPreset* preset = resolve_preset(o);
  const TrainConfig tc = train_config(o);
  Run run("hpo", o, argv);
  const Data d = load_data(o, f, preset, &run);
  const ModelConfig cfg = config_for_data(o, f, preset, d);
  run.config("model", to_json(cfg));
  run.config("train", to_json(tc));
  run.config("data", d.descriptor);
  run.config("trials", o.trials);
  const SearchSpace space;
  const SearchResult sr = random_search(cfg, tc, space, o.trials, d.splits.train, d.splits.val, o.jobs);
  json trials = json::array();
  for (const auto& t : sr.trials) {
    trials.push_back({{"trial", t.index},
                      {"lr", t.lr},
                      {"weightDecay", t.weight_decay},
                      {"dropout", t.dropout},
                      {"valMacroF1", t.val_macro_f1}});
  }
  const json rj = {{"space",
                    {{"lr", {space.lr_lo, space.lr_hi}},
                     {"weightDecay", {space.wd_lo, space.wd_hi}},
                     {"dropout", {space.dropout_lo, space.dropout_hi}}}},
                   {"trialEpochs", kSearchEpochs},
                   {"trialPatience", kSearchPatience},
                   {"trials", trials},
                   {"bestTrial", sr.best_trial},
                   {"best", to_json(sr.best)}};
  run.write_json("hpo.json", rj);
  run.finish();
  out << "best trial " << sr.best_trial << ": lr " << sr.best.lr_max << ", weight decay "
      << sr.best.weight_decay << ", dropout " << sr.best.dropout << '\n';
  return kExitOk;
}

int cmd_replay(const std::string& manifest_path, const std::string& out_dir, std::ostream& out,
               std::ostream& err) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open manifest " + manifest_path);
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("invalid manifest: " + std::string(e.what()));
  }
  auto argv = m.at("argv").get<std::vector<std::string>>();
  bool replaced = false;
  for (std::size_t i = 0; i + 1 < argv.size(); ++i) {
    if (argv[i] == "--out") {
      argv[i + 1] = out_dir;
      replaced = true;
    }
  }
  if (!replaced) {
    argv.push_back("--out");
    argv.push_back(out_dir);
  }
  return run(argv, out, err);
}

}  // namespace

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return sha256_bytes(os.str());
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Tiny conv/BiLSTM activity recognition toolkit", "ubcl"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  Options o;
  std::map<std::string, Flags> flags;
  auto* analyze = app.add_subcommand("analyze", "Parameter, MAC and footprint analysis");
  add_common(*analyze, o, flags["analyze"]);

  auto* train = app.add_subcommand("train", "Multi-seed training run");
  add_common(*train, o, flags["train"]);
  add_train_flags(*train, o);
  add_data_flags(*train, o, flags["train"]);

  auto* quantize = app.add_subcommand("quantize", "INT8 post-training quantization");
  add_common(*quantize, o, flags["quantize"]);
  add_data_flags(*quantize, o, flags["quantize"]);
  quantize->add_option("--model", o.model, "FP32 model file");
  quantize->add_option("--calib-samples", o.calib_samples, "Calibration windows")
      ->check(CLI::PositiveNumber);

  auto* ablate = app.add_subcommand("ablate", "Train and compare variants A0-A4");
  add_common(*ablate, o, flags["ablate"]);
  add_train_flags(*ablate, o);
  add_data_flags(*ablate, o, flags["ablate"]);

  auto* robustness = app.add_subcommand("robustness", "Jitter and channel-dropout evaluation");
  add_common(*robustness, o, flags["robustness"]);
  add_train_flags(*robustness, o);
  add_data_flags(*robustness, o, flags["robustness"]);
  robustness->add_option("--model", o.model, "FP32 model file (trains one when omitted)");
  robustness->add_option("--drop-channels", o.drop_channels, "Comma-separated channels, or 'all'");

  auto* hpo = app.add_subcommand("hpo", "Random hyperparameter search");
  add_common(*hpo, o, flags["hpo"]);
  add_train_flags(*hpo, o);
  add_data_flags(*hpo, o, flags["hpo"]);
  hpo->add_option("--trials", o.trials, "Number of trials")->check(CLI::PositiveNumber);

  std::string manifest, replay_out;
  auto* replay = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  replay->add_option("manifest", manifest, "manifest.json")->required();
  replay->add_option("--out", replay_out, "Output directory")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "ubcl: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (replay->parsed()) return cmd_replay(manifest, replay_out, out, err);
    CLI::App* sub = app.get_subcommands().front();
    const Flags& f = flags.at(sub->get_name());
    if (f.seed->count() == 0) {
      if (const char* env = std::getenv("UBCL_MASTER_SEED")) {
        try {
          std::size_t used = 0;
          o.seed = std::stoull(env, &used);
          if (used != std::string(env).size()) throw std::invalid_argument(env);
        } catch (const std::exception&) {
          throw UsageError(std::string("UBCL_MASTER_SEED is not an unsigned integer: ") + env);
        }
      }
    }
    const std::vector<std::string> argv = canonical_argv(args, f, o.seed);
    const std::string& name = sub->get_name();
    if (name == "analyze") return cmd_analyze(o, f, argv, out);
    if (name == "train") return cmd_train(o, f, argv, out);
    if (name == "quantize") return cmd_quantize(o, f, argv, out);
    if (name == "ablate") return cmd_ablate(o, f, argv, out);
    if (name == "robustness") return cmd_robustness(o, f, argv, out);
    if (name == "hpo") return cmd_hpo(o, f, argv, out);
    throw std::logic_error("unhandled subcommand " + name);
  } catch (const ConfigError& e) {
    err << "ubcl: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    err << "ubcl: data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ModelFileError& e) {
    err << "ubcl: model file error: " << e.what() << '\n';
    return kExitModelFile;
  } catch (const std::exception& e) {
    err << "ubcl: internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

}  // namespace ubcl::cli
