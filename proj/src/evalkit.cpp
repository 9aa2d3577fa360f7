#include "ubcl/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "ubcl/parallel.hpp"

namespace ubcl {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : n_(num_classes), counts_(static_cast<std::size_t>(num_classes * num_classes), 0) {
  if (num_classes < 0) throw std::invalid_argument("negative class count");
}

void ConfusionMatrix::add(int truth, int predicted) {
  if (truth < 0 || truth >= n_ || predicted < 0 || predicted >= n_) {
    throw std::out_of_range("class index outside confusion matrix");
  }
  ++counts_[static_cast<std::size_t>(truth * n_ + predicted)];
}

std::size_t ConfusionMatrix::at(int truth, int predicted) const {
  return counts_.at(static_cast<std::size_t>(truth * n_ + predicted));
}

std::size_t ConfusionMatrix::total() const {
  std::size_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::vector<double> per_class_f1(const ConfusionMatrix& cm) {
  const int n = cm.num_classes();
  std::vector<double> f1(static_cast<std::size_t>(n), 0.0);
  for (int k = 0; k < n; ++k) {
    double tp = static_cast<double>(cm.at(k, k)), predicted = 0.0, actual = 0.0;
    for (int j = 0; j < n; ++j) {
      predicted += static_cast<double>(cm.at(j, k));
      actual += static_cast<double>(cm.at(k, j));
    }
    if (tp == 0.0) continue;
    const double p = tp / predicted, r = tp / actual;
    f1[static_cast<std::size_t>(k)] = 2.0 * p * r / (p + r);
  }
  return f1;
}

double macro_f1(const ConfusionMatrix& cm) {
  const auto f1 = per_class_f1(cm);
  if (f1.empty()) return 0.0;
  double s = 0.0;
  for (double v : f1) s += v;
  return s / static_cast<double>(f1.size());
}

int predict(const ModelConfig& config, const WeightsF& weights, const TensorF& window) {
  const TensorF logits = model_logits(config, weights, window);
  const auto v = logits.values();
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::vector<int> predict_all(const ModelConfig& config, const WeightsF& weights,
                             const WindowedDataset& data) {
  std::vector<int> out;
  out.reserve(data.size());
  for (const auto& w : data.windows) out.push_back(predict(config, weights, w));
  return out;
}

ConfusionMatrix confusion_from(std::span<const int> truth, std::span<const int> predicted,
                               int num_classes) {
  if (truth.size() != predicted.size()) throw std::invalid_argument("label list sizes differ");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
  return cm;
}

ConfusionMatrix evaluate(const ModelConfig& config, const WeightsF& weights,
                         const WindowedDataset& data) {
  const auto predicted = predict_all(config, weights, data);
  return confusion_from(data.labels, predicted, config.num_classes);
}

std::size_t ExperimentReport::best_seed() const {
  if (per_seed.empty()) throw std::logic_error("report has no seeds");
  std::size_t best = 0;
  for (std::size_t i = 1; i < per_seed.size(); ++i) {
    if (per_seed[i].best_val_f1 > per_seed[best].best_val_f1) best = i;
  }
  return best;
}

std::pair<double, double> mean_and_std(std::span<const double> values) {
  if (values.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  return {mean, std::sqrt(var)};
}

ExperimentReport multi_seed_run(const ModelConfig& config, const TrainConfig& train,
                                const DataSplits& splits, int jobs) {
  train.validate();
  ModelConfig cfg = config;
  cfg.dropout = train.dropout;
  cfg.validate();
  ExperimentReport report;
  report.config = cfg;
  report.train = train;
  report.cost = analyze(cfg);
  report.per_seed.resize(static_cast<std::size_t>(train.num_seeds));
  parallel_for(report.per_seed.size(), jobs, [&](std::size_t i) {
    Rng rng = rng_derive(train.master_seed, i);
    FitResult fr = fit(cfg, train, splits.train, splits.val, rng);
    SeedRun run;
    run.index = static_cast<int>(i);
    run.confusion = evaluate(cfg, fr.best_weights, splits.test);
    run.macro_f1 = macro_f1(run.confusion);
    run.best_val_f1 = fr.best_val_f1;
    run.best_epoch = fr.best_epoch;
    run.history = std::move(fr.history);
    run.weights = std::move(fr.best_weights);
    report.per_seed[i] = std::move(run);
  });
  std::vector<double> f1;
  for (const auto& r : report.per_seed) f1.push_back(r.macro_f1);
  std::tie(report.mean_f1, report.std_f1) = mean_and_std(f1);
  return report;
}

TensorF perturb_jitter(const TensorF& window) {
  const std::size_t T = window.dim(0), C = window.dim(1);
  if (T < 5) throw std::invalid_argument("jitter needs at least 5 timesteps");
  std::vector<std::size_t> kept;
  for (std::size_t t = 0; t < T; ++t) {
    if (t % 5 != 4) kept.push_back(t);
  }
  TensorF out(window.shape());
  std::size_t seg = 0;  // kept[seg] <= t < kept[seg + 1] where possible
  for (std::size_t t = 0; t < T; ++t) {
    while (seg + 2 < kept.size() && kept[seg + 1] <= t) ++seg;
    const auto t0 = static_cast<double>(kept[seg]), t1 = static_cast<double>(kept[seg + 1]);
    const double a = (static_cast<double>(t) - t0) / (t1 - t0);
    for (std::size_t c = 0; c < C; ++c) {
      if (t == kept[seg]) {
        out(t, c) = window(t, c);
      } else if (t == kept[seg + 1]) {
        out(t, c) = window(t, c);
      } else {
        const double v0 = window(kept[seg], c), v1 = window(kept[seg + 1], c);
        out(t, c) = static_cast<float>(v0 + a * (v1 - v0));
      }
    }
  }
  return out;
}

TensorF perturb_channel_dropout(const TensorF& window, const std::set<int>& channels) {
  const std::size_t C = window.dim(1);
  for (int c : channels) {
    if (c < 0 || static_cast<std::size_t>(c) >= C) {
      throw std::out_of_range("channel index " + std::to_string(c) + " outside [0, " +
                              std::to_string(C) + ")");
    }
  }
  TensorF out = window;
  for (std::size_t t = 0; t < window.dim(0); ++t)
    for (int c : channels) out(t, static_cast<std::size_t>(c)) = 0.0f;
  return out;
}

WindowedDataset map_windows(const WindowedDataset& data,
                            const std::function<TensorF(const TensorF&)>& fn) {
  WindowedDataset out = data;
  for (auto& w : out.windows) w = fn(w);
  return out;
}

std::vector<AblationEntry> ablation_suite(const ModelConfig& base, const TrainConfig& train,
                                          const DataSplits& splits, int jobs) {
  std::vector<AblationEntry> entries;
  for (Variant v : kAllVariants) {
    ModelConfig cfg = base;
    cfg.variant = v;
    AblationEntry e;
    e.variant = v;
    e.report = multi_seed_run(cfg, train, splits, jobs);
    entries.push_back(std::move(e));
  }
  const auto& ref = entries.front().report;
  for (auto& e : entries) {
    e.params_delta = e.report.cost.total_params - ref.cost.total_params;
    e.macs_ratio = static_cast<double>(e.report.cost.total_macs) /
                   static_cast<double>(ref.cost.total_macs);
    e.f1_delta_pct = (e.report.mean_f1 - ref.mean_f1) * 100.0;
  }
  return entries;
}

std::vector<RobustnessEntry> robustness_suite(const WeightsF& weights, const ModelConfig& config,
                                              const WindowedDataset& test,
                                              const std::set<int>& dropped_channels) {
  const double clean = macro_f1(evaluate(config, weights, test));
  auto entry = [&](std::string name, const WindowedDataset& data) {
    RobustnessEntry e;
    e.perturbation = std::move(name);
    e.f1_clean = clean;
    e.f1_perturbed = macro_f1(evaluate(config, weights, data));
    e.delta_pct = (clean - e.f1_perturbed) * 100.0;
    return e;
  };
  std::vector<RobustnessEntry> out;
  out.push_back(entry("clean", test));
  out.push_back(entry("jitter", map_windows(test, perturb_jitter)));
  out.push_back(entry("channel-dropout", map_windows(test, [&](const TensorF& w) {
                        return perturb_channel_dropout(w, dropped_channels);
                      })));
  return out;
}

// --- JSON -----------------------------------------------------------------------

nlohmann::json to_json(const ModelConfig& c) {
  return {{"channels", c.channels},         {"windowLen", c.window_len},
          {"numClasses", c.num_classes},    {"convFilters", c.conv_filters},
          {"kernel", c.kernel},             {"lstmHidden", c.lstm_hidden},
          {"dropout", c.dropout},           {"variant", std::string(variant_name(c.variant))}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.channels = j.at("channels").get<int>();
    c.window_len = j.at("windowLen").get<int>();
    c.num_classes = j.at("numClasses").get<int>();
    c.conv_filters = j.value("convFilters", c.conv_filters);
    c.kernel = j.value("kernel", c.kernel);
    c.lstm_hidden = j.value("lstmHidden", c.lstm_hidden);
    c.dropout = j.value("dropout", c.dropout);
    c.variant = parse_variant(j.value("variant", std::string("a0")));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model config JSON: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const TrainConfig& t) {
  return {{"maxEpochs", t.max_epochs},       {"patience", t.patience},
          {"lrMax", t.lr_max},               {"lrMin", t.lr_min},
          {"weightDecay", t.weight_decay},   {"batchSize", t.batch_size},
          {"dropout", t.dropout},            {"classWeighting", t.class_weighting},
          {"masterSeed", t.master_seed},     {"numSeeds", t.num_seeds}};
}

namespace {

nlohmann::json blocks_json(const std::vector<BlockCount>& blocks) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& b : blocks) out.push_back({{"block", b.name}, {"value", b.value}});
  return out;
}

}  // namespace

nlohmann::json to_json(const CostReport& r) {
  return {{"paramsByBlock", blocks_json(r.params_by_block)},
          {"totalParams", r.total_params},
          {"lstmParamsSingleBias", r.lstm_params_single_bias},
          {"totalParamsSingleBias", r.total_params_single_bias},
          {"macsByBlock", blocks_json(r.macs_by_block)},
          {"totalMacs", r.total_macs},
          {"receptiveField",
           {{"noStride", r.receptive_field.no_stride},
            {"withStride", r.receptive_field.with_stride}}},
          {"quantizedTensors", r.quantized_tensors},
          {"int8FootprintKb", r.int8_footprint_kb}};
}

nlohmann::json to_json(const ConfusionMatrix& cm) {
  nlohmann::json rows = nlohmann::json::array();
  for (int t = 0; t < cm.num_classes(); ++t) {
    nlohmann::json row = nlohmann::json::array();
    for (int p = 0; p < cm.num_classes(); ++p) row.push_back(cm.at(t, p));
    rows.push_back(std::move(row));
  }
  return rows;
}

nlohmann::json to_json(const ExperimentReport& r) {
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : r.per_seed) {
    seeds.push_back({{"seed", s.index},
                     {"macroF1", s.macro_f1},
                     {"bestValF1", s.best_val_f1},
                     {"bestEpoch", s.best_epoch},
                     {"perClassF1", per_class_f1(s.confusion)},
                     {"confusion", to_json(s.confusion)}});
  }
  nlohmann::json j = {{"schemaVersion", ExperimentReport::kSchemaVersion},
                      {"variant", std::string(variant_name(r.config.variant))},
                      {"config", to_json(r.config)},
                      {"train", to_json(r.train)},
                      {"perSeed", seeds},
                      {"meanF1", r.mean_f1},
                      {"stdF1", r.std_f1},
                      {"stdKind", "population"},
                      {"cost", to_json(r.cost)}};
  j["perturbation"] = r.perturbation ? nlohmann::json(*r.perturbation) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json to_json(const std::vector<AblationEntry>& entries) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& e : entries) {
    out.push_back({{"variant", std::string(variant_name(e.variant))},
                   {"label", std::string(variant_label(e.variant))},
                   {"paramsDelta", e.params_delta},
                   {"macsRatio", e.macs_ratio},
                   {"f1DeltaPct", e.f1_delta_pct},
                   {"report", to_json(e.report)}});
  }
  return out;
}

nlohmann::json to_json(const std::vector<RobustnessEntry>& entries) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& e : entries) {
    out.push_back({{"perturbation", e.perturbation},
                   {"f1Clean", e.f1_clean},
                   {"f1Perturbed", e.f1_perturbed},
                   {"deltaPct", e.delta_pct}});
  }
  return out;
}

std::string report_to_csv(const ExperimentReport& report) {
  std::ostringstream os;
  os << "variant,seed,macro_f1,best_epoch\n";
  os << std::setprecision(17);
  for (const auto& s : report.per_seed) {
    os << variant_name(report.config.variant) << ',' << s.index << ',' << s.macro_f1 << ','
       << s.best_epoch << '\n';
  }
  return os.str();
}

std::string render_f1_table(const std::string& dataset_name, const ExperimentReport& report,
                            const std::string& preset_key) {
  std::ostringstream os;
  os << std::left << std::setw(16) << "Dataset" << std::setw(22) << "Measured F1 (%)"
     << std::setw(22) << "Published F1 (%)" << "Seeds\n";
  os << std::string(66, '-') << '\n';
  std::ostringstream measured;
  measured << std::fixed << std::setprecision(2) << report.mean_f1 * 100.0 << " ± "
           << report.std_f1 * 100.0;
  std::string published = "-";
  if (const DatasetPreset* p = find_preset(preset_key)) {
    std::ostringstream ps;
    ps << std::fixed << std::setprecision(2) << p->published_f1 << " ± " << p->published_f1_std;
    published = ps.str();
  }
  // setw counts bytes; "±" is two bytes in UTF-8.
  os << std::left << std::setw(16) << dataset_name << std::setw(23) << measured.str()
     << std::setw(23) << published << report.per_seed.size() << '\n';
  return os.str();
}

}  // namespace ubcl
