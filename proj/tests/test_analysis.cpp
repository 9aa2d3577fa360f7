#include <doctest.h>

#include <cmath>

#include "ubcl/analysis.hpp"

using namespace ubcl;

namespace {

ModelConfig dims(int C, int T, int classes, Variant v = Variant::kA0Base) {
  ModelConfig c;
  c.channels = C;
  c.window_len = T;
  c.num_classes = classes;
  c.variant = v;
  return c;
}

std::int64_t block(const std::vector<BlockCount>& blocks, const std::string& name) {
  for (const auto& b : blocks)
    if (b.name == name) return b.value;
  FAIL("missing block " << name);
  return -1;
}

}  // namespace

TEST_CASE("single-bias BiLSTM count") {
  CHECK(lstm_params_single_bias(dims(9, 128, 6)) == 7872);
  // 2 * 4 * H * (F + H + 1), evaluated independently
  CHECK(2 * 4 * 24 * (16 + 24 + 1) == 7872);
}

TEST_CASE("UCI-HAR parameter totals") {
  const CostReport r = analyze(dims(9, 128, 6));
  CHECK(r.total_params == 10454);
  CHECK(r.total_params_single_bias == 10262);
  CHECK(block(r.params_by_block, "conv1") == 16 * 9 * 5 + 16);
  CHECK(block(r.params_by_block, "bn1") == 32);
  CHECK(block(r.params_by_block, "conv2") == 16 * 16 * 5 + 16);
  CHECK(block(r.params_by_block, "bilstm") == 2 * (96 * 40 + 192));
  CHECK(block(r.params_by_block, "head") == 48 * 6 + 6);
  CHECK(r.total_params == sum_blocks(r.params_by_block));
}

TEST_CASE("average parameter count over presets within 5% of 11.4K") {
  double sum = 0;
  for (const auto& p : dataset_presets()) sum += static_cast<double>(analyze(preset_config(p)).total_params);
  const double mean = sum / static_cast<double>(dataset_presets().size());
  CHECK(std::abs(mean - 11400.0) / 11400.0 <= 0.05);
}

TEST_CASE("count_params equals materialized scalars for every preset and variant") {
  for (const auto& p : dataset_presets()) {
    for (Variant v : kAllVariants) {
      const ModelConfig c = preset_config(p, v);
      Rng rng(1);
      const WeightsF w = build_model(c, rng);
      CHECK(static_cast<std::int64_t>(w.learnable_scalars()) == sum_blocks(count_params(c)));
    }
  }
}

TEST_CASE("variant parameter relations") {
  const auto a0 = analyze(dims(9, 128, 6)).total_params;
  CHECK(analyze(dims(9, 128, 6, Variant::kA2UniDir)).total_params < a0);
  CHECK(analyze(dims(9, 128, 6, Variant::kA4MeanPool)).total_params == a0);
  CHECK(analyze(dims(9, 128, 6, Variant::kA1NoPool)).total_params == a0);
  const auto uni = count_params(dims(9, 128, 6, Variant::kA2UniDir));
  CHECK(block(uni, "head") == 24 * 6 + 6);
}

TEST_CASE("MAC counts") {
  const CostReport uci = analyze(dims(9, 128, 6));
  CHECK(block(uci.macs_by_block, "conv1") == 16 * 9 * 5 * 128);
  CHECK(block(uci.macs_by_block, "conv2") == 16 * 16 * 5 * 64);
  CHECK(block(uci.macs_by_block, "bilstm") == 2 * 96 * 40 * 32);
  CHECK(block(uci.macs_by_block, "head") == 48 * 6);
  CHECK(uci.total_macs == 420128);
  CHECK(uci.total_macs == sum_blocks(uci.macs_by_block));
  CHECK(analyze(dims(3, 128, 6)).total_macs == 358688);
  const auto opp = analyze(dims(79, 128, 5)).total_macs;
  CHECK(std::abs(static_cast<double>(opp) - 1140000.0) / 1140000.0 < 0.005);
  CHECK(analyze(dims(30, 98, 11)).total_macs == 16 * 30 * 5 * 98 + 16 * 16 * 5 * 49 + 2 * 96 * 40 * 24 + 48 * 11);
}

TEST_CASE("A1/A0 MAC ratio on UCI-HAR") {
  const double ratio = static_cast<double>(analyze(dims(9, 128, 6, Variant::kA1NoPool)).total_macs) /
                       static_cast<double>(analyze(dims(9, 128, 6)).total_macs);
  CHECK(ratio >= 2.8);
  CHECK(ratio <= 3.3);
}

TEST_CASE("receptive field") {
  CHECK(receptive_field(dims(9, 128, 6)).no_stride == 9);
  CHECK(receptive_field(dims(9, 128, 6)).with_stride == 13);
  CHECK(receptive_field(dims(9, 128, 6, Variant::kA3SingleConv)).no_stride == 5);
  CHECK(receptive_field(dims(9, 128, 6, Variant::kA1NoPool)).with_stride == 9);
}

TEST_CASE("INT8 footprint formula") {
  CHECK(int8_footprint_bytes(0, 0) / 1024.0 == doctest::Approx(0.25));
  const double uci = int8_footprint_kb(dims(9, 128, 6));
  CHECK(uci == doctest::Approx((10454 + 8 * 18 + 256) / 1024.0));
  CHECK(uci == doctest::Approx(10.5).epsilon(0.02));
  CHECK(int8_footprint_kb(dims(79, 128, 5)) > uci);
}

TEST_CASE("efficiency metrics") {
  const auto e = efficiency_metrics(0.8368, 11400, 485000);
  CHECK(e.f1_per_kparams == doctest::Approx(7.34).epsilon(0.001));
  CHECK(e.f1_per_mmacs == doctest::Approx(172.5).epsilon(0.001));
  const auto z = efficiency_metrics(0.0, 100, 100);
  CHECK(z.f1_per_kparams == 0.0);
  CHECK(z.f1_per_mmacs == 0.0);
  CHECK_THROWS(efficiency_metrics(0.5, 0, 100));
}

TEST_CASE("published MAC comparison") {
  for (const auto& p : dataset_presets()) {
    const auto cmp = compare_with_published(p, analyze(preset_config(p)));
    const bool loose = p.key == "skoda" || p.key == "daphnet";
    CAPTURE(p.key);
    if (loose) {
      CHECK_FALSE(cmp.matches);
      CHECK(std::abs(cmp.relative_error) <= 0.20);
      CHECK_FALSE(cmp.note.empty());
    } else if (p.key != "unimib") {
      CHECK(cmp.matches);
      CHECK(cmp.note.empty());
    }
  }
  CHECK(find_preset("nope") == nullptr);
  CHECK(preset_list().find("daphnet") != std::string::npos);
}

TEST_CASE("cost table rendering") {
  std::vector<std::pair<std::string, CostReport>> rows = {{"uci-har", analyze(dims(9, 128, 6))}};
  const std::string t = render_cost_table(rows);
  CHECK(t.find("UCI-HAR") != std::string::npos);
  CHECK(t.find("420.1") != std::string::npos);
}
