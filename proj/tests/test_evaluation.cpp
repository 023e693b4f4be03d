#include "testing.hpp"

#include <fstream>

#include "cdseg/dataset.hpp"
#include "cdseg/evaluation.hpp"
#include "cdseg/experiments.hpp"
#include "helpers.hpp"

using namespace cdseg;
using torch::Tensor;

namespace {

LabelVolume labels_from(std::vector<std::uint8_t> v) {
  LabelVolume l(GridShape{1, 1, static_cast<std::int64_t>(v.size())});
  l.data = std::move(v);
  return l;
}

std::vector<MultimodalSample> small_cases(int n, GridShape g = {16, 16, 16}) {
  PhantomConfig c;
  c.cases = n;
  c.grid_shape = g;
  std::vector<MultimodalSample> out;
  for (int i = 0; i < n; ++i) out.push_back(generate_case(c, i));
  return out;
}

std::vector<const LabelVolume*> label_ptrs(const std::vector<MultimodalSample>& cases) {
  std::vector<const LabelVolume*> out;
  for (const auto& c : cases) out.push_back(&c.label_map);
  return out;
}

}  // namespace

TEST_CASE("region masks") {
  const auto ed_only = region_masks(labels_from({0, 2, 2, 0}));
  CHECK(ed_only.wt == std::vector<std::uint8_t>{0, 1, 1, 0});
  CHECK(ed_only.tc == std::vector<std::uint8_t>{0, 0, 0, 0});
  CHECK(ed_only.et == std::vector<std::uint8_t>{0, 0, 0, 0});

  const auto et_only = region_masks(labels_from({3, 0, 3}));
  CHECK(et_only.wt == et_only.tc);
  CHECK(et_only.tc == et_only.et);

  const auto mixed = region_masks(labels_from({0, 1, 2, 3, 1, 2}));
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(mixed.et[i] <= mixed.tc[i]);
    CHECK(mixed.tc[i] <= mixed.wt[i]);
  }
  CHECK_THROWS_AS(region_masks(labels_from({0, 4})), std::invalid_argument);
}

TEST_CASE("dice conventions") {
  const std::vector<std::uint8_t> a{1, 1, 0, 0}, b{0, 0, 1, 1}, empty{0, 0, 0, 0};
  CHECK(dice(a, a) == 100.0);
  CHECK(dice(a, b) == 0.0);
  CHECK(dice(empty, empty) == 100.0);
  CHECK(dice(a, empty) == 0.0);
  const std::vector<std::uint8_t> p{1, 1, 1, 1, 0, 0}, g{0, 0, 1, 1, 1, 1};
  CHECK(dice(p, g) == 50.0);
  CHECK_THROWS(dice(a, std::vector<std::uint8_t>{1}));
}

TEST_CASE("oracle segmenter fills the grid with 100") {
  const auto cases = small_cases(3);
  const Segmenter oracle = [](const std::vector<const MultimodalSample*>& batch, Availability) {
    std::vector<LabelVolume> out;
    for (const auto* s : batch) out.push_back(s->label_map);
    return out;
  };
  const SubsetGrid grid = evaluate_segmenter(oracle, cases);
  REQUIRE(grid.rows.size() == 15);
  for (const auto& r : grid.rows) {
    CHECK(r.dice.wt == 100.0);
    CHECK(r.dice.tc == 100.0);
    CHECK(r.dice.et == 100.0);
  }
  CHECK(grid.macro() == 100.0);

  const std::string csv = grid.to_csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 17);  // header + 15 rows + average
  CHECK(grid.to_markdown().find("**Average**") != std::string::npos);
  CHECK(grid.to_json()["rows"].size() == 15);
}

TEST_CASE("model subset grid: shape and chunking invariance") {
  const auto cases = small_cases(3);
  torch::manual_seed(1);
  ModelConfig mc;
  mc.levels = 2;
  mc.base_width = 4;
  CausalStream stream(Geometry{{16, 16, 16}, mc});
  const auto a = evaluate_subsets(stream, cases, 1);
  const auto b = evaluate_subsets(stream, cases, 4);
  REQUIRE(a.rows.size() == 15);
  CHECK(a.to_json() == b.to_json());
  CHECK(stream->is_training());
  for (std::size_t i = 0; i < 15; ++i) CHECK(a.rows[i].mask == subset_grid_masks()[i]);
}

TEST_CASE("silhouette") {
  SUBCASE("four separated clouds") {
    torch::manual_seed(2);
    std::vector<int> labels;
    std::vector<Tensor> parts;
    for (int k = 0; k < 4; ++k) {
      Tensor centre = torch::zeros({1, 4}, torch::kDouble);
      centre[0][k] = 20.0;
      parts.push_back(centre + torch::randn({25, 4}, torch::kDouble));
      labels.insert(labels.end(), 25, k);
    }
    CHECK(silhouette(torch::cat(parts), labels) > 0.9);
  }
  SUBCASE("coincident points score 0") {
    CHECK(silhouette(torch::ones({8, 3}), {0, 0, 1, 1, 2, 2, 3, 3}) == 0.0);
  }
  SUBCASE("matches a hand computation") {
    // 1-D points {0, 1} in cluster 0 and {10} in cluster 1
    const Tensor p = torch::tensor({0.0, 1.0, 10.0}, torch::kDouble).reshape({3, 1});
    const double s0 = 1.0 - 1.0 / 10.0, s1 = 1.0 - 1.0 / 9.0;  // a=1, b=10 and 9; singleton scores 0
    CHECK(silhouette(p, {0, 0, 1}) == doctest::Approx((s0 + s1 + 0.0) / 3.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(silhouette(torch::randn({4, 2}), {0, 0, 0, 0}), std::invalid_argument);
}

TEST_CASE("balanced accuracy") {
  CHECK(balanced_accuracy({0, 0, 0, 1}, {0, 0, 0, 0}, 2) == 0.5);
  CHECK(balanced_accuracy({0, 1, 2, 3}, {0, 1, 2, 3}, 4) == 1.0);
}

TEST_CASE("constant-mask floor is the best fixed mask") {
  // two 4-voxel cases; exhaustive search over all 16 masks is the oracle
  const auto a = labels_from({1, 1, 0, 0});
  const auto b = labels_from({0, 2, 2, 0});
  double best = 0;
  for (int bits = 0; bits < 16; ++bits) {
    std::vector<std::uint8_t> m(4);
    for (int i = 0; i < 4; ++i) m[static_cast<std::size_t>(i)] = (bits >> i) & 1;
    best = std::max(best, (dice(m, region_masks(a).wt) + dice(m, region_masks(b).wt)) / 2);
  }
  CHECK(constant_mask_floor({&a, &b}) == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("segmentation probe: noise features sit at the chance floor, informative features rise above it") {
  const auto train = small_cases(60);
  PhantomConfig pc;
  pc.grid_shape = {16, 16, 16};
  std::vector<MultimodalSample> test;
  for (int i = 100; i < 140; ++i) test.push_back(generate_case(pc, i));
  const Geometry g{{16, 16, 16}, ModelConfig{}};
  ProbeOptions opt;
  opt.epochs = 30;
  opt.learning_rate = 2e-3;
  const double floor = constant_mask_floor(label_ptrs(test));

  // oracle: the best thresholded whole-tumor frequency map of the training
  // cases, scored on the test cases; the floor itself is fitted in-sample
  const std::size_t v = 16 * 16 * 16;
  std::vector<int> freq(v);
  for (const auto& c : train)
    for (std::size_t i = 0; i < v; ++i) freq[i] += c.label_map.data[i] != 0;
  auto mean_wt_dice = [&](const std::vector<MultimodalSample>& cases, int threshold) {
    std::vector<std::uint8_t> m(v);
    for (std::size_t i = 0; i < v; ++i) m[i] = freq[i] >= threshold;
    double total = 0;
    for (const auto& c : cases) total += dice(m, region_masks(c.label_map).wt);
    return total / static_cast<double>(cases.size());
  };
  int best_threshold = 1;
  for (int t = 2; t <= 60; ++t)
    if (mean_wt_dice(train, t) > mean_wt_dice(train, best_threshold)) best_threshold = t;
  const double frequency_mask = mean_wt_dice(test, best_threshold);

  torch::manual_seed(3);
  const double noise = probe_dice(torch::randn({60, 20}), label_ptrs(train), torch::randn({40, 20}), label_ptrs(test),
                                  g, opt);
  MESSAGE("chance floor " << floor << ", train-frequency mask " << frequency_mask << ", noise probe " << noise);
  CHECK(noise <= floor + 1.0);
  CHECK(noise >= floor - 6.0);
  CHECK(std::fabs(noise - frequency_mask) <= 3.0);

  // the tumor centre of mass and size carry the answer
  auto informative = [](const std::vector<MultimodalSample>& cases) {
    std::vector<float> f;
    for (const auto& c : cases) {
      double z = 0, y = 0, x = 0, n = 0;
      for (std::int64_t k = 0; k < c.shape.d; ++k)
        for (std::int64_t j = 0; j < c.shape.h; ++j)
          for (std::int64_t i = 0; i < c.shape.w; ++i)
            if (c.label_map.at(k, j, i)) {
              z += k;
              y += j;
              x += i;
              ++n;
            }
      f.insert(f.end(), {static_cast<float>(z / n), static_cast<float>(y / n), static_cast<float>(x / n),
                         static_cast<float>(std::cbrt(n))});
    }
    return torch::tensor(f).reshape({static_cast<int64_t>(cases.size()), 4});
  };
  opt.epochs = 60;
  const double info = probe_dice(informative(train), label_ptrs(train), informative(test), label_ptrs(test), g, opt);
  MESSAGE("informative probe " << info);
  CHECK(info > floor);
  CHECK(info <= 100.0);
}

TEST_CASE("heatmap export writes PNG files") {
  torch::manual_seed(4);
  ModelConfig mc;
  mc.levels = 2;
  mc.base_width = 4;
  mc.bias_dim = 4;
  CausalDisenSeg model(GridShape{16, 16, 16}, mc);
  const auto dir = testutil::temp_dir("heatmaps");
  const auto paths = export_heatmaps(model, small_cases(2), 4, dir);
  REQUIRE(paths.size() == 2);
  std::ifstream in(paths[0], std::ios::binary);
  char sig[8];
  in.read(sig, 8);
  CHECK(std::string(sig + 1, 3) == "PNG");
}

TEST_CASE("ablation ladder and sweep bookkeeping") {
  const auto ladder = ablation_ladder(LossWeights{});
  REQUIRE(ladder.size() == 6);
  CHECK(ladder[0].second == LossWeights::zeros());
  CHECK(ladder[3].second == LossWeights{0.1, 0.1, 1.0, 0, 0});
  CHECK(ladder[5].second == LossWeights{});

  std::size_t settings = 0;
  for (const auto& [name, values] : sweep_grid()) settings += values.size();
  CHECK(sweep_grid().size() == 5);
  CHECK(settings == 15);

  std::vector<SweepRow> rows;
  const double avgs[5][3] = {{70.0, 72.5, 71.0}, {60, 60, 60}, {10, 30, 20}, {1.25, 0.5, 3.0}, {-1, 2, 0}};
  const char* names[5] = {"cvae", "hsic", "rc", "conf", "dis"};
  for (int c = 0; c < 5; ++c) {
    for (int v = 0; v < 3; ++v) {
      SweepRow r;
      r.coefficient = names[c];
      r.value = v;
      r.mean.avg = avgs[c][v];
      rows.push_back(r);
    }
  }
  const auto ranges = sweep_ranges(rows);
  REQUIRE(ranges.size() == 5);
  CHECK(ranges[0] == std::make_pair(std::string("cvae"), 2.5));
  CHECK(ranges[1].second == 0.0);
  CHECK(ranges[2].second == 20.0);
  CHECK(ranges[3].second == 2.5);
  CHECK(ranges[4].second == 3.0);
}
