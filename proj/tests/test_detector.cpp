#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "patchforge/detector.hpp"
#include "patchforge/errors.hpp"
#include "patchforge/trainer.hpp"

using namespace patchforge;
using namespace patchforge::detect;
using patches::CaseRecord;
using patches::Mask;

namespace {

// Every parameter zero except the last bias, so the network ignores its
// input and emits softmax(bias).
net::Network constant_net(std::vector<float> last_bias) {
  auto spec = net::spec_with_classes(last_bias.size() == 2 ? net::kBinaryClassNames : net::kMultiClassNames);
  auto network = net::Network::build(spec, 1);
  for (auto& p : network.params()) {
    p.weights.fill(0.0f);
    p.bias.fill(0.0f);
  }
  auto& last = network.params().back().bias;
  for (std::size_t i = 0; i < last.size(); ++i) last[i] = last_bias[i];
  return network;
}

CaseRecord small_case() {
  auto c = fixture::rect_case(48, 48, 12, 12, 36, 36, 120.0f, "small");
  for (std::size_t i = 0; i < c.image.size(); ++i)
    if (!c.liver.bits[i]) c.image[i] = 40.0f;
  fixture::add_disk_lesion(c, 24, 24, 4);
  std::mt19937 rng(3);
  std::normal_distribution<float> noise(0.0f, 5.0f);
  for (std::size_t i = 0; i < c.image.size(); ++i) {
    if (c.lesions[0].bits[i]) c.image[i] = 70.0f;
    c.image[i] += noise(rng);
  }
  return c;
}

}  // namespace

TEST_CASE("non-lesion fusion") {
  auto check = [](std::vector<double> p, double lesion, double non_lesion) {
    const auto f = fuse_non_lesion(p);
    CHECK(f.lesion == doctest::Approx(lesion));
    CHECK(f.non_lesion == doctest::Approx(non_lesion));
  };
  check({0.6, 0.3, 0.1}, 0.6, 0.4);
  check({1, 0, 0}, 1, 0);
  check({1.0 / 3, 1.0 / 3, 1.0 / 3}, 1.0 / 3, 2.0 / 3);
  CHECK_THROWS_AS(fuse_non_lesion(std::vector<double>{0.5, 0.6, 0.1}), DomainError);
  CHECK_THROWS_AS(fuse_non_lesion(std::vector<double>{1.2, -0.2, 0.0}), DomainError);
  CHECK_THROWS_AS(fuse_non_lesion(std::vector<double>{1.0}), DomainError);
}

TEST_CASE("fusion keeps a two-class distribution for random simplex points") {
  std::mt19937_64 rng(17);
  std::exponential_distribution<double> e(1.0);
  double worst = 0;
  for (int i = 0; i < 100000; ++i) {
    const double a = e(rng), b = e(rng), c = e(rng), s = a + b + c;
    const std::vector<double> p{a / s, b / s, c / s};
    const auto f = fuse_non_lesion(p);
    worst = std::max(worst, std::abs(f.lesion + f.non_lesion - 1.0));
    REQUIRE(f.lesion >= 0.0);
    REQUIRE(f.non_lesion >= 0.0);
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("connected components match a flood-fill oracle") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 5 + static_cast<int>(rng() % 40), w = 5 + static_cast<int>(rng() % 40);
    const double density = 0.2 + 0.5 * static_cast<double>(rng() % 100) / 100.0;
    Mask m(static_cast<std::size_t>(h), static_cast<std::size_t>(w));
    std::bernoulli_distribution on(density);
    for (auto& b : m.bits) b = on(rng);
    const auto labels = oracle::flood_fill_labels(m.bits, h, w);
    const auto comps = connected_components(m);
    const int expected = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end());
    REQUIRE(static_cast<int>(comps.size()) == expected);
    for (std::size_t k = 0; k < comps.size(); ++k) {
      std::size_t count = 0;
      for (std::size_t i = 0; i < labels.size(); ++i) count += labels[i] == static_cast<int>(k + 1);
      REQUIRE(comps[k].area() == count);
      for (auto i : comps[k].pixels) REQUIRE(labels[i] == static_cast<int>(k + 1));
    }
  }
}

TEST_CASE("thresholding") {
  ProbabilityMap map{Tensor({1, 2}), Mask(1, 2)};
  map.lesion_prob[0] = 0.4f;
  map.lesion_prob[1] = 0.6f;
  map.evaluated.bits = {1, 1};
  const auto d = threshold_map(map, 0.5);
  CHECK(d.binary.bits == std::vector<std::uint8_t>{0, 1});
  CHECK(d.components.size() == 1);

  ProbabilityMap two{Tensor({10, 10}), Mask(10, 10)};
  for (auto& b : two.evaluated.bits) b = 1;
  for (std::size_t y : {1, 2})
    for (std::size_t x : {1, 2}) two.lesion_prob.at(y, x) = 0.9f;
  two.lesion_prob.at(7, 7) = 0.8f;
  CHECK(threshold_map(two, 0.5).components.size() == 2);
  CHECK(threshold_map(two, 0.5, 2).components.size() == 1);
  CHECK(threshold_map(two, 0.85).components.size() == 1);
  CHECK(threshold_map(two, 1.0).components.empty());
  CHECK_THROWS_AS(threshold_map(two, 1.5), DomainError);

  // raising t never adds a set bit
  std::mt19937 rng(2);
  std::uniform_real_distribution<float> u(0, 1);
  for (float& v : two.lesion_prob.data()) v = u(rng);
  Mask prev = threshold_map(two, 0.0).binary;
  for (double t = 0.05; t <= 1.0; t += 0.05) {
    const Mask cur = threshold_map(two, t).binary;
    for (std::size_t i = 0; i < cur.bits.size(); ++i) CHECK((!cur.bits[i] || prev.bits[i]));
    CHECK(threshold_map(two, t, 3).components.size() <= threshold_map(two, t).components.size());
    prev = cur;
  }
}

TEST_CASE("uniform network gives a constant one-third map on the liver") {
  const auto c = small_case();
  const auto network = constant_net({0, 0, 0});
  const auto map = infer_map(network, c, 100.0, 3);
  CHECK(map.evaluated == c.liver);
  for (std::size_t i = 0; i < c.image.size(); ++i) {
    if (c.liver.bits[i]) {
      CHECK(map.lesion_prob[i] == doctest::Approx(1.0 / 3).epsilon(1e-6));
    } else {
      CHECK(map.lesion_prob[i] == 0.0f);
    }
  }
}

TEST_CASE("stride-1 map equals single-patch forward calls, for any worker count") {
  const auto c = small_case();
  const auto network = net::build_parallel_multiclass(8);
  const auto map = infer_map(network, c, 100.0, 1, 1);
  CHECK(map.evaluated == c.liver);
  std::mt19937 rng(4);
  int checked = 0;
  while (checked < 5) {
    const long x = 12 + static_cast<long>(rng() % 24), y = 12 + static_cast<long>(rng() % 24);
    const auto s = patches::extract_patch_pair(c, x, y, 100.0);
    const Tensor p = network.forward(s.small, s.large);
    const float expect = static_cast<float>(static_cast<double>(p[0]));
    CHECK(map.lesion_prob.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) == expect);
    ++checked;
  }
  const auto parallel = infer_map(network, c, 100.0, 1, 3);
  CHECK(parallel.lesion_prob == map.lesion_prob);
}

TEST_CASE("stride fill copies the nearest scored pixel") {
  const auto c = small_case();
  const auto network = net::build_parallel_multiclass(8);
  const auto map = infer_map(network, c, 100.0, 3);
  CHECK(map.evaluated == c.liver);
  // lattice anchored at the liver corner (12, 12)
  for (long y = 12; y < 36; ++y)
    for (long x = 12; x < 36; ++x) {
      long best = -1, best_d2 = 0;
      for (long yy = 12; yy < 36; yy += 3)
        for (long xx = 12; xx < 36; xx += 3) {
          const long d2 = (xx - x) * (xx - x) + (yy - y) * (yy - y);
          if (best < 0 || d2 < best_d2) {
            best = yy * 48 + xx;
            best_d2 = d2;
          }
        }
      CHECK(map.lesion_prob.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) ==
            map.lesion_prob[static_cast<std::size_t>(best)]);
    }
}

TEST_CASE("hierarchical detection with constant second stages") {
  const auto c = small_case();
  const auto stage1 = net::build_binary(5);
  const auto always = constant_net({30, -30});
  const auto never = constant_net({-30, 30});
  const auto first = threshold_map(infer_map(stage1, c, 100.0, 2), 0.5);
  const auto kept = hierarchical_detect(stage1, always, c, 100.0, 0.5, 0.5, 2);
  CHECK(kept.detection.binary == first.binary);
  const auto dropped = hierarchical_detect(stage1, never, c, 100.0, 0.5, 0.5, 2);
  CHECK(dropped.detection.components.empty());
}

TEST_CASE("second stage trained on lesion vs boundary removes a boundary candidate") {
  auto c = small_case();
  const double mean = patches::liver_mean(c);
  const auto cands = patches::enumerate_candidates(c, 1);
  const auto balance = patches::balance_classes(std::span(&cands, 1), 150, 1);
  const auto samples = patches::relabel(patches::materialize(std::span(&c, 1), balance.selected, mean),
                                        patches::LabelScheme::BoundaryOnly);
  auto stage2 = net::build_binary(2);
  train::TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 16;
  cfg.base_lr = 0.01;
  cfg.seed = 3;
  const auto log = train::train(stage2, samples, cfg);
  MESSAGE("stage-2 final training accuracy " << log.epochs.back().accuracy);

  // stage 1 flags the whole liver: one candidate touching the boundary
  const auto stage1 = constant_net({30, -30});
  const auto r = hierarchical_detect(stage1, stage2, c, mean, 0.5, 0.5, 1);
  CHECK(threshold_map(r.stage1, 0.5).components.size() == 1);
  bool lesion_hit = false, touches_edge = false;
  for (const auto& comp : r.detection.components)
    for (auto i : comp.pixels) {
      lesion_hit = lesion_hit || c.lesions[0].bits[i];
      const long x = i % 48, y = i / 48;
      touches_edge = touches_edge || x < 15 || y < 15 || x > 32 || y > 32;
    }
  CHECK(lesion_hit);
  CHECK_FALSE(touches_edge);
  if (touches_edge) {
    std::string rows;
    for (std::size_t y = 10; y < 38; ++y) {
      for (std::size_t x = 10; x < 38; ++x) rows += r.detection.binary.at(y, x) ? '#' : (c.lesions[0].at(y, x) ? 'o' : '.');
      rows += '\n';
    }
    MESSAGE(rows);
  }
}

TEST_CASE("map files and overlay") {
  const auto dir = fixture::temp_dir("detector_files");
  const auto c = small_case();
  const auto map = infer_map(constant_net({0, 0, 0}), c, 100.0, 4);
  save_probability_map(dir / "m.tnsr", map);
  const auto back = load_probability_map(dir / "m.tnsr");
  CHECK(back.lesion_prob == map.lesion_prob);
  CHECK(back.evaluated == map.evaluated);

  Mask m(48, 48);
  for (std::size_t x = 20; x < 28; ++x) m.set(24, x);  // hits the lesion
  m.set(14, 14);                                        // false positive
  const auto d = make_detection(m);
  save_detection_map(dir / "d.tnsr", d);
  const auto d2 = load_detection_map(dir / "d.tnsr");
  CHECK(d2.binary == d.binary);
  CHECK(d2.components.size() == 2);

  write_overlay_ppm(dir / "o.ppm", c, d);
  std::ifstream in(dir / "o.ppm", std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  in.get();
  std::vector<unsigned char> rgb(48 * 48 * 3);
  in.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  CHECK(magic == "P6");
  CHECK(w == 48);
  auto px = [&](int y, int x) { return std::array<int, 3>{rgb[(y * 48 + x) * 3], rgb[(y * 48 + x) * 3 + 1], rgb[(y * 48 + x) * 3 + 2]}; };
  CHECK(px(24, 24)[1] == 200);  // TP green
  CHECK(px(14, 14)[0] == 220);  // FP red
  std::filesystem::remove_all(dir);
}

TEST_CASE("network without classes is rejected") {
  const auto c = small_case();
  CHECK_THROWS_AS(infer_map(net::Network{}, c, 0.0), CheckpointError);
}
