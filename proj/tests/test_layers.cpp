#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "oracles.hpp"
#include "patchforge/layers.hpp"

using namespace patchforge;
using namespace patchforge::layers;
using oracle::random_tensor;
using oracle::relative_error;

namespace {

constexpr double kEps = 1e-3;
constexpr double kRelTol = 1e-4;
constexpr int kSeeds = 20;

LayerParams<double> random_conv(std::size_t k, std::size_t cin, std::size_t cout, std::uint64_t seed) {
  return {random_tensor({k, k, cin, cout}, seed), random_tensor({cout}, seed + 1)};
}

double max_rel(const std::vector<double>& numeric, const TensorD& analytic) {
  double worst = 0;
  for (std::size_t i = 0; i < numeric.size(); ++i) worst = std::max(worst, relative_error(analytic[i], numeric[i]));
  return worst;
}

}  // namespace

TEST_CASE("conv2d trivial cases") {
  SUBCASE("zero input with zero bias gives zero output") {
    const TensorD in({3, 3, 1});
    auto p = random_conv(3, 1, 2, 7);
    p.bias.fill(0.0);
    const TensorD out = conv2d_forward(in, p, 1, 1);
    for (double v : out.data()) CHECK(v == 0.0);
  }
  SUBCASE("1x1 identity kernel") {
    const TensorD in = random_tensor({4, 5, 1}, 3);
    const LayerParams<double> p(TensorD({1, 1, 1, 1}, 1.0), TensorD({1}));
    CHECK(conv2d_forward(in, p, 0, 1) == in);
  }
  SUBCASE("output size follows floor((in + 2 pad - k) / stride) + 1") {
    const TensorD in = random_tensor({7, 9, 2}, 5);
    const auto out = conv2d_forward(in, random_conv(3, 2, 4, 1), 1, 2);
    CHECK(out.shape() == Shape{4, 5, 4});
  }
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  const TensorD in = random_tensor({5, 5, 2}, 11);
  const auto p = random_conv(3, 2, 4, 12);
  for (int pad : {0, 1, 2}) {
    const TensorD fast = conv2d_forward(in, p, pad, 1);
    const TensorD slow = oracle::naive_conv(in, p.weights, p.bias, pad, 1);
    REQUIRE(fast.shape() == slow.shape());
    for (std::size_t i = 0; i < fast.size(); ++i) CHECK(std::abs(fast[i] - slow[i]) < 1e-10);
  }
}

TEST_CASE("conv2d dimension errors") {
  const TensorD in = random_tensor({5, 5, 2}, 1);
  CHECK_THROWS_AS(conv2d_forward(in, random_conv(3, 3, 4, 2), 0, 1), DimensionError);
  CHECK_THROWS_AS(conv2d_forward(in, random_conv(7, 2, 4, 2), 0, 1), DimensionError);
  CHECK_THROWS_AS(conv2d_forward(in, random_conv(3, 2, 4, 2), -1, 1), DomainError);
  const auto p = random_conv(3, 2, 4, 2);
  CHECK_THROWS_AS(conv2d_backward(in, p, 0, 1, TensorD({2, 2, 4})), DimensionError);
}

TEST_CASE("conv2d backward against finite differences") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    CAPTURE(seed);
    const int pad = seed % 3;
    const int stride = 1 + seed % 2;
    const TensorD in = random_tensor({6, 6, 2}, 100 + seed);
    const auto p = random_conv(3, 2, 3, 200 + seed);
    const TensorD out = conv2d_forward(in, p, pad, stride);
    const TensorD up = random_tensor(out.shape(), 300 + seed);
    const auto g = conv2d_backward(in, p, pad, stride, up);

    const auto f_in = [&](const TensorD& x) { return oracle::dot(up, conv2d_forward(x, p, pad, stride)); };
    CHECK(max_rel(oracle::numeric_gradient(in, f_in, kEps), g.input) < kRelTol);

    const auto f_w = [&](const TensorD& w) {
      return oracle::dot(up, conv2d_forward(in, LayerParams<double>(w, p.bias), pad, stride));
    };
    CHECK(max_rel(oracle::numeric_gradient(p.weights, f_w, kEps), g.weights) < kRelTol);

    const auto f_b = [&](const TensorD& b) {
      return oracle::dot(up, conv2d_forward(in, LayerParams<double>(p.weights, b), pad, stride));
    };
    CHECK(max_rel(oracle::numeric_gradient(p.bias, f_b, kEps), g.bias) < kRelTol);

    // bias gradient is the per-channel sum of the upstream gradient
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0;
      for (std::size_t i = c; i < up.size(); i += 3) s += up[i];
      CHECK(std::abs(s - g.bias[c]) < 1e-12);
    }
  }
}

TEST_CASE("conv2d backward of a zero upstream gradient is zero") {
  const TensorD in = random_tensor({6, 6, 2}, 1);
  const auto p = random_conv(3, 2, 3, 2);
  const auto g = conv2d_backward(in, p, 1, 1, TensorD({6, 6, 3}));
  for (const TensorD* t : {&g.input, &g.weights, &g.bias})
    for (double v : t->data()) CHECK(v == 0.0);
}

TEST_CASE("relu forward and backward") {
  const TensorD in({3}, std::vector<double>{-1, 0, 2});
  CHECK(relu(in).storage() == std::vector<double>{0, 0, 2});
  CHECK(relu_backward(in, TensorD({3}, 5.0)).storage() == std::vector<double>{0, 0, 5});

  for (int seed = 0; seed < kSeeds; ++seed) {
    TensorD x = random_tensor({4, 4, 2}, 400 + seed);
    for (double& v : x.data()) {
      if (std::abs(v) < 0.05) v = v < 0 ? -0.05 : 0.05;  // keep FD away from the kink
    }
    const TensorD up = random_tensor(x.shape(), 500 + seed);
    const auto f = [&](const TensorD& t) { return oracle::dot(up, relu(t)); };
    CHECK(max_rel(oracle::numeric_gradient(x, f, kEps), relu_backward(x, up)) < kRelTol);
  }
}

TEST_CASE("pooling arithmetic and edges") {
  const TensorD window({2, 2, 1}, std::vector<double>{1, 2, 3, 4});
  CHECK(pool2d(window, PoolKind::Max, 2, 2).output[0] == 4.0);
  CHECK(pool2d(window, PoolKind::Avg, 2, 2).output[0] == 2.5);

  const TensorD constant({4, 4, 3}, 0.75);
  for (auto kind : {PoolKind::Max, PoolKind::Avg}) {
    const auto pooled = pool2d(constant, kind, 2, 2);
    for (double v : pooled.output.data()) CHECK(v == 0.75);
  }

  SUBCASE("implicit zero padding on the right and bottom") {
    const TensorD odd({3, 3, 1}, 1.0);
    const auto avg = pool2d(odd, PoolKind::Avg, 2, 2);
    REQUIRE(avg.output.shape() == Shape{2, 2, 1});
    CHECK(avg.output.at(0, 0, 0) == 1.0);
    CHECK(avg.output.at(0, 1, 0) == 0.5);  // divides by the full window
    CHECK(avg.output.at(1, 1, 0) == 0.25);
  }
  SUBCASE("max ties route to the first element in scan order") {
    const TensorD tied({2, 2, 1}, 3.0);
    const auto r = pool2d(tied, PoolKind::Max, 2, 2);
    CHECK(r.routing[0] == 0);
    const TensorD g = pool2d_backward(tied.shape(), PoolKind::Max, 2, 2, r.routing, TensorD({1, 1, 1}, 1.0));
    CHECK(g.storage() == std::vector<double>{1, 0, 0, 0});
  }
  CHECK_THROWS_AS(pool2d(window, PoolKind::Max, 3, 1), DimensionError);
  CHECK_THROWS_AS(pool2d(window, PoolKind::Max, 0, 1), DomainError);
}

TEST_CASE("pooling backward against finite differences") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    CAPTURE(seed);
    const TensorD x = random_tensor({6, 6, 2}, 600 + seed);
    for (auto kind : {PoolKind::Avg, PoolKind::Max}) {
      const auto r = pool2d(x, kind, 2, 2);
      const TensorD up = random_tensor(r.output.shape(), 700 + seed);
      const TensorD g = pool2d_backward(x.shape(), kind, 2, 2, r.routing, up);
      const auto f = [&](const TensorD& t) { return oracle::dot(up, pool2d(t, kind, 2, 2).output); };
      // Max pooling is checked only where the FD step cannot flip a winner.
      if (kind == PoolKind::Max) {
        bool separated = true;
        for (std::size_t oy = 0; oy < 3; ++oy)
          for (std::size_t ox = 0; ox < 3; ++ox)
            for (std::size_t c = 0; c < 2; ++c) {
              std::vector<double> w;
              for (std::size_t dy = 0; dy < 2; ++dy)
                for (std::size_t dx = 0; dx < 2; ++dx) w.push_back(x.at(2 * oy + dy, 2 * ox + dx, c));
              std::sort(w.begin(), w.end());
              if (w[3] - w[2] < 4 * kEps) separated = false;
            }
        if (!separated) continue;
      }
      CHECK(max_rel(oracle::numeric_gradient(x, f, kEps), g) < kRelTol);
    }
  }
}

TEST_CASE("fully connected layer") {
  SUBCASE("identity weights and zero bias") {
    TensorD w({3, 3});
    for (std::size_t i = 0; i < 3; ++i) w.at(i, i) = 1.0;
    const TensorD h({3}, std::vector<double>{0.5, -2, 4});
    CHECK(fc_forward(h, LayerParams<double>(w, TensorD({3}))) == h);
  }
  SUBCASE("zero input returns the bias") {
    const TensorD b({2}, std::vector<double>{0.25, -1});
    CHECK(fc_forward(TensorD({4}), LayerParams<double>(random_tensor({4, 2}, 1), b)) == b);
  }
  SUBCASE("mismatched input length") {
    CHECK_THROWS_AS(fc_forward(TensorD({5}), LayerParams<double>(random_tensor({4, 2}, 1), TensorD({2}))),
                    DimensionError);
  }
  for (int seed = 0; seed < kSeeds; ++seed) {
    const TensorD h = random_tensor({2, 2, 3}, 800 + seed);
    const LayerParams<double> p(random_tensor({12, 5}, 900 + seed), random_tensor({5}, 1000 + seed));
    const TensorD up = random_tensor({5}, 1100 + seed);
    const auto g = fc_backward(h, p, up);
    CHECK(g.input.shape() == h.shape());
    CHECK(max_rel(oracle::numeric_gradient(h, [&](const TensorD& t) { return oracle::dot(up, fc_forward(t, p)); }),
                  g.input) < kRelTol);
    CHECK(max_rel(oracle::numeric_gradient(p.weights,
                                           [&](const TensorD& w) {
                                             return oracle::dot(up, fc_forward(h, LayerParams<double>(w, p.bias)));
                                           }),
                  g.weights) < kRelTol);
    CHECK(max_rel(oracle::numeric_gradient(p.bias,
                                           [&](const TensorD& b) {
                                             return oracle::dot(up, fc_forward(h, LayerParams<double>(p.weights, b)));
                                           }),
                  g.bias) < kRelTol);
  }
}

TEST_CASE("softmax closed forms") {
  const TensorD equal({3}, 0.4);
  const TensorD pe = softmax(equal);
  for (double p : pe.data()) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  const TensorD two({2}, std::vector<double>{0.0, std::log(2.0)});
  const TensorD p2 = softmax(two);
  CHECK(p2[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(p2[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  const TensorD s = random_tensor({3}, 5, -5, 5);
  TensorD shifted = s;
  for (double& v : shifted.data()) v += 123.25;
  const TensorD a = softmax(s), b = softmax(shifted);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(a[i] - b[i]) < 1e-6);

  const TensorD huge({2}, std::vector<double>{1000.0, 0.0});
  const TensorD ph = softmax(huge);
  CHECK(std::isfinite(ph[1]));
  CHECK(ph[0] + ph[1] == doctest::Approx(1.0));
}

TEST_CASE("cross entropy") {
  CHECK(cross_entropy(TensorD({3}, std::vector<double>{1, 0, 0}), 0) == 0.0);
  CHECK(cross_entropy(TensorD({3}, 1.0 / 3.0), 2) == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK_THROWS_AS(cross_entropy(TensorD({3}, 1.0 / 3.0), 3), IndexError);
  CHECK_THROWS_AS(softmax_cross_entropy_backward(TensorD({3}, 1.0 / 3.0), 5, 1), IndexError);

  // fused backward against FD through softmax for a batch of three
  for (int seed = 0; seed < kSeeds; ++seed) {
    const std::size_t batch = 3;
    std::vector<TensorD> scores;
    for (std::size_t i = 0; i < batch; ++i) scores.push_back(random_tensor({3}, 1200 + 10 * seed + i, -2, 2));
    const std::vector<std::size_t> labels = {0, 1, static_cast<std::size_t>(seed % 3)};
    for (std::size_t i = 0; i < batch; ++i) {
      const auto loss = [&](const TensorD& s) {
        double total = 0;
        for (std::size_t j = 0; j < batch; ++j) total += cross_entropy(softmax(j == i ? s : scores[j]), labels[j]);
        return total / batch;
      };
      const TensorD analytic = softmax_cross_entropy_backward(softmax(scores[i]), labels[i], batch);
      CHECK(max_rel(oracle::numeric_gradient(scores[i], loss, kEps), analytic) < kRelTol);
    }
  }
}

TEST_CASE("kernels are deterministic in float") {
  const Tensor in = random_tensor({8, 8, 3}, 9).cast<float>();
  const LayerParams<float> p(random_tensor({3, 3, 3, 4}, 10).cast<float>(), random_tensor({4}, 11).cast<float>());
  const Tensor a = conv2d_forward(in, p, 1, 1);
  const Tensor b = conv2d_forward(in, p, 1, 1);
  CHECK(std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0);
}
