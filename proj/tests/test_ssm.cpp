// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "ssmfuse/errors.hpp"
#include "ssmfuse/ops.hpp"
#include "ssmfuse/ssm.hpp"
#include "test_support.hpp"

using namespace ssmfuse;
using testing::check_gradients;
using testing::random_tensor;

namespace {

Tensor weighted(const Tensor& y, const Tensor& w) { return ops::sum(ops::mul(y, w)); }

// Time-invariant pair: the same (A_bar, B_bar) at every (b, t).
ssm::DiscretizedPair broadcast_pair(const Tensor& a_bar, const Tensor& b_bar, std::size_t batch, std::size_t length) {
  const std::size_t dn = a_bar.numel();
  std::vector<double> a(batch * length * dn), b(a.size());
  for (std::size_t i = 0; i < batch * length; ++i) {
    std::copy(a_bar.data().begin(), a_bar.data().end(), a.begin() + i * dn);
    std::copy(b_bar.data().begin(), b_bar.data().end(), b.begin() + i * dn);
  }
  const Shape s{batch, length, a_bar.dim(0), a_bar.dim(1)};
  return {Tensor(s, std::move(a)), Tensor(s, std::move(b))};
}

Tensor broadcast_c(const Tensor& c, std::size_t batch, std::size_t length) {
  std::vector<double> v;
  for (std::size_t i = 0; i < batch * length; ++i) v.insert(v.end(), c.data().begin(), c.data().end());
  return Tensor({batch, length, c.numel()}, std::move(v));
}

struct ScanCase {
  ssm::DiscretizedPair pair;
  Tensor c, x;
};

ScanCase random_scan_case(Rng& rng, std::size_t batch, std::size_t length, std::size_t channels, std::size_t state) {
  auto a = random_tensor(rng, {channels, state}, false, -2.0, -0.1);
  auto b = random_tensor(rng, {batch, length, state});
  auto delta = random_tensor(rng, {batch, length, channels}, false, 0.01, 0.5);
  return {ssm::zoh_discretize(a, b, delta), random_tensor(rng, {batch, length, state}),
          random_tensor(rng, {batch, length, channels})};
}

}  // namespace

TEST_CASE("zoh_discretize examples") {
  SUBCASE("delta = ln 2, A = -1, B = 1 gives one half for both") {
    const auto p = ssm::zoh_discretize(Tensor({1, 1}, {-1.0}), Tensor({1, 1, 1}, {1.0}),
                                       Tensor({1, 1, 1}, {std::numbers::ln2}));
    CHECK(p.a_bar.item() == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(p.b_bar.item() == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("vanishing step: A_bar tends to 1, B_bar to 0") {
    for (double delta : {1e-4, 1e-8, 1e-12, 1e-300}) {
      const auto p = ssm::zoh_discretize(Tensor({1, 1}, {-3.0}), Tensor({1, 1, 1}, {2.0}), Tensor({1, 1, 1}, {delta}));
      CHECK(std::abs(p.a_bar.item() - 1.0) <= 4.0 * delta);
      CHECK(std::abs(p.b_bar.item()) <= 4.0 * delta);
    }
  }
  SUBCASE("series branch and exact formula both approach delta * B") {
    // A = -1, B = 1.5, so z = -delta and the small-step limit of B_bar is delta * B.
    for (double mag : {1e-10, 1e-6}) {
      const auto p = ssm::zoh_discretize(Tensor({1, 1}, {-1.0}), Tensor({1, 1, 1}, {1.5}), Tensor({1, 1, 1}, {mag}));
      CHECK(std::abs(p.b_bar.item() - mag * 1.5) <= 1e-9);
    }
  }
  SUBCASE("series branch agrees with the exact formula for |z| in [1e-12, 1e-4]") {
    double worst = 0.0;
    for (double e = -12.0; e <= -4.0; e += 0.25) {
      for (double sign : {-1.0, 1.0}) {
        const double z = sign * std::pow(10.0, e);
        const double series = 1.0 + z / 2.0 + z * z / 6.0;
        const double exact = std::expm1(z) / z;
        worst = std::max(worst, std::abs(series - exact));
      }
    }
    CHECK(worst <= 1e-9);
  }
  SUBCASE("nonpositive delta violates the contract") {
    CHECK_THROWS_AS(ssm::zoh_discretize(Tensor({1, 1}, {-1.0}), Tensor({1, 1, 1}, {1.0}), Tensor({1, 1, 1}, {0.0})),
                    ContractError);
  }
  SUBCASE("Euler mode uses delta * B") {
    const auto p = ssm::zoh_discretize(Tensor({1, 1}, {-1.0}), Tensor({1, 1, 1}, {3.0}), Tensor({1, 1, 1}, {0.25}),
                                       ssm::Discretization::Euler);
    CHECK(p.b_bar.item() == 0.75);
  }
  SUBCASE("negative A and positive delta keep A_bar strictly inside (0, 1)") {
    Rng rng(9);
    auto a = ssm::transition_from_log(random_tensor(rng, {6, 4}, false, -3.0, 3.0));
    const auto p = ssm::zoh_discretize(a, random_tensor(rng, {2, 5, 4}), random_tensor(rng, {2, 5, 6}, false, 1e-3, 1.0));
    for (double v : p.a_bar.data()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
    CHECK(p.a_bar.shape() == p.b_bar.shape());
  }
}

TEST_CASE("scan_sequential examples") {
  const auto pair = broadcast_pair(Tensor({1, 1}, {0.5}), Tensor({1, 1}, {0.5}), 1, 3);
  const auto c = Tensor::full({1, 3, 1}, 1.0);
  SUBCASE("three hand-unrolled steps") {
    const auto y = ssm::scan_sequential(pair, c, Tensor::full({1, 3, 1}, 1.0));
    CHECK(y.data()[0] == 0.5);
    CHECK(y.data()[1] == 0.75);
    CHECK(y.data()[2] == 0.875);
  }
  SUBCASE("zero input gives zero output") {
    const auto y = ssm::scan_sequential(pair, c, Tensor::zeros({1, 3, 1}));
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("single step is C * B_bar * x") {
    Rng rng(2);
    auto s = random_scan_case(rng, 2, 1, 3, 4);
    const auto y = ssm::scan_sequential(s.pair, s.c, s.x);
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t d = 0; d < 3; ++d) {
        double expect = 0.0;
        for (std::size_t n = 0; n < 4; ++n) {
          expect += s.c.data()[b * 4 + n] * s.pair.b_bar.data()[(b * 3 + d) * 4 + n] * s.x.data()[b * 3 + d];
        }
        CHECK(std::abs(y.data()[b * 3 + d] - expect) <= 1e-15);
      }
    }
  }
  SUBCASE("length mismatch is a dimension error") {
    CHECK_THROWS_AS(ssm::scan_sequential(pair, c, Tensor::zeros({1, 4, 1})), DimensionError);
    CHECK_THROWS_AS(ssm::scan_sequential(pair, Tensor::zeros({1, 2, 1}), Tensor::zeros({1, 3, 1})), DimensionError);
  }
}

TEST_CASE("scan_chunked examples") {
  Rng rng(11);
  auto s = random_scan_case(rng, 2, 1024, 3, 4);
  const auto ref = ssm::scan_sequential(s.pair, s.c, s.x);
  SUBCASE("one chunk reproduces the sequential scan exactly") {
    const auto y = ssm::scan_chunked(s.pair, s.c, s.x, 1024);
    CHECK(testing::max_abs_diff(y.data(), ref.data()) == 0.0);
  }
  SUBCASE("chunk invariance") {
    for (std::size_t chunk : {1u, 3u, 16u, 64u, 100u, 1000u, 5000u}) {
      const auto y = ssm::scan_chunked(s.pair, s.c, s.x, chunk);
      CHECK(testing::max_abs_diff(y.data(), ref.data()) <= 1e-10);
    }
  }
  SUBCASE("chunk below one is a configuration error") {
    CHECK_THROWS_AS(ssm::scan_chunked(s.pair, s.c, s.x, 0), ConfigError);
  }
  SUBCASE("composition with the identity element") {
    const ssm::ScanElement e{0.3, -1.7};
    const auto left = ssm::compose(ssm::ScanElement::identity(), e);
    const auto right = ssm::compose(e, ssm::ScanElement::identity());
    CHECK(left.decay == e.decay);
    CHECK(left.offset == e.offset);
    CHECK(right.decay == e.decay);
    CHECK(right.offset == e.offset);
  }
  SUBCASE("composition is associative on exact binary fractions") {
    const ssm::ScanElement p{0.5, 1.0}, q{0.25, -2.0}, r{0.75, 0.5};
    const auto lhs = ssm::compose(ssm::compose(p, q), r);
    const auto rhs = ssm::compose(p, ssm::compose(q, r));
    CHECK(lhs.decay == rhs.decay);
    CHECK(lhs.offset == rhs.offset);
  }
  SUBCASE("gradients match the sequential scan") {
    Rng g(5);
    auto a = random_tensor(g, {3, 2}, true, -2.0, -0.1);
    auto b = random_tensor(g, {2, 9, 2}, true);
    auto c = random_tensor(g, {2, 9, 2}, true);
    auto delta = random_tensor(g, {2, 9, 3}, true, 0.1, 0.8);
    auto x = random_tensor(g, {2, 9, 3}, true);
    auto w = random_tensor(g, {2, 9, 3});
    std::vector<Tensor> leaves{a, b, c, delta, x};
    auto grads = [&](bool chunked) {
      for (auto& l : leaves) l.zero_grad();
      const auto pair = ssm::zoh_discretize(a, b, delta);
      backward(weighted(chunked ? ssm::scan_chunked(pair, c, x, 4) : ssm::scan_sequential(pair, c, x), w));
      std::vector<std::vector<double>> out;
      for (auto& l : leaves) out.push_back(testing::grad_or_zeros(l));
      return out;
    };
    const auto seq = grads(false);
    const auto chk = grads(true);
    for (std::size_t i = 0; i < seq.size(); ++i) CHECK(testing::max_abs_diff(seq[i], chk[i]) <= 1e-12);
  }
}

TEST_CASE("lti_kernel examples") {
  SUBCASE("powers of one half") {
    const auto k = ssm::lti_kernel(Tensor({1, 1}, {0.5}), Tensor({1, 1}, {0.5}), Tensor::from({1.0}), 3);
    CHECK(k.shape() == Shape{1, 3});
    CHECK(k.data()[0] == 0.5);
    CHECK(k.data()[1] == 0.25);
    CHECK(k.data()[2] == 0.125);
  }
  SUBCASE("memoryless system") {
    const auto k = ssm::lti_kernel(Tensor({1, 2}, {0.0, 0.0}), Tensor({1, 2}, {0.5, 0.25}), Tensor::from({2.0, 4.0}), 4);
    CHECK(k.data()[0] == 2.0);
    for (std::size_t j = 1; j < 4; ++j) CHECK(k.data()[j] == 0.0);
  }
  SUBCASE("zero readout") {
    Rng rng(1);
    const auto k = ssm::lti_kernel(random_tensor(rng, {3, 2}, false, 0.0, 0.9), random_tensor(rng, {3, 2}),
                                   Tensor::from({0.0, 0.0}), 5);
    for (double v : k.data()) CHECK(v == 0.0);
  }
  SUBCASE("k below one is a configuration error") {
    CHECK_THROWS_AS(ssm::lti_kernel(Tensor({1, 1}, {0.5}), Tensor({1, 1}, {0.5}), Tensor::from({1.0}), 0), ConfigError);
  }
}

TEST_CASE("lti_conv_apply examples") {
  Rng rng(4);
  SUBCASE("delta kernel is the identity") {
    auto x = random_tensor(rng, {2, 6, 3});
    std::vector<double> kv(3 * 6, 0.0);
    for (std::size_t d = 0; d < 3; ++d) kv[d * 6] = 1.0;
    const auto y = ssm::lti_conv_apply(x, Tensor({3, 6}, kv));
    CHECK(testing::max_abs_diff(y.data(), x.data()) == 0.0);
  }
  SUBCASE("matches the recurrence example") {
    const auto y = ssm::lti_conv_apply(Tensor::full({1, 3, 1}, 1.0), Tensor({1, 3}, {0.5, 0.25, 0.125}));
    CHECK(y.data()[0] == 0.5);
    CHECK(y.data()[1] == 0.75);
    CHECK(y.data()[2] == 0.875);
  }
  SUBCASE("zero input") {
    const auto y = ssm::lti_conv_apply(Tensor::zeros({1, 4, 2}), random_tensor(rng, {2, 4}));
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("kernel longer than the sequence is truncated") {
    const auto y = ssm::lti_conv_apply(Tensor::full({1, 2, 1}, 1.0), Tensor({1, 4}, {0.5, 0.25, 0.125, 9.0}));
    CHECK(y.shape() == Shape{1, 2, 1});
    CHECK(y.data()[1] == 0.75);
  }
}

TEST_CASE("recurrence and convolution agree for time-invariant systems") {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const std::size_t d = 1 + rng.below(8), n = 1 + rng.below(4), len = 1 + rng.below(256), batch = 2;
    const auto a_bar = random_tensor(rng, {d, n}, false, -0.95, 0.95);
    const auto b_bar = random_tensor(rng, {d, n});
    const auto c = random_tensor(rng, {n});
    const auto x = random_tensor(rng, {batch, len, d});
    const auto y_scan = ssm::scan_sequential(broadcast_pair(a_bar, b_bar, batch, len), broadcast_c(c, batch, len), x);
    const auto y_conv = ssm::lti_conv_apply(x, ssm::lti_kernel(a_bar, b_bar, c, len));
    double scale = 0.0;
    for (double v : y_scan.data()) scale = std::max(scale, std::abs(v));
    worst = std::max(worst, testing::max_abs_diff(y_scan.data(), y_conv.data()) / std::max(scale, 1e-300));
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("state stays within the geometric bound for negative A") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 500);
    // one state and unit readout, so y is the state itself
    const std::size_t d = 4, len = 300;
    auto a = random_tensor(rng, {d, 1}, false, -3.0, -0.05);
    auto b = random_tensor(rng, {1, len, 1}, false, -2.0, 2.0);
    auto delta = random_tensor(rng, {1, len, d}, false, 1e-3, 2.0);
    auto x = random_tensor(rng, {1, len, d}, false, -5.0, 5.0);
    const auto pair = ssm::zoh_discretize(a, b, delta);
    const auto y = ssm::scan_sequential(pair, Tensor::full({1, len, 1}, 1.0), x);
    double max_a = 0.0, max_in = 0.0;
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t c = 0; c < d; ++c) {
        max_a = std::max(max_a, pair.a_bar.data()[t * d + c]);
        max_in = std::max(max_in, std::abs(pair.b_bar.data()[t * d + c] * x.data()[t * d + c]));
      }
    }
    const double bound = max_in / (1.0 - max_a);
    for (double v : y.data()) CHECK(std::abs(v) <= bound * (1.0 + 1e-12));
  }
}

TEST_CASE("gradients through discretization and scan match finite differences") {
  double worst = 0.0;
  for (auto mode : {ssm::Discretization::Zoh, ssm::Discretization::Euler}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed);
      auto a = random_tensor(rng, {3, 2}, true, -2.0, -0.1);
      auto b = random_tensor(rng, {2, 5, 2}, true);
      auto c = random_tensor(rng, {2, 5, 2}, true);
      auto delta = random_tensor(rng, {2, 5, 3}, true, 0.1, 1.0);
      auto x = random_tensor(rng, {2, 5, 3}, true);
      auto w = random_tensor(rng, {2, 5, 3});
      worst = std::max(worst, check_gradients({a, b, c, delta, x}, [&] {
                         return weighted(ssm::scan_sequential(ssm::zoh_discretize(a, b, delta, mode), c, x), w);
                       }));
    }
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("fused selective scan matches the composed operations") {
  for (auto mode : {ssm::Discretization::Zoh, ssm::Discretization::Euler}) {
    Rng rng(8);
    auto a_log = random_tensor(rng, {4, 3}, true, -1.0, 1.0);
    auto b = random_tensor(rng, {2, 7, 3}, true);
    auto c = random_tensor(rng, {2, 7, 3}, true);
    auto delta = random_tensor(rng, {2, 7, 4}, true, 0.05, 0.9);
    auto x = random_tensor(rng, {2, 7, 4}, true);
    auto w = random_tensor(rng, {2, 7, 4});
    std::vector<Tensor> leaves{a_log, b, c, delta, x};

    auto run = [&](bool fused) {
      for (auto& l : leaves) l.zero_grad();
      const auto a = ssm::transition_from_log(a_log);
      const auto y = fused ? ssm::selective_scan(a, b, c, delta, x, mode)
                           : ssm::scan_sequential(ssm::zoh_discretize(a, b, delta, mode), c, x);
      const auto values = std::vector<double>(y.data().begin(), y.data().end());
      backward(weighted(y, w));
      std::vector<std::vector<double>> out{values};
      for (auto& l : leaves) out.push_back(testing::grad_or_zeros(l));
      return out;
    };
    const auto ref = run(false);
    const auto got = run(true);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(testing::max_abs_diff(ref[i], got[i]) <= 1e-12);

    const double err = check_gradients(
        leaves, [&] { return weighted(ssm::selective_scan(ssm::transition_from_log(a_log), b, c, delta, x, mode), w); });
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("transition initialization is strictly negative") {
  const auto a = ssm::transition_from_log(ssm::init_transition_log(5, 4));
  for (std::size_t d = 0; d < 5; ++d) {
    for (std::size_t n = 0; n < 4; ++n) CHECK(a.data()[d * 4 + n] == doctest::Approx(-(double(n) + 1.0)));
  }
}
