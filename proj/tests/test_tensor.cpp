#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "xfactor/tensor.hpp"

using namespace xfactor;
using testutil::check_gradient;
using testutil::random_tensor;

TEST_CASE("elementwise add with known values") {
  Tensor<double> a({2}, {1, 2});
  Tensor<double> b({2}, {3, 4});
  auto c = add(a, b);
  CHECK(c.data()[0] == 4.0);
  CHECK(c.data()[1] == 6.0);
}

TEST_CASE("trailing-dimension broadcasting") {
  Tensor<double> a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor<double> b({3}, {10, 20, 30});
  auto c = add(a, b);
  REQUIRE(c.shape() == Shape{2, 3});
  CHECK(c.data() == std::vector<double>{11, 22, 33, 14, 25, 36});

  Tensor<double> col({2, 1}, {100, 200});
  auto d = add(a, col);
  CHECK(d.data() == std::vector<double>{101, 102, 103, 204, 205, 206});

  Tensor<double> bad({4}, {0, 0, 0, 0});
  CHECK_THROWS_AS(add(a, bad), std::invalid_argument);
}

TEST_CASE("division by zero is rejected") {
  Tensor<double> a({2}, {1, 2});
  Tensor<double> b({2}, {1, 0});
  CHECK_THROWS_AS(div(a, b), std::domain_error);
}

TEST_CASE("domain guards on log, sqrt, acos") {
  CHECK_THROWS_AS(log(Tensor<double>({1}, {0.0})), std::domain_error);
  CHECK_THROWS_AS(log(Tensor<double>({1}, {-1.0})), std::domain_error);
  CHECK_THROWS_AS(sqrt(Tensor<double>({1}, {-1e-9})), std::domain_error);
  CHECK_THROWS_AS(acos(Tensor<double>({1}, {1.0 + 1e-9})), std::domain_error);
}

TEST_CASE("gelu matches the exact erf form") {
  Tensor<double> x({3}, {0.0, 1.0, -1.0});
  auto y = gelu(x);
  CHECK(y.data()[0] == 0.0);
  // 0.5 * 1 * (1 + erf(1/sqrt(2))) computed independently.
  CHECK(y.data()[1] == Catch::Approx(0.8413447460685429).epsilon(1e-12));
  CHECK(y.data()[2] == Catch::Approx(-(1.0 - 0.8413447460685429)).margin(1e-12));
}

TEST_CASE("matmul against hand values and a triple-loop oracle") {
  // Identity.
  Tensor<double> i2({2, 2}, {1, 0, 0, 1});
  Tensor<double> m({2, 2}, {5, 6, 7, 8});
  CHECK(matmul(i2, m).data() == m.data());

  // [[1,2]] . [[3],[4]] = [[11]].
  Tensor<double> r({1, 2}, {1, 2});
  Tensor<double> c({2, 1}, {3, 4});
  CHECK(matmul(r, c).data() == std::vector<double>{11});

  // Random 5x4 . 4x3 against an explicit triple loop.
  Rng rng(11);
  auto a = random_tensor({5, 4}, rng);
  auto b = random_tensor({4, 3}, rng);
  auto p = matmul(a, b);
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t j = 0; j < 3; ++j) {
      double s = 0;
      for (int64_t k = 0; k < 4; ++k) s += a.data()[i * 4 + k] * b.data()[k * 3 + j];
      CHECK(p.data()[i * 3 + j] == Catch::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("batched matmul broadcasts batch dimensions") {
  Rng rng(12);
  auto a = random_tensor({2, 3, 4}, rng);
  auto b = random_tensor({4, 5}, rng);  // broadcast over the leading batch dim
  auto p = matmul(a, b);
  REQUIRE(p.shape() == Shape{2, 3, 5});
  for (int64_t bi = 0; bi < 2; ++bi)
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 5; ++j) {
        double s = 0;
        for (int64_t k = 0; k < 4; ++k)
          s += a.data()[(bi * 3 + i) * 4 + k] * b.data()[k * 5 + j];
        CHECK(p.data()[(bi * 3 + i) * 5 + j] == Catch::Approx(s).epsilon(1e-12));
      }
}

TEST_CASE("softmax values and stability") {
  auto s0 = softmax(Tensor<double>({2}, {0, 0}), -1);
  CHECK(s0.data()[0] == Catch::Approx(0.5).epsilon(1e-12));
  auto s1 = softmax(Tensor<double>({2}, {1000, 1000}), -1);
  CHECK(s1.data()[0] == Catch::Approx(0.5).epsilon(1e-12));
  CHECK(std::isfinite(s1.data()[1]));

  Tensor<double> x({3}, {1, 2, 3});
  auto s = softmax(x, -1);
  double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i)
    CHECK(s.data()[i] == Catch::Approx(std::exp(1.0 + i) / z).epsilon(1e-12));

  Rng rng(13);
  auto r = random_tensor({4, 7}, rng, -5, 5);
  auto sr = softmax(r, -1);
  for (int64_t row = 0; row < 4; ++row) {
    double sum = 0;
    for (int64_t j = 0; j < 7; ++j) sum += sr.data()[row * 7 + j];
    CHECK(sum == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("layer_norm values") {
  Tensor<double> gain({2}, {1, 1});
  Tensor<double> bias({2}, {0, 0});
  auto y0 = layer_norm(Tensor<double>({2}, {5, 5}), gain, bias, 1e-5);
  CHECK(y0.data()[0] == Catch::Approx(0.0).margin(1e-9));

  auto y1 = layer_norm(Tensor<double>({2}, {1, 3}), gain, bias, 0.0);
  CHECK(y1.data()[0] == Catch::Approx(-1.0).epsilon(1e-9));
  CHECK(y1.data()[1] == Catch::Approx(1.0).epsilon(1e-9));

  Rng rng(14);
  auto x = random_tensor({3, 8}, rng, -2, 2);
  Tensor<double> g8({8}, std::vector<double>(8, 1.0));
  Tensor<double> b8({8}, std::vector<double>(8, 0.0));
  auto y = layer_norm(x, g8, b8, 0.0);
  for (int64_t row = 0; row < 3; ++row) {
    double m = 0, v = 0;
    for (int64_t j = 0; j < 8; ++j) m += y.data()[row * 8 + j];
    m /= 8;
    for (int64_t j = 0; j < 8; ++j) v += (y.data()[row * 8 + j] - m) * (y.data()[row * 8 + j] - m);
    v /= 8;
    CHECK(m == Catch::Approx(0.0).margin(1e-9));
    CHECK(v == Catch::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("masked attention hand computations and guards") {
  // Diagonal (self-only) mask returns v rows exactly.
  Rng rng(15);
  auto q = random_tensor({1, 1, 3, 4}, rng);
  auto k = random_tensor({1, 1, 3, 4}, rng);
  auto v = random_tensor({1, 1, 3, 4}, rng);
  std::vector<uint8_t> eye(9, 0);
  eye[0] = eye[4] = eye[8] = 1;
  auto out = masked_attention(q, k, v, BoolMask({3, 3}, eye));
  for (size_t i = 0; i < v.data().size(); ++i)
    CHECK(out.data()[i] == Catch::Approx(v.data()[i]).margin(1e-12));

  // Single token with an all-true mask also returns v.
  auto q1 = random_tensor({1, 1, 1, 4}, rng);
  auto k1 = random_tensor({1, 1, 1, 4}, rng);
  auto v1 = random_tensor({1, 1, 1, 4}, rng);
  auto out1 = masked_attention(q1, k1, v1, BoolMask::all_true({1, 1}));
  for (size_t i = 0; i < v1.data().size(); ++i)
    CHECK(out1.data()[i] == Catch::Approx(v1.data()[i]).margin(1e-12));

  // Two tokens, full mask: explicit softmax weights.
  Tensor<double> q2({1, 1, 1, 2}, {1, 0});
  Tensor<double> k2({1, 1, 2, 2}, {1, 0, 0, 1});
  Tensor<double> v2({1, 1, 2, 2}, {1, 2, 3, 4});
  auto out2 = masked_attention(q2, k2, v2, BoolMask::all_true({1, 2}));
  const double s = 1.0 / std::sqrt(2.0);
  const double w0 = std::exp(s) / (std::exp(s) + 1.0), w1 = 1.0 - w0;
  CHECK(out2.data()[0] == Catch::Approx(w0 * 1 + w1 * 3).epsilon(1e-12));
  CHECK(out2.data()[1] == Catch::Approx(w0 * 2 + w1 * 4).epsilon(1e-12));

  // Fully masked row is an error, not a NaN.
  std::vector<uint8_t> dead(9, 1);
  dead[3] = dead[4] = dead[5] = 0;
  CHECK_THROWS_WITH(masked_attention(q, k, v, BoolMask({3, 3}, dead)),
                    Catch::Matchers::ContainsSubstring("fully masked"));
}

TEST_CASE("separable blur preserves the mean of a linear gradient") {
  // On a linear ramp the truncated, renormalized border kernel is unbiased in
  // aggregate, so the image mean must be preserved.
  const int64_t H = 12, W = 10, C = 1;
  std::vector<double> img(H * W * C);
  for (int64_t r = 0; r < H; ++r)
    for (int64_t c = 0; c < W; ++c) img[r * W + c] = 0.1 * r + 0.05 * c;
  Tensor<double> x({H, W, C}, img);
  std::vector<double> kernel{0.25, 0.5, 0.25};
  auto y = separable_blur2d(x, kernel);
  const double m_in = std::accumulate(img.begin(), img.end(), 0.0) / img.size();
  const double m_out = std::accumulate(y.data().begin(), y.data().end(), 0.0) / img.size();
  CHECK(m_out == Catch::Approx(m_in).epsilon(1e-10));

  // A constant image is a fixed point.
  auto cimg = Tensor<double>::full({H, W, C}, 0.7);
  auto cy = separable_blur2d(cimg, kernel);
  for (double vv : cy.data()) CHECK(vv == Catch::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("patchify and unpatchify round trip") {
  Rng rng(16);
  auto img = random_tensor({2, 8, 8, 3}, rng, 0, 1);
  auto tok = patchify(img, 4);
  REQUIRE(tok.shape() == Shape{2, 4, 48});
  auto back = unpatchify(tok, 4, 8, 8, 3);
  REQUIRE(back.shape() == img.shape());
  CHECK(back.data() == img.data());

  // One-hot index audit: pixel (row 5, col 2, ch 1) of batch 0 lives in patch
  // row 1, patch col 0 => token 2, and inside the token at (1,2,1).
  std::vector<double> onehot(2 * 8 * 8 * 3, 0.0);
  onehot[(5 * 8 + 2) * 3 + 1] = 1.0;
  auto t1 = patchify(Tensor<double>({2, 8, 8, 3}, onehot), 4);
  const int64_t tok_idx = 2, inner = (1 * 4 + 2) * 3 + 1;
  for (size_t i = 0; i < t1.data().size(); ++i) {
    const double want = (static_cast<int64_t>(i) == tok_idx * 48 + inner) ? 1.0 : 0.0;
    REQUIRE(t1.data()[i] == want);
  }
}

TEST_CASE("rotary embedding properties") {
  Rng rng(17);
  auto x = random_tensor({1, 2, 3, 8}, rng);

  // Position (0,0) on every token is the identity.
  std::vector<std::pair<int, int>> zeros{{0, 0}, {0, 0}, {0, 0}};
  auto y0 = rope_apply(x, zeros);
  CHECK(y0.data() == x.data());

  // Rotation preserves per-token norms.
  std::vector<std::pair<int, int>> pos{{0, 1}, {2, 3}, {5, 0}};
  auto y = rope_apply(x, pos);
  for (int64_t h = 0; h < 2; ++h)
    for (int64_t t = 0; t < 3; ++t) {
      double n_in = 0, n_out = 0;
      for (int64_t d = 0; d < 8; ++d) {
        n_in += x.data()[(h * 3 + t) * 8 + d] * x.data()[(h * 3 + t) * 8 + d];
        n_out += y.data()[(h * 3 + t) * 8 + d] * y.data()[(h * 3 + t) * 8 + d];
      }
      CHECK(n_out == Catch::Approx(n_in).epsilon(1e-10));
    }

  // inverse undoes the rotation.
  auto xr = rope_apply(y, pos, 100.0, true);
  for (size_t i = 0; i < x.data().size(); ++i)
    CHECK(xr.data()[i] == Catch::Approx(x.data()[i]).margin(1e-12));

  // Relative-position property: <rope(q,p1), rope(k,p2)> depends only on
  // p1 - p2. Shift both positions and the dot product is unchanged.
  auto q = random_tensor({1, 1, 1, 8}, rng);
  auto k = random_tensor({1, 1, 1, 8}, rng);
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  auto qa = rope_apply(q, {{2, 5}});
  auto ka = rope_apply(k, {{1, 3}});
  auto qb = rope_apply(q, {{6, 8}});
  auto kb = rope_apply(k, {{5, 6}});
  CHECK(dot(qa.data(), ka.data()) == Catch::Approx(dot(qb.data(), kb.data())).epsilon(1e-10));

  CHECK_THROWS_AS(rope_apply(random_tensor({1, 1, 1, 7}, rng), {{0, 0}}), std::invalid_argument);
}

TEST_CASE("slice and concat round trip") {
  Rng rng(18);
  auto x = random_tensor({3, 5, 2}, rng);
  auto a = slice(x, 1, 0, 2);
  auto b = slice(x, 1, 2, 3);
  auto back = concat<double>({a, b}, 1);
  CHECK(back.data() == x.data());
  CHECK_THROWS_AS(slice(x, 1, 4, 2), std::invalid_argument);
}

TEST_CASE("reductions") {
  Tensor<double> x({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(sum(x).item() == 21.0);
  CHECK(mean(x).item() == 3.5);
  auto s0 = sum_axis(x, 0, false);
  CHECK(s0.data() == std::vector<double>{5, 7, 9});
  auto s1 = sum_axis(x, 1, true);
  REQUIRE(s1.shape() == Shape{2, 1});
  CHECK(s1.data() == std::vector<double>{6, 15});
  auto mx = max_axis_detached(x, 1);
  CHECK(mx.data()[0] == 3.0);
  CHECK(mx.data()[1] == 6.0);
}

TEST_CASE("backward basics") {
  // d/dx sum(x) = 1.
  auto x = Tensor<double>({3}, {1, 2, 3}, true);
  backward(sum(x));
  CHECK(x.grad() == std::vector<double>{1, 1, 1});

  // d/dx sum(x^2) = 2x.
  auto y = Tensor<double>({2}, {1, 2}, true);
  backward(sum(mul(y, y)));
  CHECK(y.grad() == std::vector<double>{2, 4});

  CHECK_THROWS_AS(backward(Tensor<double>({2}, {1, 2}, true)), std::invalid_argument);
  CHECK_THROWS_AS(backward(Tensor<double>::scalar(1.0)), std::invalid_argument);
}

TEST_CASE("NoGradGuard suppresses tape recording") {
  NoGradGuard ng;
  auto x = Tensor<double>({2}, {1, 2}, true);
  auto y = sum(mul(x, x));
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("finite differences across elementwise and reduction ops") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    auto fd = [&](Shape s, auto f, double lo = -1.0, double hi = 1.0) {
      auto r = check_gradient(testutil::random_tensor(std::move(s), rng, lo, hi), f);
      INFO("seed " << seed << " max rel err " << r.max_rel_err);
      CHECK(r.ok);
    };
    fd({3, 4}, [](const Tensor<double>& t) { return sum(mul(t, t)); });
    fd({3, 4}, [](const Tensor<double>& t) { return mean(exp(t)); });
    fd({3, 4}, [](const Tensor<double>& t) { return sum(log(t)); }, 0.2, 2.0);
    fd({3, 4}, [](const Tensor<double>& t) { return sum(sqrt(t)); }, 0.2, 2.0);
    fd({3, 4}, [](const Tensor<double>& t) { return sum(mul(sigmoid(t), t)); });
    fd({3, 4}, [](const Tensor<double>& t) { return sum(gelu(t)); });
    fd({3, 4}, [](const Tensor<double>& t) { return sum(acos(t)); }, -0.8, 0.8);
    fd({3, 4}, [](const Tensor<double>& t) { return sum(neg(abs(t))); }, 0.2, 1.0);
    fd({3, 4}, [](const Tensor<double>& t) { return sum(mul_scalar(add_scalar(t, 0.3), 1.7)); });
    fd({3, 4}, [](const Tensor<double>& t) { return sum(clamp(t, -0.5, 0.5)); }, 0.6, 1.5);
    fd({2, 5}, [](const Tensor<double>& t) { return sum(softmax(t, -1) * t); });
    fd({2, 6}, [](const Tensor<double>& t) {
      Tensor<double> g({6}, {1, 2, 3, 4, 5, 6});
      Tensor<double> b({6}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
      Tensor<double> w({6}, {0.3, -0.2, 0.7, 1.1, -0.4, 0.5});
      return sum(mul(layer_norm(t, g, b, 1e-5), w));
    });
    fd({4}, [](const Tensor<double>& t) {
      auto q = div(t, Tensor<double>({4}, {1.5, 2.5, 3.5, 4.5}));
      return sum(q);
    });
    fd({2, 3}, [](const Tensor<double>& t) { return sum(sub(t, mul(t, t))); });
  }
}

TEST_CASE("finite differences across shape, matmul and composite ops") {
  for (uint64_t seed = 21; seed <= 25; ++seed) {
    Rng rng(seed);
    auto fd = [&](Shape s, auto f, double lo = -1.0, double hi = 1.0) {
      auto r = check_gradient(testutil::random_tensor(std::move(s), rng, lo, hi), f);
      INFO("seed " << seed << " max rel err " << r.max_rel_err);
      CHECK(r.ok);
    };
    fd({2, 3}, [](const Tensor<double>& t) { return sum(mul(reshape(t, {3, 2}), reshape(t, {3, 2}))); });
    fd({2, 3, 4}, [](const Tensor<double>& t) {
      return sum(mul(transpose(t, {2, 0, 1}), transpose(t, {2, 0, 1})));
    });
    fd({3, 5}, [](const Tensor<double>& t) { return sum(mul(slice(t, 1, 1, 3), slice(t, 1, 1, 3))); });
    fd({2, 3}, [](const Tensor<double>& t) {
      auto c = concat<double>({t, mul_scalar(t, 2.0)}, 0);
      return sum(mul(c, c));
    });
    fd({3}, [](const Tensor<double>& t) {
      auto b = broadcast_to(t, {4, 3});
      return sum(mul(b, b));
    });
    fd({4, 3}, [](const Tensor<double>& t) {
      Tensor<double> w({3, 2}, {0.3, -0.2, 0.5, 0.7, -0.4, 0.1});
      auto p = matmul(t, w);
      return sum(mul(p, p));
    });
    fd({3, 2}, [](const Tensor<double>& t) {
      Tensor<double> a({4, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
      auto p = matmul(a, t);
      return sum(mul(p, p));
    });
    fd({2, 2, 3, 4}, [](const Tensor<double>& t) {
      auto out = masked_attention(t, mul_scalar(t, 0.5), add_scalar(t, 0.1),
                                  BoolMask::all_true({3, 3}));
      return sum(mul(out, out));
    });
    fd({1, 2, 3, 8}, [](const Tensor<double>& t) {
      std::vector<std::pair<int, int>> pos{{0, 1}, {2, 0}, {1, 3}};
      auto y = rope_apply(t, pos);
      return sum(mul(y, y * 0.5));
    });
    fd({5, 4, 2}, [](const Tensor<double>& t) {
      auto y = separable_blur2d(t, {0.25, 0.5, 0.25});
      return sum(mul(y, y));
    });
    fd({1, 4, 4, 2}, [](const Tensor<double>& t) {
      auto tok = patchify(t, 2);
      auto img = unpatchify(mul(tok, tok), 2, 4, 4, 2);
      return sum(img);
    });
    fd({2, 4}, [](const Tensor<double>& t) { return sum(mul(sum_axis(t, 1, true), mean_axis(t, 0, false))); });
  }
}

TEST_CASE("masked_fill_neg_inf gradient flows only through visible entries") {
  Rng rng(31);
  auto x = testutil::random_tensor({2, 3}, rng);
  std::vector<uint8_t> m{1, 0, 1, 1, 1, 0};
  auto y = softmax(masked_fill_neg_inf(x, BoolMask({2, 3}, m)), -1);
  backward(sum(mul(y, y)));
  CHECK(x.grad()[1] == 0.0);
  CHECK(x.grad()[5] == 0.0);
  CHECK(x.grad()[0] != 0.0);
}
