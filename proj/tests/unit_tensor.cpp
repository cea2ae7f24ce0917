#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "userip/tensor.hpp"

using namespace userip;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = false) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-2.0, 2.0);
  return Tensor::from_values(std::move(shape), std::move(v), requires_grad);
}

// reduce an arbitrary-output expression to a scalar with fixed random weights
Tensor weighted_sum(const Tensor& t, const std::vector<double>& w) {
  Tensor wt = Tensor::from_values(t.shape(), w);
  return sum(mul(t, wt));
}

std::vector<double> fixed_weights(int n, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(static_cast<size_t>(n));
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return w;
}

}  // namespace

TEST_CASE("matmul identity and hand values") {
  Rng rng(7);
  Tensor a = random_tensor({2, 2}, rng);
  Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor out = matmul(eye, a);
  for (int i = 0; i < 4; ++i) CHECK(out.values()[i] == doctest::Approx(a.values()[i]).epsilon(1e-15));

  Tensor m = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  Tensor v = Tensor::from_values({2, 1}, {1, 1});
  Tensor r = matmul(m, v);
  CHECK(r.values()[0] == doctest::Approx(3.0));
  CHECK(r.values()[1] == doctest::Approx(7.0));
}

TEST_CASE("matmul shape mismatch reports both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected shape error");
  } catch (const Error& e) {
    CHECK(e.kind() == Errc::config);
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("disagree") != std::string::npos);
  }
}

TEST_CASE("gradient of sum(A*B) wrt A is row-broadcast of column sums of B") {
  Rng rng(11);
  Tensor a = random_tensor({3, 4}, rng, true);
  Tensor b = random_tensor({4, 5}, rng);
  {
    Tape tape;
    Tensor loss = sum(matmul(a, b));
    tape.backward(loss);
  }
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 4; ++k) {
      double col_sum = 0.0;
      for (int j = 0; j < 5; ++j) col_sum += b.values()[static_cast<size_t>(k) * 5 + j];
      CHECK(a.grad()[static_cast<size_t>(i) * 4 + k] == doctest::Approx(col_sum).epsilon(1e-12));
    }

  auto fd = grad_check(
      [&](const Tensor& x) { return sum(matmul(x, b)); }, a, 1e-5, 1e-4);
  CHECK(fd.pass);
}

TEST_CASE("softmax fixed points and normalization") {
  Tensor x = Tensor::from_values({2}, {0.0, 0.0});
  Tensor y = softmax(x, 0);
  CHECK(y.values()[0] == doctest::Approx(0.5).epsilon(1e-12));

  Tensor x2 = Tensor::from_values({2}, {std::log(1.0), std::log(3.0)});
  Tensor y2 = softmax(x2, 0);
  CHECK(y2.values()[0] == doctest::Approx(0.25).epsilon(1e-9));
  CHECK(y2.values()[1] == doctest::Approx(0.75).epsilon(1e-9));

  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor m = random_tensor({4, 6}, rng);
    for (int axis : {0, 1}) {
      Tensor s = softmax(m, axis);
      int n_groups = axis == 1 ? 4 : 6;
      for (int g = 0; g < n_groups; ++g) {
        double total = 0.0;
        int len = axis == 1 ? 6 : 4;
        for (int i = 0; i < len; ++i)
          total += axis == 1 ? s.values()[static_cast<size_t>(g) * 6 + i]
                             : s.values()[static_cast<size_t>(i) * 6 + g];
        CHECK(std::abs(total - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("cross entropy uniform and saturation") {
  int v = 7;
  Tensor logits = Tensor::zeros({3, v});
  std::vector<int> targets{1, 4, 6};
  std::vector<uint8_t> mask{1, 1, 1};
  Tensor loss = cross_entropy(logits, targets, mask);
  CHECK(loss.item() == doctest::Approx(std::log(static_cast<double>(v))).epsilon(1e-9));

  double prev = 1e30;
  for (double s : {1.0, 2.0, 4.0, 8.0, 16.0}) {
    std::vector<double> one_hot(static_cast<size_t>(v), 0.0);
    one_hot[2] = s;
    Tensor l = Tensor::from_values({1, v}, one_hot);
    std::vector<int> t{2};
    std::vector<uint8_t> m{1};
    double cur = cross_entropy(l, t, m).item();
    CHECK(cur < prev);
    prev = cur;
  }
  CHECK(prev < 0.01);
}

TEST_CASE("cross entropy matches scalar-loop oracle") {
  Rng rng(21);
  Tensor logits = random_tensor({3, 5}, rng);
  std::vector<int> targets{2, 0, 4};
  std::vector<uint8_t> mask{1, 0, 1};

  double expect = 0.0;
  int n = 0;
  for (int i = 0; i < 3; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    double mx = -1e300, z = 0.0;
    for (int j = 0; j < 5; ++j) mx = std::max(mx, logits.values()[static_cast<size_t>(i) * 5 + j]);
    for (int j = 0; j < 5; ++j) z += std::exp(logits.values()[static_cast<size_t>(i) * 5 + j] - mx);
    expect -= logits.values()[static_cast<size_t>(i) * 5 + targets[static_cast<size_t>(i)]] - (std::log(z) + mx);
    ++n;
  }
  expect /= n;
  CHECK(cross_entropy(logits, targets, mask).item() == doctest::Approx(expect).epsilon(1e-10));

  std::vector<uint8_t> empty_mask{0, 0, 0};
  CHECK_THROWS_AS(cross_entropy(logits, targets, empty_mask), Error);
}

TEST_CASE("layernorm constant row is zero before gain/bias") {
  Tensor x = Tensor::full({6}, 3.25);
  Tensor g = Tensor::full({6}, 1.0);
  Tensor b = Tensor::zeros({6});
  Tensor y = layernorm(x, g, b);
  for (double v : y.values()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("gelu fixed point") { CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0); }

TEST_CASE("backward basics") {
  Rng rng(5);
  Tensor theta = random_tensor({4}, rng, true);
  {
    Tape tape;
    Tensor loss = sum(theta);
    tape.backward(loss);
  }
  for (double g : theta.grad()) CHECK(g == doctest::Approx(1.0));

  theta.zero_grad();
  {
    Tape tape;
    Tensor loss = sum_squares(theta);
    tape.backward(loss);
  }
  for (int i = 0; i < 4; ++i)
    CHECK(theta.grad()[static_cast<size_t>(i)] == doctest::Approx(2.0 * theta.values()[static_cast<size_t>(i)]));

  {
    Tape tape;
    Tensor not_scalar = add(theta, theta);
    CHECK_THROWS_AS(tape.backward(not_scalar), Error);
  }
}

TEST_CASE("backward rejects loss from another tape") {
  Tensor x = Tensor::full({2}, 1.0, true);
  Tensor loss;
  {
    Tape t1;
    loss = sum(x);
  }
  {
    Tape t2;
    CHECK_THROWS_AS(t2.backward(loss), Error);
  }
}

TEST_CASE("composite three-layer expression matches finite differences") {
  Rng rng(13);
  Tensor w1 = random_tensor({5, 4}, rng);
  Tensor w2 = random_tensor({4, 3}, rng);
  Tensor g = Tensor::full({3}, 1.0);
  Tensor b = Tensor::zeros({3});
  Tensor x0 = random_tensor({2, 5}, rng);
  auto f = [&](const Tensor& x) {
    Tensor h = gelu(matmul(x, w1));
    Tensor h2 = layernorm(matmul(h, w2), g, b);
    return sum_squares(h2);
  };
  auto report = grad_check(f, x0, 1e-5, 1e-4);
  CHECK(report.pass);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("grad_check on linear function is exact to machine precision") {
  Rng rng(17);
  Tensor x = random_tensor({6}, rng);
  auto report = grad_check([](const Tensor& t) { return sum(scale(t, 3.5)); }, x, 1e-5, 1e-4);
  CHECK(report.max_rel_err < 1e-10);
}

TEST_CASE("grad_check softmax cross-entropy composite") {
  Rng rng(19);
  Tensor x = random_tensor({4, 6}, rng);
  std::vector<int> targets{1, 5, 0, 3};
  std::vector<uint8_t> mask{1, 1, 0, 1};
  auto report = grad_check(
      [&](const Tensor& t) { return cross_entropy(t, targets, mask); }, x, 1e-5, 1e-4);
  CHECK(report.pass);
}

TEST_CASE("grad_check layernorm composite") {
  Rng rng(23);
  Tensor gain = random_tensor({5}, rng);
  Tensor bias = random_tensor({5}, rng);
  Tensor x = random_tensor({3, 5}, rng);
  auto report = grad_check(
      [&](const Tensor& t) { return sum_squares(layernorm(t, gain, bias)); }, x, 1e-5, 1e-4);
  CHECK(report.pass);
}

TEST_CASE("every differentiable op passes finite differences on random inputs") {
  Rng rng(31);
  auto check = [&](const char* name, const std::function<Tensor(const Tensor&)>& f,
                   std::vector<int> shape) {
    Tensor x = random_tensor(shape, rng);
    auto report = grad_check(f, x, 1e-5, 1e-4);
    INFO(name << " max_rel_err=" << report.max_rel_err);
    CHECK(report.pass);
  };

  Tensor other = random_tensor({3, 4}, rng);
  auto w12 = fixed_weights(12, 101);
  auto w12b = fixed_weights(12, 102);
  auto w20 = fixed_weights(20, 103);
  auto w6 = fixed_weights(6, 104);
  auto w8 = fixed_weights(8, 105);

  check("add", [&](const Tensor& t) { return weighted_sum(add(t, other), w12); }, {3, 4});
  check("sub", [&](const Tensor& t) { return weighted_sum(sub(t, other), w12); }, {3, 4});
  check("mul", [&](const Tensor& t) { return weighted_sum(mul(t, other), w12); }, {3, 4});
  check("scale", [&](const Tensor& t) { return weighted_sum(scale(t, -1.7), w12); }, {3, 4});
  check("matmul_lhs", [&](const Tensor& t) {
    Tensor rhs = Tensor::from_values({4, 1}, {0.3, -0.4, 0.9, 0.1});
    return sum(matmul(t, rhs));
  }, {3, 4});
  check("matmul_rhs", [&](const Tensor& t) { return sum(matmul(other, t)); }, {4, 5});
  check("transpose", [&](const Tensor& t) { return weighted_sum(transpose(t), w12b); }, {3, 4});
  check("reshape", [&](const Tensor& t) { return weighted_sum(reshape(t, {2, 6}), w12); }, {3, 4});
  check("concat0", [&](const Tensor& t) { return weighted_sum(concat({t, other}, 0), fixed_weights(24, 106)); }, {3, 4});
  check("concat1", [&](const Tensor& t) { return weighted_sum(concat({t, other}, 1), fixed_weights(24, 107)); }, {3, 4});
  check("slice", [&](const Tensor& t) { return weighted_sum(slice(t, 1, 1, 2), w6); }, {3, 4});
  check("select_rows", [&](const Tensor& t) {
    std::vector<int> ids{2, 0, 2};
    return weighted_sum(select_rows(t, ids), w12);
  }, {3, 4});
  check("softmax1", [&](const Tensor& t) { return weighted_sum(softmax(t, 1), w12); }, {3, 4});
  check("softmax0", [&](const Tensor& t) { return weighted_sum(softmax(t, 0), w12); }, {3, 4});
  check("masked_softmax", [&](const Tensor& t) {
    BoolMatrix m = BoolMatrix::lower_triangular(4);
    return weighted_sum(masked_softmax(t, m), fixed_weights(16, 108));
  }, {4, 4});
  check("layernorm", [&](const Tensor& t) {
    Tensor g = Tensor::from_values({4}, {1.1, 0.9, -0.5, 1.3});
    Tensor b = Tensor::from_values({4}, {0.1, -0.2, 0.0, 0.4});
    return weighted_sum(layernorm(t, g, b), w12);
  }, {3, 4});
  check("gelu", [&](const Tensor& t) { return weighted_sum(gelu(t), w12); }, {3, 4});
  check("sigmoid", [&](const Tensor& t) { return weighted_sum(sigmoid(t), w12); }, {3, 4});
  check("sum", [](const Tensor& t) { return sum(t); }, {3, 4});
  check("mean_all", [](const Tensor& t) { return mean_all(t); }, {3, 4});
  check("sum_squares", [](const Tensor& t) { return sum_squares(t); }, {3, 4});
  check("add_row_broadcast_x", [&](const Tensor& t) {
    Tensor b = Tensor::from_values({4}, {0.5, -0.5, 0.25, 0.0});
    return weighted_sum(add_row_broadcast(t, b), w12);
  }, {3, 4});
  check("add_row_broadcast_bias", [&](const Tensor& t) {
    return weighted_sum(add_row_broadcast(other, t), w12);
  }, {4});
  check("row_scale_x", [&](const Tensor& t) {
    Tensor s = Tensor::from_values({3}, {0.5, -1.5, 2.0});
    return weighted_sum(row_scale(t, s), w12);
  }, {3, 4});
  check("row_scale_s", [&](const Tensor& t) { return weighted_sum(row_scale(other, t), w12); }, {3});
  check("broadcast_row", [&](const Tensor& t) { return weighted_sum(broadcast_row(t, 5), w20); }, {4});
  check("sigmoid_bce", [&](const Tensor& t) {
    std::vector<double> labels{1, 0, 1, 1, 0, 0, 1, 0};
    return sigmoid_bce_mean(t, labels);
  }, {8});
  (void)w8;
}

TEST_CASE("relu gradient away from kink") {
  Tensor x = Tensor::from_values({4}, {-1.5, 2.0, 0.75, -0.25});
  auto report = grad_check(
      [&](const Tensor& t) { return weighted_sum(relu(t), fixed_weights(4, 109)); }, x, 1e-5, 1e-4);
  CHECK(report.pass);
}

TEST_CASE("masked softmax rejects all-false rows and zeroes masked entries") {
  Tensor s = Tensor::zeros({2, 2});
  BoolMatrix bad(2, 2, false);
  bad.at(0, 0) = 1;
  CHECK_THROWS_AS(masked_softmax(s, bad), Error);

  BoolMatrix m = BoolMatrix::lower_triangular(2);
  Tensor out = masked_softmax(s, m);
  CHECK(out.values()[0] == doctest::Approx(1.0));
  CHECK(out.values()[1] == 0.0);
  CHECK(out.values()[2] == doctest::Approx(0.5));
}

TEST_CASE("stop_gradient blocks flow") {
  Tensor x = Tensor::from_values({3}, {1.0, 2.0, 3.0}, true);
  {
    Tape tape;
    Tensor loss = sum(mul(stop_gradient(x), x));
    tape.backward(loss);
  }
  // d/dx of sg(x)*x is sg(x), not 2x
  for (int i = 0; i < 3; ++i)
    CHECK(x.grad()[static_cast<size_t>(i)] == doctest::Approx(x.values()[static_cast<size_t>(i)]));
}

TEST_CASE("sigmoid bce at logit zero is ln 2") {
  Tensor z = Tensor::zeros({4});
  std::vector<double> labels{0, 1, 0, 1};
  CHECK(sigmoid_bce_mean(z, labels).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("backward is deterministic bitwise") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tensor a = random_tensor({6, 6}, rng, true);
    Tensor b = random_tensor({6, 6}, rng);
    {
      Tape tape;
      Tensor h = gelu(matmul(a, b));
      Tensor loss = sum_squares(softmax(h, 1));
      tape.backward(loss);
    }
    return std::vector<double>(a.grad().begin(), a.grad().end());
  };
  auto g1 = run(99);
  auto g2 = run(99);
  REQUIRE(g1.size() == g2.size());
  for (size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("no op on finite inputs produces NaN or Inf") {
  Rng rng(41);
  for (int trial = 0; trial < 30; ++trial) {
    Tensor x = random_tensor({4, 5}, rng, true);
    Tensor w = random_tensor({5, 4}, rng);
    Tape tape;
    Tensor h = softmax(matmul(x, w), 1);
    Tensor g = Tensor::full({4}, 1.0);
    Tensor b = Tensor::zeros({4});
    Tensor y = layernorm(gelu(h), g, b);
    std::vector<int> t{0, 1, 2, 3};
    std::vector<uint8_t> m{1, 1, 1, 1};
    Tensor loss = cross_entropy(y, t, m);
    tape.backward(loss);
    for (double v : y.values()) CHECK(std::isfinite(v));
    CHECK(std::isfinite(loss.item()));
    for (double v : x.grad()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("frozen tensors reject writes and drop grads") {
  Tensor x = Tensor::full({3}, 1.0, true);
  x.freeze();
  CHECK(x.frozen());
  CHECK_FALSE(x.requires_grad());
  CHECK_THROWS_AS(x.values_mut(), Error);
}

TEST_CASE("non-leaf grads are released after backward") {
  Tensor x = Tensor::full({3}, 2.0, true);
  Tensor mid;
  {
    Tape tape;
    mid = scale(x, 2.0);
    Tensor loss = sum(mid);
    tape.backward(loss);
  }
  CHECK(x.has_grad());
  CHECK_FALSE(mid.has_grad());
}

TEST_CASE("dropout keeps expectation and masks gradient") {
  Rng rng(55);
  Tensor x = Tensor::full({2000}, 1.0, true);
  Tensor y;
  {
    Tape tape;
    y = dropout(x, 0.25, rng);
    Tensor loss = sum(y);
    tape.backward(loss);
  }
  double mean = std::accumulate(y.values().begin(), y.values().end(), 0.0) / y.size();
  CHECK(mean == doctest::Approx(1.0).epsilon(0.05));
  for (int i = 0; i < 2000; ++i) {
    bool kept = y.values()[static_cast<size_t>(i)] != 0.0;
    CHECK(x.grad()[static_cast<size_t>(i)] == (kept ? doctest::Approx(1.0 / 0.75) : doctest::Approx(0.0)));
  }
}
