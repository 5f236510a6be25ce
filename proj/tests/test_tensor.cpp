#include <doctest.h>

#include <cmath>
#include <limits>

#include "lvctc/ops.hpp"
#include "test_support.hpp"

using namespace lvctc;
using lvctc::testing::gradcheck_max_error;
using lvctc::testing::random_tensor;

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_values(const Tensor &t, std::vector<double> expected, double tol = 1e-12) {
  REQUIRE(t.numel() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(t.data()[i] == doctest::Approx(expected[i]).epsilon(tol));
}
}  // namespace

TEST_SUITE("tensor_core") {
  TEST_CASE("tensor construction validates data length") {
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
    auto t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.at({1, 2}) == 6);
    CHECK(t.dim(-1) == 3);
  }

  TEST_CASE("matmul examples") {
    auto id = Tensor::from({2, 2}, {1, 0, 0, 1});
    auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
    auto b = Tensor::from({2, 2}, {5, 6, 7, 8});
    check_values(matmul(id, a), {1, 2, 3, 4});
    check_values(matmul(a, b), {19, 22, 43, 50});
    check_values(matmul(a, Tensor::zeros({2, 2})), {0, 0, 0, 0});
    check_values(matmul(a, b, true), {17, 23, 39, 53});
  }

  TEST_CASE("matmul shape mismatch names both shapes") {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({2, 2});
    try {
      matmul(a, b);
      FAIL("expected DimensionError");
    } catch (const DimensionError &e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2, 3]") != std::string::npos);
      CHECK(msg.find("[2, 2]") != std::string::npos);
    }
  }

  TEST_CASE("softmax and log_softmax") {
    check_values(softmax(Tensor::from({2}, {0, 0})), {0.5, 0.5});
    const double c = 123.25;
    check_values(softmax(Tensor::from({3}, {c, c, c})), {1.0 / 3, 1.0 / 3, 1.0 / 3});
    check_values(softmax(Tensor::from({2}, {0, std::log(3.0)})), {0.25, 0.75});

    std::mt19937_64 rng(7);
    auto x = random_tensor({5, 7}, rng, false, 4.0);
    auto p = softmax(x);
    auto lp = log_softmax(x);
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0;
      for (std::size_t k = 0; k < 7; ++k) {
        s += p.data()[r * 7 + k];
        CHECK(std::abs(lp.data()[r * 7 + k] - std::log(p.data()[r * 7 + k])) < 1e-10);
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
    // along a non-last axis
    auto p0 = softmax(x, 0);
    for (std::size_t k = 0; k < 7; ++k) {
      double s = 0;
      for (std::size_t r = 0; r < 5; ++r) s += p0.data()[r * 7 + k];
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }

  TEST_CASE("logsumexp") {
    CHECK(logsumexp(Tensor::from({2}, {0.0, std::log(3.0)}), 0).item() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-14));
    CHECK(logsumexp(Tensor::from({2}, {-2.5, kNegInf}), 0).item() == -2.5);
    CHECK(logsumexp(Tensor::from({4}, {0, 0, 0, 0}), 0).item() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-14));
    CHECK(logsumexp(Tensor::from({2}, {kNegInf, kNegInf}), 0).item() == kNegInf);

    std::mt19937_64 rng(11);
    for (double shift : {-1000.0, -3.5, 0.0, 17.0, 1000.0}) {
      auto x = random_tensor({6}, rng, false);
      auto shifted = add_scalar(x, shift);
      const double lhs = logsumexp(shifted, 0).item();
      const double rhs = logsumexp(x, 0).item() + shift;
      CHECK(std::abs(lhs - rhs) < 1e-12 * std::max(1.0, std::abs(shift)));
    }
  }

  TEST_CASE("logsumexp gradient ignores -inf entries") {
    auto x = Tensor::from({3}, {0.5, kNegInf, 0.5}, true);
    logsumexp(x, 0).backward();
    CHECK(x.grad()[0] == doctest::Approx(0.5));
    CHECK(x.grad()[1] == 0.0);
    auto all_neg = Tensor::from({2}, {kNegInf, kNegInf}, true);
    logsumexp(all_neg, 0).backward();
    CHECK(all_neg.grad()[0] == 0.0);
  }

  TEST_CASE("layer_norm") {
    auto g1 = Tensor::full({3}, 1.0), b0 = Tensor::zeros({3});
    check_values(layer_norm(Tensor::from({3}, {2, 2, 2}), g1, b0), {0, 0, 0});
    check_values(layer_norm(Tensor::from({2}, {1, -1}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 0.0),
                 {1, -1});
    auto bias = Tensor::from({3}, {0.1, -0.2, 0.3});
    check_values(layer_norm(Tensor::from({3}, {5, -1, 2}), Tensor::zeros({3}), bias), {0.1, -0.2, 0.3});
  }

  TEST_CASE("activations") {
    CHECK(swish(Tensor::scalar(0)).item() == 0.0);
    CHECK(sigmoid(Tensor::scalar(0)).item() == 0.5);
    CHECK(glu(Tensor::from({2}, {2, 0})).item() == 1.0);
    CHECK(relu(Tensor::from({2}, {-1, 2})).data()[0] == 0.0);
    CHECK_THROWS_AS(glu(Tensor::zeros({3})), DimensionError);
  }

  TEST_CASE("conv1d") {
    auto x = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
    auto identity = Tensor::from({2, 2, 1}, {1, 0, 0, 1});
    check_values(conv1d(x, identity, Tensor(), 1, 0), {1, 2, 3, 4, 5, 6});

    auto seq = Tensor::from({4, 1}, {1, 2, 3, 4});
    check_values(conv1d(seq, Tensor::from({1, 1, 2}, {1, 1}), Tensor(), 2, 0), {3, 7});

    CHECK(conv_output_length(16, 3, 2, 1) == 8);
    CHECK(conv_output_length(8, 3, 2, 1) == 4);
    CHECK(conv_output_length(4, 3, 2, 1) == 2);
    CHECK(conv_output_length(2, 3, 2, 1) == 1);
    CHECK_THROWS_AS(conv1d(Tensor::zeros({1, 1}), Tensor::zeros({1, 1, 5}), Tensor(), 1, 0),
                    DimensionError);

    auto dw = conv1d(seq, Tensor::from({1, 3}, {1, 1, 1}), Tensor::from({1}, {0.5}), 1, 1,
                     ConvVariant::depthwise);
    check_values(dw, {3.5, 6.5, 9.5, 7.5});
  }

  TEST_CASE("embedding") {
    auto table = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    std::vector<std::size_t> ids{0, 2, 2};
    auto e = embedding(table, ids, {3});
    check_values(e, {1, 2, 5, 6, 5, 6});
    sum(e).backward();
    check_values(Tensor::from({3, 2}, {table.grad().begin(), table.grad().end()}), {1, 1, 0, 0, 2, 2});
    std::vector<std::size_t> bad{3};
    CHECK_THROWS_AS(embedding(table, bad, {1}), IndexError);
  }

  TEST_CASE("dropout") {
    std::mt19937_64 rng(3);
    auto x = random_tensor({50}, rng, false);
    Rng r1(42);
    CHECK(dropout(x, 0.0, r1, true).same_node(x));
    CHECK(dropout(x, 0.5, r1, false).same_node(x));
    Rng a(99), b(99);
    auto da = dropout(x, 0.5, a, true);
    auto db = dropout(x, 0.5, b, true);
    std::size_t zeros = 0;
    for (std::size_t i = 0; i < 50; ++i) {
      CHECK(da.data()[i] == db.data()[i]);
      if (da.data()[i] == 0.0) ++zeros;
      else CHECK(da.data()[i] == doctest::Approx(2.0 * x.data()[i]));
    }
    CHECK(zeros > 10);
    CHECK(zeros < 40);
    CHECK_THROWS_AS(dropout(x, 1.0, a, true), ContractError);
  }

  TEST_CASE("backward basics") {
    auto x = Tensor::scalar(3.0, true);
    reshape(x, {}).backward();
    CHECK(x.grad()[0] == 1.0);

    auto a = Tensor::scalar(3.0, true), b = Tensor::scalar(4.0, true);
    mul(a, b).backward();
    CHECK(a.grad()[0] == 4.0);
    CHECK(b.grad()[0] == 3.0);

    CHECK_THROWS_AS(Tensor::zeros({2}, true).backward(), ContractError);

    // a leaf that is not on the graph keeps a zero gradient after zero_grad
    auto unused = Tensor::zeros({2}, true);
    unused.zero_grad();
    mul(a, b).backward();
    CHECK(unused.grad()[0] == 0.0);
  }

  TEST_CASE("rel_shift picks relative offsets") {
    // row i, col r holds offset T-1-r; after the shift entry (i, j) is i - j.
    const std::size_t t = 3;
    std::vector<double> v;
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t r = 0; r < 2 * t - 1; ++r) v.push_back(static_cast<double>(t - 1) - static_cast<double>(r));
    auto out = rel_shift(Tensor::from({t, 2 * t - 1}, v));
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < t; ++j)
        CHECK(out.at({i, j}) == static_cast<double>(i) - static_cast<double>(j));
  }

  TEST_CASE("gradients match central differences for every op") {
    std::mt19937_64 rng(2024);
    auto x = random_tensor({2, 3, 4}, rng);
    auto y = random_tensor({2, 3, 4}, rng);
    auto w = random_tensor({4, 5}, rng);
    auto b = random_tensor({5}, rng);
    auto sq = random_tensor({2, 4, 4}, rng);
    auto gain = random_tensor({4}, rng);
    auto pos = add_scalar(square(random_tensor({2, 3, 4}, rng)), 0.5).detach();
    pos = Tensor::from(pos.shape(), {pos.data().begin(), pos.data().end()}, true);
    auto proj = random_tensor({2, 3, 4}, rng, false);  // fixed projection to get a scalar
    auto project = [&](const Tensor &t) { return sum(mul(t, proj)); };
    const double tol = 1e-4;

    CHECK(gradcheck_max_error({x, y}, [&] { return project(add(x, y)); }) < tol);
    CHECK(gradcheck_max_error({x, y}, [&] { return project(sub(x, y)); }) < tol);
    CHECK(gradcheck_max_error({x, y}, [&] { return project(mul(x, y)); }) < tol);
    CHECK(gradcheck_max_error({x, pos}, [&] { return project(div(x, pos)); }) < tol);
    CHECK(gradcheck_max_error({pos}, [&] { return project(log(pos)); }) < tol);
    CHECK(gradcheck_max_error({x}, [&] { return project(exp(x)); }) < tol);
    CHECK(gradcheck_max_error({x, gain}, [&] { return project(add_bias(x, gain)); }) < tol);
    CHECK(gradcheck_max_error({x, w, b}, [&] { return sum(square(linear(x, w, b))); }) < tol);
    CHECK(gradcheck_max_error({x, sq}, [&] { return sum(square(matmul(sq, transpose_last2(x)))); }) < tol);
    CHECK(gradcheck_max_error({x, w}, [&] { return sum(square(matmul(x, transpose_last2(w), true))); }) < tol);
    CHECK(gradcheck_max_error({x}, [&] { return project(log_softmax(x, -1)); }) < tol);
    CHECK(gradcheck_max_error({x}, [&] { return project(softmax(x, 1)); }) < tol);
    CHECK(gradcheck_max_error({x}, [&] { return sum(square(logsumexp(x, 1))); }) < tol);
    CHECK(gradcheck_max_error({x, gain, b}, [&] {
            return project(layer_norm(x, gain, slice_last(b, 0, 4)));
          }) < tol);
    CHECK(gradcheck_max_error({x}, [&] { return project(swish(x)); }) < tol);
    CHECK(gradcheck_max_error({x}, [&] { return project(tanh(x)); }) < tol);
    CHECK(gradcheck_max_error({x}, [&] { return project(sigmoid(x)); }) < tol);
    CHECK(gradcheck_max_error({x}, [&] { return sum(square(glu(x))); }) < tol);
    CHECK(gradcheck_max_error({x}, [&] { return sum(square(merge_heads(split_heads(scale(x, 2.0), 2)))); }) < tol);
    CHECK(gradcheck_max_error({x}, [&] { return sum(square(split_heads(x, 2))); }) < tol);
    CHECK(gradcheck_max_error({x, y}, [&] { return sum(square(concat_last({x, slice_last(y, 1, 2)}))); }) < tol);
    CHECK(gradcheck_max_error({x}, [&] { return sum(square(narrow(x, 1, 1, 2))); }) < tol);
    CHECK(gradcheck_max_error({x, y}, [&] { return sum(square(stack({select(x, 1), select(y, 0)}))); }) < tol);
    std::vector<std::size_t> idx{3, 0, 3};
    CHECK(gradcheck_max_error({x}, [&] { return sum(square(index_select_last(x, idx))); }) < tol);
    CHECK(gradcheck_max_error({x}, [&] { return sum(square(shift_right(x, 2, 0.0))); }) < tol);
    CHECK(gradcheck_max_error({x}, [&] { return sum(square(sum_last(x))); }) < tol);

    auto kernel = random_tensor({5, 4, 3}, rng);
    auto kbias = random_tensor({5}, rng);
    CHECK(gradcheck_max_error({x, kernel, kbias}, [&] {
            return sum(square(conv1d(x, kernel, kbias, 2, 1)));
          }) < tol);
    auto dkernel = random_tensor({4, 3}, rng);
    CHECK(gradcheck_max_error({x, dkernel, gain}, [&] {
            return sum(square(conv1d(x, dkernel, gain, 1, 1, ConvVariant::depthwise)));
          }) < tol);
    auto table = random_tensor({6, 3}, rng);
    std::vector<std::size_t> ids{1, 5, 1, 0};
    CHECK(gradcheck_max_error({table}, [&] { return sum(square(embedding(table, ids, {2, 2}))); }) < tol);
    auto rel = random_tensor({2, 3, 5}, rng);
    CHECK(gradcheck_max_error({rel}, [&] { return sum(square(rel_shift(rel))); }) < tol);
    std::vector<std::uint8_t> m(24, 0);
    m[3] = m[10] = 1;
    CHECK(gradcheck_max_error({x}, [&] { return project(softmax(masked_fill(x, m, kNegInf))); }) < tol);
    std::vector<double> rows(6, 0.5);
    rows[2] = 0.0;
    CHECK(gradcheck_max_error({x}, [&] { return sum(square(scale_rows(x, rows))); }) < tol);
  }

  TEST_CASE("no-grad mode records nothing") {
    auto x = Tensor::from({2}, {1, 2}, true);
    NoGradGuard guard;
    auto y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }

  TEST_CASE("deterministic forward") {
    std::mt19937_64 r1(5), r2(5);
    auto a = random_tensor({4, 6}, r1), b = random_tensor({4, 6}, r2);
    auto w1 = random_tensor({6, 6}, r1), w2 = random_tensor({6, 6}, r2);
    auto o1 = log_softmax(linear(a, w1, Tensor()));
    auto o2 = log_softmax(linear(b, w2, Tensor()));
    for (std::size_t i = 0; i < o1.numel(); ++i) CHECK(o1.data()[i] == o2.data()[i]);
  }
}
