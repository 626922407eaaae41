#include <doctest.h>

#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "test_support.hpp"
#include "tpr/linalg.hpp"

using namespace tpr;
using tpr::test::Mat;
using tpr::test::op_gradient_error;
using tpr::test::random_away_from_zero;
using tpr::test::random_tensor;

namespace {

using VarList = std::vector<Var<double>>;
using OpFn = std::function<Var<double>(Tape<double>&, VarList&)>;

struct OpCase {
  std::string name;
  std::function<std::vector<Mat>(Rng&)> inputs;
  OpFn fn;
};

Var<double> bn_train(Tape<double>&, VarList& v) {
  BatchNormStats<double> stats{Tensor<double>::zeros({v[0].dim(-1)}), Tensor<double>::ones({v[0].dim(-1)})};
  return batch_norm(v[0], v[1], v[2], stats, true);
}

std::vector<OpCase> op_cases() {
  return {
      {"add_broadcast", [](Rng& r) { return std::vector<Mat>{random_tensor({3, 4}, r), random_tensor({4}, r)}; },
       [](auto&, VarList& v) { return v[0] + v[1]; }},
      {"sub_broadcast", [](Rng& r) { return std::vector<Mat>{random_tensor({3, 4}, r), random_tensor({3, 1}, r)}; },
       [](auto&, VarList& v) { return v[0] - v[1]; }},
      {"mul_broadcast", [](Rng& r) { return std::vector<Mat>{random_tensor({2, 3, 4}, r), random_tensor({3, 1}, r)}; },
       [](auto&, VarList& v) { return v[0] * v[1]; }},
      {"scale", [](Rng& r) { return std::vector<Mat>{random_tensor({3, 4}, r)}; }, [](auto&, VarList& v) { return scale(v[0], 2.5); }},
      {"add_scalar", [](Rng& r) { return std::vector<Mat>{random_tensor({3, 4}, r)}; },
       [](auto&, VarList& v) { return add_scalar(v[0], -0.7); }},
      {"power", [](Rng& r) { return std::vector<Mat>{random_tensor({3, 4}, r, 1.0, 2.0)}; },
       [](auto&, VarList& v) { return power(v[0], 2.5); }},
      {"reciprocal", [](Rng& r) { return std::vector<Mat>{random_tensor({3, 4}, r, 1.0, 2.0)}; },
       [](auto&, VarList& v) { return power(v[0], -1.0); }},
      {"sqrt", [](Rng& r) { return std::vector<Mat>{random_tensor({3, 4}, r, 1.0, 2.0)}; }, [](auto&, VarList& v) { return tpr::sqrt(v[0]); }},
      {"exp", [](Rng& r) { return std::vector<Mat>{random_tensor({3, 4}, r)}; }, [](auto&, VarList& v) { return tpr::exp(v[0]); }},
      {"log", [](Rng& r) { return std::vector<Mat>{random_tensor({3, 4}, r, 1.0, 2.0)}; }, [](auto&, VarList& v) { return tpr::log(v[0]); }},
      {"relu", [](Rng& r) { return std::vector<Mat>{random_away_from_zero({3, 4}, r)}; }, [](auto&, VarList& v) { return relu(v[0]); }},
      {"gelu", [](Rng& r) { return std::vector<Mat>{random_tensor({3, 4}, r)}; }, [](auto&, VarList& v) { return gelu(v[0]); }},
      {"sigmoid", [](Rng& r) { return std::vector<Mat>{random_tensor({3, 4}, r)}; }, [](auto&, VarList& v) { return sigmoid(v[0]); }},
      {"tanh", [](Rng& r) { return std::vector<Mat>{random_tensor({3, 4}, r)}; }, [](auto&, VarList& v) { return tpr::tanh(v[0]); }},
      {"matmul", [](Rng& r) { return std::vector<Mat>{random_tensor({3, 4}, r), random_tensor({4, 5}, r)}; },
       [](auto&, VarList& v) { return matmul(v[0], v[1]); }},
      {"batched_matmul", [](Rng& r) { return std::vector<Mat>{random_tensor({2, 3, 4}, r), random_tensor({2, 4, 5}, r)}; },
       [](auto&, VarList& v) { return matmul(v[0], v[1]); }},
      {"sum_axis", [](Rng& r) { return std::vector<Mat>{random_tensor({3, 4}, r)}; }, [](auto&, VarList& v) { return sum(v[0], 0, true); }},
      {"mean_axis", [](Rng& r) { return std::vector<Mat>{random_tensor({2, 3, 4}, r)}; }, [](auto&, VarList& v) { return mean(v[0], 1); }},
      {"sum_all", [](Rng& r) { return std::vector<Mat>{random_tensor({3, 4}, r)}; }, [](auto&, VarList& v) { return sum(v[0]); }},
      {"mean_all", [](Rng& r) { return std::vector<Mat>{random_tensor({3, 4}, r)}; }, [](auto&, VarList& v) { return mean(v[0]); }},
      {"softmax", [](Rng& r) { return std::vector<Mat>{random_tensor({2, 3, 4}, r)}; }, [](auto&, VarList& v) { return softmax(v[0]); }},
      {"masked_softmax", [](Rng& r) { return std::vector<Mat>{random_tensor({2, 4, 4}, r)}; },
       [](auto&, VarList& v) {
         static const Tensor<double> mask = [] {
           Tensor<double> m({4, 4});
           for (Index i = 0; i < 4; ++i)
             for (Index j = i + 1; j < 4; ++j) m[i * 4 + j] = -1e9;
           return m;
         }();
         return softmax(v[0], &mask);
       }},
      {"log_softmax", [](Rng& r) { return std::vector<Mat>{random_tensor({2, 3, 4}, r)}; }, [](auto&, VarList& v) { return log_softmax(v[0]); }},
      // Scale-invariant ops get wider inputs: their third derivatives shrink with
      // the input scale, which keeps the step-1e-3 truncation error small.
      {"layer_norm", [](Rng& r) { return std::vector<Mat>{random_tensor({2, 3, 4}, r, -5, 5), random_tensor({4}, r), random_tensor({4}, r)}; },
       [](auto&, VarList& v) { return layer_norm(v[0], v[1], v[2]); }},
      {"batch_norm", [](Rng& r) { return std::vector<Mat>{random_tensor({6, 4}, r), random_tensor({4}, r), random_tensor({4}, r)}; },
       bn_train},
      {"conv2d_zero_pad", [](Rng& r) { return std::vector<Mat>{random_tensor({2, 2, 6, 6}, r), random_tensor({3, 2, 3, 3}, r), random_tensor({3}, r)}; },
       [](auto&, VarList& v) { return conv2d(v[0], v[1], std::optional<Var<double>>(v[2]), Conv2dOptions{2, 1, PadMode::Zero}); }},
      {"conv2d_replicate", [](Rng& r) { return std::vector<Mat>{random_tensor({2, 2, 5, 5}, r), random_tensor({3, 2, 3, 3}, r)}; },
       [](auto&, VarList& v) { return conv2d(v[0], v[1], std::optional<Var<double>>(), Conv2dOptions{1, 1, PadMode::Replicate}); }},
      {"reshape", [](Rng& r) { return std::vector<Mat>{random_tensor({2, 3, 4}, r)}; }, [](auto&, VarList& v) { return reshape(v[0], {6, 4}); }},
      {"permute", [](Rng& r) { return std::vector<Mat>{random_tensor({2, 3, 4, 5}, r)}; },
       [](auto&, VarList& v) { return permute(v[0], {0, 2, 1, 3}); }},
      {"transpose", [](Rng& r) { return std::vector<Mat>{random_tensor({2, 3, 4}, r)}; }, [](auto&, VarList& v) { return transpose(v[0], 1, 2); }},
      {"concat", [](Rng& r) { return std::vector<Mat>{random_tensor({2, 3, 1, 4}, r), random_tensor({2, 3, 2, 4}, r)}; },
       [](auto&, VarList& v) { return concat(VarList{v[0], v[1]}, 2); }},
      {"strided_slice", [](Rng& r) { return std::vector<Mat>{random_tensor({2, 7, 4}, r)}; }, [](auto&, VarList& v) { return slice(v[0], 1, 1, 7, 2); }},
      {"embedding", [](Rng& r) { return std::vector<Mat>{random_tensor({5, 4}, r)}; },
       [](auto&, VarList& v) {
         static const std::vector<int> ix{0, 3, 3, 1};
         return embedding(v[0], std::span<const int>(ix), Shape{2, 2});
       }},
      {"l2_normalize", [](Rng& r) { return std::vector<Mat>{random_tensor({2, 3, 4}, r, -5, 5)}; }, [](auto&, VarList& v) { return l2_normalize(v[0]); }},
      {"clamp_min", [](Rng& r) { return std::vector<Mat>{random_away_from_zero({3, 4}, r)}; },
       [](auto&, VarList& v) { return clamp_min(v[0], 0.0); }},
  };
}

}  // namespace

TEST_CASE("every primitive matches central differences in double precision over 20 seeds") {
  for (const OpCase& c : op_cases()) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(1000 + seed);
      worst = std::max(worst, op_gradient_error(c.inputs(rng), c.fn, seed));
    }
    INFO(c.name << " worst relative error " << worst);
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("single-precision gradients agree with double-precision differences to 1e-3") {
  // Same graphs run in float; compare against the double finite differences.
  Rng rng(7);
  const Mat a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
  Tape<float> tf;
  const Var<float> af = tf.input(a.cast<float>()), bf = tf.input(b.cast<float>());
  tf.backward(sum(tpr::tanh(matmul(af, bf))));
  const Tensor<double> ga = tf.grad(af).cast<double>();
  Mat a2 = a;
  const std::vector<Mat> fd = verify::finite_difference(
      [&] {
        Tape<double> t;
        return sum(tpr::tanh(matmul(t.input(a2), t.constant(b)))).value().item();
      },
      {&a2});
  CHECK(verify::relative_error(ga, fd[0], 1e-8) <= 1e-3);
}

TEST_CASE("matmul with the identity returns the other operand") {
  Rng rng(3);
  const Mat a = random_tensor({3, 3}, rng);
  Tape<double> t;
  const Tensor<double> out = matmul(t.constant(Tensor<double>::identity(3)), t.constant(a)).value();
  CHECK(out == a);
}

TEST_CASE("softmax of equal logits is uniform and rows sum to one") {
  Tape<double> t;
  const Tensor<double> u = softmax(t.constant(Tensor<double>::zeros({1, 3}))).value();
  for (Index i = 0; i < 3; ++i) CHECK(u[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor<double> p = softmax(t.constant(random_tensor({4, 6}, rng, -20, 20))).value();
    for (Index r = 0; r < 4; ++r) {
      double s = 0.0;
      for (Index c = 0; c < 6; ++c) {
        CHECK(p[r * 6 + c] >= 0.0);
        s += p[r * 6 + c];
      }
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("conv2d of a constant image with an all-ones kernel under replicate padding") {
  const Mat image = Mat({1, 1, 4, 4}, 0.75);
  const Mat kernel = Mat::ones({1, 1, 3, 3});
  Tape<double> t;
  const Tensor<double> out =
      conv2d(t.constant(image), t.constant(kernel), std::optional<Var<double>>(), Conv2dOptions{1, 1, PadMode::Replicate}).value();
  const Mat oracle = verify::direct_conv2d(image.reshaped({1, 4, 4}), kernel, 1, 1, true);
  REQUIRE(out.numel() == 16);
  for (Index i = 0; i < 16; ++i) {
    CHECK(out[i] == doctest::Approx(0.75 * 9.0));
    CHECK(out[i] == doctest::Approx(oracle[i]));
  }
}

TEST_CASE("conv2d agrees with the direct convolution loop on random inputs") {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const Index c = 1 + Index(rng.uniform_index(3)), o = 1 + Index(rng.uniform_index(3));
    const Index h = 4 + Index(rng.uniform_index(5)), w = 4 + Index(rng.uniform_index(5));
    const int stride = 1 + int(rng.uniform_index(3));
    const bool replicate = rng.bernoulli(0.5);
    const Mat image = random_tensor({1, c, h, w}, rng);
    const Mat kernel = random_tensor({o, c, 3, 3}, rng);
    Tape<double> t;
    const Tensor<double> out =
        conv2d(t.constant(image), t.constant(kernel), std::optional<Var<double>>(),
               Conv2dOptions{stride, 1, replicate ? PadMode::Replicate : PadMode::Zero})
            .value();
    const Mat oracle = verify::direct_conv2d(image.reshaped({c, h, w}), kernel, stride, 1, replicate);
    REQUIRE(out.numel() == oracle.numel());
    for (Index i = 0; i < out.numel(); ++i) CHECK(out[i] == doctest::Approx(oracle[i]).epsilon(1e-12));
  }
}

TEST_CASE("l2_normalize examples") {
  Tape<double> t;
  const Tensor<double> a = l2_normalize(t.constant(Tensor<double>({2}, std::vector<double>{3.0, 4.0}))).value();
  CHECK(a[0] == doctest::Approx(0.6));
  CHECK(a[1] == doctest::Approx(0.8));
  const Tensor<double> unit({3}, std::vector<double>{0.0, 1.0, 0.0});
  CHECK(l2_normalize(t.constant(unit)).value() == unit);
  Rng rng(5);
  const Tensor<double> r = l2_normalize(t.constant(random_tensor({5}, rng))).value();
  CHECK(std::abs(r.vector().norm() - 1.0) <= 1e-6);
  // Below the floor, the slice is divided by the floor instead.
  const Tensor<double> tiny({2}, std::vector<double>{1e-14, 0.0});
  CHECK(l2_normalize(t.constant(tiny)).value()[0] == doctest::Approx(1e-2));
}

TEST_CASE("stop_gradient passes values and blocks gradients exactly") {
  Rng rng(9);
  const Mat x = random_tensor({3, 4}, rng);
  {
    Tape<double> t;
    const Var<double> v = t.input(x);
    const Var<double> s = stop_gradient(v);
    CHECK(s.value() == x);
    t.backward(sum(s));
    const Tensor<double> g = t.grad(v);
    for (double e : g.values()) CHECK(e == 0.0);
  }
  {
    Tape<double> t;
    const Var<double> v = t.input(x);
    t.backward(sum(v * stop_gradient(v)));
    const Tensor<double> g = t.grad(v);
    CHECK(g == x);
    // Differences with the stopped branch held at its value.
    Mat x2 = x;
    const std::vector<Mat> fd = verify::finite_difference(
        [&] {
          Tape<double> u;
          return sum(u.input(x2) * u.constant(x)).value().item();
        },
        {&x2});
    CHECK(verify::relative_error(g, fd[0], 1e-12) <= 1e-9);
  }
}

TEST_CASE("backward of sum(W x) yields the outer product") {
  const Mat w({2, 2}, std::vector<double>{1.0, -2.0, 0.5, 3.0});
  const Mat x({2, 1}, std::vector<double>{4.0, -1.0});
  Tape<double> t;
  const Var<double> wv = t.input(w), xv = t.input(x);
  t.backward(sum(matmul(wv, xv)));
  const Tensor<double> gw = t.grad(wv), gx = t.grad(xv);
  // d/dW_ij = x_j; d/dx_j = sum_i W_ij.
  CHECK(gw == Mat({2, 2}, std::vector<double>{4.0, -1.0, 4.0, -1.0}));
  CHECK(gx == Mat({2, 1}, std::vector<double>{1.5, 1.0}));
}

TEST_CASE("a constant root leaves every gradient at zero") {
  Tape<double> t;
  Parameter<double> p("p", Mat({3}, 2.0));
  const Var<double> pv = t.param(p);
  const Var<double> c = t.constant(Mat::scalar(5.0));
  t.backward(sum(c));
  for (double g : p.grad.values()) CHECK(g == 0.0);
  CHECK(pv.valid());
}

TEST_CASE("paths into a parameter accumulate") {
  Tape<double> t;
  Parameter<double> p("p", Mat({2}, std::vector<double>{1.0, 2.0}));
  const Var<double> a = t.param(p);
  t.backward(sum(a * a + scale(a, 3.0)));
  CHECK(p.grad == Mat({2}, std::vector<double>{5.0, 7.0}));
}

TEST_CASE("backward rejects non-scalar roots and released tapes") {
  Tape<double> t;
  const Var<double> x = t.input(Mat::ones({2, 2}));
  CHECK_THROWS_AS(t.backward(x), Error);
  const Var<double> s = sum(x);
  t.backward(s);
  CHECK_THROWS_AS(t.backward(s), Error);
}

TEST_CASE("shape mismatches name the op and both shapes") {
  Tape<double> t;
  const Var<double> a = t.constant(Mat::ones({2, 3})), b = t.constant(Mat::ones({4, 5}));
  try {
    (void)matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,5]") != std::string::npos);
  }
  CHECK_THROWS_AS((void)add(a, b), ShapeError);
}

TEST_CASE("finite checking flags non-finite values in debug mode") {
  Tape<double> t;
  t.set_check_finite(true);
  const Var<double> x = t.input(Mat({2}, std::vector<double>{-1.0, 1.0}));
  CHECK_THROWS_AS((void)tpr::sqrt(x), NumericError);
}

TEST_CASE("layer_norm output is standardized before the affine map") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const Mat x = random_tensor({3, 16}, rng, -5, 5);
    Tape<double> t;
    const Tensor<double> y = layer_norm(t.constant(x), t.constant(Mat::ones({16})), t.constant(Mat::zeros({16}))).value();
    for (Index r = 0; r < 3; ++r) {
      double m = 0.0, v = 0.0;
      for (Index c = 0; c < 16; ++c) m += y[r * 16 + c];
      m /= 16.0;
      for (Index c = 0; c < 16; ++c) v += (y[r * 16 + c] - m) * (y[r * 16 + c] - m);
      v /= 16.0;
      CHECK(std::abs(m) <= 1e-5);
      CHECK(std::abs(v - 1.0) <= 1e-4 + 1e-5 * 16);  // eps = 1e-5 inside the root
    }
  }
}

TEST_CASE("batch_norm uses batch statistics in training and running averages at evaluation") {
  BatchNormStats<double> stats{Mat::zeros({2}), Mat::ones({2})};
  const Mat x({4, 2}, std::vector<double>{1, 10, 2, 20, 3, 30, 4, 40});
  Tape<double> t;
  const Var<double> g = t.constant(Mat::ones({2})), b = t.constant(Mat::zeros({2}));
  const Tensor<double> y = batch_norm(t.constant(x), g, b, stats, true).value();
  double m = 0.0;
  for (Index r = 0; r < 4; ++r) m += y[r * 2];
  CHECK(std::abs(m) <= 1e-12);
  // momentum 0.9: running = 0.9 * running + 0.1 * batch.
  CHECK(stats.running_mean[0] == doctest::Approx(0.25));
  CHECK(stats.running_mean[1] == doctest::Approx(2.5));
  const Tensor<double> e = batch_norm(t.constant(x), g, b, stats, false).value();
  CHECK(e[0] == doctest::Approx((1.0 - 0.25) / std::sqrt(stats.running_var[0] + 1e-5)));
}

TEST_CASE("tensor size invariant holds through reductions and broadcasts") {
  Rng rng(17);
  Tape<double> t;
  const Var<double> a = t.constant(random_tensor({2, 3, 4}, rng));
  const Var<double> b = t.constant(random_tensor({4}, rng));
  for (const Var<double>& v : {sum(a, 1), mean(a, 0, true), a + b, a * b, reshape(a, {4, 6}), permute(a, {2, 0, 1})}) {
    Index prod = 1;
    for (Index s : v.shape()) prod *= s;
    CHECK(prod == v.numel());
  }
}

TEST_CASE("gram_eigenvalues examples") {
  const std::vector<double> id = gram_eigenvalues(Eigen::MatrixXd::Identity(4, 4));
  for (double e : id) CHECK(e == doctest::Approx(1.0));
  Eigen::MatrixXd d(2, 2);
  d << 3, 0, 0, 2;
  const std::vector<double> ev = gram_eigenvalues(d);
  CHECK(ev[0] == doctest::Approx(9.0));
  CHECK(ev[1] == doctest::Approx(4.0));
}

TEST_CASE("gram_eigenvalues match the power-iteration oracle and preserve the Frobenius norm") {
  Rng rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    const Mat z = random_tensor({16, 8}, rng);
    const std::vector<double> ev = gram_eigenvalues(z.matrix());
    const std::vector<double> sv = verify::singular_values(z);
    double trace = 0.0;
    for (std::size_t i = 0; i < ev.size(); ++i) {
      CHECK(ev[i] >= 0.0);
      if (i > 0) CHECK(ev[i] <= ev[i - 1]);
      CHECK(std::abs(std::sqrt(ev[i]) - sv[i]) <= 1e-6 * sv[i]);
      trace += ev[i];
    }
    CHECK(std::abs(trace - z.matrix().squaredNorm()) <= 1e-5 * z.matrix().squaredNorm());
  }
}

TEST_CASE("symmetric_eigenvalues reports the residual when the sweep cap is hit") {
  Rng rng(23);
  const Mat z = random_tensor({12, 12}, rng);
  const Eigen::MatrixXd g = z.matrix().transpose() * z.matrix();
  JacobiOptions opt;
  opt.max_sweeps = 1;
  try {
    (void)symmetric_eigenvalues(g, opt);
    FAIL("expected ConvergenceError");
  } catch (const ConvergenceError& e) {
    CHECK(e.residual() > 0.0);
  }
}
