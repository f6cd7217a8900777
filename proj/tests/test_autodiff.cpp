#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "hsets/autodiff.hpp"
#include "support.hpp"

using namespace hsets;
using namespace hsets::testing;

namespace {

Tensor vec(std::initializer_list<double> v) {
  Eigen::VectorXd d(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) d(i++) = x;
  return Tensor::vector(d);
}

// f(x) = x1*x2 + x3 (zero-based: x0*x1 + x2)
Tape bilinear_plus_linear() {
  Tape t;
  const NodeId x = t.input(Shape{3});
  const NodeId p = t.mul(t.select(x, 0), t.select(x, 1));
  t.set_output(t.add(p, t.select(x, 2)));
  return t;
}

Tape linear_tape(const Eigen::VectorXd& w) {
  Tape t;
  const NodeId x = t.input(Shape{w.size()});
  const NodeId wc = t.constant(Tensor(Shape{1, w.size()}, w));
  t.set_output(t.matvec(wc, x));
  return t;
}

double scalar_of(Tape& tape, const Eigen::VectorXd& x, Index c = 0) {
  return forward(tape, Tensor(tape.input_shape(), x))[c];
}

}  // namespace

TEST_CASE("forward: trivial maps") {
  Tape t;
  const NodeId x = t.input(Shape{1});
  t.set_output(t.scale(x, 3.0));
  CHECK(forward(t, Tensor::scalar(2.0))[0] == 6.0);

  Tape id;
  const NodeId xi = id.input(Shape{3});
  id.set_output(id.add(id.matvec(id.constant(matrix_tensor(Eigen::MatrixXd::Identity(3, 3))), xi),
                       id.constant(Tensor(Shape{3}))));
  const Tensor v = vec({0.5, -2.0, 7.25});
  CHECK(forward(id, v) == v);
}

TEST_CASE("forward: random MLP matches straight-line evaluation") {
  const Mlp mlp = random_mlp({16, 12, 12, 5}, 42);
  Tape tape = mlp_tape(mlp);
  std::mt19937_64 rng(42);
  const Eigen::VectorXd x = random_vector(16, rng);
  const Tensor out = forward(tape, Tensor::vector(x));
  const Eigen::VectorXd expected = mlp_straight_line(mlp, x);
  CHECK((out.data() - expected).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("forward: input shape mismatch") {
  Tape t = bilinear_plus_linear();
  CHECK_THROWS_AS(forward(t, vec({1, 2})), ShapeError);
  CHECK_THROWS_AS(forward(t, Tensor(Shape{3, 1})), ShapeError);
}

TEST_CASE("forward: replay reproduces recorded values bit-exactly") {
  const Mlp mlp = random_mlp({8, 6, 3}, 7);
  Tape tape = mlp_tape(mlp);
  std::mt19937_64 rng(1);
  const Tensor x = Tensor::vector(random_vector(8, rng));
  const Tensor first = forward(tape, x);
  Tape copy = tape;
  forward(tape, Tensor::vector(random_vector(8, rng)));
  CHECK(forward(tape, x) == first);
  CHECK(forward(copy, x) == first);
  CHECK(gradient(tape, x, 1) == gradient(copy, x, 1));
}

TEST_CASE("gradient: analytic cases") {
  Tape sq;
  const NodeId x = sq.input(Shape{1});
  sq.set_output(sq.mul(x, x));
  CHECK(gradient(sq, Tensor::scalar(3.0), 0)[0] == doctest::Approx(6.0));

  Eigen::VectorXd w(4);
  w << 1.5, -2.0, 0.0, 4.0;
  Tape lin = linear_tape(w);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor g = gradient(lin, Tensor::vector(random_vector(4, rng)), 0);
    CHECK((g.data() - w).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("gradient: class index out of range") {
  Tape t = bilinear_plus_linear();
  CHECK_THROWS_AS(gradient(t, vec({1, 1, 1}), 1), IndexError);
  CHECK_THROWS_AS(gradient(t, vec({1, 1, 1}), -1), IndexError);
}

TEST_CASE("gradient: random MLPs agree with central finite differences") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Mlp mlp = random_mlp({10, 8, 8, 4}, 100 + trial);
    Tape tape = mlp_tape(mlp);
    const Eigen::VectorXd x = random_vector(10, rng);
    const Index c = trial % 4;
    const Eigen::VectorXd g = gradient(tape, Tensor::vector(x), c).data();
    const Eigen::VectorXd fd = fd_gradient([&](const Eigen::VectorXd& p) { return mlp_straight_line(mlp, p)(c); }, x, 1e-5);
    CHECK(relative_error(g, fd) < 1e-5);
  }
}

// Every op kind checked against finite differences on a composite graph,
// 1000 random trials in total.
TEST_CASE("gradient: every op agrees with finite differences") {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random_tensor = [&](Shape s) {
    Tensor t(std::move(s));
    for (Index i = 0; i < t.size(); ++i) t[i] = normal(rng);
    return t;
  };

  using Builder = std::function<Tape()>;
  std::vector<std::pair<const char*, Builder>> builders = {
      {"add/sub/mul/scale",
       [&] {
         Tape t;
         const NodeId x = t.input(Shape{6});
         const NodeId c = t.constant(random_tensor({6}));
         const NodeId y = t.mul(t.add(x, c), t.sub(x, t.scale(c, 0.5)));
         t.set_output(t.sum(t.mul(y, x)));
         return t;
       }},
      {"conv2d/channel_bias/avg_pool",
       [&] {
         Tape t;
         const NodeId x = t.input(Shape{6, 6, 2});
         NodeId y = t.conv2d(t.constant(random_tensor({3, 2, 3, 3})), x, 1, 1);
         y = t.channel_bias(y, t.constant(random_tensor({3})));
         y = t.smooth_relu(y, SmoothingConfig{0.05});
         y = t.avg_pool(y, 2);
         y = t.conv2d(t.constant(random_tensor({2, 3, 2, 2})), y, 2, 0);
         y = t.reshape(y, Shape{shape_size(t.node(y).shape)});
         t.set_output(t.matvec(t.constant(random_tensor({3, 2})), y));
         return t;
       }},
      {"softmax/log_sum_exp/select",
       [&] {
         Tape t;
         const NodeId x = t.input(Shape{5});
         const NodeId z = t.matvec(t.constant(random_tensor({4, 5})), x);
         const NodeId s = t.softmax(z);
         const NodeId l = t.log_sum_exp(t.mul(z, s));
         t.set_output(t.add(t.select(s, 2), l));
         return t;
       }},
      {"matvec with input matrix",
       [&] {
         Tape t;
         const NodeId x = t.input(Shape{3, 4});
         const NodeId v = t.constant(random_tensor({4}));
         const NodeId y = t.matvec(x, t.smooth_relu(v, SmoothingConfig{0.5}));
         t.set_output(t.sum(t.smooth_relu(y, SmoothingConfig{0.5})));
         return t;
       }},
  };

  int trials = 0;
  while (trials < 1000) {
    for (auto& [name, build] : builders) {
      CAPTURE(name);
      Tape tape = build();
      const Tensor x = random_tensor(tape.input_shape());
      const Index c = 0;
      const Eigen::VectorXd g = gradient(tape, x, c).data();
      const Eigen::VectorXd fd = fd_gradient(
          [&](const Eigen::VectorXd& p) { return forward(tape, Tensor(x.shape(), p))[c]; }, x.data(), 1e-5);
      CHECK(relative_error(g, fd) < 1e-5);
      ++trials;
    }
  }
}

TEST_CASE("hvp: analytic cases") {
  Tape t;
  const NodeId x = t.input(Shape{2});
  t.set_output(t.mul(t.select(x, 0), t.select(x, 1)));
  const Tensor h = hvp(t, vec({0.3, -0.7}), 0, vec({1, 0}));
  CHECK(h[0] == 0.0);
  CHECK(h[1] == 1.0);

  Eigen::VectorXd w(3);
  w << 1, 2, 3;
  Tape lin = linear_tape(w);
  const Tensor z = hvp(lin, vec({1, 2, 3}), 0, vec({0.2, -1, 5}));
  CHECK(z.data().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("hvp: random MLPs agree with finite differences of gradients") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const Mlp mlp = random_mlp({8, 10, 6, 3}, 500 + trial);
    Tape tape = mlp_tape(mlp);
    const Eigen::VectorXd x = random_vector(8, rng);
    const Eigen::VectorXd v = random_vector(8, rng);
    const Index c = trial % 3;
    const Eigen::VectorXd hv = hvp(tape, Tensor::vector(x), c, Tensor::vector(v)).data();
    const double eps = 1e-4;
    const Eigen::VectorXd gp = gradient(tape, Tensor::vector(x + eps * v), c).data();
    const Eigen::VectorXd gm = gradient(tape, Tensor::vector(x - eps * v), c).data();
    CHECK(relative_error(hv, (gp - gm) / (2 * eps)) < 1e-4);
  }
}

TEST_CASE("hvp: every op kind agrees with finite differences of gradients") {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random_tensor = [&](Shape s) {
    Tensor t(std::move(s));
    for (Index i = 0; i < t.size(); ++i) t[i] = normal(rng);
    return t;
  };
  Tape t;
  const NodeId x = t.input(Shape{5, 5, 1});
  NodeId y = t.conv2d(t.constant(random_tensor({2, 1, 3, 3})), x, 1, 1);
  y = t.channel_bias(y, t.constant(random_tensor({2})));
  y = t.smooth_relu(y, SmoothingConfig{0.1});
  y = t.avg_pool(y, 2);
  y = t.reshape(y, Shape{8});
  const NodeId z = t.matvec(t.constant(random_tensor({4, 8})), y);
  const NodeId s = t.softmax(z);
  t.set_output(t.add(t.log_sum_exp(t.mul(z, z)), t.scale(t.sum(t.mul(s, t.sub(z, s))), 0.5)));

  for (int trial = 0; trial < 10; ++trial) {
    const Tensor p = random_tensor({5, 5, 1});
    const Tensor v = random_tensor({5, 5, 1});
    const Eigen::VectorXd hv = hvp(t, p, 0, v).data();
    const double eps = 1e-4;
    const Eigen::VectorXd gp = gradient(t, Tensor(p.shape(), p.data() + eps * v.data()), 0).data();
    const Eigen::VectorXd gm = gradient(t, Tensor(p.shape(), p.data() - eps * v.data()), 0).data();
    CHECK(relative_error(hv, (gp - gm) / (2 * eps)) < 1e-4);
  }
}

TEST_CASE("hvp: Hessian symmetry u.Hv == v.Hu") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const Mlp mlp = random_mlp({6, 8, 4}, 900 + trial);
    Tape tape = mlp_tape(mlp);
    const Tensor x = Tensor::vector(random_vector(6, rng));
    const Tensor u = Tensor::vector(random_vector(6, rng));
    const Tensor v = Tensor::vector(random_vector(6, rng));
    const double uhv = u.data().dot(hvp(tape, x, 1, v).data());
    const double vhu = v.data().dot(hvp(tape, x, 1, u).data());
    CHECK(std::abs(uhv - vhu) < 1e-8);
  }
}

TEST_CASE("hvp: hard ReLU has no second derivative") {
  Tape t;
  const NodeId x = t.input(Shape{3});
  t.set_output(t.sum(t.relu(x)));
  const Tensor p = vec({1, -1, 2});
  CHECK(gradient(t, p, 0)[0] == 1.0);
  CHECK_THROWS_AS(hvp(t, p, 0, p), UnsupportedOpError);
}

TEST_CASE("hessian_row: analytic cases and range check") {
  Tape t = bilinear_plus_linear();
  const Tensor row = hessian_row(t, vec({2, 3, 4}), 0, 0);
  CHECK(row == vec({0, 1, 0}));
  CHECK_THROWS_AS(hessian_row(t, vec({2, 3, 4}), 0, 3), IndexError);

  Eigen::VectorXd w(3);
  w << -1, 2, 0.5;
  Tape lin = linear_tape(w);
  for (Index i = 0; i < 3; ++i) CHECK(hessian_row(lin, vec({1, 1, 1}), 0, i).data().isZero(0.0));
}

TEST_CASE("hessian_row: matches brute-force finite-difference Hessian") {
  const Mlp mlp = random_mlp({7, 9, 3}, 31, 0.05);
  Tape tape = mlp_tape(mlp);
  std::mt19937_64 rng(31);
  const Eigen::VectorXd x = random_vector(7, rng);
  const double h = 1e-4;
  // Full Hessian by second-order central differences of the function value.
  auto f = [&](const Eigen::VectorXd& p) { return mlp_straight_line(mlp, p)(2); };
  Eigen::MatrixXd full(7, 7);
  for (Index i = 0; i < 7; ++i)
    for (Index j = 0; j < 7; ++j) {
      Eigen::VectorXd pp = x, pm = x, mp = x, mm = x;
      pp(i) += h, pp(j) += h;
      pm(i) += h, pm(j) -= h;
      mp(i) -= h, mp(j) += h;
      mm(i) -= h, mm(j) -= h;
      full(i, j) = (f(pp) - f(pm) - f(mp) + f(mm)) / (4 * h * h);
    }
  for (Index i = 0; i < 7; ++i) {
    const Eigen::VectorXd row = hessian_row(tape, Tensor::vector(x), 2, i).data();
    CHECK(relative_error(row, full.col(i)) < 1e-4);
  }
}

TEST_CASE("gradient: linearity of differentiation") {
  const Mlp f = random_mlp({5, 7, 1}, 61);
  const Mlp g = random_mlp({5, 7, 1}, 62);
  const double cf = 1.7, cg = -0.4;
  Tape tape;
  const NodeId x = tape.input(Shape{5});
  auto branch = [&](const Mlp& m) {
    NodeId h = x;
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      h = tape.add(tape.matvec(tape.constant(matrix_tensor(m.layers[l].weight)), h),
                   tape.constant(Tensor::vector(m.layers[l].bias)));
      if (l + 1 < m.layers.size()) h = tape.smooth_relu(h, m.smoothing);
    }
    return h;
  };
  tape.set_output(tape.add(tape.scale(branch(f), cf), tape.scale(branch(g), cg)));
  Tape tf = mlp_tape(f), tg = mlp_tape(g);
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor p = Tensor::vector(random_vector(5, rng));
    const Eigen::VectorXd combined = gradient(tape, p, 0).data();
    const Eigen::VectorXd separate = cf * gradient(tf, p, 0).data() + cg * gradient(tg, p, 0).data();
    CHECK((combined - separate).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("smooth_relu: values and bounds") {
  const SmoothingConfig cfg{1e-3};
  CHECK(smooth_relu(0.0, cfg) == doctest::Approx(std::sqrt(1e-3) / 2).epsilon(1e-12));
  CHECK(std::abs(smooth_relu(10.0, cfg) - 10.0) <= std::sqrt(1e-3) / 2);

  double prev = -1.0;
  double worst = 0.0;
  for (int k = 0; k <= 20000; ++k) {
    const double z = -10.0 + 20.0 * k / 20000.0;
    const double h = smooth_relu(z, cfg);
    worst = std::max(worst, std::abs(h - std::max(0.0, z)));
    CHECK(h >= prev);
    CHECK(smooth_relu_second_derivative(z, cfg) > 0.0);
    prev = h;
  }
  CHECK(worst <= std::sqrt(1e-3) / 2 + 1e-15);

  // derivatives against central differences at a few points
  for (double z : {-0.3, -0.01, 0.0, 0.02, 0.5}) {
    const double step = 1e-6;
    const double d1 = (smooth_relu(z + step, cfg) - smooth_relu(z - step, cfg)) / (2 * step);
    const double d2 = (smooth_relu_derivative(z + step, cfg) - smooth_relu_derivative(z - step, cfg)) / (2 * step);
    CHECK(smooth_relu_derivative(z, cfg) == doctest::Approx(d1).epsilon(1e-6));
    CHECK(smooth_relu_second_derivative(z, cfg) == doctest::Approx(d2).epsilon(1e-5));
  }
  CHECK_THROWS_AS(SmoothingConfig::checked(0.0), ConfigError);
  CHECK_THROWS_AS(SmoothingConfig::checked(-1.0), ConfigError);
}

TEST_CASE("determinism: identical tape and inputs give identical results") {
  const Mlp mlp = random_mlp({12, 10, 4}, 99);
  std::mt19937_64 rng(9);
  const Tensor x = Tensor::vector(random_vector(12, rng));
  const Tensor v = Tensor::vector(random_vector(12, rng));
  Tape a = mlp_tape(mlp), b = mlp_tape(mlp);
  CHECK(forward(a, x) == forward(b, x));
  CHECK(gradient(a, x, 3) == gradient(b, x, 3));
  CHECK(hvp(a, x, 3, v) == hvp(b, x, 3, v));
}
