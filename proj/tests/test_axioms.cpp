#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "hsets/axioms.hpp"
#include "support.hpp"

using namespace hsets;

namespace {

AxiomConfig small_suite() {
  AxiomConfig c;
  c.instances = 60;
  c.constructed = 20;
  c.m = 20;
  return c;
}

}  // namespace

TEST_CASE("axioms 1-4 and 6-9 hold on random networks") {
  for (double tau : {1e-3, 1e-9}) {
    AxiomConfig c = small_suite();
    c.tau = tau;
    const AxiomReport r = run_axiom_suite(c);
    REQUIRE(r.results.size() == 9);
    for (const AxiomResult& a : r.results) {
      INFO("axiom " << a.axiom << " tau " << tau);
      CHECK(a.checks > 0);
      if (a.axiom != 5) CHECK(a.passed());
    }
  }
}

TEST_CASE("signed directional gradients break non-negativity") {
  AxiomConfig c = small_suite();
  c.mode = DirectionalMode::Signed;
  const AxiomReport r = run_axiom_suite(c);
  CHECK_FALSE(r.results[0].passed());
  CHECK(r.results[0].worst > 0.0);
  CHECK_FALSE(r.all_passed());
}

TEST_CASE("the completeness bound depends on the input scale") {
  // f = w . x with x' = 0: a({i}) = |w_i| whatever x_i is, while the logit gap
  // shrinks with x, so sum a <= f(x) - f(x') fails for small inputs.
  Eigen::MatrixXd w(1, 4);
  w << 1.0, 2.0, 0.5, 1.5;
  Tape t;
  const NodeId x = t.input(Shape{1, 4, 1});
  t.set_output(t.matvec(t.constant(testing::matrix_tensor(w)), t.reshape(x, Shape{4})));
  for (double s : {0.01, 0.1, 1.0, 10.0}) {
    const Tensor in(Shape{1, 4, 1}, Eigen::Vector4d::Constant(s));
    const Tensor zero(in.shape());
    double total = 0.0;
    for (Index i = 0; i < 4; ++i) {
      const std::vector<Index> single{i};
      total += attribute_set_exact(t, in, zero, single, 0, 10);
    }
    const double gap = forward(t, in)[0];
    CHECK(total == doctest::Approx(5.0));
    CHECK(gap == doctest::Approx(5.0 * s));
    CHECK((total <= gap + 1e-6) == (s >= 1.0));
  }
}

TEST_CASE("suite configuration and report") {
  AxiomConfig c = small_suite();
  c.max_set = 1;
  CHECK_THROWS_AS(run_axiom_suite(c), ConfigError);
  c = small_suite();
  c.instances = 5;
  c.constructed = 3;
  const AxiomReport a = run_axiom_suite(c), b = run_axiom_suite(c);
  std::ostringstream sa, sb;
  write_axiom_report(sa, a);
  write_axiom_report(sb, b);
  CHECK(sa.str() == sb.str());
  CHECK(sa.str().find("axiom 9 symmetry") != std::string::npos);
}
