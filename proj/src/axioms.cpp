#include "hsets/axioms.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <random>

#include "hsets/detection.hpp"
#include "hsets/errors.hpp"
#include "hsets/model.hpp"
#include "hsets/seed.hpp"
#include "hsets/segmentation.hpp"

namespace hsets {

void AxiomConfig::validate() const {
  if (instances < 1 || constructed < 1) throw ConfigError("axiom suite needs at least one instance per axiom");
  if (max_features < 4) throw ConfigError("axiom suite needs max_features >= 4");
  if (max_set < 2 || static_cast<std::size_t>(max_set) > kMaxExactSetSize)
    throw ConfigError("axiom max_set must lie in [2, " + std::to_string(kMaxExactSetSize) + "]");
  if (m < 1) throw ConfigError("axiom path steps must be >= 1");
  if (!(tau > 0.0)) throw ConfigError("axiom tau must be positive");
}

bool AxiomReport::all_passed() const {
  return !results.empty() && std::all_of(results.begin(), results.end(), [](const AxiomResult& r) { return r.passed(); });
}

namespace {

struct Dense {
  Eigen::MatrixXd weight;
  Eigen::VectorXd bias;
};

Tensor matrix_tensor(const Eigen::MatrixXd& m) {
  Eigen::VectorXd flat(m.size());
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) flat(r * m.cols() + c) = m(r, c);
  return Tensor(Shape{m.rows(), m.cols()}, flat);
}

NodeId apply(Tape& tape, NodeId h, const Dense& layer) {
  return tape.add(tape.matvec(tape.constant(matrix_tensor(layer.weight)), h),
                  tape.constant(Tensor::vector(layer.bias)));
}

// lo >= 0 gives a network that is non-decreasing in every input.
Dense random_dense(Index in, Index out, std::mt19937_64& rng, double lo = -1.0) {
  std::uniform_real_distribution<double> u(lo, 1.0);
  const double scale = std::sqrt(3.0 / static_cast<double>(in));
  Dense d;
  d.weight = Eigen::MatrixXd::NullaryExpr(out, in, [&] { return scale * u(rng); });
  d.bias = Eigen::VectorXd::NullaryExpr(out, [&] { return 0.2 * u(rng); });
  return d;
}

using Mlp = std::vector<Dense>;

Mlp random_mlp(Index d, Index classes, std::mt19937_64& rng, double lo = -1.0) {
  std::uniform_int_distribution<Index> width(3, 10);
  const Index h = width(rng);
  return {random_dense(d, h, rng, lo), random_dense(h, classes, rng, lo)};
}

NodeId mlp_logits(Tape& tape, NodeId flat, const Mlp& mlp, SmoothingConfig s) {
  NodeId h = flat;
  for (std::size_t l = 0; l < mlp.size(); ++l) {
    h = apply(tape, h, mlp[l]);
    if (l + 1 < mlp.size()) h = tape.smooth_relu(h, s);
  }
  return h;
}

Tape mlp_tape(Index d, const Mlp& mlp, SmoothingConfig s) {
  Tape tape;
  const NodeId x = tape.input(Shape{1, d, 1});
  tape.set_output(mlp_logits(tape, tape.reshape(x, Shape{d}), mlp, s));
  return tape;
}

Tensor uniform_input(Index d, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return Tensor(Shape{1, d, 1}, Eigen::VectorXd::NullaryExpr(d, [&] { return u(rng); }));
}

std::vector<Index> random_subset(Index d, Index size, std::mt19937_64& rng) {
  std::vector<Index> all(static_cast<std::size_t>(d));
  for (Index i = 0; i < d; ++i) all[static_cast<std::size_t>(i)] = i;
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(static_cast<std::size_t>(size));
  std::sort(all.begin(), all.end());
  return all;
}

std::vector<Index> pick(const std::vector<Index>& set, std::uint64_t bits) {
  std::vector<Index> out;
  for (std::size_t j = 0; j < set.size(); ++j)
    if ((bits >> j) & 1U) out.push_back(set[j]);
  return out;
}

void record(AxiomResult& r, bool ok, double magnitude) {
  ++r.checks;
  if (!ok) ++r.violations;
  r.worst = std::max(r.worst, magnitude);
}

void record_equal(AxiomResult& r, double a, double b, double tol) {
  const double dev = std::abs(a - b);
  record(r, dev <= tol, dev);
}

}  // namespace

AxiomReport run_axiom_suite(const AxiomConfig& config) {
  config.validate();
  const SmoothingConfig smooth{config.tau};
  std::vector<AxiomResult> res(9);
  const char* names[] = {"non-negativity", "normality", "monotonicity", "superadditivity", "approximate completeness",
                         "sensitivity", "implementation invariance", "linearity", "symmetry"};
  for (int i = 0; i < 9; ++i) {
    res[static_cast<std::size_t>(i)].axiom = i + 1;
    res[static_cast<std::size_t>(i)].name = names[i];
  }
  auto& a1 = res[0];
  auto& a2 = res[1];
  auto& a3 = res[2];
  auto& a4 = res[3];
  auto& a5 = res[4];
  auto& a6 = res[5];
  auto& a7 = res[6];
  auto& a8 = res[7];
  auto& a9 = res[8];
  const DirectionalMode mode = config.mode;

  // Axioms 1-5 on random networks and inputs, zero baseline.
  for (Index inst = 0; inst < config.instances; ++inst) {
    std::mt19937_64 rng(derive_seed(config.seed, static_cast<std::uint64_t>(inst)));
    const Index d = std::uniform_int_distribution<Index>(4, config.max_features)(rng);
    const Index classes = std::uniform_int_distribution<Index>(2, 4)(rng);
    Tape tape = mlp_tape(d, random_mlp(d, classes, rng), smooth);
    const Tensor x = uniform_input(d, rng);
    const Tensor baseline(x.shape());
    const Tensor logits = forward(tape, x);
    const Index c = argmax(logits);
    const PathGradients path(tape, x, baseline, c, config.m);

    const Index n = std::uniform_int_distribution<Index>(2, std::min(config.max_set, d))(rng);
    const std::vector<Index> set = random_subset(d, n, rng);
    const std::uint64_t full = (std::uint64_t{1} << n) - 1;
    std::vector<double> a(full + 1, 0.0);
    for (std::uint64_t s = 1; s <= full; ++s) {
      a[s] = attribute_set_exact(path, pick(set, s), mode);
      record(a1, a[s] >= 0.0, std::max(0.0, -a[s]));
    }
    IDGConfig mc;
    mc.m = config.m;
    mc.mode = mode;
    std::mt19937_64 mc_rng(derive_seed(config.seed ^ 0xa5a5a5a5ULL, static_cast<std::uint64_t>(inst)));
    const double estimate = attribute_set(path, set, mc, mc_rng);
    record(a1, estimate >= 0.0, std::max(0.0, -estimate));

    const double empty_path = path.idg_vis({}, mode);
    const double empty_direct = idg_vis(tape, x, baseline, {}, c, config.m, mode);
    record(a2, empty_path == 0.0, std::abs(empty_path));
    record(a2, empty_direct == 0.0, std::abs(empty_direct));

    for (std::uint64_t t = 1; t <= full; ++t)
      for (std::uint64_t r = t; r != 0; r = (r - 1) & t) {
        if (r == t) continue;
        record(a3, a[r] <= a[t], std::max(0.0, a[r] - a[t]));
        const std::uint64_t rest = t & ~r;
        if (r < rest) record(a4, a[t] >= a[r] + a[rest], std::max(0.0, a[r] + a[rest] - a[t]));
      }

    const double gap = logits[c] - forward(tape, baseline)[c];
    if (gap > 0.0) {
      DetectionConfig det;
      det.mu = 0.3;
      det.nu = config.max_set;
      det.k = 3;
      const SetCollection sets =
          generate_sets(tape, x, c, grid_segment(1, d, 3), path.integrated_gradients(), det);
      double total = 0.0;
      for (const InteractionSet& s : sets.sets) total += attribute_set_exact(path, s.pixels, mode);
      record(a5, total <= gap + config.completeness_eps, std::max(0.0, total - gap));
    }
  }

  // Axioms 6-9 on constructed cases.
  for (Index cs = 0; cs < config.constructed; ++cs) {
    std::mt19937_64 rng(derive_seed(config.seed ^ 0x5eed5eedULL, static_cast<std::uint64_t>(cs)));
    const Index d = std::uniform_int_distribution<Index>(4, config.max_features)(rng);
    const Index classes = std::uniform_int_distribution<Index>(2, 4)(rng);
    const Index c = std::uniform_int_distribution<Index>(0, classes - 1)(rng);
    const Index n = std::uniform_int_distribution<Index>(1, std::min(config.max_set, d))(rng);

    // 6: x and baseline differ only on the set.
    {
      Tape tape = mlp_tape(d, random_mlp(d, classes, rng), smooth);
      const Tensor baseline = uniform_input(d, rng);
      Tensor x = baseline;
      const std::vector<Index> set = random_subset(d, n, rng);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (Index p : set) x[p] = u(rng);
      if (forward(tape, x)[c] != forward(tape, baseline)[c]) {
        const double a = attribute_set_exact(tape, x, baseline, set, c, config.m, mode);
        record(a6, a > 0.0, a > 0.0 ? 0.0 : std::abs(a));
      }
    }

    // 7: W1 -> s W1, W2 -> W2 / s around an identity middle layer.
    {
      std::uniform_int_distribution<Index> width(3, 10);
      const Index h0 = width(rng), h1 = width(rng);
      const Dense l0 = random_dense(d, h0, rng), l1 = random_dense(h0, h1, rng), l2 = random_dense(h1, classes, rng);
      const double s = std::exp(std::uniform_real_distribution<double>(std::log(0.1), std::log(10.0))(rng));
      auto build = [&](double scale) {
        Tape tape;
        const NodeId flat = tape.reshape(tape.input(Shape{1, d, 1}), Shape{d});
        const NodeId h = tape.smooth_relu(apply(tape, flat, l0), smooth);
        const NodeId z = apply(tape, h, Dense{scale * l1.weight, scale * l1.bias});
        tape.set_output(apply(tape, z, Dense{l2.weight / scale, l2.bias}));
        return tape;
      };
      Tape f = build(1.0), g = build(s);
      const Tensor x = uniform_input(d, rng);
      const Tensor baseline(x.shape());
      const std::vector<Index> set = random_subset(d, n, rng);
      record_equal(a7, attribute_set_exact(f, x, baseline, set, c, config.m, mode),
                   attribute_set_exact(g, x, baseline, set, c, config.m, mode), config.equality_tol);
    }

    // 8: c f' + d f'' with two non-decreasing branches and x >= baseline, so the
    // directional derivatives of both branches share a sign along the path.
    {
      const Mlp f1 = random_mlp(d, classes, rng, 0.0), f2 = random_mlp(d, classes, rng, 0.0);
      std::uniform_real_distribution<double> coef(0.1, 3.0);
      const double wc = coef(rng), wd = coef(rng);
      Tape t1 = mlp_tape(d, f1, smooth), t2 = mlp_tape(d, f2, smooth);
      Tape mix;
      const NodeId flat = mix.reshape(mix.input(Shape{1, d, 1}), Shape{d});
      mix.set_output(mix.add(mix.scale(mlp_logits(mix, flat, f1, smooth), wc),
                             mix.scale(mlp_logits(mix, flat, f2, smooth), wd)));
      const Tensor x = uniform_input(d, rng);
      const Tensor baseline(x.shape());
      const std::vector<Index> set = random_subset(d, n, rng);
      const double lhs = attribute_set_exact(mix, x, baseline, set, c, config.m, mode);
      const double rhs = wc * attribute_set_exact(t1, x, baseline, set, c, config.m, mode) +
                         wd * attribute_set_exact(t2, x, baseline, set, c, config.m, mode);
      record_equal(a8, lhs, rhs, config.equality_tol);
    }

    // 9: f(x) = g(x) + g(Px), P swapping blocks B1 and B2, input symmetric under P.
    {
      const Index b = std::uniform_int_distribution<Index>(1, std::min(config.max_set, d / 2))(rng);
      Eigen::MatrixXd perm = Eigen::MatrixXd::Identity(d, d);
      for (Index i = 0; i < b; ++i) {
        perm(i, i) = perm(b + i, b + i) = 0.0;
        perm(i, b + i) = perm(b + i, i) = 1.0;
      }
      const Mlp g = random_mlp(d, classes, rng);
      Tape tape;
      const NodeId flat = tape.reshape(tape.input(Shape{1, d, 1}), Shape{d});
      const NodeId swapped = tape.matvec(tape.constant(matrix_tensor(perm)), flat);
      tape.set_output(tape.add(mlp_logits(tape, flat, g, smooth), mlp_logits(tape, swapped, g, smooth)));
      Tensor x = uniform_input(d, rng);
      for (Index i = 0; i < b; ++i) x[b + i] = x[i];
      const Tensor baseline(x.shape());
      std::vector<Index> b1, b2;
      for (Index i = 0; i < b; ++i) {
        b1.push_back(i);
        b2.push_back(b + i);
      }
      const PathGradients path(tape, x, baseline, c, config.m);
      record_equal(a9, attribute_set_exact(path, b1, mode), attribute_set_exact(path, b2, mode), config.equality_tol);
    }
  }
  return AxiomReport{std::move(res)};
}

void write_axiom_report(std::ostream& os, const AxiomReport& report) {
  for (const AxiomResult& r : report.results) {
    os << "axiom " << r.axiom << ' ' << r.name << ": " << (r.passed() ? "PASS" : "FAIL") << " checks " << r.checks
       << " violations " << r.violations << " worst " << std::setprecision(6) << r.worst << '\n';
  }
  os << (report.all_passed() ? "all axioms hold" : "axiom violations found") << '\n';
}

}  // namespace hsets
