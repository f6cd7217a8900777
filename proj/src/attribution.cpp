#include "hsets/attribution.hpp"

#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>

#include "hsets/errors.hpp"
#include "hsets/seed.hpp"

namespace hsets {

const char* to_string(Aggregation a) { return a == Aggregation::Max ? "max" : "sum"; }

Aggregation parse_aggregation(const std::string& s) {
  if (s == "max") return Aggregation::Max;
  if (s == "sum") return Aggregation::Sum;
  throw ConfigError("unknown aggregation '" + s + "' (max, sum)");
}

void IDGConfig::validate() const {
  if (m < 1) throw ConfigError("idg steps m must be >= 1");
  if (t < 1) throw ConfigError("idg samples t must be >= 1");
}

namespace {

void check_pair(const Tensor& x, const Tensor& baseline) {
  if (x.shape() != baseline.shape())
    throw ShapeError("baseline shape " + shape_string(baseline.shape()) + " differs from input " +
                     shape_string(x.shape()));
}

void check_pixels(std::span<const Index> pixels, Index count) {
  for (Index p : pixels)
    if (p < 0 || p >= count)
      throw IndexError("pixel " + std::to_string(p) + " out of range for " + std::to_string(count) + " pixels");
}

double directional(double dot, DirectionalMode mode) { return mode == DirectionalMode::Absolute ? std::abs(dot) : dot; }

}  // namespace

Eigen::VectorXd direction_vector(const Tensor& x, const Tensor& baseline, std::span<const Index> pixels) {
  check_pair(x, baseline);
  const Index C = pixel_channels(x.shape());
  check_pixels(pixels, x.size() / C);
  Eigen::VectorXd a = Eigen::VectorXd::Zero(x.size());
  for (Index p : pixels)
    for (Index ch = 0; ch < C; ++ch) a(p * C + ch) = x[p * C + ch] - baseline[p * C + ch];
  const double norm = a.norm();
  if (norm == 0.0) return a;
  return a / norm;
}

double directional_gradient(Tape& tape, const Tensor& point, const Eigen::VectorXd& dir, Index c,
                            DirectionalMode mode) {
  if (dir.size() != point.size()) throw ShapeError("direction length does not match the input");
  if (dir.isZero(0.0)) return 0.0;
  return directional(gradient(tape, point, c).data().dot(dir), mode);
}

PathGradients::PathGradients(Tape& tape, const Tensor& x, const Tensor& baseline, Index c, Index m)
    : m_(m), channels_(pixel_channels(x.shape())) {
  check_pair(x, baseline);
  if (m < 1) throw ConfigError("path steps m must be >= 1");
  diff_ = x.data() - baseline.data();
  grads_.resize(m + 1, x.size());
  Tensor point(x.shape());
  for (Index k = 0; k <= m; ++k) {
    const double alpha = static_cast<double>(k) / static_cast<double>(m);
    point.data() = baseline.data() + alpha * diff_;
    grads_.row(k) = gradient(tape, point, c).data().transpose();
  }
}

double PathGradients::idg_vis(std::span<const Index> pixels, DirectionalMode mode) const {
  if (pixels.empty()) return 0.0;
  const SetTerms terms(*this, pixels);
  return terms.idg_vis(std::vector<char>(pixels.size(), 1), mode);
}

SaliencyMap PathGradients::integrated_gradients() const {
  const Eigen::VectorXd mean = grads_.bottomRows(m_).colwise().sum().transpose() / static_cast<double>(m_);
  const Eigen::VectorXd ig = mean.cwiseProduct(diff_);
  SaliencyMap out = SaliencyMap::Zero(pixels());
  for (Index p = 0; p < out.size(); ++p) out(p) = ig.segment(p * channels_, channels_).sum();
  return out;
}

SetTerms::SetTerms(const PathGradients& path, std::span<const Index> set) {
  const Index C = path.channels_;
  check_pixels(set, path.pixels());
  const auto n = static_cast<Index>(set.size());
  proj_.resize(path.m_ + 1, n);
  norm2_.resize(n);
  for (Index j = 0; j < n; ++j) {
    const Index base = set[static_cast<std::size_t>(j)] * C;
    const auto d = path.diff_.segment(base, C);
    proj_.col(j) = path.grads_.middleCols(base, C) * d;
    norm2_(j) = d.squaredNorm();
  }
}

double SetTerms::idg_vis(const std::vector<char>& member, DirectionalMode mode) const {
  double norm2 = 0.0;
  for (Index j = 0; j < norm2_.size(); ++j)
    if (member[static_cast<std::size_t>(j)]) norm2 += norm2_(j);
  if (norm2 == 0.0) return 0.0;
  const double inv = 1.0 / std::sqrt(norm2);
  double acc = 0.0;
  for (Index k = 0; k < proj_.rows(); ++k) {
    double dot = 0.0;
    for (Index j = 0; j < proj_.cols(); ++j)
      if (member[static_cast<std::size_t>(j)]) dot += proj_(k, j);
    acc += directional(dot * inv, mode);
  }
  return acc / static_cast<double>(proj_.rows());
}

double idg_vis(Tape& tape, const Tensor& x, const Tensor& baseline, std::span<const Index> pixels, Index c, Index m,
               DirectionalMode mode) {
  if (pixels.empty()) return 0.0;
  const Eigen::VectorXd dir = direction_vector(x, baseline, pixels);
  if (m < 1) throw ConfigError("path steps m must be >= 1");
  double acc = 0.0;
  Tensor point(x.shape());
  for (Index k = 0; k <= m; ++k) {
    point.data() = baseline.data() + (static_cast<double>(k) / static_cast<double>(m)) * (x.data() - baseline.data());
    acc += directional_gradient(tape, point, dir, c, mode);
  }
  return acc / static_cast<double>(m + 1);
}

double attribute_set(const PathGradients& path, std::span<const Index> set, const IDGConfig& config,
                     std::mt19937_64& rng) {
  config.validate();
  if (set.empty()) throw ConfigError("attribute_set needs a nonempty set");
  if (set.size() == 1) return path.idg_vis(set, config.mode);
  const SetTerms terms(path, set);
  const std::size_t n = set.size();
  const double scale = (std::ldexp(1.0, static_cast<int>(std::min<std::size_t>(n, 4096))) - 1.0) /
                       static_cast<double>(config.t);
  if (!std::isfinite(scale))
    throw UndefinedError("set of " + std::to_string(n) + " pixels: subset count 2^n overflows double precision");

  std::vector<char> member(n);
  std::uniform_int_distribution<std::uint64_t> small(1, n < 64 ? (std::uint64_t{1} << n) - 1 : 1);
  double acc = 0.0;
  for (Index s = 0; s < config.t; ++s) {
    if (n < 64) {
      const std::uint64_t bits = small(rng);
      for (std::size_t j = 0; j < n; ++j) member[j] = static_cast<char>((bits >> j) & 1U);
    } else {
      bool any = false;
      while (!any) {
        for (std::size_t j = 0; j < n; j += 64) {
          const std::uint64_t bits = rng();
          for (std::size_t b = 0; b < 64 && j + b < n; ++b) {
            member[j + b] = static_cast<char>((bits >> b) & 1U);
            any = any || member[j + b];
          }
        }
      }
    }
    acc += terms.idg_vis(member, config.mode);
  }
  return scale * acc;
}

double attribute_set(Tape& tape, const Tensor& x, const Tensor& baseline, std::span<const Index> set, Index c,
                     const IDGConfig& config) {
  config.validate();
  const PathGradients path(tape, x, baseline, c, config.m);
  std::mt19937_64 rng(config.seed);
  return attribute_set(path, set, config, rng);
}

double attribute_set_exact(const PathGradients& path, std::span<const Index> set, DirectionalMode mode) {
  if (set.size() > kMaxExactSetSize)
    throw ConfigError("exact enumeration supports at most " + std::to_string(kMaxExactSetSize) + " pixels, got " +
                      std::to_string(set.size()));
  const SetTerms terms(path, set);
  const std::size_t n = set.size();
  std::vector<char> member(n);
  double acc = 0.0;
  for (std::uint64_t bits = 1; bits < (std::uint64_t{1} << n); ++bits) {
    for (std::size_t j = 0; j < n; ++j) member[j] = static_cast<char>((bits >> j) & 1U);
    acc += terms.idg_vis(member, mode);
  }
  return acc;
}

double attribute_set_exact(Tape& tape, const Tensor& x, const Tensor& baseline, std::span<const Index> set, Index c,
                           Index m, DirectionalMode mode) {
  if (set.size() > kMaxExactSetSize)
    throw ConfigError("exact enumeration supports at most " + std::to_string(kMaxExactSetSize) + " pixels");
  const PathGradients path(tape, x, baseline, c, m);
  return attribute_set_exact(path, set, mode);
}

SaliencyMap aggregate_saliency(const SetCollection& sets, const std::vector<double>& scores, Index pixels,
                               Aggregation mode) {
  if (scores.size() != sets.sets.size())
    throw ShapeError(std::to_string(scores.size()) + " scores for " + std::to_string(sets.sets.size()) + " sets");
  SaliencyMap out = SaliencyMap::Zero(pixels);
  for (std::size_t s = 0; s < scores.size(); ++s) {
    check_pixels(sets.sets[s].pixels, pixels);
    for (Index p : sets.sets[s].pixels)
      out(p) = mode == Aggregation::Max ? std::max(out(p), scores[s]) : out(p) + scores[s];
  }
  return out;
}

SaliencyMap integrated_gradients(Tape& tape, const Tensor& x, const Tensor& baseline, Index c, Index m) {
  return PathGradients(tape, x, baseline, c, m).integrated_gradients();
}

AttributionResult attribute_sets(const PathGradients& path, const SetCollection& sets, const IDGConfig& config,
                                 Aggregation mode) {
  config.validate();
  AttributionResult r;
  r.config = config;
  for (std::size_t s = 0; s < sets.sets.size(); ++s) {
    std::mt19937_64 rng(derive_seed(config.seed, s));
    r.scores.push_back(attribute_set(path, sets.sets[s].pixels, config, rng));
  }
  r.saliency = aggregate_saliency(sets, r.scores, path.pixels(), mode);
  return r;
}

void write_attribution(std::ostream& os, const AttributionResult& r) {
  os << std::setprecision(17);
  os << "idg m " << r.config.m << " t " << r.config.t << " seed " << r.config.seed << '\n';
  os << "scores " << r.scores.size() << '\n';
  for (std::size_t s = 0; s < r.scores.size(); ++s) os << "set " << s << " score " << r.scores[s] << '\n';
  os << "saliency " << r.saliency.size() << '\n';
  for (Index p = 0; p < r.saliency.size(); ++p) os << r.saliency(p) << (p + 1 < r.saliency.size() ? ' ' : '\n');
}

AttributionResult read_attribution(std::istream& is) {
  while (is >> std::ws && is.peek() == '#') is.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
  auto expect = [&](const char* word) {
    std::string w;
    if (!(is >> w) || w != word)
      throw FormatError(std::string("attribution file: expected '") + word + "', found '" + w + "'");
  };
  AttributionResult r;
  std::size_t n = 0;
  expect("idg");
  expect("m");
  is >> r.config.m;
  expect("t");
  is >> r.config.t;
  expect("seed");
  is >> r.config.seed;
  expect("scores");
  is >> n;
  if (!is) throw FormatError("attribution file: malformed header");
  r.scores.resize(n);
  for (std::size_t s = 0; s < n; ++s) {
    std::size_t idx = 0;
    expect("set");
    is >> idx;
    expect("score");
    is >> r.scores[s];
    if (!is || idx != s) throw FormatError("attribution file: malformed score line " + std::to_string(s));
  }
  Index pixels = 0;
  expect("saliency");
  is >> pixels;
  if (!is || pixels < 0) throw FormatError("attribution file: malformed saliency header");
  r.saliency.resize(pixels);
  for (Index p = 0; p < pixels; ++p)
    if (!(is >> r.saliency(p))) throw FormatError("attribution file: truncated saliency values");
  return r;
}

}  // namespace hsets
