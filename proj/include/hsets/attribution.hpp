#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <vector>

#include "hsets/autodiff.hpp"
#include "hsets/detection.hpp"
#include "hsets/tensor.hpp"

namespace hsets {

// Signed is a harness mutation: it drops the absolute value and breaks non-negativity.
enum class DirectionalMode { Absolute, Signed };
enum class Aggregation { Max, Sum };

const char* to_string(Aggregation a);  // "max", "sum"
Aggregation parse_aggregation(const std::string& s);

struct IDGConfig {
  Index m = 50;  // Riemann steps
  Index t = 50;  // Monte-Carlo subset samples
  std::uint64_t seed = 0;
  DirectionalMode mode = DirectionalMode::Absolute;

  void validate() const;
};

/// Unit vector along x - baseline restricted to the channels of `pixels`;
/// zero when the restriction vanishes.
Eigen::VectorXd direction_vector(const Tensor& x, const Tensor& baseline, std::span<const Index> pixels);

/// |grad f_c(point) . dir|.
double directional_gradient(Tape& tape, const Tensor& point, const Eigen::VectorXd& dir, Index c,
                            DirectionalMode mode = DirectionalMode::Absolute);

/// Logit-c gradients at baseline + (k/m)(x - baseline), k = 0..m. The path does
/// not depend on the subset, so one instance serves IG and every IDG-Vis term.
class PathGradients {
 public:
  PathGradients(Tape& tape, const Tensor& x, const Tensor& baseline, Index c, Index m);

  Index steps() const { return m_; }
  Index channels() const { return channels_; }
  Index pixels() const { return diff_.size() / channels_; }

  double idg_vis(std::span<const Index> pixels, DirectionalMode mode = DirectionalMode::Absolute) const;
  /// Right Riemann sum over k = 1..m, channels summed per pixel.
  SaliencyMap integrated_gradients() const;

 private:
  friend class SetTerms;
  Index m_;
  Index channels_;
  Eigen::MatrixXd grads_;  // (m + 1) x d
  Eigen::VectorXd diff_;   // x - baseline
};

/// Per-set cache: each subset of the set costs O(m |T|).
class SetTerms {
 public:
  SetTerms(const PathGradients& path, std::span<const Index> set);

  std::size_t size() const { return static_cast<std::size_t>(proj_.cols()); }
  /// IDG-Vis of the subset whose members have member[j] != 0.
  double idg_vis(const std::vector<char>& member, DirectionalMode mode) const;

 private:
  Eigen::MatrixXd proj_;  // (m + 1) x |set|: sum over channels of grad * diff
  Eigen::VectorXd norm2_;
};

double idg_vis(Tape& tape, const Tensor& x, const Tensor& baseline, std::span<const Index> pixels, Index c, Index m,
               DirectionalMode mode = DirectionalMode::Absolute);

/// Unbiased Monte-Carlo estimate of the sum of IDG-Vis over all nonempty
/// subsets: t uniform draws scaled by (2^|set| - 1) / t.
double attribute_set(const PathGradients& path, std::span<const Index> set, const IDGConfig& config,
                     std::mt19937_64& rng);
double attribute_set(Tape& tape, const Tensor& x, const Tensor& baseline, std::span<const Index> set, Index c,
                     const IDGConfig& config);

constexpr std::size_t kMaxExactSetSize = 20;
double attribute_set_exact(const PathGradients& path, std::span<const Index> set,
                           DirectionalMode mode = DirectionalMode::Absolute);
double attribute_set_exact(Tape& tape, const Tensor& x, const Tensor& baseline, std::span<const Index> set, Index c,
                           Index m, DirectionalMode mode = DirectionalMode::Absolute);

SaliencyMap aggregate_saliency(const SetCollection& sets, const std::vector<double>& scores, Index pixels,
                               Aggregation mode = Aggregation::Max);

SaliencyMap integrated_gradients(Tape& tape, const Tensor& x, const Tensor& baseline, Index c, Index m);

struct AttributionResult {
  std::vector<double> scores;
  SaliencyMap saliency;
  IDGConfig config;
};

/// Scores every set of `sets` with per-set RNG streams derived from config.seed.
AttributionResult attribute_sets(const PathGradients& path, const SetCollection& sets, const IDGConfig& config,
                                 Aggregation mode = Aggregation::Max);

void write_attribution(std::ostream& os, const AttributionResult& r);
AttributionResult read_attribution(std::istream& is);

}  // namespace hsets
