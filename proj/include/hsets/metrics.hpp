#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hsets/autodiff.hpp"
#include "hsets/dataset.hpp"
#include "hsets/tensor.hpp"

namespace hsets {

/// Gini index of |phi| in [0, 1]; 0 for a uniform map, 1 - 1/d for one-hot.
double gini(const SaliencyMap& phi);

enum class Neighbourhood { Four, Eight };

struct ImputeConfig {
  double sigma = 0.01;
  Neighbourhood neighbourhood = Neighbourhood::Four;  // Eight: 1/6 direct, 1/12 diagonal
  double tolerance = 1e-6;
};

/// Replaces `removed` pixels (all channels) by the solution of
/// "value = weighted mean of neighbours" with the kept pixels as boundary,
/// via Gauss-Seidel sweeps, then adds N(0, sigma^2) noise.
Tensor noisy_linear_impute(const Tensor& image, std::span<const Index> removed, const ImputeConfig& config,
                           std::mt19937_64& rng);

/// Most-relevant-first pixel order: descending score, ties by ascending index.
std::vector<Index> morf_order(const SaliencyMap& map);

struct RoadConfig {
  Index steps = 15;      // L
  Index k_per_step = 5;
  ImputeConfig impute;
  std::uint64_t seed = 0;

  void validate(Index pixels) const;
};

/// Cumulative removal counts 0, k, 2k, ..., L k.
std::vector<Index> removal_schedule(const RoadConfig& config);
/// Counts round(f * pixels) for removal fractions f in [0, 1].
std::vector<Index> fraction_schedule(std::span<const double> fractions, Index pixels);

struct RoadCurve {
  std::vector<Index> removed;     // pixels removed at each step, increasing
  std::vector<double> accuracy;   // accuracy[0] is the unperturbed accuracy
  double aopc = 0.0;              // mean drop over steps 1.., divided by (steps + 1)
};

/// Accuracy under cumulative MoRF removal with imputation. Removing every
/// pixel leaves the harmonic system without boundary; its free constant is
/// then fixed at the mean intensity over the whole dataset.
RoadCurve road_curve(Tape& tape, const Dataset& data, const std::vector<SaliencyMap>& maps,
                     const std::vector<Index>& removed_counts, const ImputeConfig& impute, std::uint64_t seed);

/// Mean logit drop of the originally predicted class over L removal steps,
/// divided by L + 1.
double road_aopc(Tape& tape, const Tensor& x, const SaliencyMap& map, const RoadConfig& config, std::mt19937_64& rng);

struct FaithfulnessConfig {
  double subset_fraction = 0.1;
  Index runs = 100;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Pearson correlation over random pixel subsets between the mean attribution
/// and the logit drop when the subset is set to the baseline.
double faithfulness_correlation(Tape& tape, const Tensor& x, const Tensor& baseline, const SaliencyMap& map,
                                const FaithfulnessConfig& config);

double pearson(std::span<const double> a, std::span<const double> b);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::size_t count = 0;
};
Summary summarize(std::span<const double> values);

struct MetricRow {
  std::string method;
  std::string model;
  std::string metric;
  Summary summary;
};

void write_metric_csv(std::ostream& os, const std::vector<MetricRow>& rows);
void write_curve_csv(std::ostream& os, const RoadCurve& curve);

}  // namespace hsets
