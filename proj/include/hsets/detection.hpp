#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hsets/autodiff.hpp"
#include "hsets/segmentation.hpp"
#include "hsets/tensor.hpp"

namespace hsets {

enum class SeedStrategy { TopIG, Random };
enum class HessianMode { Signed, Absolute };
enum class RowNormalization { None, MaxAbs };

const char* to_string(SeedStrategy s);    // "top-ig", "random"
const char* to_string(HessianMode m);     // "signed", "absolute"
const char* to_string(RowNormalization n);  // "none", "max-abs"
SeedStrategy parse_seed_strategy(const std::string& s);
HessianMode parse_hessian_mode(const std::string& s);
RowNormalization parse_row_normalization(const std::string& s);

struct DetectionConfig {
  double mu = 0.5;
  Index nu = 50;
  Index k = 5;
  SeedStrategy seed_strategy = SeedStrategy::TopIG;
  std::uint64_t seed = 0;  // used by SeedStrategy::Random
  HessianMode hessian_mode = HessianMode::Absolute;
  RowNormalization row_normalization = RowNormalization::MaxAbs;

  void validate() const;
};

struct InteractionSet {
  std::vector<Index> pixels;  // insertion order, seed first
  Index seed = 0;
  Index mask_id = -1;

  friend bool operator==(const InteractionSet&, const InteractionSet&) = default;
};

struct SetCollection {
  std::vector<InteractionSet> sets;
  Index image_id = 0;
  Index target_class = 0;
  bool exhausted = false;  // masks ran out before k sets
  DetectionConfig config;
};

struct SeedChoice {
  Index pixel = 0;
  std::size_t mask = 0;
};

/// Next seed pixel and its mask, or nullopt when every mask is used. TopIG
/// takes the highest IG value (ties by index) inside any unused mask; Random
/// draws a uniform unused mask, then a uniform pixel in it.
std::optional<SeedChoice> select_seed(const SaliencyMap& ig_map, const MaskSet& masks,
                                      const std::vector<bool>& used, SeedStrategy strategy, std::mt19937_64& rng);

/// Row of the logit-c Hessian for one spatial pixel, reduced over channels
/// (absolute entries summed in absolute mode, signed entries otherwise).
Eigen::VectorXd pixel_hessian_row(Tape& tape, const Tensor& x, Index c, Index pixel, HessianMode mode);

/// Breadth-first Hessian expansion from `seed`, bounded by nu.
InteractionSet get_set(Tape& tape, const Tensor& x, Index c, Index seed, const DetectionConfig& config);

/// Seeds within masks, expands each seed and drops every mask containing it,
/// until k sets or no masks remain.
SetCollection generate_sets(Tape& tape, const Tensor& x, Index c, const MaskSet& masks, const SaliencyMap& ig_map,
                            const DetectionConfig& config);

void write_sets(std::ostream& os, const SetCollection& sets);
SetCollection read_sets(std::istream& is);

}  // namespace hsets
