#include "hsets/detection.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "hsets/errors.hpp"

namespace hsets {

const char* to_string(SeedStrategy s) { return s == SeedStrategy::TopIG ? "top-ig" : "random"; }
const char* to_string(HessianMode m) { return m == HessianMode::Absolute ? "absolute" : "signed"; }
const char* to_string(RowNormalization n) { return n == RowNormalization::MaxAbs ? "max-abs" : "none"; }

SeedStrategy parse_seed_strategy(const std::string& s) {
  if (s == "top-ig") return SeedStrategy::TopIG;
  if (s == "random") return SeedStrategy::Random;
  throw ConfigError("unknown seed strategy '" + s + "' (top-ig, random)");
}

HessianMode parse_hessian_mode(const std::string& s) {
  if (s == "absolute") return HessianMode::Absolute;
  if (s == "signed") return HessianMode::Signed;
  throw ConfigError("unknown hessian mode '" + s + "' (absolute, signed)");
}

RowNormalization parse_row_normalization(const std::string& s) {
  if (s == "max-abs") return RowNormalization::MaxAbs;
  if (s == "none") return RowNormalization::None;
  throw ConfigError("unknown row normalization '" + s + "' (max-abs, none)");
}

void DetectionConfig::validate() const {
  if (nu < 1) throw ConfigError("nu must be >= 1");
  if (k < 1) throw ConfigError("k must be >= 1");
  if (!std::isfinite(mu)) throw ConfigError("mu must be finite");
  if (row_normalization == RowNormalization::MaxAbs && (mu < 0.0 || mu > 1.0))
    throw ConfigError("mu must lie in [0, 1] with max-abs row normalization");
}

std::optional<SeedChoice> select_seed(const SaliencyMap& ig_map, const MaskSet& masks, const std::vector<bool>& used,
                                      SeedStrategy strategy, std::mt19937_64& rng) {
  if (used.size() != masks.size()) throw ShapeError("select_seed: one used flag per mask required");
  if (ig_map.size() != masks.height * masks.width) throw ShapeError("select_seed: IG map does not match the mask grid");
  const std::vector<std::size_t> order = masks.iteration_order();
  std::vector<std::size_t> open;
  for (std::size_t m : order)
    if (!used[m]) open.push_back(m);
  if (open.empty()) return std::nullopt;

  if (strategy == SeedStrategy::Random) {
    std::uniform_int_distribution<std::size_t> pick_mask(0, open.size() - 1);
    const std::size_t m = open[pick_mask(rng)];
    std::uniform_int_distribution<std::size_t> pick_pixel(0, masks.masks[m].size() - 1);
    return SeedChoice{masks.masks[m][pick_pixel(rng)], m};
  }

  // Owning open mask per pixel, first in iteration order.
  std::vector<std::ptrdiff_t> owner(static_cast<std::size_t>(ig_map.size()), -1);
  for (auto it = open.rbegin(); it != open.rend(); ++it)
    for (Index p : masks.masks[*it]) owner[static_cast<std::size_t>(p)] = static_cast<std::ptrdiff_t>(*it);
  Index best = -1;
  for (Index p = 0; p < ig_map.size(); ++p) {
    if (owner[static_cast<std::size_t>(p)] < 0) continue;
    if (best < 0 || ig_map(p) > ig_map(best)) best = p;
  }
  if (best < 0) return std::nullopt;
  return SeedChoice{best, static_cast<std::size_t>(owner[static_cast<std::size_t>(best)])};
}

namespace {

Index channels_of(const Tensor& x) { return pixel_channels(x.shape()); }

}  // namespace

Eigen::VectorXd pixel_hessian_row(Tape& tape, const Tensor& x, Index c, Index pixel, HessianMode mode) {
  const Index C = channels_of(x);
  const Index pixels = x.size() / C;
  if (pixel < 0 || pixel >= pixels)
    throw IndexError("pixel " + std::to_string(pixel) + " out of range for " + std::to_string(pixels) + " pixels");
  Eigen::VectorXd row = Eigen::VectorXd::Zero(pixels);
  for (Index ch = 0; ch < C; ++ch) {
    const Tensor h = hessian_row(tape, x, c, pixel * C + ch);
    for (Index q = 0; q < pixels; ++q)
      for (Index k = 0; k < C; ++k) {
        const double v = h[q * C + k];
        row(q) += mode == HessianMode::Absolute ? std::abs(v) : v;
      }
  }
  return row;
}

InteractionSet get_set(Tape& tape, const Tensor& x, Index c, Index seed, const DetectionConfig& config) {
  config.validate();
  const Index pixels = x.size() / channels_of(x);
  if (seed < 0 || seed >= pixels) throw IndexError("seed " + std::to_string(seed) + " out of range");

  InteractionSet set;
  set.seed = seed;
  set.pixels.push_back(seed);
  std::vector<char> member(static_cast<std::size_t>(pixels), 0);
  member[static_cast<std::size_t>(seed)] = 1;
  std::deque<Index> queue{seed};

  while (!queue.empty() && static_cast<Index>(set.pixels.size()) < config.nu) {
    const Index i = queue.front();
    queue.pop_front();
    Eigen::VectorXd row = pixel_hessian_row(tape, x, c, i, config.hessian_mode);
    if (config.row_normalization == RowNormalization::MaxAbs) {
      const double peak = row.cwiseAbs().maxCoeff();
      if (peak == 0.0) continue;
      row /= peak;
    }
    std::vector<Index> candidates;
    for (Index j = 0; j < pixels; ++j) {
      if (member[static_cast<std::size_t>(j)]) continue;
      const double v = config.hessian_mode == HessianMode::Absolute ? std::abs(row(j)) : row(j);
      if (v > config.mu) candidates.push_back(j);
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [&](Index a, Index b) { return std::abs(row(a)) > std::abs(row(b)); });
    for (Index j : candidates) {
      if (static_cast<Index>(set.pixels.size()) >= config.nu) break;
      member[static_cast<std::size_t>(j)] = 1;
      set.pixels.push_back(j);
      queue.push_back(j);
    }
  }
  return set;
}

SetCollection generate_sets(Tape& tape, const Tensor& x, Index c, const MaskSet& masks, const SaliencyMap& ig_map,
                            const DetectionConfig& config) {
  config.validate();
  if (masks.empty()) throw ShapeError("generate_sets needs at least one mask");
  masks.validate();
  if (masks.height * masks.width * channels_of(x) != x.size())
    throw ShapeError("mask grid does not match the image");
  SetCollection out;
  out.config = config;
  out.target_class = c;
  std::vector<bool> used(masks.size(), false);
  std::mt19937_64 rng(config.seed);
  while (static_cast<Index>(out.sets.size()) < config.k) {
    const auto choice = select_seed(ig_map, masks, used, config.seed_strategy, rng);
    if (!choice) {
      out.exhausted = true;
      break;
    }
    InteractionSet set = get_set(tape, x, c, choice->pixel, config);
    set.mask_id = static_cast<Index>(choice->mask);
    for (std::size_t m = 0; m < masks.size(); ++m)
      if (!used[m] && std::binary_search(masks.masks[m].begin(), masks.masks[m].end(), choice->pixel)) used[m] = true;
    out.sets.push_back(std::move(set));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text form

void write_sets(std::ostream& os, const SetCollection& s) {
  os << "image " << s.image_id << " class " << s.target_class << " sets " << s.sets.size() << " exhausted "
     << (s.exhausted ? 1 : 0) << '\n';
  os << "config mu " << std::setprecision(17) << s.config.mu << " nu " << s.config.nu << " k " << s.config.k
     << " seed_strategy " << to_string(s.config.seed_strategy) << " seed " << s.config.seed << " hessian_mode "
     << to_string(s.config.hessian_mode) << " row_normalization " << to_string(s.config.row_normalization) << '\n';
  for (std::size_t i = 0; i < s.sets.size(); ++i) {
    const InteractionSet& set = s.sets[i];
    os << "set " << i << " seed " << set.seed << " mask " << set.mask_id << " size " << set.pixels.size() << " :";
    for (Index p : set.pixels) os << ' ' << p;
    os << '\n';
  }
}

SetCollection read_sets(std::istream& is) {
  auto expect = [&](const char* word) {
    std::string w;
    if (!(is >> w) || w != word) throw FormatError(std::string("set file: expected '") + word + "', found '" + w + "'");
  };
  while (is >> std::ws && is.peek() == '#') is.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
  SetCollection s;
  std::size_t n = 0;
  int exhausted = 0;
  std::string strategy, mode, norm;
  expect("image");
  is >> s.image_id;
  expect("class");
  is >> s.target_class;
  expect("sets");
  is >> n;
  expect("exhausted");
  is >> exhausted;
  expect("config");
  expect("mu");
  is >> s.config.mu;
  expect("nu");
  is >> s.config.nu;
  expect("k");
  is >> s.config.k;
  expect("seed_strategy");
  is >> strategy;
  expect("seed");
  is >> s.config.seed;
  expect("hessian_mode");
  is >> mode;
  expect("row_normalization");
  is >> norm;
  if (!is) throw FormatError("set file: malformed header");
  s.exhausted = exhausted != 0;
  s.config.seed_strategy = parse_seed_strategy(strategy);
  s.config.hessian_mode = parse_hessian_mode(mode);
  s.config.row_normalization = parse_row_normalization(norm);
  for (std::size_t i = 0; i < n; ++i) {
    InteractionSet set;
    std::size_t idx = 0, size = 0;
    expect("set");
    is >> idx;
    expect("seed");
    is >> set.seed;
    expect("mask");
    is >> set.mask_id;
    expect("size");
    is >> size;
    expect(":");
    set.pixels.resize(size);
    for (Index& p : set.pixels) is >> p;
    if (!is || idx != i) throw FormatError("set file: malformed set " + std::to_string(i));
    s.sets.push_back(std::move(set));
  }
  return s;
}

}  // namespace hsets
