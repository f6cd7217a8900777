#include "hsets/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>

#include "hsets/errors.hpp"
#include "hsets/model.hpp"
#include "hsets/seed.hpp"

namespace hsets {

double gini(const SaliencyMap& phi) {
  if (phi.size() == 0) throw UndefinedError("gini of an empty map");
  if (!phi.allFinite()) throw UndefinedError("gini of a map with non-finite entries");
  std::vector<double> v(static_cast<std::size_t>(phi.size()));
  for (Index i = 0; i < phi.size(); ++i) v[static_cast<std::size_t>(i)] = std::abs(phi(i));
  std::sort(v.begin(), v.end());
  const double l1 = std::accumulate(v.begin(), v.end(), 0.0);
  if (l1 == 0.0) throw UndefinedError("gini is undefined for an all-zero map");
  const double d = static_cast<double>(v.size());
  double s = 0.0;
  for (std::size_t k = 0; k < v.size(); ++k) s += (v[k] / l1) * ((d - static_cast<double>(k + 1) + 0.5) / d);
  return 1.0 - 2.0 * s;
}

Tensor noisy_linear_impute(const Tensor& image, std::span<const Index> removed, const ImputeConfig& config,
                           std::mt19937_64& rng) {
  const ImageShape shape = ImageShape::of(image.shape());
  if (!(config.sigma >= 0.0)) throw ConfigError("imputation sigma must be >= 0");
  const Index H = shape.height, W = shape.width, C = shape.channels, n = H * W;
  Tensor out = image;
  if (removed.empty()) return out;

  std::vector<char> gone(static_cast<std::size_t>(n), 0);
  for (Index p : removed) {
    if (p < 0 || p >= n) throw IndexError("removed pixel " + std::to_string(p) + " outside the image");
    gone[static_cast<std::size_t>(p)] = 1;
  }
  std::vector<Index> holes;
  for (Index p = 0; p < n; ++p)
    if (gone[static_cast<std::size_t>(p)]) holes.push_back(p);
  if (static_cast<Index>(holes.size()) == n)
    throw UndefinedError("every pixel removed: imputation has no boundary condition");

  struct Tap {
    Index dr, dc;
    double w;
  };
  std::vector<Tap> taps{{-1, 0, 1.0}, {1, 0, 1.0}, {0, -1, 1.0}, {0, 1, 1.0}};
  if (config.neighbourhood == Neighbourhood::Eight) {
    for (Tap& t : taps) t.w = 1.0 / 6.0;
    for (Index dr : {-1, 1})
      for (Index dc : {-1, 1}) taps.push_back({dr, dc, 1.0 / 12.0});
  }

  // Neighbour lists per hole: flat pixel index and weight.
  std::vector<std::vector<std::pair<Index, double>>> nbrs(holes.size());
  for (std::size_t h = 0; h < holes.size(); ++h) {
    const Index r = holes[h] / W, c = holes[h] % W;
    for (const Tap& t : taps) {
      const Index rr = r + t.dr, cc = c + t.dc;
      if (rr >= 0 && rr < H && cc >= 0 && cc < W) nbrs[h].push_back({rr * W + cc, t.w});
    }
  }

  for (Index ch = 0; ch < C; ++ch) {
    double known = 0.0;
    for (Index p = 0; p < n; ++p)
      if (!gone[static_cast<std::size_t>(p)]) known += image[p * C + ch];
    known /= static_cast<double>(n - static_cast<Index>(holes.size()));
    for (Index p : holes) out[p * C + ch] = known;

    double residual = std::numeric_limits<double>::infinity();
    while (residual >= config.tolerance) {
      residual = 0.0;
      for (std::size_t h = 0; h < holes.size(); ++h) {
        double s = 0.0, wsum = 0.0;
        for (const auto& [q, w] : nbrs[h]) {
          s += w * out[q * C + ch];
          wsum += w;
        }
        const double v = s / wsum;
        double& cur = out[holes[h] * C + ch];
        residual = std::max(residual, std::abs(v - cur));
        cur = v;
      }
    }
  }
  if (config.sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, config.sigma);
    for (Index p : holes)
      for (Index ch = 0; ch < C; ++ch) out[p * C + ch] += noise(rng);
  }
  return out;
}

std::vector<Index> morf_order(const SaliencyMap& map) {
  std::vector<Index> order(static_cast<std::size_t>(map.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return map(a) > map(b); });
  return order;
}

void RoadConfig::validate(Index pixels) const {
  if (steps < 1) throw ConfigError("ROAD needs at least one removal step");
  if (k_per_step < 1) throw ConfigError("ROAD k_per_step must be >= 1");
  if (steps * k_per_step > pixels)
    throw ConfigError("ROAD removes " + std::to_string(steps * k_per_step) + " pixels but the image has " +
                      std::to_string(pixels));
}

std::vector<Index> removal_schedule(const RoadConfig& config) {
  std::vector<Index> out;
  for (Index s = 0; s <= config.steps; ++s) out.push_back(s * config.k_per_step);
  return out;
}

std::vector<Index> fraction_schedule(std::span<const double> fractions, Index pixels) {
  std::vector<Index> out;
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("removal fractions must lie in [0, 1]");
    out.push_back(static_cast<Index>(std::llround(f * static_cast<double>(pixels))));
  }
  return out;
}

namespace {

Tensor removed_image(const Tensor& x, const std::vector<Index>& order, Index count, const ImputeConfig& impute,
                     double fill, std::mt19937_64& rng) {
  const Index pixels = x.size() / pixel_channels(x.shape());
  if (count == 0) return x;
  if (count == pixels) {
    Tensor out(x.shape(), Eigen::VectorXd::Constant(x.size(), fill));
    if (impute.sigma > 0.0) {
      std::normal_distribution<double> noise(0.0, impute.sigma);
      for (Index i = 0; i < out.size(); ++i) out[i] += noise(rng);
    }
    return out;
  }
  return noisy_linear_impute(x, std::span<const Index>(order.data(), static_cast<std::size_t>(count)), impute, rng);
}

}  // namespace

RoadCurve road_curve(Tape& tape, const Dataset& data, const std::vector<SaliencyMap>& maps,
                     const std::vector<Index>& removed_counts, const ImputeConfig& impute, std::uint64_t seed) {
  if (data.empty()) throw ConfigError("ROAD needs at least one image");
  if (maps.size() != data.size()) throw ShapeError("ROAD needs one saliency map per image");
  if (removed_counts.empty()) throw ConfigError("ROAD needs at least one step");
  const Index pixels = data.shape.pixels();
  for (std::size_t s = 0; s < removed_counts.size(); ++s) {
    if (removed_counts[s] < 0 || removed_counts[s] > pixels)
      throw ConfigError("ROAD step removes " + std::to_string(removed_counts[s]) + " of " + std::to_string(pixels) +
                        " pixels");
    if (s > 0 && removed_counts[s] <= removed_counts[s - 1]) throw ConfigError("ROAD steps must strictly increase");
  }
  double fill = 0.0;
  for (const Tensor& img : data.images) fill += img.data().mean();
  fill /= static_cast<double>(data.size());

  RoadCurve curve;
  curve.removed = removed_counts;
  std::vector<Index> correct(removed_counts.size(), 0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (maps[i].size() != pixels) throw ShapeError("saliency map " + std::to_string(i) + " has the wrong size");
    std::mt19937_64 rng(derive_seed(seed, i));
    const std::vector<Index> order = morf_order(maps[i]);
    for (std::size_t s = 0; s < removed_counts.size(); ++s) {
      const Tensor xs = removed_image(data.images[i], order, removed_counts[s], impute, fill, rng);
      if (argmax(forward(tape, xs)) == data.labels[i]) ++correct[s];
    }
  }
  for (Index c : correct) curve.accuracy.push_back(static_cast<double>(c) / static_cast<double>(data.size()));
  double drop = 0.0;
  for (std::size_t s = 1; s < curve.accuracy.size(); ++s) drop += curve.accuracy[0] - curve.accuracy[s];
  curve.aopc = drop / static_cast<double>(curve.accuracy.size());
  return curve;
}

double road_aopc(Tape& tape, const Tensor& x, const SaliencyMap& map, const RoadConfig& config, std::mt19937_64& rng) {
  const Index pixels = x.size() / pixel_channels(x.shape());
  if (map.size() != pixels) throw ShapeError("saliency map does not match the image");
  config.validate(pixels);
  const Tensor logits = forward(tape, x);
  const Index c = argmax(logits);
  const std::vector<Index> order = morf_order(map);
  double drop = 0.0;
  for (Index s = 1; s <= config.steps; ++s) {
    const Tensor xs = noisy_linear_impute(
        x, std::span<const Index>(order.data(), static_cast<std::size_t>(s * config.k_per_step)), config.impute, rng);
    drop += logits[c] - forward(tape, xs)[c];
  }
  return drop / static_cast<double>(config.steps + 1);
}

void FaithfulnessConfig::validate() const {
  if (!(subset_fraction > 0.0 && subset_fraction <= 1.0)) throw ConfigError("subset_fraction must lie in (0, 1]");
  if (runs < 2) throw ConfigError("faithfulness correlation needs at least two runs");
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ShapeError("pearson needs two series of equal length >= 2");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw UndefinedError("correlation is undefined for a zero-variance series");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double faithfulness_correlation(Tape& tape, const Tensor& x, const Tensor& baseline, const SaliencyMap& map,
                                const FaithfulnessConfig& config) {
  config.validate();
  if (x.shape() != baseline.shape()) throw ShapeError("baseline shape differs from the input");
  const Index C = pixel_channels(x.shape());
  const Index pixels = x.size() / C;
  if (map.size() != pixels) throw ShapeError("saliency map does not match the image");
  const auto size = std::max<Index>(1, static_cast<Index>(std::llround(config.subset_fraction * static_cast<double>(pixels))));
  const Tensor logits = forward(tape, x);
  const Index c = argmax(logits);
  std::mt19937_64 rng(config.seed);
  std::vector<Index> idx(static_cast<std::size_t>(pixels));
  std::vector<double> attr, drop;
  for (Index run = 0; run < config.runs; ++run) {
    std::iota(idx.begin(), idx.end(), Index{0});
    for (Index j = 0; j < size; ++j) {
      std::uniform_int_distribution<Index> pick(j, pixels - 1);
      std::swap(idx[static_cast<std::size_t>(j)], idx[static_cast<std::size_t>(pick(rng))]);
    }
    Tensor xs = x;
    double mean = 0.0;
    for (Index j = 0; j < size; ++j) {
      const Index p = idx[static_cast<std::size_t>(j)];
      mean += map(p);
      for (Index ch = 0; ch < C; ++ch) xs[p * C + ch] = baseline[p * C + ch];
    }
    attr.push_back(mean / static_cast<double>(size));
    drop.push_back(logits[c] - forward(tape, xs)[c]);
  }
  return pearson(attr, drop);
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / static_cast<double>(values.size()));
  return s;
}

void write_metric_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
  os << "method,model,metric,mean,std,count\n" << std::setprecision(10);
  for (const MetricRow& r : rows)
    os << r.method << ',' << r.model << ',' << r.metric << ',' << r.summary.mean << ',' << r.summary.std << ','
       << r.summary.count << '\n';
}

void write_curve_csv(std::ostream& os, const RoadCurve& curve) {
  os << "removed,accuracy\n" << std::setprecision(10);
  for (std::size_t s = 0; s < curve.removed.size(); ++s) os << curve.removed[s] << ',' << curve.accuracy[s] << '\n';
}

}  // namespace hsets
