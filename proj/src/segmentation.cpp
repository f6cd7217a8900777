#include "hsets/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <queue>
#include <sstream>

#include "hsets/errors.hpp"

namespace hsets {

void MaskSet::validate() const {
  if (height < 1 || width < 1) throw ShapeError("mask grid must be at least 1 x 1");
  const Index n = height * width;
  for (std::size_t m = 0; m < masks.size(); ++m) {
    const auto& px = masks[m];
    if (px.empty()) throw ShapeError("mask " + std::to_string(m) + " is empty");
    for (std::size_t k = 0; k < px.size(); ++k) {
      if (px[k] < 0 || px[k] >= n)
        throw IndexError("mask " + std::to_string(m) + " has pixel " + std::to_string(px[k]) + " outside the image");
      if (k > 0 && px[k] <= px[k - 1])
        throw ShapeError("mask " + std::to_string(m) + " pixels are not sorted and unique");
    }
  }
}

bool MaskSet::disjoint() const {
  std::vector<char> seen(static_cast<std::size_t>(height * width), 0);
  for (const auto& px : masks)
    for (Index p : px) {
      if (seen[static_cast<std::size_t>(p)]) return false;
      seen[static_cast<std::size_t>(p)] = 1;
    }
  return true;
}

std::vector<std::size_t> MaskSet::iteration_order() const {
  std::vector<std::size_t> order(masks.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return masks[a].size() > masks[b].size(); });
  return order;
}

std::vector<Index> MaskSet::label_map() const {
  if (!disjoint()) throw ShapeError("label map requires disjoint masks");
  std::vector<Index> labels(static_cast<std::size_t>(height * width), -1);
  for (std::size_t m = 0; m < masks.size(); ++m)
    for (Index p : masks[m]) labels[static_cast<std::size_t>(p)] = static_cast<Index>(m);
  return labels;
}

MaskSet grid_segment(Index height, Index width, Index cell) {
  if (height < 1 || width < 1) throw ShapeError("grid needs a positive image size");
  if (cell < 1) throw ConfigError("grid cell must be >= 1");
  MaskSet out{height, width, {}};
  for (Index r0 = 0; r0 < height; r0 += cell)
    for (Index c0 = 0; c0 < width; c0 += cell) {
      std::vector<Index> px;
      for (Index r = r0; r < std::min(height, r0 + cell); ++r)
        for (Index c = c0; c < std::min(width, c0 + cell); ++c) px.push_back(r * width + c);
      out.masks.push_back(std::move(px));
    }
  return out;
}

MaskSet no_segmentation(Index height, Index width) {
  return grid_segment(height, width, std::max(height, width));
}

namespace {

// Splits pixels by group id into 4-connected components, ordered by smallest pixel.
MaskSet connected_components(Index height, Index width, const std::vector<Index>& group) {
  MaskSet out{height, width, {}};
  std::vector<char> done(group.size(), 0);
  for (Index start = 0; start < height * width; ++start) {
    if (done[static_cast<std::size_t>(start)]) continue;
    std::vector<Index> px;
    std::queue<Index> queue;
    queue.push(start);
    done[static_cast<std::size_t>(start)] = 1;
    while (!queue.empty()) {
      const Index p = queue.front();
      queue.pop();
      px.push_back(p);
      const Index r = p / width, c = p % width;
      const Index nbrs[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (const auto& nb : nbrs) {
        if (nb[0] < 0 || nb[0] >= height || nb[1] < 0 || nb[1] >= width) continue;
        const Index q = nb[0] * width + nb[1];
        if (done[static_cast<std::size_t>(q)] || group[static_cast<std::size_t>(q)] != group[static_cast<std::size_t>(p)])
          continue;
        done[static_cast<std::size_t>(q)] = 1;
        queue.push(q);
      }
    }
    std::sort(px.begin(), px.end());
    out.masks.push_back(std::move(px));
  }
  return out;
}

}  // namespace

MaskSet quickshift_segment(const Tensor& image, const QuickshiftParams& params) {
  const ImageShape shape = ImageShape::of(image.shape());
  if (!(params.max_dist > 0.0)) throw ConfigError("quickshift max_dist must be positive");
  if (!(params.kernel_size > 0.0)) throw ConfigError("quickshift kernel_size must be positive");
  if (!(params.ratio >= 0.0) || !std::isfinite(params.ratio)) throw ConfigError("quickshift ratio must be >= 0");
  const Index H = shape.height, W = shape.width, C = shape.channels;
  const Index n = H * W;

  auto color_dist2 = [&](Index a, Index b) {
    double s = 0.0;
    for (Index ch = 0; ch < C; ++ch) {
      const double d = image[a * C + ch] - image[b * C + ch];
      s += d * d;
    }
    return params.ratio * params.ratio * s;
  };

  const double inv2s2 = 1.0 / (2.0 * params.kernel_size * params.kernel_size);
  const Index kr = static_cast<Index>(std::ceil(3.0 * params.kernel_size));
  std::vector<double> density(static_cast<std::size_t>(n), 0.0);
  for (Index r = 0; r < H; ++r)
    for (Index c = 0; c < W; ++c) {
      const Index p = r * W + c;
      double s = 0.0;
      for (Index dr = -kr; dr <= kr; ++dr)
        for (Index dc = -kr; dc <= kr; ++dc) {
          const Index rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
          s += std::exp(-(static_cast<double>(dr * dr + dc * dc) + color_dist2(p, rr * W + cc)) * inv2s2);
        }
      density[static_cast<std::size_t>(p)] = s;
    }

  auto higher = [&](Index a, Index b) {
    const double da = density[static_cast<std::size_t>(a)], db = density[static_cast<std::size_t>(b)];
    return da > db || (da == db && a > b);
  };

  const double max_d2 = params.max_dist * params.max_dist;
  const Index lr = static_cast<Index>(std::floor(params.max_dist));
  std::vector<Index> parent(static_cast<std::size_t>(n));
  for (Index r = 0; r < H; ++r)
    for (Index c = 0; c < W; ++c) {
      const Index p = r * W + c;
      Index best = p;
      double best_d2 = max_d2;
      bool found = false;
      for (Index dr = -lr; dr <= lr; ++dr)
        for (Index dc = -lr; dc <= lr; ++dc) {
          const Index rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
          const Index q = rr * W + cc;
          if (!higher(q, p)) continue;
          const double d2 = static_cast<double>(dr * dr + dc * dc) + color_dist2(p, q);
          if (d2 < best_d2 || (!found && d2 <= max_d2)) {
            best = q;
            best_d2 = d2;
            found = true;
          }
        }
      parent[static_cast<std::size_t>(p)] = best;
    }

  // Keys strictly increase along parent links, so roots are reached without cycles.
  std::vector<Index> root(static_cast<std::size_t>(n), -1);
  for (Index p = 0; p < n; ++p) {
    Index q = p;
    while (parent[static_cast<std::size_t>(q)] != q && root[static_cast<std::size_t>(q)] < 0)
      q = parent[static_cast<std::size_t>(q)];
    const Index top = root[static_cast<std::size_t>(q)] >= 0 ? root[static_cast<std::size_t>(q)] : q;
    for (Index s = p; s != q; s = parent[static_cast<std::size_t>(s)]) root[static_cast<std::size_t>(s)] = top;
    root[static_cast<std::size_t>(q)] = top;
  }
  return connected_components(H, W, root);
}

// ---------------------------------------------------------------------------
// Files

MaskSet load_masks(const std::filesystem::path& path, Index height, Index width) {
  if (height < 1 || width < 1) throw ShapeError("mask grid must be at least 1 x 1");
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open mask file " + path.string());
  std::string text, line;
  while (std::getline(f, line))
    if (line.empty() || line[0] != '#') text += line + '\n';
  MaskSet out{height, width, {}};
  const Index n = height * width;

  if (text.find(':') != std::string::npos) {
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      std::vector<Index> px;
      std::istringstream runs(line);
      std::string run;
      while (std::getline(runs, run, ',')) {
        Index start = 0, len = 0;
        char colon = 0;
        std::istringstream rs(run);
        if (!(rs >> start >> colon >> len) || colon != ':' || len < 1)
          throw FormatError("bad run '" + run + "' in " + path.string());
        if (start < 0 || start + len > n)
          throw ShapeError("run " + run + " exceeds the " + std::to_string(height) + " x " + std::to_string(width) +
                           " image");
        for (Index k = 0; k < len; ++k) px.push_back(start + k);
      }
      std::sort(px.begin(), px.end());
      px.erase(std::unique(px.begin(), px.end()), px.end());
      if (!px.empty()) out.masks.push_back(std::move(px));
    }
  } else {
    std::istringstream is(text);
    Index h = 0, w = 0;
    if (!(is >> h >> w)) throw FormatError("label map " + path.string() + " lacks an 'H W' header");
    if (h != height || w != width)
      throw ShapeError("label map is " + std::to_string(h) + " x " + std::to_string(w) + ", expected " +
                       std::to_string(height) + " x " + std::to_string(width));
    std::map<long long, std::vector<Index>> by_label;
    for (Index p = 0; p < n; ++p) {
      long long label = 0;
      if (!(is >> label)) throw ShapeError("label map has fewer than " + std::to_string(n) + " labels");
      if (label != 0) by_label[label].push_back(p);
    }
    long long extra = 0;
    if (is >> extra) throw ShapeError("label map has more than " + std::to_string(n) + " labels");
    for (auto& [label, px] : by_label) out.masks.push_back(std::move(px));
  }
  if (out.masks.empty()) throw FormatError("mask file " + path.string() + " defines no masks");
  out.validate();
  return out;
}

void save_masks(const MaskSet& masks, const std::filesystem::path& path, const std::string& comment) {
  masks.validate();
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write mask file " + path.string());
  if (!comment.empty()) f << "# " << comment << '\n';
  if (masks.disjoint()) {
    const std::vector<Index> labels = masks.label_map();
    f << masks.height << ' ' << masks.width << '\n';
    for (Index r = 0; r < masks.height; ++r) {
      for (Index c = 0; c < masks.width; ++c) {
        if (c > 0) f << ' ';
        f << labels[static_cast<std::size_t>(r * masks.width + c)] + 1;
      }
      f << '\n';
    }
    return;
  }
  for (const auto& px : masks.masks) {
    bool first = true;
    for (std::size_t k = 0; k < px.size();) {
      std::size_t e = k + 1;
      while (e < px.size() && px[e] == px[e - 1] + 1) ++e;
      f << (first ? "" : ",") << px[k] << ':' << (e - k);
      first = false;
      k = e;
    }
    f << '\n';
  }
}

}  // namespace hsets
