#include "hsets/dataset.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <limits>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "hsets/errors.hpp"

namespace hsets {

void Dataset::validate() const {
  if (images.size() != labels.size())
    throw ShapeError("dataset has " + std::to_string(images.size()) + " images but " + std::to_string(labels.size()) +
                     " labels");
  const Shape expected = shape.shape();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != expected)
      throw ShapeError("image " + std::to_string(i) + " has shape " + shape_string(images[i].shape()) + ", expected " +
                       shape_string(expected));
    if (labels[i] < 0 || labels[i] >= classes)
      throw IndexError("label " + std::to_string(labels[i]) + " of image " + std::to_string(i) + " out of range");
    const auto& d = images[i].data();
    if (!images[i].all_finite() || (d.size() > 0 && (d.minCoeff() < 0.0 || d.maxCoeff() > 1.0)))
      throw ShapeError("image " + std::to_string(i) + " has pixel values outside [0, 1]");
  }
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  end = std::min(end, size());
  begin = std::min(begin, end);
  Dataset out;
  out.shape = shape;
  out.classes = classes;
  out.images.assign(images.begin() + begin, images.begin() + end);
  out.labels.assign(labels.begin() + begin, labels.begin() + end);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic digits

namespace {

using Point = std::array<double, 2>;
using Stroke = std::vector<Point>;

Stroke ellipse(double cx, double cy, double rx, double ry, int n = 18) {
  Stroke s;
  for (int k = 0; k <= n; ++k) {
    const double t = 2.0 * M_PI * k / n;
    s.push_back({cx + rx * std::sin(t), cy - ry * std::cos(t)});
  }
  return s;
}

// Glyphs in unit coordinates, x to the right and y downwards.
std::vector<Stroke> glyph(Index digit) {
  switch (digit) {
    case 0: return {ellipse(0.5, 0.5, 0.28, 0.42)};
    case 1: return {{{0.32, 0.24}, {0.55, 0.06}, {0.55, 0.94}}};
    case 2:
      return {{{0.2, 0.28}, {0.3, 0.1}, {0.5, 0.05}, {0.72, 0.12}, {0.78, 0.3}, {0.68, 0.5}, {0.2, 0.93}, {0.84, 0.93}}};
    case 3:
      return {{{0.2, 0.12}, {0.5, 0.05}, {0.75, 0.16}, {0.74, 0.37}, {0.45, 0.48}, {0.76, 0.58}, {0.78, 0.8},
               {0.5, 0.95}, {0.2, 0.86}}};
    case 4: return {{{0.66, 0.94}, {0.66, 0.06}, {0.14, 0.66}, {0.86, 0.66}}};
    case 5:
      return {{{0.8, 0.06}, {0.28, 0.06}, {0.23, 0.45}, {0.55, 0.39}, {0.78, 0.55}, {0.77, 0.8}, {0.5, 0.95},
               {0.2, 0.86}}};
    case 6:
      return {{{0.72, 0.06}, {0.42, 0.24}, {0.25, 0.55}, {0.28, 0.82}, {0.5, 0.95}, {0.73, 0.82}, {0.74, 0.6},
               {0.5, 0.48}, {0.27, 0.6}}};
    case 7: return {{{0.16, 0.07}, {0.84, 0.07}, {0.4, 0.94}}};
    case 8: return {ellipse(0.5, 0.27, 0.22, 0.21), ellipse(0.5, 0.71, 0.27, 0.23)};
    case 9: return {ellipse(0.5, 0.3, 0.24, 0.23), {{0.74, 0.3}, {0.7, 0.62}, {0.52, 0.95}}};
    default: throw IndexError("synthetic digits only cover classes 0-9");
  }
}

double segment_distance(double px, double py, const Point& a, const Point& b) {
  const double dx = b[0] - a[0], dy = b[1] - a[1];
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - a[0]) * dx + (py - a[1]) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (a[0] + t * dx), py - (a[1] + t * dy));
}

Tensor render_digit(Index digit, std::mt19937_64& rng, const SyntheticDigitsConfig& cfg) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const ImageShape& shape = cfg.shape;
  const double box = 20.0 * std::min(shape.height, shape.width) / 28.0;
  const double margin_r = (static_cast<double>(shape.height) - box) / 2.0;
  const double margin_c = (static_cast<double>(shape.width) - box) / 2.0;

  const double angle = cfg.max_rotation * u(rng);
  const double shear = cfg.max_shear * u(rng);
  const double scale = cfg.min_scale + (cfg.max_scale - cfg.min_scale) * (0.5 + 0.5 * u(rng));
  const double shift_x = cfg.max_shift * u(rng), shift_y = cfg.max_shift * u(rng);
  const double thickness = cfg.min_thickness + (cfg.max_thickness - cfg.min_thickness) * (0.5 + 0.5 * u(rng));
  const double ca = std::cos(angle), sa = std::sin(angle);
  const double size = 0.8 * box * scale;

  std::vector<Stroke> strokes = glyph(digit);
  for (Stroke& s : strokes)
    for (Point& p : s) {
      const double gx = (p[0] + cfg.control_jitter * u(rng) - 0.5) * size;
      const double gy = (p[1] + cfg.control_jitter * u(rng) - 0.5) * size;
      const double sx = gx + shear * gy;
      p = {ca * sx - sa * gy + shape.width / 2.0 + shift_x, sa * sx + ca * gy + shape.height / 2.0 + shift_y};
    }

  Tensor img(shape.shape());
  for (Index r = 0; r < shape.height; ++r) {
    if (r < margin_r || r >= shape.height - margin_r) continue;
    for (Index c = 0; c < shape.width; ++c) {
      if (c < margin_c || c >= shape.width - margin_c) continue;
      const double px = c + 0.5, py = r + 0.5;
      double dist = 1e9;
      for (const Stroke& s : strokes)
        for (std::size_t k = 0; k + 1 < s.size(); ++k) dist = std::min(dist, segment_distance(px, py, s[k], s[k + 1]));
      double v = std::clamp(thickness / 2.0 + 0.5 - dist, 0.0, 1.0);
      if (v > 0.0) v = std::clamp(v + cfg.noise * normal(rng), 0.0, 1.0);
      for (Index ch = 0; ch < shape.channels; ++ch) img[(r * shape.width + c) * shape.channels + ch] = v;
    }
  }
  return img;
}

}  // namespace

Dataset make_synthetic_digits(std::size_t count, std::uint64_t seed, const SyntheticDigitsConfig& config) {
  if (config.shape.height < 8 || config.shape.width < 8 || config.shape.channels < 1)
    throw ShapeError("synthetic digits need images of at least 8 x 8");
  std::mt19937_64 rng(seed);
  std::vector<Index> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<Index>(i % 10);
  std::shuffle(labels.begin(), labels.end(), rng);
  Dataset data;
  data.shape = config.shape;
  data.classes = 10;
  data.labels = labels;
  data.images.reserve(count);
  for (std::size_t i = 0; i < count; ++i) data.images.push_back(render_digit(labels[i], rng, config));
  return data;
}

std::vector<Index> decoy_patch_pixels(const ImageShape& shape, Index patch_size) {
  if (patch_size < 1 || patch_size > shape.height || patch_size > shape.width)
    throw ShapeError("decoy patch of size " + std::to_string(patch_size) + " does not fit a " +
                     std::to_string(shape.height) + " x " + std::to_string(shape.width) + " image");
  std::vector<Index> pixels;
  for (Index r = 0; r < patch_size; ++r)
    for (Index c = 0; c < patch_size; ++c) pixels.push_back(r * shape.width + c);
  return pixels;
}

Dataset make_decoy_mnist(const Dataset& base, Index patch_size, std::uint64_t seed, DecoyVariant variant) {
  const std::vector<Index> patch = decoy_patch_pixels(base.shape, patch_size);
  if (base.classes < 2) throw ShapeError("decoy encoding needs at least two classes");
  Dataset out = base;
  if (variant == DecoyVariant::Removed) return out;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> pick(0, base.classes - 1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Index code = variant == DecoyVariant::Correlated ? out.labels[i] : pick(rng);
    const double v = static_cast<double>(code) / static_cast<double>(base.classes - 1);
    for (Index p : patch)
      for (Index ch = 0; ch < base.shape.channels; ++ch) out.images[i][p * base.shape.channels + ch] = v;
  }
  return out;
}

// ---------------------------------------------------------------------------
// IDX

namespace {

void write_be32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  os.write(b, 4);
}

std::uint32_t read_be32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("truncated IDX header in " + what);
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

struct IdxFile {
  int type = 0;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;
};

IdxFile read_idx(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  unsigned char magic[4];
  if (!f.read(reinterpret_cast<char*>(magic), 4) || magic[0] != 0 || magic[1] != 0)
    throw FormatError("bad IDX magic in " + path.string());
  IdxFile idx;
  idx.type = magic[2];
  if (idx.type != 0x08 && idx.type != 0x0D) throw FormatError("unsupported IDX element type in " + path.string());
  std::size_t n = 1;
  for (int k = 0; k < magic[3]; ++k) {
    idx.dims.push_back(read_be32(f, path.string()));
    n *= idx.dims.back();
  }
  const std::size_t width = idx.type == 0x08 ? 1 : 4;
  std::vector<unsigned char> raw(n * width);
  if (!f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw FormatError("IDX payload of " + path.string() + " is shorter than its header declares");
  idx.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (width == 1) {
      idx.values[i] = raw[i];
    } else {
      const unsigned char* p = raw.data() + 4 * i;
      const std::uint32_t bits =
          (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
      idx.values[i] = std::bit_cast<float>(bits);
    }
  }
  return idx;
}

std::filesystem::path with_suffix(const std::filesystem::path& prefix, const char* suffix) {
  return std::filesystem::path(prefix.string() + suffix);
}

}  // namespace

void save_idx(const Dataset& data, const std::filesystem::path& prefix) {
  data.validate();
  {
    std::ofstream f(with_suffix(prefix, "-images.idx"), std::ios::binary);
    if (!f) throw FormatError("cannot write " + with_suffix(prefix, "-images.idx").string());
    const char magic[4] = {0, 0, 0x0D, 4};
    f.write(magic, 4);
    write_be32(f, static_cast<std::uint32_t>(data.size()));
    write_be32(f, static_cast<std::uint32_t>(data.shape.height));
    write_be32(f, static_cast<std::uint32_t>(data.shape.width));
    write_be32(f, static_cast<std::uint32_t>(data.shape.channels));
    for (const Tensor& img : data.images)
      for (Index k = 0; k < img.size(); ++k) write_be32(f, std::bit_cast<std::uint32_t>(static_cast<float>(img[k])));
  }
  std::ofstream f(with_suffix(prefix, "-labels.idx"), std::ios::binary);
  if (!f) throw FormatError("cannot write " + with_suffix(prefix, "-labels.idx").string());
  const char magic[4] = {0, 0, 0x08, 1};
  f.write(magic, 4);
  write_be32(f, static_cast<std::uint32_t>(data.size()));
  for (Index l : data.labels) f.put(static_cast<char>(l));
}

Dataset load_idx(const std::filesystem::path& prefix, Index classes) {
  const IdxFile images = read_idx(with_suffix(prefix, "-images.idx"));
  const IdxFile labels = read_idx(with_suffix(prefix, "-labels.idx"));
  if (images.dims.size() != 3 && images.dims.size() != 4) throw FormatError("IDX images must be N x H x W [x C]");
  if (labels.dims.size() != 1 || labels.type != 0x08) throw FormatError("IDX labels must be a ubyte vector");
  if (labels.dims[0] != images.dims[0]) throw FormatError("IDX image and label counts differ");
  Dataset data;
  data.classes = classes;
  data.shape = ImageShape{images.dims[1], images.dims[2], images.dims.size() == 4 ? Index(images.dims[3]) : 1};
  const double scale = images.type == 0x08 ? 1.0 / 255.0 : 1.0;
  const Index per = data.shape.size();
  for (std::size_t i = 0; i < images.dims[0]; ++i) {
    Tensor img(data.shape.shape());
    for (Index k = 0; k < per; ++k) img[k] = scale * images.values[i * per + k];
    data.images.push_back(std::move(img));
    data.labels.push_back(static_cast<Index>(labels.values[i]));
  }
  data.validate();
  return data;
}

// ---------------------------------------------------------------------------
// PGM

void write_pgm(const std::filesystem::path& path, const Eigen::MatrixXd& pixels, const std::string& comment) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  f << "P5\n";
  if (!comment.empty()) f << "# " << comment << '\n';
  f << pixels.cols() << ' ' << pixels.rows() << "\n255\n";
  for (Index r = 0; r < pixels.rows(); ++r)
    for (Index c = 0; c < pixels.cols(); ++c)
      f.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(pixels(r, c), 0.0, 1.0) * 255.0))));
}

Eigen::MatrixXd read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    while (f >> std::ws && f.peek() == '#') f.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
    f >> t;
    return t;
  };
  if (token() != "P5") throw FormatError(path.string() + " is not a binary PGM");
  Index width = 0, height = 0, maxval = 0;
  try {
    width = std::stol(token());
    height = std::stol(token());
    maxval = std::stol(token());
  } catch (const std::exception&) {
    throw FormatError("malformed PGM header in " + path.string());
  }
  if (width < 1 || height < 1 || maxval < 1 || maxval > 255) throw FormatError("unsupported PGM header in " + path.string());
  f.get();
  std::vector<unsigned char> raw(static_cast<std::size_t>(width * height));
  if (!f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw FormatError("truncated PGM data in " + path.string());
  Eigen::MatrixXd out(height, width);
  for (Index r = 0; r < height; ++r)
    for (Index c = 0; c < width; ++c) out(r, c) = raw[r * width + c] / static_cast<double>(maxval);
  return out;
}

void save_pgm_dir(const Dataset& data, const std::filesystem::path& dir) {
  data.validate();
  if (data.shape.channels != 1) throw FormatError("PGM datasets must be single-channel");
  std::filesystem::create_directories(dir);
  std::ofstream labels(dir / "labels.txt");
  for (std::size_t i = 0; i < data.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%06zu.pgm", i);
    Eigen::MatrixXd px(data.shape.height, data.shape.width);
    for (Index r = 0; r < px.rows(); ++r)
      for (Index c = 0; c < px.cols(); ++c) px(r, c) = data.images[i][r * px.cols() + c];
    write_pgm(dir / name, px);
    labels << name << ' ' << data.labels[i] << '\n';
  }
}

Dataset load_pgm_dir(const std::filesystem::path& dir, Index classes) {
  std::ifstream labels(dir / "labels.txt");
  if (!labels) throw FormatError("missing labels.txt in " + dir.string());
  Dataset data;
  data.classes = classes;
  std::string line;
  while (std::getline(labels, line)) {
    std::istringstream is(line);
    std::string name;
    Index label = 0;
    if (!(is >> name)) continue;
    if (!(is >> label)) throw FormatError("bad labels.txt line: " + line);
    const Eigen::MatrixXd px = read_pgm(dir / name);
    const ImageShape shape{px.rows(), px.cols(), 1};
    if (data.images.empty()) data.shape = shape;
    else if (!(shape == data.shape)) throw FormatError("image " + name + " has a different size");
    Tensor img(shape.shape());
    for (Index r = 0; r < px.rows(); ++r)
      for (Index c = 0; c < px.cols(); ++c) img[r * px.cols() + c] = px(r, c);
    data.images.push_back(std::move(img));
    data.labels.push_back(label);
  }
  data.validate();
  return data;
}

Dataset load_dataset(const std::filesystem::path& path, Index classes) {
  if (std::filesystem::is_directory(path)) return load_pgm_dir(path, classes);
  return load_idx(path, classes);
}

}  // namespace hsets
