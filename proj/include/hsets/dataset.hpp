#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hsets/tensor.hpp"

namespace hsets {

/// Images in [0, 1] with class labels.
struct Dataset {
  ImageShape shape;
  Index classes = 10;
  std::vector<Tensor> images;
  std::vector<Index> labels;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
  void validate() const;
  Dataset slice(std::size_t begin, std::size_t end) const;
};

struct SyntheticDigitsConfig {
  ImageShape shape{28, 28, 1};
  double max_rotation = 0.25;  // radians
  double max_shear = 0.2;
  double min_scale = 0.8;
  double max_scale = 1.1;
  double max_shift = 1.5;       // pixels
  double control_jitter = 0.06;  // in glyph units
  double min_thickness = 1.2;    // pixels
  double max_thickness = 2.4;
  double noise = 0.08;
};

/// Stroke-rendered digit glyphs with random affine and stroke jitter. The
/// glyph occupies the central 20 x 20 box, so the 4-pixel image border stays 0.
Dataset make_synthetic_digits(std::size_t count, std::uint64_t seed, const SyntheticDigitsConfig& config = {});

enum class DecoyVariant {
  Correlated,  // patch intensity encodes the true label
  Randomized,  // patch intensity encodes a random label
  Removed,     // no patch
};

/// Pixel indices (row-major over H x W) of the top-left decoy patch.
std::vector<Index> decoy_patch_pixels(const ImageShape& shape, Index patch_size);

/// Paints a patch_size x patch_size patch in the top-left corner whose
/// intensity is label / (classes - 1).
Dataset make_decoy_mnist(const Dataset& base_digits, Index patch_size, std::uint64_t seed,
                         DecoyVariant variant = DecoyVariant::Correlated);

/// IDX files: "<prefix>-images.idx" (float32 or ubyte) and "<prefix>-labels.idx" (ubyte).
void save_idx(const Dataset& data, const std::filesystem::path& prefix);
Dataset load_idx(const std::filesystem::path& prefix, Index classes = 10);

/// Directory of 8-bit PGM images plus "labels.txt" (one "file label" pair per line).
void save_pgm_dir(const Dataset& data, const std::filesystem::path& dir);
Dataset load_pgm_dir(const std::filesystem::path& dir, Index classes = 10);

/// Loads either format: a directory is read as PGM, anything else as an IDX prefix.
Dataset load_dataset(const std::filesystem::path& path, Index classes = 10);

/// Binary (P5) 8-bit greyscale image.
void write_pgm(const std::filesystem::path& path, const Eigen::MatrixXd& pixels, const std::string& comment = {});
Eigen::MatrixXd read_pgm(const std::filesystem::path& path);

}  // namespace hsets
