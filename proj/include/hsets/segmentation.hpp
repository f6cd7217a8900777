#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "hsets/tensor.hpp"

namespace hsets {

/// Binary masks over an H x W grid, each stored as a sorted pixel index list
/// (row-major). Masks may overlap when loaded from a file.
struct MaskSet {
  Index height = 0;
  Index width = 0;
  std::vector<std::vector<Index>> masks;

  std::size_t size() const { return masks.size(); }
  bool empty() const { return masks.empty(); }
  /// Nonempty masks, in-range and duplicate-free indices.
  void validate() const;
  bool disjoint() const;
  /// Mask ids by descending pixel count, ties by ascending id.
  std::vector<std::size_t> iteration_order() const;
  /// Per-pixel mask id (-1 where uncovered). Requires disjoint masks.
  std::vector<Index> label_map() const;

  friend bool operator==(const MaskSet&, const MaskSet&) = default;
};

/// Disjoint ceil(H/cell) x ceil(W/cell) rectangles.
MaskSet grid_segment(Index height, Index width, Index cell);

/// One mask covering the whole image.
MaskSet no_segmentation(Index height, Index width);

struct QuickshiftParams {
  double kernel_size = 2.0;  // Gaussian bandwidth of the density estimate, in pixels
  double max_dist = 4.0;     // link radius in joint (space, ratio * intensity) coordinates
  double ratio = 8.0;        // weight of intensity against space
};

/// Mode-seeking superpixels on an (H, W, C) image in [0, 1]. Every pixel links
/// to the nearest pixel of higher density (ties by index) within max_dist; the
/// resulting trees are split into 4-connected masks.
MaskSet quickshift_segment(const Tensor& image, const QuickshiftParams& params = {});

/// Reads a label map ("H W" then H*W integers, 0 = background) or a run-length
/// list (one mask per line, "start:len,start:len,..."). Lines starting with
/// '#' are skipped.
MaskSet load_masks(const std::filesystem::path& path, Index height, Index width);

/// Writes a label map when the masks are disjoint, run-length lines otherwise.
void save_masks(const MaskSet& masks, const std::filesystem::path& path, const std::string& comment = {});

}  // namespace hsets
