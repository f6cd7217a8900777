#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <functional>
#include <fstream>
#include <queue>
#include <random>
#include <set>

#include "hsets/dataset.hpp"
#include "hsets/errors.hpp"
#include "hsets/segmentation.hpp"

using namespace hsets;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "hsets_test_segmentation";
  fs::create_directories(dir);
  return dir / name;
}

bool four_connected(const std::vector<Index>& px, Index width) {
  const std::set<Index> members(px.begin(), px.end());
  std::set<Index> seen{px.front()};
  std::queue<Index> q;
  q.push(px.front());
  while (!q.empty()) {
    const Index p = q.front();
    q.pop();
    const Index c = p % width;
    for (Index nb : {p - width, p + width, c > 0 ? p - 1 : -1, c + 1 < width ? p + 1 : -1}) {
      if (nb < 0 || !members.count(nb) || seen.count(nb)) continue;
      seen.insert(nb);
      q.push(nb);
    }
  }
  return seen.size() == members.size();
}

void check_partition(const MaskSet& m) {
  std::vector<int> cover(static_cast<std::size_t>(m.height * m.width), 0);
  for (const auto& px : m.masks)
    for (Index p : px) ++cover[static_cast<std::size_t>(p)];
  for (int c : cover) CHECK(c == 1);
}

Tensor image_from(Index h, Index w, const std::function<double(Index, Index)>& f) {
  Tensor img(Shape{h, w, 1});
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c) img[r * w + c] = f(r, c);
  return img;
}

}  // namespace

TEST_CASE("grid segmentation") {
  const MaskSet g = grid_segment(4, 4, 2);
  REQUIRE(g.size() == 4);
  for (const auto& px : g.masks) CHECK(px.size() == 4);
  CHECK(g.masks[0] == std::vector<Index>{0, 1, 4, 5});
  check_partition(g);

  const MaskSet ragged = grid_segment(5, 7, 3);
  CHECK(ragged.size() == 2 * 3);
  check_partition(ragged);
  CHECK_NOTHROW(ragged.validate());

  CHECK(grid_segment(6, 9, 9).size() == 1);
  CHECK(grid_segment(6, 9, 100).masks[0].size() == 54);
  CHECK_THROWS_AS(grid_segment(4, 4, 0), ConfigError);
}

TEST_CASE("no segmentation is a single whole-image mask") {
  const MaskSet m = no_segmentation(28, 28);
  REQUIRE(m.size() == 1);
  CHECK(m.masks[0].size() == 784);
  CHECK(m == grid_segment(28, 28, 28));
}

TEST_CASE("quickshift on a constant image yields one mask") {
  for (double v : {0.0, 0.3, 1.0}) {
    const MaskSet m = quickshift_segment(image_from(20, 17, [&](Index, Index) { return v; }));
    CHECK(m.size() == 1);
  }
}

TEST_CASE("quickshift splits a two-level image at the boundary") {
  const Index h = 16, w = 20;
  const Tensor img = image_from(h, w, [&](Index, Index c) { return c < w / 2 ? 0.0 : 1.0; });
  for (double max_dist : {2.0, 4.0, 8.0, 12.0}) {
    QuickshiftParams p;
    p.max_dist = max_dist;
    const MaskSet m = quickshift_segment(img, p);
    REQUIRE(m.size() == 2);
    for (const auto& px : m.masks) {
      CHECK(px.size() == static_cast<std::size_t>(h * w / 2));
      const bool left = px.front() % w < w / 2;
      for (Index q : px) CHECK((q % w < w / 2) == left);
    }
  }
}

TEST_CASE("quickshift masks are 4-connected, disjoint and deterministic") {
  const Dataset digits = make_synthetic_digits(12, 3);
  for (const Tensor& img : digits.images) {
    const MaskSet m = quickshift_segment(img);
    CHECK_NOTHROW(m.validate());
    check_partition(m);
    for (const auto& px : m.masks) CHECK(four_connected(px, 28));
    CHECK(m == quickshift_segment(img));
  }
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Tensor noise = image_from(15, 15, [&](Index, Index) { return u(rng); });
  const MaskSet m = quickshift_segment(noise);
  for (const auto& px : m.masks) CHECK(four_connected(px, 15));
  check_partition(m);
}

TEST_CASE("quickshift does not merge across a strong discontinuity") {
  // Blocks alternating between 0 and 0.6; ratio * 0.6 exceeds max_dist.
  const Tensor img = image_from(18, 18, [](Index r, Index c) { return 0.6 * static_cast<double>((r / 6 + c / 9) % 2); });
  const MaskSet m = quickshift_segment(img);
  for (const auto& px : m.masks) {
    const double v = img[px.front()];
    for (Index q : px) CHECK(img[q] == v);
  }
}

TEST_CASE("quickshift rejects degenerate parameters") {
  const Tensor img = image_from(4, 4, [](Index, Index) { return 0.5; });
  QuickshiftParams p;
  p.max_dist = 0.0;
  CHECK_THROWS_AS(quickshift_segment(img, p), ConfigError);
  p = {};
  p.kernel_size = -1.0;
  CHECK_THROWS_AS(quickshift_segment(img, p), ConfigError);
}

TEST_CASE("label-map files") {
  {
    std::ofstream f(scratch("ones.txt"));
    f << "3 4\n";
    for (int i = 0; i < 12; ++i) f << "1 ";
  }
  const MaskSet ones = load_masks(scratch("ones.txt"), 3, 4);
  REQUIRE(ones.size() == 1);
  CHECK(ones.masks[0].size() == 12);

  {
    std::ofstream f(scratch("bg.txt"));
    f << "4 4\n";
    for (int i = 0; i < 16; ++i) f << (i < 8 ? 0 : (i % 2 ? 1 : 2)) << ' ';
  }
  const MaskSet bg = load_masks(scratch("bg.txt"), 4, 4);
  REQUIRE(bg.size() == 2);
  CHECK(bg.masks[0] == std::vector<Index>{9, 11, 13, 15});
  CHECK(bg.masks[1] == std::vector<Index>{8, 10, 12, 14});

  CHECK_THROWS_AS(load_masks(scratch("bg.txt"), 4, 5), ShapeError);
  {
    std::ofstream f(scratch("zero.txt"));
    f << "2 2\n0 0 0 0\n";
  }
  CHECK_THROWS_AS(load_masks(scratch("zero.txt"), 2, 2), FormatError);
  {
    std::ofstream f(scratch("short.txt"));
    f << "2 2\n1 1 1\n";
  }
  CHECK_THROWS_AS(load_masks(scratch("short.txt"), 2, 2), ShapeError);
}

TEST_CASE("run-length files and round trips") {
  {
    std::ofstream f(scratch("rle.txt"));
    f << "0:3,8:2\n\n2:4\n";
  }
  const MaskSet rle = load_masks(scratch("rle.txt"), 3, 4);
  REQUIRE(rle.size() == 2);
  CHECK(rle.masks[0] == std::vector<Index>{0, 1, 2, 8, 9});
  CHECK(rle.masks[1] == std::vector<Index>{2, 3, 4, 5});
  CHECK_FALSE(rle.disjoint());

  save_masks(rle, scratch("rle_out.txt"));
  CHECK(load_masks(scratch("rle_out.txt"), 3, 4) == rle);

  const MaskSet q = quickshift_segment(make_synthetic_digits(1, 9).images[0]);
  save_masks(q, scratch("q.txt"));
  CHECK(load_masks(scratch("q.txt"), 28, 28) == q);

  {
    std::ofstream f(scratch("oob.txt"));
    f << "10:5\n";
  }
  CHECK_THROWS_AS(load_masks(scratch("oob.txt"), 3, 4), ShapeError);
}

TEST_CASE("masks iterate by descending size with ties by id") {
  MaskSet m{4, 4, {{0}, {1, 2, 3}, {4, 5}, {6, 7, 8}}};
  CHECK(m.iteration_order() == std::vector<std::size_t>{1, 3, 2, 0});
}
