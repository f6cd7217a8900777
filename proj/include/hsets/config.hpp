#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "hsets/attribution.hpp"
#include "hsets/axioms.hpp"
#include "hsets/dataset.hpp"
#include "hsets/detection.hpp"
#include "hsets/metrics.hpp"
#include "hsets/model.hpp"
#include "hsets/segmentation.hpp"

namespace hsets {

/// One known key: "section.key", its default and a one-line description.
struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
};

/// Every accepted key in print order.
const std::vector<ConfigKey>& config_keys();

/// Flat "key = value" text with [section] headers. '#' and ';' start comments.
/// Unknown keys are rejected; missing keys take their defaults.
class ConfigFile {
 public:
  ConfigFile();

  static ConfigFile parse(std::istream& is, const std::string& origin = "<config>");
  static ConfigFile load(const std::filesystem::path& path);

  void set(const std::string& name, const std::string& value);
  const std::string& get(const std::string& name) const;

  /// Canonical text: every key in print order, grouped by section.
  std::string dump() const;
  /// FNV-1a 64 over every key except run.output and run.workers, as 16 hex
  /// digits.
  std::string hash() const;

 private:
  std::map<std::string, std::string> values_;
};

std::uint64_t fnv1a64(const std::string& bytes);

enum class SegmentationMode { Quickshift, Grid, None, External };
const char* to_string(SegmentationMode m);
SegmentationMode parse_segmentation_mode(const std::string& s);

enum class BaselineKind { Zero, Mean };

struct SegmentationSettings {
  SegmentationMode mode = SegmentationMode::Quickshift;
  QuickshiftParams quickshift;
  Index grid_cell = 4;
  std::filesystem::path masks_dir;  // External: one file per image, "img_NNNNNN.txt"
};

struct DataSettings {
  std::string source = "decoy";  // decoy, digits, or a dataset path
  std::string train_path;        // training data when source is a path
  std::size_t train_size = 6000;
  std::size_t test_size = 1000;
  Index patch_size = 4;
  DecoyVariant train_decoy = DecoyVariant::Correlated;
  DecoyVariant test_decoy = DecoyVariant::Correlated;
  Index classes = 10;
  SyntheticDigitsConfig digits;
};

struct ModelSettings {
  std::filesystem::path path;  // empty: train from [train]
  std::string arch = "mlp";
  double tau = 1e-3;
  std::string name;  // label in metric tables; defaults to the data source
};

struct EvaluateSettings {
  std::vector<std::string> methods{"hsets", "ig", "random", "oracle"};
  RoadConfig road;
  std::vector<double> curve_fractions;
  FaithfulnessConfig faithfulness;
  std::filesystem::path attributions;  // empty: compute on the fly
};

struct AblateSettings {
  std::string axis = "nu";
  std::vector<std::string> values;  // empty: default_axis_values(axis)
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output = "hsets-out";
  int workers = 1;
  std::size_t images = 100;
  bool correct_only = true;

  DataSettings data;
  ModelSettings model;
  TrainConfig train;
  SegmentationSettings segmentation;
  DetectionConfig detection;
  IDGConfig idg;
  Aggregation aggregation = Aggregation::Max;
  BaselineKind baseline = BaselineKind::Zero;
  Index ig_steps = 50;
  EvaluateSettings evaluate;
  AblateSettings ablate;
  AxiomConfig axioms;

  std::string hash;  // of the source ConfigFile

  static RunConfig from(const ConfigFile& file);
  void validate() const;
};

std::vector<std::string> split_list(const std::string& s);
std::vector<std::string> default_axis_values(const std::string& axis);

}  // namespace hsets
