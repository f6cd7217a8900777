#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "hsets/attribution.hpp"
#include "hsets/config.hpp"
#include "hsets/dataset.hpp"
#include "hsets/detection.hpp"
#include "hsets/metrics.hpp"
#include "hsets/model.hpp"
#include "hsets/segmentation.hpp"

namespace hsets {

/// Stream ids for derive_seed(master, id). Per-image streams derive once more
/// from the image index.
namespace stream {
inline constexpr std::uint64_t kTrainDigits = 1;
inline constexpr std::uint64_t kTestDigits = 2;
inline constexpr std::uint64_t kTrainDecoy = 3;
inline constexpr std::uint64_t kTestDecoy = 4;
inline constexpr std::uint64_t kTraining = 5;
inline constexpr std::uint64_t kDetection = 6;
inline constexpr std::uint64_t kIdg = 7;
inline constexpr std::uint64_t kRoad = 8;
inline constexpr std::uint64_t kFaithfulness = 9;
inline constexpr std::uint64_t kRandomMap = 10;
inline constexpr std::uint64_t kCurve = 11;
}  // namespace stream

std::uint64_t image_seed(std::uint64_t master, std::uint64_t stream_id, std::size_t image);

/// Files under one root. Relative names only; anything resolving outside the
/// root is refused.
class OutputDir {
 public:
  OutputDir(std::filesystem::path root, std::string stamp);

  /// Creates parent directories and returns the full path.
  std::filesystem::path file(const std::string& relative) const;
  const std::filesystem::path& root() const { return root_; }
  /// "hsets config <hash> seed <seed>", the first comment of every artifact.
  const std::string& stamp() const { return stamp_; }

  /// Writes `body` after a "# <stamp>" line.
  void write_text(const std::string& relative, const std::string& body) const;

 private:
  std::filesystem::path root_;
  std::string stamp_;
};

std::string image_name(std::size_t index);  // "img_000042"

Dataset load_training_data(const RunConfig& config);
Dataset load_test_data(const RunConfig& config);
NetworkSpec network_for(const RunConfig& config, const Dataset& data);
Model train_model(const RunConfig& config, const Dataset& train);

/// Test data, model and target images shared by every command.
struct Workspace {
  Dataset test;
  Model model;
  Tensor baseline;
  std::vector<Index> patch;             // decoy patch pixels; empty unless the source is synthetic decoy data
  std::vector<std::size_t> selected;    // test indices to explain
  std::vector<Index> targets;           // argmax class per selected image
  double test_accuracy = 0.0;
};

/// Loads or trains the model and picks the first run.images test images
/// (correctly classified ones when run.correct_only).
Workspace prepare_workspace(const RunConfig& config, std::ostream& log);
Workspace prepare_workspace(const RunConfig& config, Model model, std::ostream& log);

MaskSet make_masks(const RunConfig& config, const Tensor& image, std::size_t index);

struct ImageExplanation {
  std::size_t index = 0;
  Index target = 0;
  MaskSet masks;
  SaliencyMap ig;
  SetCollection sets;
  AttributionResult attribution;
};

ImageExplanation explain_image(Tape& tape, const Tensor& x, const Tensor& baseline, std::size_t index, Index target,
                               const RunConfig& config);

/// Runs fn(classifier, slot) for slot in [0, n) on config.workers threads, one
/// tape copy per thread. The first failing slot's error is rethrown with the
/// image index prepended.
void for_each_image(const Model& model, const std::vector<std::size_t>& indices, int workers,
                    const std::function<void(Classifier&, std::size_t slot)>& fn);

std::vector<ImageExplanation> explain_all(const Workspace& ws, const RunConfig& config);

/// Saliency of one method for selected image `slot`: hsets, ig (|IG|),
/// random (seeded uniform) or oracle (decoy patch indicator).
SaliencyMap method_map(const std::string& method, Classifier& classifier, const Workspace& ws, std::size_t slot,
                       const RunConfig& config, const ImageExplanation* explanation);

struct MethodScores {
  std::vector<double> gini;
  std::vector<double> road_aopc;
  std::vector<double> faithfulness;
  RoadCurve curve;
};

struct EvaluateResult {
  std::vector<std::string> methods;
  std::map<std::string, MethodScores> scores;
  std::vector<MetricRow> rows;
};

/// hsets maps come from `explanations` when given (one per selected image).
EvaluateResult evaluate_methods(const Workspace& ws, const RunConfig& config,
                                const std::vector<ImageExplanation>* explanations = nullptr);

struct AblateRow {
  std::string value;
  double sparsity = 0.0;  // mean Gini of the H-Sets maps
  double aopc = 0.0;      // mean ROAD AOPC
  double seconds = 0.0;   // wall-clock of detection + attribution
};

/// Returns config with one axis value applied.
RunConfig apply_axis(const RunConfig& config, const std::string& axis, const std::string& value);
std::vector<AblateRow> run_ablation(const Workspace& ws, const RunConfig& config);

// Subcommands. Each writes under config.output and returns the process exit
// code; errors propagate as exceptions.
int cmd_train(const RunConfig& config, const ConfigFile& file, std::ostream& log);
int cmd_segment(const RunConfig& config, const ConfigFile& file, std::ostream& log);
int cmd_detect(const RunConfig& config, const ConfigFile& file, std::ostream& log);
int cmd_attribute(const RunConfig& config, const ConfigFile& file, std::ostream& log);
int cmd_evaluate(const RunConfig& config, const ConfigFile& file, std::ostream& log);
int cmd_ablate(const RunConfig& config, const ConfigFile& file, std::ostream& log);
int cmd_axioms(const RunConfig& config, const ConfigFile& file, std::ostream& log);

}  // namespace hsets
