#include "hsets/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <thread>

#include "hsets/axioms.hpp"
#include "hsets/errors.hpp"
#include "hsets/seed.hpp"

namespace hsets {

std::uint64_t image_seed(std::uint64_t master, std::uint64_t stream_id, std::size_t image) {
  return derive_seed(derive_seed(master, stream_id), image);
}

OutputDir::OutputDir(std::filesystem::path root, std::string stamp) : root_(std::move(root)), stamp_(std::move(stamp)) {
  std::filesystem::create_directories(root_);
}

std::filesystem::path OutputDir::file(const std::string& relative) const {
  const std::filesystem::path rel = std::filesystem::path(relative).lexically_normal();
  if (rel.empty() || rel.is_absolute() || rel.has_root_name() || *rel.begin() == "..")
    throw ConfigError("refusing to write '" + relative + "' outside the output directory");
  const std::filesystem::path full = root_ / rel;
  std::filesystem::create_directories(full.parent_path());
  return full;
}

void OutputDir::write_text(const std::string& relative, const std::string& body) const {
  const auto path = file(relative);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  f << "# " << stamp_ << '\n' << body;
  if (!f) throw FormatError("failed writing " + path.string());
}

std::string image_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%06zu", index);
  return buf;
}

namespace {

std::string stamp_of(const RunConfig& config) {
  return "hsets config " + config.hash + " seed " + std::to_string(config.seed);
}

bool synthetic(const RunConfig& config) { return config.data.source == "decoy" || config.data.source == "digits"; }

Dataset synthetic_split(const RunConfig& config, std::size_t count, std::uint64_t digits_stream,
                        std::uint64_t decoy_stream, DecoyVariant variant) {
  Dataset base = make_synthetic_digits(count, derive_seed(config.seed, digits_stream), config.data.digits);
  base.classes = config.data.classes;
  if (config.data.source == "digits") return base;
  return make_decoy_mnist(base, config.data.patch_size, derive_seed(config.seed, decoy_stream), variant);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

Dataset load_training_data(const RunConfig& config) {
  if (synthetic(config))
    return synthetic_split(config, config.data.train_size, stream::kTrainDigits, stream::kTrainDecoy,
                           config.data.train_decoy);
  if (config.data.train_path.empty()) throw ConfigError("no training data: set data.train");
  return load_dataset(config.data.train_path, config.data.classes);
}

Dataset load_test_data(const RunConfig& config) {
  if (synthetic(config))
    return synthetic_split(config, config.data.test_size, stream::kTestDigits, stream::kTestDecoy,
                           config.data.test_decoy);
  return load_dataset(config.data.source, config.data.classes);
}

NetworkSpec network_for(const RunConfig& config, const Dataset& data) {
  if (config.model.arch == "cnn") return NetworkSpec::reference_cnn(data.shape, data.classes, config.model.tau);
  return NetworkSpec::reference_mlp(data.shape, data.classes, config.model.tau);
}

Model train_model(const RunConfig& config, const Dataset& train) {
  TrainConfig t = config.train;
  t.seed = derive_seed(config.seed, stream::kTraining);
  Model model;
  model.spec = network_for(config, train);
  model.weights = train_sgd(model.spec, train, t);
  return model;
}

Workspace prepare_workspace(const RunConfig& config, std::ostream& log) {
  if (!config.model.path.empty()) return prepare_workspace(config, load_model(config.model.path), log);
  log << "training " << config.model.arch << " on " << config.data.source << '\n';
  return prepare_workspace(config, train_model(config, load_training_data(config)), log);
}

Workspace prepare_workspace(const RunConfig& config, Model model, std::ostream& log) {
  Workspace ws;
  ws.test = load_test_data(config);
  ws.test.validate();
  if (ws.test.empty()) throw ConfigError("test data is empty");
  const ImageShape& s = ws.test.shape;
  if (model.spec.input.height != s.height || model.spec.input.width != s.width ||
      model.spec.input.channels != s.channels)
    throw ShapeError("model input does not match the test images");
  ws.model = std::move(model);

  Classifier classifier(ws.model);
  Index correct = 0;
  for (std::size_t i = 0; i < ws.test.size(); ++i) {
    const Index c = classifier.predict_class(ws.test.images[i]);
    if (c == ws.test.labels[i]) ++correct;
    if (ws.selected.size() < config.images && (!config.correct_only || c == ws.test.labels[i])) {
      ws.selected.push_back(i);
      ws.targets.push_back(c);
    }
  }
  ws.test_accuracy = static_cast<double>(correct) / static_cast<double>(ws.test.size());
  if (ws.selected.empty()) throw UndefinedError("no test image qualifies for explanation");

  ws.baseline = Tensor(ws.test.images[0].shape());
  if (config.baseline == BaselineKind::Mean) {
    for (const Tensor& img : ws.test.images) ws.baseline.data() += img.data();
    ws.baseline.data() /= static_cast<double>(ws.test.size());
  }
  if (config.data.source == "decoy") ws.patch = decoy_patch_pixels(s, config.data.patch_size);
  log << "test accuracy " << fmt(ws.test_accuracy) << ", " << ws.selected.size() << " images selected\n";
  return ws;
}

MaskSet make_masks(const RunConfig& config, const Tensor& image, std::size_t index) {
  const Index h = image.shape()[0], w = image.shape()[1];
  switch (config.segmentation.mode) {
    case SegmentationMode::Quickshift: return quickshift_segment(image, config.segmentation.quickshift);
    case SegmentationMode::Grid: return grid_segment(h, w, config.segmentation.grid_cell);
    case SegmentationMode::None: return no_segmentation(h, w);
    case SegmentationMode::External: {
      const auto path = config.segmentation.masks_dir / (image_name(index) + ".txt");
      if (!std::filesystem::exists(path)) throw ConfigError("missing mask file " + path.string());
      return load_masks(path, h, w);
    }
  }
  throw ConfigError("unknown segmentation mode");
}

ImageExplanation explain_image(Tape& tape, const Tensor& x, const Tensor& baseline, std::size_t index, Index target,
                               const RunConfig& config) {
  ImageExplanation e;
  e.index = index;
  e.target = target;
  const PathGradients path(tape, x, baseline, target, config.idg.m);
  e.ig = config.ig_steps == config.idg.m ? path.integrated_gradients()
                                         : integrated_gradients(tape, x, baseline, target, config.ig_steps);
  e.masks = make_masks(config, x, index);
  DetectionConfig det = config.detection;
  det.seed = image_seed(config.seed, stream::kDetection, index);
  e.sets = generate_sets(tape, x, target, e.masks, e.ig, det);
  e.sets.image_id = static_cast<Index>(index);
  IDGConfig idg = config.idg;
  idg.seed = image_seed(config.seed, stream::kIdg, index);
  e.attribution = attribute_sets(path, e.sets, idg, config.aggregation);
  return e;
}

void for_each_image(const Model& model, const std::vector<std::size_t>& indices, int workers,
                    const std::function<void(Classifier&, std::size_t slot)>& fn) {
  const std::size_t n = indices.size();
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&]() {
    Classifier classifier(model);
    for (std::size_t slot = next++; slot < n; slot = next++) {
      try {
        fn(classifier, slot);
      } catch (...) {
        errors[slot] = std::current_exception();
      }
    }
  };
  const auto threads = static_cast<std::size_t>(std::max(1, workers));
  if (threads == 1 || n < 2) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(threads, n); ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (std::size_t slot = 0; slot < n; ++slot) {
    if (!errors[slot]) continue;
    const std::string where = "image " + std::to_string(indices[slot]) + ": ";
    try {
      std::rethrow_exception(errors[slot]);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    } catch (const std::exception& e) {
      throw Error(where + e.what());
    }
  }
}

std::vector<ImageExplanation> explain_all(const Workspace& ws, const RunConfig& config) {
  std::vector<ImageExplanation> out(ws.selected.size());
  for_each_image(ws.model, ws.selected, config.workers, [&](Classifier& c, std::size_t slot) {
    const std::size_t i = ws.selected[slot];
    out[slot] = explain_image(c.tape(), ws.test.images[i], ws.baseline, i, ws.targets[slot], config);
  });
  return out;
}

SaliencyMap method_map(const std::string& method, Classifier& classifier, const Workspace& ws, std::size_t slot,
                       const RunConfig& config, const ImageExplanation* explanation) {
  const std::size_t index = ws.selected[slot];
  const Tensor& x = ws.test.images[index];
  const Index pixels = ws.test.shape.pixels();
  if (method == "hsets") {
    if (explanation) return explanation->attribution.saliency;
    return explain_image(classifier.tape(), x, ws.baseline, index, ws.targets[slot], config).attribution.saliency;
  }
  if (method == "ig") {
    if (explanation && config.ig_steps == config.idg.m) return explanation->ig.cwiseAbs();
    return integrated_gradients(classifier.tape(), x, ws.baseline, ws.targets[slot], config.ig_steps).cwiseAbs();
  }
  if (method == "random") {
    std::mt19937_64 rng(image_seed(config.seed, stream::kRandomMap, index));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    SaliencyMap m(pixels);
    for (Index p = 0; p < pixels; ++p) m(p) = u(rng);
    return m;
  }
  if (method == "oracle") {
    if (ws.patch.empty()) throw ConfigError("the oracle method needs synthetic decoy data");
    SaliencyMap m = SaliencyMap::Zero(pixels);
    for (Index p : ws.patch) m(p) = 1.0;
    return m;
  }
  throw ConfigError("unknown method '" + method + "'");
}

namespace {

std::vector<ImageExplanation> load_explanations(const Workspace& ws, const std::filesystem::path& dir) {
  std::vector<ImageExplanation> out(ws.selected.size());
  for (std::size_t slot = 0; slot < ws.selected.size(); ++slot) {
    const auto path = dir / "attributions" / (image_name(ws.selected[slot]) + ".txt");
    if (!std::filesystem::exists(path))
      throw ConfigError("missing attributions for image " + std::to_string(ws.selected[slot]) + " (" +
                        path.string() + ")");
  }
  for (std::size_t slot = 0; slot < ws.selected.size(); ++slot) {
    const auto path = dir / "attributions" / (image_name(ws.selected[slot]) + ".txt");
    std::ifstream f(path);
    out[slot].index = ws.selected[slot];
    out[slot].target = ws.targets[slot];
    out[slot].attribution = read_attribution(f);
    if (out[slot].attribution.saliency.size() != ws.test.shape.pixels())
      throw FormatError(path.string() + " has the wrong saliency size");
  }
  return out;
}

double finite_or_nan(const std::function<double()>& f) {
  try {
    return f();
  } catch (const UndefinedError&) {
    return std::nan("");
  }
}

Summary summarize_finite(const std::vector<double>& v) {
  std::vector<double> kept;
  for (double x : v)
    if (std::isfinite(x)) kept.push_back(x);
  return summarize(kept);
}

RoadConfig road_for(const RunConfig& config) {
  RoadConfig road = config.evaluate.road;
  road.seed = config.seed;
  return road;
}

}  // namespace

EvaluateResult evaluate_methods(const Workspace& ws, const RunConfig& config,
                                const std::vector<ImageExplanation>* explanations) {
  EvaluateResult result;
  result.methods = config.evaluate.methods;
  const std::size_t n = ws.selected.size();
  const RoadConfig road = road_for(config);
  road.validate(ws.test.shape.pixels());

  std::vector<ImageExplanation> owned;
  const bool need_hsets = std::find(result.methods.begin(), result.methods.end(), "hsets") != result.methods.end();
  if (need_hsets && !explanations) {
    owned = config.evaluate.attributions.empty() ? explain_all(ws, config)
                                                 : load_explanations(ws, config.evaluate.attributions);
    explanations = &owned;
  }

  Dataset subset;
  subset.shape = ws.test.shape;
  subset.classes = ws.test.classes;
  for (std::size_t i : ws.selected) {
    subset.images.push_back(ws.test.images[i]);
    subset.labels.push_back(ws.test.labels[i]);
  }
  const auto counts = fraction_schedule(config.evaluate.curve_fractions, ws.test.shape.pixels());

  for (const std::string& method : result.methods) {
    MethodScores& s = result.scores[method];
    s.gini.assign(n, 0.0);
    s.road_aopc.assign(n, 0.0);
    s.faithfulness.assign(n, 0.0);
    std::vector<SaliencyMap> maps(n);
    for_each_image(ws.model, ws.selected, config.workers, [&](Classifier& c, std::size_t slot) {
      const std::size_t index = ws.selected[slot];
      const ImageExplanation* e = nullptr;
      if (explanations && (method == "hsets" || (*explanations)[slot].ig.size() > 0)) e = &(*explanations)[slot];
      maps[slot] = method_map(method, c, ws, slot, config, e);
      const Tensor& x = ws.test.images[index];
      s.gini[slot] = finite_or_nan([&] { return gini(maps[slot]); });
      std::mt19937_64 rng(image_seed(config.seed, stream::kRoad, index));
      s.road_aopc[slot] = road_aopc(c.tape(), x, maps[slot], road, rng);
      FaithfulnessConfig fc = config.evaluate.faithfulness;
      fc.seed = image_seed(config.seed, stream::kFaithfulness, index);
      s.faithfulness[slot] = finite_or_nan([&] { return faithfulness_correlation(c.tape(), x, ws.baseline, maps[slot], fc); });
    });
    Classifier classifier(ws.model);
    s.curve = road_curve(classifier.tape(), subset, maps, counts, road.impute, derive_seed(config.seed, stream::kCurve));
    result.rows.push_back({method, config.model.name, "gini", summarize_finite(s.gini)});
    result.rows.push_back({method, config.model.name, "road_aopc", summarize_finite(s.road_aopc)});
    result.rows.push_back({method, config.model.name, "faithfulness", summarize_finite(s.faithfulness)});
  }
  return result;
}

RunConfig apply_axis(const RunConfig& config, const std::string& axis, const std::string& value) {
  RunConfig c = config;
  try {
    std::size_t used = 0;
    if (axis == "nu") {
      c.detection.nu = std::stol(value, &used);
    } else if (axis == "mu") {
      c.detection.mu = std::stod(value, &used);
    } else if (axis == "k") {
      c.detection.k = std::stol(value, &used);
    } else if (axis == "seed_strategy") {
      c.detection.seed_strategy = parse_seed_strategy(value);
      used = value.size();
    } else if (axis == "segmentation") {
      c.segmentation.mode = parse_segmentation_mode(value);
      used = value.size();
    } else {
      default_axis_values(axis);
    }
    if (used != value.size()) throw ConfigError("trailing characters");
    c.validate();
  } catch (const std::exception& e) {
    throw ConfigError("invalid " + axis + " value '" + value + "': " + e.what());
  }
  return c;
}

std::vector<AblateRow> run_ablation(const Workspace& ws, const RunConfig& config) {
  const std::vector<std::string> values =
      config.ablate.values.empty() ? default_axis_values(config.ablate.axis) : config.ablate.values;
  std::vector<RunConfig> configs;
  for (const auto& v : values) configs.push_back(apply_axis(config, config.ablate.axis, v));

  std::vector<AblateRow> rows;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const RunConfig& c = configs[i];
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<ImageExplanation> ex = explain_all(ws, c);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const RoadConfig road = road_for(c);
    std::vector<double> g(ex.size()), a(ex.size());
    for_each_image(ws.model, ws.selected, c.workers, [&](Classifier& cl, std::size_t slot) {
      const std::size_t index = ws.selected[slot];
      g[slot] = finite_or_nan([&] { return gini(ex[slot].attribution.saliency); });
      std::mt19937_64 rng(image_seed(c.seed, stream::kRoad, index));
      a[slot] = road_aopc(cl.tape(), ws.test.images[index], ex[slot].attribution.saliency, road, rng);
    });
    rows.push_back({values[i], summarize_finite(g).mean, summarize_finite(a).mean, seconds});
  }
  return rows;
}

namespace {

void write_config(const OutputDir& out, const ConfigFile& file) { out.write_text("config.ini", file.dump()); }

std::string sets_text(const SetCollection& sets) {
  std::ostringstream os;
  write_sets(os, sets);
  return os.str();
}

std::string attribution_text(const AttributionResult& r) {
  std::ostringstream os;
  write_attribution(os, r);
  return os.str();
}

Eigen::MatrixXd normalized_image(const SaliencyMap& map, Index height, Index width) {
  Eigen::MatrixXd img(height, width);
  const double lo = map.minCoeff(), hi = map.maxCoeff();
  for (Index r = 0; r < height; ++r)
    for (Index c = 0; c < width; ++c) img(r, c) = hi > lo ? (map(r * width + c) - lo) / (hi - lo) : 0.0;
  return img;
}

}  // namespace

int cmd_train(const RunConfig& config, const ConfigFile& file, std::ostream& log) {
  const OutputDir out(config.output, stamp_of(config));
  write_config(out, file);
  const Dataset train = load_training_data(config);
  log << "training " << config.model.arch << " on " << train.size() << " images\n";
  const Model model = train_model(config, train);
  save_model(model.spec, model.weights, out.file("model.hsm"));
  Classifier classifier(model);
  const double train_acc = accuracy(classifier, train);
  const double test_acc = accuracy(classifier, load_test_data(config));
  std::ostringstream os;
  os << "model model.hsm\narch " << config.model.arch << "\ntrain_images " << train.size() << "\ntrain_accuracy "
     << fmt(train_acc) << "\ntest_accuracy " << fmt(test_acc) << '\n';
  out.write_text("model.txt", os.str());
  log << "train accuracy " << fmt(train_acc) << ", test accuracy " << fmt(test_acc) << '\n';
  return 0;
}

int cmd_segment(const RunConfig& config, const ConfigFile& file, std::ostream& log) {
  const OutputDir out(config.output, stamp_of(config));
  write_config(out, file);
  const Workspace ws = prepare_workspace(config, log);
  std::vector<MaskSet> masks(ws.selected.size());
  for_each_image(ws.model, ws.selected, config.workers, [&](Classifier&, std::size_t slot) {
    masks[slot] = make_masks(config, ws.test.images[ws.selected[slot]], ws.selected[slot]);
  });
  for (std::size_t slot = 0; slot < masks.size(); ++slot)
    save_masks(masks[slot], out.file("masks/" + image_name(ws.selected[slot]) + ".txt"), out.stamp());
  log << "wrote masks for " << masks.size() << " images\n";
  return 0;
}

int cmd_detect(const RunConfig& config, const ConfigFile& file, std::ostream& log) {
  const OutputDir out(config.output, stamp_of(config));
  write_config(out, file);
  const Workspace ws = prepare_workspace(config, log);
  const auto ex = explain_all(ws, config);
  for (const auto& e : ex) out.write_text("sets/" + image_name(e.index) + ".txt", sets_text(e.sets));
  log << "wrote sets for " << ex.size() << " images\n";
  return 0;
}

int cmd_attribute(const RunConfig& config, const ConfigFile& file, std::ostream& log) {
  const OutputDir out(config.output, stamp_of(config));
  write_config(out, file);
  const Workspace ws = prepare_workspace(config, log);
  const auto ex = explain_all(ws, config);
  const Index h = ws.test.shape.height, w = ws.test.shape.width;
  std::ostringstream manifest;
  manifest << std::setprecision(17);
  manifest << "seed " << config.seed << "\nconfig_hash " << config.hash << "\nimages " << ex.size() << '\n';
  for (const auto& e : ex) {
    const std::string name = image_name(e.index);
    out.write_text("sets/" + name + ".txt", sets_text(e.sets));
    out.write_text("attributions/" + name + ".txt", attribution_text(e.attribution));
    write_pgm(out.file("saliency/" + name + ".pgm"), normalized_image(e.attribution.saliency, h, w), out.stamp());
    manifest << "image " << e.index << " class " << e.target << " sets " << e.sets.sets.size()
             << (e.sets.exhausted ? " exhausted" : "") << '\n';
    for (std::size_t s = 0; s < e.sets.sets.size(); ++s) {
      const auto& set = e.sets.sets[s];
      manifest << "  set " << s << " seed " << set.seed << " size " << set.pixels.size() << " score "
               << e.attribution.scores[s] << '\n';
    }
  }
  manifest << "\n[config]\n" << file.dump();
  out.write_text("manifest.txt", manifest.str());
  log << "attributed " << ex.size() << " images\n";
  return 0;
}

int cmd_evaluate(const RunConfig& config, const ConfigFile& file, std::ostream& log) {
  const OutputDir out(config.output, stamp_of(config));
  write_config(out, file);
  const Workspace ws = prepare_workspace(config, log);
  const EvaluateResult r = evaluate_methods(ws, config);

  std::ostringstream metrics;
  write_metric_csv(metrics, r.rows);
  out.write_text("metrics.csv", metrics.str());

  std::ostringstream per;
  per << std::setprecision(17) << "image,method,gini,road_aopc,faithfulness\n";
  for (const auto& m : r.methods) {
    const MethodScores& s = r.scores.at(m);
    for (std::size_t slot = 0; slot < ws.selected.size(); ++slot)
      per << ws.selected[slot] << ',' << m << ',' << s.gini[slot] << ',' << s.road_aopc[slot] << ','
          << s.faithfulness[slot] << '\n';
  }
  out.write_text("per_image.csv", per.str());

  for (const auto& m : r.methods) {
    std::ostringstream curve;
    write_curve_csv(curve, r.scores.at(m).curve);
    out.write_text("curves/" + m + ".csv", curve.str());
  }
  for (const auto& row : r.rows)
    log << row.method << ' ' << row.metric << ' ' << fmt(row.summary.mean) << " +- " << fmt(row.summary.std) << '\n';
  return 0;
}

int cmd_ablate(const RunConfig& config, const ConfigFile& file, std::ostream& log) {
  const OutputDir out(config.output, stamp_of(config));
  write_config(out, file);
  const Workspace ws = prepare_workspace(config, log);
  const auto rows = run_ablation(ws, config);
  std::ostringstream os;
  os << std::setprecision(10) << "value,sparsity,aopc,seconds\n";
  for (const auto& r : rows) {
    os << r.value << ',' << r.sparsity << ',' << r.aopc << ',' << r.seconds << '\n';
    log << config.ablate.axis << '=' << r.value << " sparsity " << fmt(r.sparsity) << " aopc " << fmt(r.aopc) << " "
        << fmt(r.seconds) << " s\n";
  }
  out.write_text("ablate_" + config.ablate.axis + ".csv", os.str());
  return 0;
}

int cmd_axioms(const RunConfig& config, const ConfigFile& file, std::ostream& log) {
  const OutputDir out(config.output, stamp_of(config));
  write_config(out, file);
  const AxiomReport report = run_axiom_suite(config.axioms);
  std::ostringstream os;
  write_axiom_report(os, report);
  out.write_text("axioms.txt", os.str());
  log << os.str();
  return report.all_passed() ? 0 : 3;
}

}  // namespace hsets
