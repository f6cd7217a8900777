#include "hsets/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <sstream>

#include "hsets/errors.hpp"

namespace hsets {

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"run.seed", "0", "master seed; every per-image stream derives from it"},
      {"run.output", "hsets-out", "output directory, the only place anything is written"},
      {"run.workers", "1", "parallel image workers"},
      {"run.images", "100", "test images to process"},
      {"run.correct_only", "true", "skip misclassified test images"},

      {"data.source", "decoy", "decoy | digits | path to an IDX prefix or PGM directory"},
      {"data.train", "", "training set path when data.source is a path"},
      {"data.train_size", "6000", "synthetic training images"},
      {"data.test_size", "1000", "synthetic test images"},
      {"data.patch_size", "4", "decoy patch side"},
      {"data.train_decoy", "correlated", "patch on training images: correlated | randomized | removed"},
      {"data.test_decoy", "correlated", "patch on test images: correlated | randomized | removed"},
      {"data.classes", "10", "number of classes"},
      {"data.rotation", "0.6", "max glyph rotation, radians"},
      {"data.shear", "0.5", "max glyph shear"},
      {"data.jitter", "0.15", "stroke control-point jitter"},
      {"data.noise", "0.3", "pixel noise amplitude"},

      {"model.path", "", "saved model; empty trains one from [train]"},
      {"model.arch", "mlp", "mlp | cnn"},
      {"model.tau", "1e-3", "smooth ReLU temperature"},
      {"model.name", "", "label in metric tables; empty uses data.source"},

      {"train.lr", "0.1", "SGD learning rate"},
      {"train.epochs", "10", "SGD epochs"},
      {"train.batch", "4", "SGD batch size"},

      {"segmentation.mode", "quickshift", "quickshift | grid | none | external"},
      {"segmentation.kernel_size", "2", "quickshift density bandwidth"},
      {"segmentation.max_dist", "4", "quickshift link radius"},
      {"segmentation.ratio", "8", "quickshift intensity weight"},
      {"segmentation.grid_cell", "4", "grid cell side"},
      {"segmentation.masks", "", "directory of img_NNNNNN.txt mask files for external mode"},

      {"detection.mu", "0.5", "Hessian threshold"},
      {"detection.nu", "50", "max pixels per set"},
      {"detection.k", "5", "sets per image"},
      {"detection.seed_strategy", "top-ig", "top-ig | random"},
      {"detection.hessian_mode", "absolute", "absolute | signed"},
      {"detection.row_normalization", "max-abs", "max-abs | none"},

      {"attribution.m", "50", "Riemann steps along the path"},
      {"attribution.t", "50", "Monte-Carlo subset samples per set"},
      {"attribution.mode", "absolute", "directional gradient: absolute | signed"},
      {"attribution.aggregation", "max", "per-pixel combination of set scores: max | sum"},
      {"attribution.baseline", "zero", "zero | mean (mean image of the test data)"},
      {"attribution.ig_steps", "50", "Riemann steps for IG seeds and the ig method"},

      {"evaluate.methods", "hsets,ig,random,oracle", "comma separated methods"},
      {"evaluate.steps", "15", "ROAD removal steps L"},
      {"evaluate.k_per_step", "5", "pixels removed per ROAD step"},
      {"evaluate.sigma", "0.01", "imputation noise"},
      {"evaluate.neighbourhood", "4", "imputation neighbourhood: 4 | 8"},
      {"evaluate.curve_fractions", "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9", "removal fractions of the accuracy curve"},
      {"evaluate.faithfulness_fraction", "0.1", "subset fraction for faithfulness correlation"},
      {"evaluate.faithfulness_runs", "100", "subsets per image for faithfulness correlation"},
      {"evaluate.attributions", "", "directory of a previous attribute run; empty computes hsets maps"},

      {"ablate.axis", "nu", "nu | mu | k | seed_strategy | segmentation"},
      {"ablate.values", "", "comma separated values; empty uses the axis default"},

      {"axioms.instances", "500", "random networks for axioms 1-5"},
      {"axioms.constructed", "50", "constructed cases for axioms 6-9"},
      {"axioms.max_features", "12", "inputs per network"},
      {"axioms.max_set", "6", "largest set"},
      {"axioms.m", "50", "Riemann steps"},
      {"axioms.tau", "1e-3", "smooth ReLU temperature"},
      {"axioms.completeness_eps", "1e-6", "slack of the completeness bound"},
      {"axioms.equality_tol", "1e-8", "tolerance of the equality axioms"},
      {"axioms.mode", "absolute", "directional gradient: absolute | signed"},
  };
  return keys;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

std::string section_of(const std::string& name) { return name.substr(0, name.find('.')); }

}  // namespace

ConfigFile::ConfigFile() {
  for (const auto& k : config_keys()) values_[k.name] = k.default_value;
}

ConfigFile ConfigFile::parse(std::istream& is, const std::string& origin) {
  ConfigFile cfg;
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto cut = line.find_first_of("#;");
    if (cut != std::string::npos) line.erase(cut);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": empty key");
    const std::string name = section.empty() || key.find('.') != std::string::npos ? key : section + "." + key;
    try {
      cfg.set(name, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  return cfg;
}

ConfigFile ConfigFile::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path.string());
  return parse(f, path.string());
}

void ConfigFile::set(const std::string& name, const std::string& value) {
  if (!find_key(name)) throw ConfigError("unknown config key '" + name + "'");
  values_[name] = value;
}

const std::string& ConfigFile::get(const std::string& name) const {
  const auto it = values_.find(name);
  if (it == values_.end()) throw ConfigError("unknown config key '" + name + "'");
  return it->second;
}

std::string ConfigFile::dump() const {
  std::ostringstream os;
  std::string section;
  for (const auto& k : config_keys()) {
    const std::string s = section_of(k.name);
    if (s != section) {
      if (!section.empty()) os << '\n';
      os << '[' << s << "]\n";
      section = s;
    }
    const std::string& v = get(k.name);
    os << k.name.substr(s.size() + 1) << (v.empty() ? " =" : " = ") << v << '\n';
  }
  return os.str();
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string ConfigFile::hash() const {
  // Where results go and how many threads compute them do not change them.
  std::string text;
  for (const auto& k : config_keys())
    if (k.name != "run.output" && k.name != "run.workers") text += k.name + "=" + get(k.name) + "\n";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
  return buf;
}

const char* to_string(SegmentationMode m) {
  switch (m) {
    case SegmentationMode::Quickshift: return "quickshift";
    case SegmentationMode::Grid: return "grid";
    case SegmentationMode::None: return "none";
    case SegmentationMode::External: return "external";
  }
  return "?";
}

SegmentationMode parse_segmentation_mode(const std::string& s) {
  if (s == "quickshift") return SegmentationMode::Quickshift;
  if (s == "grid") return SegmentationMode::Grid;
  if (s == "none") return SegmentationMode::None;
  if (s == "external") return SegmentationMode::External;
  throw ConfigError("unknown segmentation mode '" + s + "' (quickshift, grid, none, external)");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

namespace {

class Reader {
 public:
  explicit Reader(const ConfigFile& f) : f_(f) {}

  const std::string& str(const std::string& name) const { return f_.get(name); }

  double real(const std::string& name) const {
    const std::string& s = str(name);
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used == s.size() && std::isfinite(v)) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError(name + ": '" + s + "' is not a finite number");
  }

  long long integer(const std::string& name) const {
    const std::string& s = str(name);
    long long v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(name + ": '" + s + "' is not an integer");
    return v;
  }

  long long positive(const std::string& name) const {
    const long long v = integer(name);
    if (v < 1) throw ConfigError(name + " must be >= 1");
    return v;
  }

  std::uint64_t unsigned64(const std::string& name) const {
    const std::string& s = str(name);
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw ConfigError(name + ": '" + s + "' is not an unsigned integer");
    return v;
  }

  bool boolean(const std::string& name) const {
    const std::string& s = str(name);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError(name + ": '" + s + "' is not a boolean");
  }

  DirectionalMode mode(const std::string& name) const {
    const std::string& s = str(name);
    if (s == "absolute") return DirectionalMode::Absolute;
    if (s == "signed") return DirectionalMode::Signed;
    throw ConfigError(name + ": unknown mode '" + s + "' (absolute, signed)");
  }

  DecoyVariant decoy(const std::string& name) const {
    const std::string& s = str(name);
    if (s == "correlated") return DecoyVariant::Correlated;
    if (s == "randomized") return DecoyVariant::Randomized;
    if (s == "removed") return DecoyVariant::Removed;
    throw ConfigError(name + ": unknown decoy variant '" + s + "' (correlated, randomized, removed)");
  }

  template <class F>
  auto wrap(const std::string& name, F&& parse) const {
    try {
      return parse(str(name));
    } catch (const ConfigError& e) {
      throw ConfigError(name + ": " + e.what());
    }
  }

 private:
  const ConfigFile& f_;
};

}  // namespace

RunConfig RunConfig::from(const ConfigFile& file) {
  const Reader r(file);
  RunConfig c;
  c.seed = r.unsigned64("run.seed");
  c.output = r.str("run.output");
  c.workers = static_cast<int>(r.positive("run.workers"));
  c.images = static_cast<std::size_t>(r.positive("run.images"));
  c.correct_only = r.boolean("run.correct_only");

  c.data.source = r.str("data.source");
  c.data.train_path = r.str("data.train");
  c.data.train_size = static_cast<std::size_t>(r.positive("data.train_size"));
  c.data.test_size = static_cast<std::size_t>(r.positive("data.test_size"));
  c.data.patch_size = r.positive("data.patch_size");
  c.data.train_decoy = r.decoy("data.train_decoy");
  c.data.test_decoy = r.decoy("data.test_decoy");
  c.data.classes = r.positive("data.classes");
  c.data.digits.max_rotation = r.real("data.rotation");
  c.data.digits.max_shear = r.real("data.shear");
  c.data.digits.control_jitter = r.real("data.jitter");
  c.data.digits.noise = r.real("data.noise");

  c.model.path = r.str("model.path");
  c.model.arch = r.str("model.arch");
  c.model.tau = r.real("model.tau");
  c.model.name = r.str("model.name");
  if (c.model.name.empty()) c.model.name = c.data.source;

  c.train.lr = r.real("train.lr");
  c.train.epochs = static_cast<int>(r.positive("train.epochs"));
  c.train.batch = static_cast<int>(r.positive("train.batch"));

  c.segmentation.mode = r.wrap("segmentation.mode", parse_segmentation_mode);
  c.segmentation.quickshift.kernel_size = r.real("segmentation.kernel_size");
  c.segmentation.quickshift.max_dist = r.real("segmentation.max_dist");
  c.segmentation.quickshift.ratio = r.real("segmentation.ratio");
  c.segmentation.grid_cell = r.positive("segmentation.grid_cell");
  c.segmentation.masks_dir = r.str("segmentation.masks");

  c.detection.mu = r.real("detection.mu");
  c.detection.nu = r.positive("detection.nu");
  c.detection.k = r.positive("detection.k");
  c.detection.seed_strategy = r.wrap("detection.seed_strategy", parse_seed_strategy);
  c.detection.hessian_mode = r.wrap("detection.hessian_mode", parse_hessian_mode);
  c.detection.row_normalization = r.wrap("detection.row_normalization", parse_row_normalization);

  c.idg.m = r.positive("attribution.m");
  c.idg.t = r.positive("attribution.t");
  c.idg.mode = r.mode("attribution.mode");
  c.aggregation = r.wrap("attribution.aggregation", parse_aggregation);
  const std::string& baseline = r.str("attribution.baseline");
  if (baseline == "zero")
    c.baseline = BaselineKind::Zero;
  else if (baseline == "mean")
    c.baseline = BaselineKind::Mean;
  else
    throw ConfigError("attribution.baseline: unknown baseline '" + baseline + "' (zero, mean)");
  c.ig_steps = r.positive("attribution.ig_steps");

  c.evaluate.methods = split_list(r.str("evaluate.methods"));
  c.evaluate.road.steps = r.positive("evaluate.steps");
  c.evaluate.road.k_per_step = r.positive("evaluate.k_per_step");
  c.evaluate.road.impute.sigma = r.real("evaluate.sigma");
  const long long nb = r.integer("evaluate.neighbourhood");
  if (nb != 4 && nb != 8) throw ConfigError("evaluate.neighbourhood must be 4 or 8");
  c.evaluate.road.impute.neighbourhood = nb == 4 ? Neighbourhood::Four : Neighbourhood::Eight;
  c.evaluate.curve_fractions.clear();
  for (const auto& v : split_list(r.str("evaluate.curve_fractions"))) {
    try {
      std::size_t used = 0;
      c.evaluate.curve_fractions.push_back(std::stod(v, &used));
      if (used != v.size()) throw std::invalid_argument(v);
    } catch (const std::exception&) {
      throw ConfigError("evaluate.curve_fractions: '" + v + "' is not a number");
    }
  }
  c.evaluate.faithfulness.subset_fraction = r.real("evaluate.faithfulness_fraction");
  c.evaluate.faithfulness.runs = r.positive("evaluate.faithfulness_runs");
  c.evaluate.attributions = r.str("evaluate.attributions");

  c.ablate.axis = r.str("ablate.axis");
  c.ablate.values = split_list(r.str("ablate.values"));

  c.axioms.instances = r.positive("axioms.instances");
  c.axioms.constructed = r.positive("axioms.constructed");
  c.axioms.max_features = r.positive("axioms.max_features");
  c.axioms.max_set = r.positive("axioms.max_set");
  c.axioms.m = r.positive("axioms.m");
  c.axioms.tau = r.real("axioms.tau");
  c.axioms.completeness_eps = r.real("axioms.completeness_eps");
  c.axioms.equality_tol = r.real("axioms.equality_tol");
  c.axioms.mode = r.mode("axioms.mode");
  c.axioms.seed = c.seed;

  c.hash = file.hash();
  c.validate();
  return c;
}

std::vector<std::string> default_axis_values(const std::string& axis) {
  if (axis == "nu") return {"50", "100", "200", "400"};
  if (axis == "mu") return {"0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8"};
  if (axis == "k") return {"1", "3", "5", "7", "9"};
  if (axis == "seed_strategy") return {"top-ig", "random"};
  if (axis == "segmentation") return {"quickshift", "grid", "none"};
  throw ConfigError("unknown ablation axis '" + axis + "' (nu, mu, k, seed_strategy, segmentation)");
}

void RunConfig::validate() const {
  if (output.empty()) throw ConfigError("run.output must not be empty");
  if (model.arch != "mlp" && model.arch != "cnn") throw ConfigError("model.arch must be mlp or cnn");
  if (!(model.tau > 0.0)) throw ConfigError("model.tau must be positive");
  if (!(train.lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (data.source != "decoy" && data.source != "digits") {
    if (!std::filesystem::exists(data.source)) {
      // IDX prefixes are not files themselves.
      if (!std::filesystem::exists(data.source + "-images.idx"))
        throw ConfigError("data.source '" + data.source + "' does not exist");
    }
    if (model.path.empty() && data.train_path.empty())
      throw ConfigError("a dataset path needs model.path or data.train to train on");
  }
  if (!data.train_path.empty() && !std::filesystem::exists(data.train_path) &&
      !std::filesystem::exists(data.train_path + "-images.idx"))
    throw ConfigError("data.train '" + data.train_path + "' does not exist");
  if (!model.path.empty() && !std::filesystem::exists(model.path))
    throw ConfigError("model.path '" + model.path.string() + "' does not exist");
  if (segmentation.mode == SegmentationMode::External) {
    if (segmentation.masks_dir.empty()) throw ConfigError("external segmentation needs segmentation.masks");
    if (!std::filesystem::is_directory(segmentation.masks_dir))
      throw ConfigError("segmentation.masks '" + segmentation.masks_dir.string() + "' is not a directory");
  }
  if (!evaluate.attributions.empty() && !std::filesystem::is_directory(evaluate.attributions))
    throw ConfigError("evaluate.attributions '" + evaluate.attributions.string() + "' is not a directory");
  if (!(segmentation.quickshift.kernel_size > 0.0) || !(segmentation.quickshift.max_dist > 0.0) ||
      segmentation.quickshift.ratio < 0.0)
    throw ConfigError("quickshift parameters must be positive");
  for (const auto& m : evaluate.methods)
    if (m != "hsets" && m != "ig" && m != "random" && m != "oracle")
      throw ConfigError("unknown method '" + m + "' (hsets, ig, random, oracle)");
  if (evaluate.methods.empty()) throw ConfigError("evaluate.methods is empty");
  for (double f : evaluate.curve_fractions)
    if (f < 0.0 || f > 1.0) throw ConfigError("evaluate.curve_fractions must lie in [0, 1]");
  if (evaluate.road.impute.sigma < 0.0) throw ConfigError("evaluate.sigma must be >= 0");
  default_axis_values(ablate.axis);
  detection.validate();
  idg.validate();
  evaluate.faithfulness.validate();
  axioms.validate();
}

}  // namespace hsets
