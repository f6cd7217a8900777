// hsets: train, explain and evaluate digit classifiers with interaction sets.
#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "hsets/config.hpp"
#include "hsets/errors.hpp"
#include "hsets/pipeline.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigFailure = 1;
constexpr int kComputeFailure = 2;

using Command = int (*)(const hsets::RunConfig&, const hsets::ConfigFile&, std::ostream&);

struct Options {
  std::string config_path;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;  // config key -> value given on the command line
};

void add_config_options(CLI::App* sub, Options& opt) {
  sub->add_option("-c,--config", opt.config_path, "config file (key = value with [sections])")
      ->check(CLI::ExistingFile);
  sub->add_option("--set", opt.sets, "override, section.key=value (repeatable)");
  for (const auto& key : hsets::config_keys())
    sub->add_option("--" + key.name, opt.flags[key.name], key.help + " [" + key.default_value + "]")
        ->group("Config keys");
}

hsets::ConfigFile build_config(const Options& opt, const CLI::App* sub) {
  hsets::ConfigFile file = opt.config_path.empty() ? hsets::ConfigFile() : hsets::ConfigFile::load(opt.config_path);
  for (const auto& s : opt.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw hsets::ConfigError("--set expects section.key=value, got '" + s + "'");
    file.set(s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& key : hsets::config_keys())
    if (sub->count("--" + key.name) > 0) file.set(key.name, opt.flags.at(key.name));
  return file;
}

void print_config(const hsets::ConfigFile& file, std::ostream& os) {
  std::string section;
  for (const auto& key : hsets::config_keys()) {
    const std::string s = key.name.substr(0, key.name.find('.'));
    if (s != section) {
      os << (section.empty() ? "" : "\n") << '[' << s << "]\n";
      section = s;
    }
    const std::string& v = file.get(key.name);
    os << "# " << key.help << '\n' << key.name.substr(s.size() + 1) << (v.empty() ? " =" : " = ") << v << '\n';
  }
  os << "\n# config hash " << file.hash() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interaction-set attribution for image classifiers"};
  app.require_subcommand(1);

  const std::vector<std::pair<std::string, std::string>> names = {
      {"train", "train a model and save it to the output directory"},
      {"segment", "write segmentation masks for the selected test images"},
      {"detect", "write interaction sets for the selected test images"},
      {"attribute", "write sets, set scores, saliency images and a manifest"},
      {"evaluate", "Gini, ROAD and faithfulness of each method"},
      {"ablate", "sweep one detection or segmentation setting"},
      {"axioms", "run the attribution property suite"},
      {"print-config", "print every config key with its value"},
  };
  const std::map<std::string, Command> commands = {
      {"train", hsets::cmd_train},         {"segment", hsets::cmd_segment}, {"detect", hsets::cmd_detect},
      {"attribute", hsets::cmd_attribute}, {"evaluate", hsets::cmd_evaluate}, {"ablate", hsets::cmd_ablate},
      {"axioms", hsets::cmd_axioms},
  };

  std::map<std::string, Options> options;
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : names) {
    subs[name] = app.add_subcommand(name, help);
    add_config_options(subs[name], options[name]);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigFailure;
  }

  for (const auto& [name, sub] : subs) {
    if (!sub->parsed()) continue;
    hsets::ConfigFile file;
    hsets::RunConfig config;
    try {
      file = build_config(options[name], sub);
      if (name == "print-config") {
        print_config(file, std::cout);
        return kOk;
      }
      config = hsets::RunConfig::from(file);
    } catch (const hsets::Error& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return kConfigFailure;
    }
    try {
      return commands.at(name)(config, file, std::cerr);
    } catch (const hsets::ConfigError& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return kConfigFailure;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kComputeFailure;
    }
  }
  return kConfigFailure;
}
