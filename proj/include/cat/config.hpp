#pragma once
// Run configuration file: a JSON object with optional sections
//   "synth", "train", "augment", "refine", "contrastive", "threshold"
// and an optional top-level "data" string (path to an embeddings CSV).
// Every key is optional; unknown sections or keys are rejected.

#include "cat/synthgen.hpp"
#include "cat/trainer.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <functional>
#include <sstream>

namespace cat {

struct RunConfig {
  std::optional<SynthConfig> synth;
  std::optional<std::string> data;
  TrainConfig train;
};

namespace config_detail {

using nlohmann::json;

struct KeySpec {
  std::string section;
  std::string key;
  std::string help;
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

template <typename T, typename Access>
KeySpec field(std::string section, std::string key, std::string help, Access access) {
  KeySpec s;
  s.section = std::move(section);
  s.key = std::move(key);
  s.help = std::move(help);
  s.get = [access](const RunConfig& c) { return json(access(const_cast<RunConfig&>(c))); };
  s.set = [access, name = s.section + "." + s.key](RunConfig& c, const json& v) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(name + " must be a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(name + " must be an integer");
      if constexpr (std::is_unsigned_v<T>)
        if (v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError(name + " must be >= 0");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(name + " must be a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(name + " must be a string");
    }
    try {
      access(c) = v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(name + ": " + e.what());
    }
  };
  return s;
}

inline KeySpec custom(std::string section, std::string key, std::string help,
                      std::function<json(const RunConfig&)> get, std::function<void(RunConfig&, const json&)> set) {
  return {std::move(section), std::move(key), std::move(help), std::move(get), std::move(set)};
}

inline SynthConfig& synth(RunConfig& c) {
  if (!c.synth) c.synth.emplace();
  return *c.synth;
}

inline const std::vector<KeySpec>& registry() {
  static const std::vector<KeySpec> specs = [] {
    std::vector<KeySpec> s;
    // synth
    s.push_back(field<int>("synth", "num_classes", "classes C", [](RunConfig& c) -> int& { return synth(c).num_classes; }));
    s.push_back(field<int>("synth", "num_domains", "domains", [](RunConfig& c) -> int& { return synth(c).num_domains; }));
    s.push_back(field<int>("synth", "feature_dim", "feature dimension d", [](RunConfig& c) -> int& { return synth(c).feature_dim; }));
    s.push_back(field<int>("synth", "samples_per_class_per_domain", "samples per class per domain",
                           [](RunConfig& c) -> int& { return synth(c).samples_per_class_per_domain; }));
    s.push_back(field<double>("synth", "class_separation", "distance of class centroids from the origin",
                              [](RunConfig& c) -> double& { return synth(c).class_separation; }));
    s.push_back(field<double>("synth", "domain_shift", "magnitude of the per-domain rotation + translation",
                              [](RunConfig& c) -> double& { return synth(c).domain_shift; }));
    s.push_back(field<double>("synth", "noise_sigma", "per-sample Gaussian noise scale",
                              [](RunConfig& c) -> double& { return synth(c).noise_sigma; }));
    s.push_back(field<double>("synth", "label_noise_rate", "fraction of stored labels resampled",
                              [](RunConfig& c) -> double& { return synth(c).label_noise_rate; }));
    s.push_back(field<std::uint64_t>("synth", "seed", "generator seed", [](RunConfig& c) -> std::uint64_t& { return synth(c).seed; }));
    // train
    s.push_back(custom(
        "train", "method", "cat | fixmatch_baseline | supervised_only",
        [](const RunConfig& c) { return json(to_string(c.train.method)); },
        [](RunConfig& c, const json& v) {
          if (!v.is_string()) throw ConfigError("train.method must be a string");
          c.train.method = parse_method(v.get<std::string>());
        }));
    s.push_back(field<int>("train", "epochs", "epochs, warm-up included", [](RunConfig& c) -> int& { return c.train.epochs; }));
    s.push_back(field<int>("train", "steps_per_epoch", "optimisation steps per epoch",
                           [](RunConfig& c) -> int& { return c.train.steps_per_epoch; }));
    s.push_back(field<int>("train", "labeled_batch_per_domain", "labelled samples per source domain per step (B)",
                           [](RunConfig& c) -> int& { return c.train.labeled_batch_per_domain; }));
    s.push_back(field<int>("train", "unlabeled_ratio", "unlabelled/labelled batch ratio (mu)",
                           [](RunConfig& c) -> int& { return c.train.unlabeled_ratio; }));
    s.push_back(field<double>("train", "lr", "SGD learning rate", [](RunConfig& c) -> double& { return c.train.lr; }));
    s.push_back(field<double>("train", "momentum", "SGD momentum", [](RunConfig& c) -> double& { return c.train.momentum; }));
    s.push_back(field<double>("train", "lambda_u", "weight of the unsupervised loss",
                              [](RunConfig& c) -> double& { return c.train.lambda_u; }));
    s.push_back(field<double>("train", "lambda_scl", "weight of the contrastive loss",
                              [](RunConfig& c) -> double& { return c.train.lambda_scl; }));
    s.push_back(field<int>("train", "refine_interval", "steps between clean-set refreshes (0 = once per epoch)",
                           [](RunConfig& c) -> int& { return c.train.refine_interval; }));
    s.push_back(field<bool>("train", "per_domain_unsup_loss", "average L_u per domain instead of pooled",
                            [](RunConfig& c) -> bool& { return c.train.per_domain_unsup_loss; }));
    s.push_back(field<int>("train", "labels_per_class", "labelled examples per class per source domain (n_L)",
                           [](RunConfig& c) -> int& { return c.train.labels_per_class; }));
    s.push_back(field<int>("train", "num_sources", "source domains per fold (0 = all others)",
                           [](RunConfig& c) -> int& { return c.train.num_sources; }));
    s.push_back(custom(
        "train", "hidden", "backbone hidden widths", [](const RunConfig& c) { return json(c.train.hidden); },
        [](RunConfig& c, const json& v) {
          if (!v.is_array()) throw ConfigError("train.hidden must be an array of integers");
          std::vector<int> h;
          for (const auto& x : v) {
            if (!x.is_number_integer()) throw ConfigError("train.hidden must be an array of integers");
            h.push_back(x.get<int>());
          }
          c.train.hidden = h;
        }));
    s.push_back(field<int>("train", "proj_dim", "projection embedding width", [](RunConfig& c) -> int& { return c.train.proj_dim; }));
    s.push_back(field<std::uint64_t>("train", "seed", "training seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; }));
    // augment
    s.push_back(field<double>("augment", "weak_sigma", "weak view noise scale",
                              [](RunConfig& c) -> double& { return c.train.augment.weak_sigma; }));
    s.push_back(field<double>("augment", "strong_sigma", "strong view noise scale",
                              [](RunConfig& c) -> double& { return c.train.augment.strong_sigma; }));
    s.push_back(field<double>("augment", "strong_dropout", "strong view coordinate dropout probability",
                              [](RunConfig& c) -> double& { return c.train.augment.strong_dropout; }));
    // refine
    s.push_back(field<int>("refine", "k_neighbors", "neighbours in the kNN vote (K)",
                           [](RunConfig& c) -> int& { return c.train.refine.k_neighbors; }));
    s.push_back(field<double>("refine", "alpha", "agreement fractile used as the cutoff",
                              [](RunConfig& c) -> double& { return c.train.refine.alpha; }));
    s.push_back(field<int>("refine", "min_class_size", "smallest pseudo-class that may contribute members",
                           [](RunConfig& c) -> int& { return c.train.refine.min_class_size; }));
    s.push_back(field<bool>("refine", "global_fractile", "one cutoff over all classes instead of per class",
                            [](RunConfig& c) -> bool& { return c.train.refine.global_fractile; }));
    s.push_back(field<bool>("refine", "enabled", "build clean sets and train the contrastive term",
                            [](RunConfig& c) -> bool& { return c.train.refine.enabled; }));
    // contrastive
    s.push_back(field<double>("contrastive", "temperature", "contrastive softmax temperature",
                              [](RunConfig& c) -> double& { return c.train.contrastive.temperature; }));
    s.push_back(field<int>("contrastive", "warmup_epochs", "epochs of NT-Xent warm-up before pseudo-labelling",
                           [](RunConfig& c) -> int& { return c.train.contrastive.warmup_epochs; }));
    // threshold
    s.push_back(field<double>("threshold", "ema_lambda", "EMA momentum of tau_g and E",
                              [](RunConfig& c) -> double& { return c.train.threshold.ema_lambda; }));
    s.push_back(field<bool>("threshold", "per_domain_thresholds", "independent threshold state per source domain",
                            [](RunConfig& c) -> bool& { return c.train.threshold.per_domain_thresholds; }));
    s.push_back(field<double>("threshold", "fixed_tau", "threshold of fixmatch_baseline",
                              [](RunConfig& c) -> double& { return c.train.threshold.fixed_tau; }));
    return s;
  }();
  return specs;
}

}  // namespace config_detail

/// Applies `j` on top of `base`. Throws ConfigError on unknown keys or wrong types.
inline RunConfig apply_config(RunConfig base, const nlohmann::json& j) {
  using config_detail::registry;
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  for (const auto& [section, body] : j.items()) {
    if (section == "data") {
      if (!body.is_string()) throw ConfigError("data must be a string path");
      base.data = body.get<std::string>();
      continue;
    }
    bool known_section = false;
    for (const auto& s : registry()) known_section |= s.section == section;
    if (!known_section) throw ConfigError("unknown config section '" + section + "'");
    if (!body.is_object()) throw ConfigError("config section '" + section + "' must be an object");
    if (section == "synth") config_detail::synth(base);
    for (const auto& [key, value] : body.items()) {
      const config_detail::KeySpec* spec = nullptr;
      for (const auto& s : registry())
        if (s.section == section && s.key == key) spec = &s;
      if (!spec) throw ConfigError("unknown config key '" + section + "." + key + "'");
      spec->set(base, value);
    }
  }
  return base;
}

inline RunConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return apply_config(RunConfig{}, j);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline void validate(const RunConfig& c) {
  if (c.synth) c.synth->validate();
  c.train.validate();
}

/// Effective configuration, every key present.
inline nlohmann::json to_json(const RunConfig& c) {
  RunConfig filled = c;
  nlohmann::json j = nlohmann::json::object();
  for (const auto& s : config_detail::registry()) {
    if (s.section == "synth" && !c.synth) continue;
    j[s.section][s.key] = s.get(filled);
  }
  if (c.data) j["data"] = *c.data;
  return j;
}

/// One line per config key with its default, for --help.
inline std::string describe_keys() {
  RunConfig defaults;
  defaults.synth.emplace();
  std::ostringstream os;
  os << "Config keys (JSON file sections; defaults in brackets):\n";
  std::string section;
  for (const auto& s : config_detail::registry()) {
    if (s.section != section) {
      section = s.section;
      os << "  [" << section << "]\n";
    }
    os << "    " << s.key << " [" << s.get(defaults).dump() << "]  " << s.help << '\n';
  }
  os << "  data  path to an embeddings CSV (alternative to the synth section)\n";
  return os.str();
}

}  // namespace cat
