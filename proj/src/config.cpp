#include "dar/config.hpp"

#include <cstdio>

#include "dar/error.hpp"
#include "dar/rng.hpp"

namespace dar {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kPathKeys[] = {"manifest", "ground_truth", "test_manifest", "test_ground_truth",
                                     "output",   "pretrained",   "finetuned",     "model"};

std::vector<double> default_weight_grid() { return {0.40, 0.45, 0.50, 0.55, 0.60}; }

void require_file(const fs::path& p, const char* key, const std::string& command) {
  if (p.empty()) throw ConfigError(command + " needs '" + key + "' in the config");
  if (!fs::exists(p)) throw ConfigError(std::string(key) + " '" + p.string() + "' does not exist");
}

json prep_json(const PrepConfig& p) {
  return json{{"resample", p.resample},
              {"crop_side", p.crop_side},
              {"patch_size", p.patch_size},
              {"window", {p.window.lo, p.window.hi}}};
}

PrepConfig prep_from(const json& j) {
  PrepConfig p;
  for (const auto& [key, v] : j.items()) {
    if (key == "resample") p.resample = v.get<bool>();
    else if (key == "crop_side") p.crop_side = v.get<int>();
    else if (key == "patch_size") p.patch_size = v.get<int>();
    else if (key == "window") {
      const auto w = v.get<std::vector<float>>();
      if (w.size() != 2) throw ConfigError("prep.window must be [lo, hi]");
      p.window = {w[0], w[1]};
    } else throw ConfigError("unknown prep key '" + key + "'");
  }
  return p;
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
  // Desk-scale defaults: 32^3 crops of the 32^3 synthetic cubes, 30 epochs.
  prep.crop_side = 32;
  prep.patch_size = 32;
  synthetic.n_samples = 2000;
  train.epochs = 30;
  train.lr_pretrain = 1e-3;
  train.lr_finetune = 5e-4;
  sweep.mu = default_weight_grid();
  sweep.delta = default_weight_grid();
  fractions = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
}

SweepGrid ExperimentConfig::resolved_sweep() const {
  SweepGrid g = sweep;
  if (g.k.empty()) g.k = {train.resolved_k()};
  return g;
}

void ExperimentConfig::validate(const std::string& command) const {
  if (q < 2) throw ConfigError("q must be at least 2");
  if (prep.crop_side < 1 || prep.patch_size < 1) throw ConfigError("prep sizes must be positive");
  if (!(prep.window.hi > prep.window.lo)) throw ConfigError("prep.window needs hi > lo");
  train.validate();
  train.loss.validate();
  if (folds < 2) throw ConfigError("folds must be at least 2");
  if (repeats < 1 || seeds < 1) throw ConfigError("repeats and seeds must be at least 1");
  if (seed_stride < 0) throw ConfigError("seed_stride must be non-negative");
  for (int k : resolved_sweep().k) {
    if (k < 1 || k > train.m + 1) throw ConfigError("sweep k=" + std::to_string(k) + " outside 1.." + std::to_string(train.m + 1));
  }
  for (const auto* axis : {&sweep.mu, &sweep.delta}) {
    if (axis->empty()) throw ConfigError("sweep mu and delta grids must be non-empty");
    for (double v : *axis) {
      if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("sweep mu/delta values must lie in [0, 1]");
    }
  }
  if (fractions.empty()) throw ConfigError("fractions must be non-empty");
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("fractions must lie in [0, 1]");
  }

  if (command == "synth") {
    synthetic.validate();
    annotators.validate();
    if (synthetic.q != q) throw ConfigError("synthetic.q differs from q");
    if (annotators.classes() != q) throw ConfigError("annotator confusion matrix is not q x q");
    return;
  }
  if (command == "fuse-train") {
    require_file(finetuned, "finetuned", command);
  } else if (command == "eval") {
    require_file(model, "model", command);
    require_file(test_manifest, "test_manifest", command);
    require_file(test_ground_truth, "test_ground_truth", command);
    return;
  } else if (command == "dump-features") {
    require_file(model, "model", command);
    if (sample.empty()) throw ConfigError("dump-features needs 'sample' (a record id)");
  } else if (command == "finetune") {
    require_file(pretrained, "pretrained", command);
  }
  require_file(manifest, "manifest", command);
  if (!ground_truth.empty()) require_file(ground_truth, "ground_truth", command);
  if (!test_manifest.empty()) {
    require_file(test_manifest, "test_manifest", command);
    require_file(test_ground_truth, "test_ground_truth", command);
  }
}

void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"manifest", c.manifest.string()},
           {"ground_truth", c.ground_truth.string()},
           {"test_manifest", c.test_manifest.string()},
           {"test_ground_truth", c.test_ground_truth.string()},
           {"output", c.output.string()},
           {"q", c.q},
           {"prep", prep_json(c.prep)},
           {"train", c.train},
           {"synthetic", c.synthetic},
           {"annotators", c.annotators},
           {"method", to_string(c.method)},
           {"folds", c.folds},
           {"repeats", c.repeats},
           {"seed_stride", c.seed_stride},
           {"seeds", c.seeds},
           {"sweep", {{"k", c.sweep.k}, {"mu", c.sweep.mu}, {"delta", c.sweep.delta}}},
           {"fractions", c.fractions},
           {"pretrained", c.pretrained.string()},
           {"finetuned", c.finetuned.string()},
           {"model", c.model.string()},
           {"sample", c.sample},
           {"view", to_string(c.view)},
           {"block", c.block}};
}

void from_json(const json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "manifest") c.manifest = v.get<std::string>();
      else if (key == "ground_truth") c.ground_truth = v.get<std::string>();
      else if (key == "test_manifest") c.test_manifest = v.get<std::string>();
      else if (key == "test_ground_truth") c.test_ground_truth = v.get<std::string>();
      else if (key == "output") c.output = v.get<std::string>();
      else if (key == "q") c.q = v.get<int>();
      else if (key == "prep") c.prep = prep_from(v);
      else if (key == "train") c.train = v.get<TrainConfig>();
      else if (key == "synthetic") c.synthetic = v.get<SyntheticSpec>();
      else if (key == "annotators") c.annotators = v.get<AnnotatorModel>();
      else if (key == "method") c.method = method_from_string(v.get<std::string>());
      else if (key == "folds") c.folds = v.get<int>();
      else if (key == "repeats") c.repeats = v.get<int>();
      else if (key == "seed_stride") c.seed_stride = v.get<int>();
      else if (key == "seeds") c.seeds = v.get<int>();
      else if (key == "sweep") {
        for (const auto& [axis, vals] : v.items()) {
          if (axis == "k") c.sweep.k = vals.get<std::vector<int>>();
          else if (axis == "mu") c.sweep.mu = vals.get<std::vector<double>>();
          else if (axis == "delta") c.sweep.delta = vals.get<std::vector<double>>();
          else throw ConfigError("unknown sweep axis '" + axis + "'");
        }
      } else if (key == "fractions") c.fractions = v.get<std::vector<double>>();
      else if (key == "pretrained") c.pretrained = v.get<std::string>();
      else if (key == "finetuned") c.finetuned = v.get<std::string>();
      else if (key == "model") c.model = v.get<std::string>();
      else if (key == "sample") c.sample = v.get<std::string>();
      else if (key == "view") c.view = view_from_string(v.get<std::string>());
      else if (key == "block") c.block = v.get<int>();
      else throw ConfigError("unknown config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!j.contains("annotators")) c.annotators = AnnotatorModel::defaults(c.q);
  if (!j.contains("synthetic") || !j.at("synthetic").contains("q")) c.synthetic.q = c.q;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key");
    if (!node->is_object()) throw ConfigError("override '" + assignment + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

void resolve_paths(json& j, const fs::path& base) {
  for (const char* key : kPathKeys) {
    if (!j.contains(key) || !j[key].is_string()) continue;
    const fs::path p = j[key].get<std::string>();
    if (!p.empty() && p.is_relative()) j[key] = (base / p).lexically_normal().string();
  }
}

std::uint64_t config_hash(const ExperimentConfig& c) {
  json j = c;
  j.erase("output");
  return fnv1a(j.dump());
}

fs::path run_directory(const fs::path& root, const std::string& command, const ExperimentConfig& c) {
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(config_hash(c)));
  return root / (command + "-" + hex + "-seed" + std::to_string(c.train.seed));
}

}  // namespace dar
