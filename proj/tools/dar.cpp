// dar: command-line front end for the divide-and-rule pipelines.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dar/config.hpp"
#include "dar/data_model.hpp"
#include "dar/error.hpp"
#include "dar/experiments.hpp"
#include "dar/image_io.hpp"
#include "dar/network.hpp"
#include "dar/synthetic.hpp"
#include "dar/train.hpp"
#include "dar/volume.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dar;

namespace {

constexpr View kAllViews[] = {View::axial, View::sagittal, View::coronal};
constexpr Role kRoles[] = {Role::prd, Role::cf, Role::lr};

const char* role_name(Role r) {
  switch (r) {
    case Role::prd: return "prd";
    case Role::cf: return "cf";
    case Role::lr: return "lr";
  }
  return "?";
}

struct Options {
  std::string command;
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  bool plot = false;
};

struct Run {
  ExperimentConfig cfg;
  fs::path dir;
  int jobs = 1;
  bool plot = false;
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

ExperimentConfig load_config(const Options& opt) {
  json raw = json::object();
  if (!opt.config.empty()) {
    std::ifstream in(opt.config);
    if (!in) throw ConfigError("cannot read config '" + opt.config + "'");
    raw = json::parse(in, nullptr, false);
    if (raw.is_discarded()) throw ConfigError("config '" + opt.config + "' is not valid JSON");
    if (!raw.is_object()) throw ConfigError("config must be a JSON object");
    resolve_paths(raw, fs::absolute(opt.config).parent_path());
  }
  for (const auto& s : opt.sets) apply_override(raw, s);
  resolve_paths(raw, fs::current_path());
  if (opt.seed) {
    apply_override(raw, "train.seed=" + std::to_string(*opt.seed));
    if (opt.command == "synth") apply_override(raw, "synthetic.seed=" + std::to_string(*opt.seed));
  }
  ExperimentConfig cfg = raw.get<ExperimentConfig>();
  cfg.validate(opt.command);
  return cfg;
}

Run open_run(const Options& opt) {
  Run run;
  run.cfg = load_config(opt);
  run.jobs = opt.jobs;
  run.plot = opt.plot;
  fs::path root = run.cfg.output;
  if (const char* env = std::getenv("DAR_OUT"); env && *env) root = env;
  run.dir = run_directory(root, opt.command, run.cfg);
  fs::create_directories(run.dir);
  write_json(run.dir / "resolved_config.json", json(run.cfg));
  return run;
}

std::function<int(const std::string&)> truth_lookup(const GroundTruth& gt, const fs::path& source) {
  return [&gt, source](const std::string& id) {
    const auto it = gt.find(id);
    if (it == gt.end()) throw DataError("record '" + id + "' missing from " + source.string());
    return it->second;
  };
}

TrainingData load_training(const ExperimentConfig& c) {
  const auto records = load_manifest(c.manifest, c.q);
  const auto patches = load_patches(records, c.prep);
  if (c.ground_truth.empty()) return build_training_data(records, patches, c.q);
  const GroundTruth gt = read_ground_truth(c.ground_truth);
  return build_training_data(records, patches, c.q, truth_lookup(gt, c.ground_truth));
}

Protocol load_protocol(const ExperimentConfig& c) {
  Protocol p;
  p.folds = c.folds;
  if (c.test_manifest.empty()) return p;
  const auto records = load_manifest(c.test_manifest, c.q);
  const auto patches = load_patches(records, c.prep);
  const GroundTruth gt = read_ground_truth(c.test_ground_truth);
  p.test = build_test_set(records, patches, c.q, truth_lookup(gt, c.test_ground_truth));
  return p;
}

TrainingData training_for(const ExperimentConfig& c) {
  TrainingData data = load_training(c);
  return c.method == Method::ave ? proxy_label_data(data) : data;
}

void write_logs(const fs::path& dir, const std::vector<TrainLog>& logs) {
  fs::create_directories(dir);
  json summary = json::array();
  for (const auto& log : logs) {
    std::string name = log.stage;
    std::replace(name.begin(), name.end(), '/', '_');
    write_step_log(dir / (name + ".jsonl"), log);
    json epochs = json::array();
    for (const auto& e : log.epochs) epochs.push_back(e);
    summary.push_back({{"stage", log.stage},
                       {"planned_steps", log.planned_steps},
                       {"n_train", log.n_train},
                       {"n_val", log.n_val},
                       {"best_epoch", log.best_epoch},
                       {"initial_val_loss", log.initial_val_loss ? json(*log.initial_val_loss) : json(nullptr)},
                       {"best_val_loss", log.best_val_loss ? json(*log.best_val_loss) : json(nullptr)},
                       {"epochs", epochs}});
  }
  write_json(dir / "training.json", summary);
}

std::string ckpt_name(const std::string& stem, View v) { return stem + "_" + to_string(v) + ".ckpt"; }

// ---------------------------------------------------------------------------
// CSV read-back for plots

std::vector<std::map<std::string, std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<std::map<std::string, std::string>> rows;
  std::vector<std::string> header;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (header.empty()) {
      header = cells;
      continue;
    }
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

void plot_sweep(const fs::path& csv, const fs::path& png) {
  std::map<std::string, PlotSeries> by_curve;
  for (const auto& row : read_csv(csv)) {
    const std::string label = "k=" + row.at("k") + " delta=" + row.at("delta");
    auto& s = by_curve[label];
    s.label = label;
    s.x.push_back(std::stod(row.at("mu")));
    s.y.push_back(std::stod(row.at("accuracy_mean")));
  }
  std::vector<PlotSeries> series;
  for (auto& [_, s] : by_curve) series.push_back(std::move(s));
  write_line_plot(png, series);
}

void plot_robustness(const fs::path& csv, const fs::path& png) {
  std::map<double, std::vector<double>> by_fraction;
  std::map<std::string, PlotSeries> by_seed;
  for (const auto& row : read_csv(csv)) {
    const double f = std::stod(row.at("fraction")), a = std::stod(row.at("accuracy"));
    by_fraction[f].push_back(a);
    auto& s = by_seed[row.at("seed")];
    s.label = "seed " + row.at("seed");
    s.x.push_back(f);
    s.y.push_back(a);
  }
  PlotSeries mean{"mean", {}, {}};
  for (const auto& [f, acc] : by_fraction) {
    mean.x.push_back(f);
    mean.y.push_back(summarize(acc).mean);
  }
  std::vector<PlotSeries> series{mean};
  for (auto& [_, s] : by_seed) series.push_back(std::move(s));
  write_line_plot(png, series);
}

// ---------------------------------------------------------------------------
// Commands

json cmd_synth(Run& run) {
  const fs::path manifest = gen_dataset(run.cfg.synthetic, run.cfg.annotators, run.dir / "data");
  const auto records = load_manifest(manifest, run.cfg.q);
  const auto p = partition_dataset(records, run.cfg.q);
  json out{{"manifest", manifest.string()},
           {"ground_truth", (run.dir / "data" / "ground_truth.json").string()},
           {"n", records.size()},
           {"cr", p.n1()},
           {"ic", p.n2()},
           {"lr", p.n3()}};
  write_json(run.dir / "summary.json", out);
  return out;
}

json cmd_partition(Run& run) {
  const auto records = load_manifest(run.cfg.manifest, run.cfg.q);
  const auto p = partition_dataset(records, run.cfg.q);
  auto ids = [](const std::vector<LabeledRecord>& set) {
    json a = json::array();
    for (const auto& r : set) a.push_back(r.record.id);
    return a;
  };
  write_json(run.dir / "partition.json", {{"cr", ids(p.cr)}, {"ic", ids(p.ic)}, {"lr", ids(p.lr)}});
  json out{{"cr", p.n1()}, {"ic", p.n2()}, {"lr", p.n3()}};
  write_json(run.dir / "summary.json", out);
  return out;
}

json cmd_preprocess(Run& run) {
  const auto records = load_manifest(run.cfg.manifest, run.cfg.q);
  const auto patches = load_patches(records, run.cfg.prep);
  const fs::path dir = run.dir / "patches";
  fs::create_directories(dir);
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (View v : kAllViews) write_png_gray(dir / (records[i].id + "_" + to_string(v) + ".png"), patches[i][v]);
  }
  json out{{"records", records.size()}, {"patches", dir.string()}};
  write_json(run.dir / "summary.json", out);
  return out;
}

json cmd_pretrain(Run& run) {
  const TrainingData data = training_for(run.cfg);
  const bool siblings = run.cfg.method == Method::mv_dar;
  const PretrainedViews pre = pretrain_views(data, run.cfg.train, siblings);
  const fs::path dir = run.dir / "checkpoints";
  fs::create_directories(dir);
  for (View v : kAllViews) {
    const auto vi = static_cast<std::size_t>(v);
    save_backbone(dir / ckpt_name("prd", v), pre.prd[vi], Role::prd, v);
    if (siblings) {
      save_backbone(dir / ckpt_name("cf", v), pre.cf[vi], Role::cf, v);
      save_backbone(dir / ckpt_name("lr", v), pre.lr[vi], Role::lr, v);
    }
  }
  write_logs(run.dir / "logs", pre.logs);
  json out{{"method", to_string(run.cfg.method)},
           {"checkpoints", dir.string()},
           {"cr", data.cr.size()},
           {"ic", data.ic.size()},
           {"lr", data.lr.size()}};
  write_json(run.dir / "summary.json", out);
  return out;
}

PretrainedViews load_pretrained(const fs::path& dir, bool siblings) {
  PretrainedViews pre;
  pre.has_siblings = siblings;
  for (View v : kAllViews) {
    const auto vi = static_cast<std::size_t>(v);
    for (Role want : kRoles) {
      if (want != Role::prd && !siblings) continue;
      const fs::path path = dir / ckpt_name(role_name(want), v);
      if (!fs::exists(path)) throw DataError("missing pretrained checkpoint " + path.string());
      Role role{};
      View view{};
      Backbone net = load_backbone(path, &role, &view);
      if (role != want || view != v) throw DataError(path.string() + " holds a different role or view");
      (want == Role::prd ? pre.prd : want == Role::cf ? pre.cf : pre.lr)[vi] = std::move(net);
    }
  }
  return pre;
}

json cmd_finetune(Run& run) {
  const TrainingData data = training_for(run.cfg);
  const PretrainedViews pre = load_pretrained(run.cfg.pretrained, run.cfg.method == Method::mv_dar);
  const FinetunedViews ft = finetune_views(data, run.cfg.method, run.cfg.train, pre);
  const fs::path dir = run.dir / "checkpoints";
  fs::create_directories(dir);
  for (View v : kAllViews) save_dar(dir / ckpt_name("dar", v), ft.models[static_cast<std::size_t>(v)], v);
  write_logs(run.dir / "logs", ft.logs);
  json out{{"method", to_string(run.cfg.method)},
           {"checkpoints", dir.string()},
           {"k", ft.models[0].k}};
  write_json(run.dir / "summary.json", out);
  return out;
}

json cmd_fuse_train(Run& run) {
  const TrainingData data = training_for(run.cfg);
  MvModel mv;
  for (View v : kAllViews) {
    const fs::path path = run.cfg.finetuned / ckpt_name("dar", v);
    if (!fs::exists(path)) throw DataError("missing fine-tuned checkpoint " + path.string());
    View view{};
    mv.views[static_cast<std::size_t>(v)] = load_dar(path, &view);
    if (view != v) throw DataError(path.string() + " holds a different view");
  }
  mv.init_fusion_average();
  auto fused = train_fusion(std::move(mv), data.cr, run.cfg.train);
  const fs::path path = run.dir / "mv.ckpt";
  save_mv(path, fused.model);
  write_logs(run.dir / "logs", {fused.log});
  json out{{"model", path.string()}};
  write_json(run.dir / "summary.json", out);
  return out;
}

json cmd_eval(Run& run) {
  const MvModel mv = load_mv(run.cfg.model);
  if (mv.q() != run.cfg.q) throw ConfigError("model has q=" + std::to_string(mv.q()) + ", config has q=" + std::to_string(run.cfg.q));
  const Protocol protocol = load_protocol(run.cfg);
  const MetricsReport report = evaluate(mv, protocol.test);
  write_metrics_report(run.dir, report);
  write_metrics_csv(run.dir / "metrics.csv", {{"eval", report}});
  return {{"accuracy", report.accuracy},
          {"macro_recall", report.macro_recall},
          {"macro_f1", report.macro_f1},
          {"macro_auc", report.macro_auc ? json(*report.macro_auc) : json(nullptr)}};
}

json summary_json(const RunSummary& s) { return json(s); }

json cmd_crossval(Run& run) {
  const TrainingData data = load_training(run.cfg);
  const CrossvalResult r =
      crossval(data, run.cfg.method, run.cfg.train, run.cfg.folds, run.cfg.repeats, run.cfg.seed_stride, run.jobs);
  write_json(run.dir / "crossval.json", json(r));
  std::vector<std::pair<std::string, MetricsReport>> rows;
  for (std::size_t i = 0; i < r.runs.size(); ++i) {
    const std::string label = "repeat" + std::to_string(i);
    write_metrics_report(run.dir / label, r.runs[i]);
    rows.emplace_back(label, r.runs[i]);
  }
  write_metrics_csv(run.dir / "metrics.csv", rows);
  return {{"method", to_string(run.cfg.method)}, {"summary", summary_json(r.summary)}};
}

json cmd_compare(Run& run) {
  const TrainingData data = load_training(run.cfg);
  const Protocol protocol = load_protocol(run.cfg);
  const CompareResult r = compare_methods(data, protocol, run.cfg.train, run.cfg.seeds, run.jobs);
  write_json(run.dir / "compare.json", json(r));

  std::vector<std::pair<std::string, MetricsReport>> rows;
  for (const auto& [method, runs] : r.runs) {
    for (std::size_t s = 0; s < runs.size(); ++s) {
      const std::string label = method + "/seed" + std::to_string(r.seeds[s]);
      write_metrics_report(run.dir / method / ("seed" + std::to_string(r.seeds[s])), runs[s]);
      rows.emplace_back(label, runs[s]);
    }
  }
  write_metrics_csv(run.dir / "metrics.csv", rows);

  std::ofstream table(run.dir / "table.csv");
  table << "method,metric,mean,std\n";
  for (const auto& [method, summary] : r.summary) {
    for (const auto& [metric, s] : summary.metrics) table << method << ',' << metric << ',' << s.mean << ',' << s.std << '\n';
  }
  std::ofstream pvals(run.dir / "pvalues.csv");
  pvals << "test,t,df,p\n";
  json tests = json::object();
  for (const auto& [name, t] : r.ttests) {
    pvals << name << ',' << t.t << ',' << t.df << ',' << t.p << '\n';
    tests[name] = t.p;
  }
  json means = json::object();
  for (const auto& [method, summary] : r.summary) means[method] = summary.metrics.at("accuracy").mean;
  return {{"accuracy_mean", means}, {"p_values", tests}};
}

json cmd_sweep(Run& run) {
  const TrainingData data = load_training(run.cfg);
  const Protocol protocol = load_protocol(run.cfg);
  const auto rows = grid_sweep(data, protocol, run.cfg.train, run.cfg.resolved_sweep(), run.cfg.seeds, run.jobs);
  json j = json::array();
  for (const auto& r : rows) j.push_back(r);
  write_json(run.dir / "sweep.json", j);
  write_sweep_csv(run.dir / "curve.csv", rows);
  if (run.plot) plot_sweep(run.dir / "curve.csv", run.dir / "curve.png");
  return {{"rows", rows.size()}, {"curve", (run.dir / "curve.csv").string()}};
}

json cmd_robustness(Run& run) {
  const TrainingData data = load_training(run.cfg);
  const Protocol protocol = load_protocol(run.cfg);
  const RobustnessResult r = robustness_sweep(data, protocol, run.cfg.train, run.cfg.fractions, run.cfg.seeds, run.jobs);
  write_json(run.dir / "robustness.json", json(r));
  write_curve_csv(run.dir / "curve.csv", r);
  if (run.plot) plot_robustness(run.dir / "curve.csv", run.dir / "curve.png");
  json means = json::array();
  for (const auto& p : r.points) means.push_back({{"fraction", p.fraction}, {"accuracy_mean", p.summary.mean}});
  return {{"points", means}};
}

json cmd_dump_features(Run& run) {
  const MvModel mv = load_mv(run.cfg.model);
  const auto records = load_manifest(run.cfg.manifest, run.cfg.q);
  const auto it = std::find_if(records.begin(), records.end(), [&](const AnnotationRecord& r) { return r.id == run.cfg.sample; });
  if (it == records.end()) throw DataError("sample '" + run.cfg.sample + "' not in " + run.cfg.manifest.string());
  const PatchTriplet patches = preprocess_volume(read_volume(it->volume_ref), it->center, run.cfg.prep);
  const DarModel& model = mv.views[static_cast<std::size_t>(run.cfg.view)];
  const int block = run.cfg.block == 0 ? model.spec().m() : run.cfg.block;
  const fs::path dir = run.dir / "features";
  fs::create_directories(dir);
  const std::string stem = it->id + "_" + to_string(run.cfg.view) + "_block" + std::to_string(block);
  json files = json::array();
  for (const auto& p : dump_feature_maps(model, patches[run.cfg.view], block, dir / stem)) files.push_back(p.string());
  write_png_gray(dir / (it->id + "_" + to_string(run.cfg.view) + "_input.png"), patches[run.cfg.view]);
  return {{"block", block}, {"files", files}};
}

const std::map<std::string, std::pair<const char*, json (*)(Run&)>>& commands() {
  static const std::map<std::string, std::pair<const char*, json (*)(Run&)>> table{
      {"synth", {"Generate a synthetic dataset with simulated annotators", cmd_synth}},
      {"partition", {"Split a manifest into CR/IC/LR sets", cmd_partition}},
      {"preprocess", {"Write tri-planar patches as PNG", cmd_preprocess}},
      {"pretrain", {"First stage: Prd on CR, CF on IC, LR on LR", cmd_pretrain}},
      {"finetune", {"Second stage: DAR fine-tuning per view", cmd_finetune}},
      {"fuse-train", {"Train the multi-view fusion layer", cmd_fuse_train}},
      {"eval", {"Evaluate a multi-view model on the test set", cmd_eval}},
      {"crossval", {"K-fold cross-validation over CR", cmd_crossval}},
      {"sweep", {"Grid over k, mu and delta", cmd_sweep}},
      {"robustness", {"Accuracy against the fraction of ambiguous data", cmd_robustness}},
      {"compare", {"MV-DAR against MV-Prd and AVE with paired t-tests", cmd_compare}},
      {"dump-features", {"Write feature-map PNGs for one record", cmd_dump_features}},
  };
  return table;
}

int fail(ErrorKind kind, const std::string& message) {
  const char* name = kind == ErrorKind::config ? "config" : kind == ErrorKind::data ? "data" : "runtime";
  std::cerr << json{{"error", {{"kind", name}, {"message", message}}}}.dump() << '\n';
  return kind == ErrorKind::config ? 2 : kind == ErrorKind::data ? 3 : 4;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Divide-and-rule learning from ambiguous labels"};
  app.require_subcommand(1);
  app.fallthrough();
  Options opt;
  app.add_option("--config", opt.config, "JSON config file");
  app.add_option("--set", opt.sets, "Override key=value (dotted keys, repeatable)")->take_all();
  app.add_option("--seed", opt.seed, "Sets train.seed (and synthetic.seed for synth)");
  app.add_option("--jobs", opt.jobs, "Worker threads for independent runs")->check(CLI::PositiveNumber);
  app.add_flag("--plot", opt.plot, "Render PNG plots from the emitted CSVs");
  for (const auto& [name, entry] : commands()) app.add_subcommand(name, entry.first);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(ErrorKind::config, e.what());
  }
  opt.command = app.get_subcommands().front()->get_name();

  try {
    Run run = open_run(opt);
    json out = commands().at(opt.command).second(run);
    out["run_dir"] = run.dir.string();
    std::cout << out.dump() << std::endl;
    return 0;
  } catch (const Error& e) {
    return fail(e.kind(), e.what());
  } catch (const json::exception& e) {
    return fail(ErrorKind::config, e.what());
  } catch (const std::exception& e) {
    return fail(ErrorKind::runtime, e.what());
  }
}
