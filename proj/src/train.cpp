#include "dar/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "dar/error.hpp"
#include "dar/rng.hpp"

namespace dar {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Config

BackboneSpec TrainConfig::backbone(int input_size, int q) const {
  return BackboneSpec::make(input_size, m, q, base_channels, max_channels);
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (fusion_epochs < 0) throw ConfigError("fusion_epochs must be non-negative");
  if (!(lr_pretrain > 0.0) || !(lr_finetune > 0.0) || !(lr_fusion > 0.0)) {
    throw ConfigError("learning rates must be positive");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam moment coefficients must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(poly_power > 0.0)) throw ConfigError("poly_power must be positive");
  loss.validate();
  if (m < 1) throw ConfigError("backbone needs at least one block");
  if (k < 0 || k > m + 1) throw ConfigError("k must be 0 (default) or lie in 1.." + std::to_string(m + 1));
  if (base_channels < 1 || max_channels < base_channels) throw ConfigError("invalid channel widths");
  if (patience < 0) throw ConfigError("patience must be non-negative");
  if (!(val_fraction > 0.0 && val_fraction <= 0.5)) throw ConfigError("val_fraction must lie in (0, 0.5]");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"fusion_epochs", c.fusion_epochs},
           {"lr_pretrain", c.lr_pretrain},
           {"lr_finetune", c.lr_finetune},
           {"lr_fusion", c.lr_fusion},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"adam_eps", c.adam_eps},
           {"poly_power", c.poly_power},
           {"loss", c.loss},
           {"m", c.m},
           {"k", c.k},
           {"base_channels", c.base_channels},
           {"max_channels", c.max_channels},
           {"seed", c.seed},
           {"patience", c.patience},
           {"val_fraction", c.val_fraction},
           {"augment", c.augment},
           {"finetune_siblings", c.finetune_siblings},
           {"joint_fusion", c.joint_fusion}};
}

void from_json(const json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "fusion_epochs") c.fusion_epochs = v.get<int>();
      else if (key == "lr_pretrain") c.lr_pretrain = v.get<double>();
      else if (key == "lr_finetune") c.lr_finetune = v.get<double>();
      else if (key == "lr_fusion") c.lr_fusion = v.get<double>();
      else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "adam_eps") c.adam_eps = v.get<double>();
      else if (key == "poly_power") c.poly_power = v.get<double>();
      else if (key == "loss") c.loss = v.get<LossConfig>();
      else if (key == "m") c.m = v.get<int>();
      else if (key == "k") c.k = v.get<int>();
      else if (key == "base_channels") c.base_channels = v.get<int>();
      else if (key == "max_channels") c.max_channels = v.get<int>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "patience") c.patience = v.get<int>();
      else if (key == "val_fraction") c.val_fraction = v.get<double>();
      else if (key == "augment") c.augment = v.get<bool>();
      else if (key == "finetune_siblings") c.finetune_siblings = v.get<bool>();
      else if (key == "joint_fusion") c.joint_fusion = v.get<bool>();
      else throw ConfigError("unknown train config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Data

std::vector<PatchTriplet> load_patches(std::span<const AnnotationRecord> records, const PrepConfig& prep) {
  std::vector<PatchTriplet> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(preprocess_volume(read_volume(r.volume_ref), r.center, prep));
  return out;
}

namespace {

std::unordered_map<std::string, std::size_t> index_by_id(std::span<const AnnotationRecord> records) {
  std::unordered_map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!idx.emplace(records[i].id, i).second) throw DataError("duplicate record id '" + records[i].id + "'");
  }
  return idx;
}

}  // namespace

TrainingData build_training_data(std::span<const AnnotationRecord> records, std::span<const PatchTriplet> patches,
                                 int q, const std::function<int(const std::string&)>& truth) {
  if (records.size() != patches.size()) throw DataError("one patch triplet is needed per record");
  const auto idx = index_by_id(records);
  const PartitionedDataset parts = partition_dataset(records, q);
  TrainingData data;
  data.q = q;
  auto convert = [&](const std::vector<LabeledRecord>& src, std::vector<Example>& dst) {
    for (const auto& lr : src) {
      dst.push_back({lr.record.id, lr.record.scores, patches[idx.at(lr.record.id)], lr.label,
                     truth ? truth(lr.record.id) : 0});
    }
  };
  convert(parts.cr, data.cr);
  convert(parts.ic, data.ic);
  convert(parts.lr, data.lr);
  return data;
}

std::vector<Example> build_test_set(std::span<const AnnotationRecord> records, std::span<const PatchTriplet> patches,
                                    int q, const std::function<int(const std::string&)>& truth) {
  if (records.size() != patches.size()) throw DataError("one patch triplet is needed per record");
  if (!truth) throw DataError("test set needs ground truth");
  index_by_id(records);
  std::vector<Example> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const int t = truth(records[i].id);
    out.push_back({records[i].id, records[i].scores, patches[i], LabelVector::onehot(t, q), t});
  }
  return out;
}

TrainingData proxy_label_data(const TrainingData& data) {
  TrainingData out;
  out.q = data.q;
  for (const auto* set : {&data.cr, &data.ic, &data.lr}) {
    for (const auto& ex : *set) {
      Example e = ex;
      e.label = LabelVector::onehot(mean_proxy_label(ex.scores, data.q), data.q);
      out.cr.push_back(std::move(e));
    }
  }
  return out;
}

TrainingData subsample_ambiguous(const TrainingData& data, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("ambiguous-data fraction must lie in [0, 1]");
  auto pick = [&](const std::vector<Example>& src, std::uint64_t which) {
    std::vector<std::size_t> order(src.size());
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(seed, {tag(Stream::subsample), which});
    std::shuffle(order.begin(), order.end(), rng);
    const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(src.size())));
    order.resize(keep);
    std::sort(order.begin(), order.end());
    std::vector<Example> out;
    out.reserve(keep);
    for (auto i : order) out.push_back(src[i]);
    return out;
  };
  TrainingData out;
  out.q = data.q;
  out.cr = data.cr;
  out.ic = pick(data.ic, 2);
  out.lr = pick(data.lr, 3);
  return out;
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(const ParamSet& layout, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(layout.zeros_like()), v_(layout.zeros_like()) {}

void Adam::step(ParamSet& params, const ParamSet& grads, double lr) {
  if (!params.same_layout(m_) || !grads.same_layout(m_)) throw RuntimeError("Adam: parameter layout changed");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  for (std::size_t ti = 0; ti < params.tensors.size(); ++ti) {
    auto& p = params.tensors[ti].data;
    const auto& g = grads.tensors[ti].data;
    auto& m = m_.tensors[ti].data;
    auto& v = v_.tensors[ti].data;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

// ---------------------------------------------------------------------------
// Logs

namespace {
json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
}  // namespace

void to_json(json& j, const StepRecord& s) {
  j = json{{"step", s.step}, {"lr", s.lr},      {"L_prd", opt(s.l_prd)},
           {"L_cf", opt(s.l_cf)}, {"L_lr", opt(s.l_lr)}, {"L_total", s.l_total}};
}

void to_json(json& j, const EpochRecord& e) {
  j = json{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", opt(e.val_loss)},
           {"val_accuracy", opt(e.val_accuracy)}};
}

void write_step_log(const std::filesystem::path& path, const TrainLog& log) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& s : log.steps) out << json(s).dump() << '\n';
}

std::size_t validation_count(std::size_t n, double fraction) {
  if (n < 2) return 0;
  const auto want = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  return std::min(n - 1, std::max<std::size_t>(1, want));
}

Stage pretrain_stage(Role role) {
  switch (role) {
    case Role::prd: return Stage::pretrain_prd;
    case Role::cf: return Stage::pretrain_cf;
    case Role::lr: return Stage::pretrain_lr;
  }
  return Stage::pretrain_prd;
}

// ---------------------------------------------------------------------------
// Shared loop

namespace {

using Row = BatchMatrix<double>;

Row row_of(std::span<const float> v) {
  Row r(1, static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) r(0, static_cast<Eigen::Index>(i)) = v[i];
  return r;
}

Row row_of(const LabelVector& label) {
  Row r(1, label.classes());
  for (int i = 0; i < label.classes(); ++i) r(0, i) = label[static_cast<std::size_t>(i)];
  return r;
}

std::vector<float> to_floats(const Row& r, double scale) {
  std::vector<float> out(static_cast<std::size_t>(r.cols()));
  for (Eigen::Index i = 0; i < r.cols(); ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(r(0, i) * scale);
  return out;
}

int argmax(std::span<const float> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin()) + 1;
}

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

// Keyed by the data subset, so every stage on the same subset holds out the same samples.
Split make_split(std::size_t n, double fraction, std::uint64_t seed, Role subset) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(seed, {tag(Stream::split), static_cast<std::uint64_t>(subset)});
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t nv = validation_count(n, fraction);
  Split s;
  s.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(nv));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(nv), order.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

struct BatchOutcome {
  std::optional<double> prd, cf, lr;
  double total = 0.0;
};

struct ValOutcome {
  double loss = 0.0;
  std::optional<double> accuracy;
};

struct LoopSpec {
  std::string name;
  Stage stage = Stage::pretrain_prd;
  std::uint64_t seed = 0;
  int epochs = 1;
  int batch_size = 32;
  double lr0 = 1e-4;
  double power = 0.9;
  int patience = 10;
};

TrainLog run_loop(const LoopSpec& spec, const Split& split,
                  const std::function<BatchOutcome(std::span<const std::size_t>, int, double)>& step,
                  const std::function<ValOutcome(std::span<const std::size_t>)>& validate,
                  const std::function<void()>& keep_best) {
  TrainLog log;
  log.stage = spec.name;
  log.n_train = split.train.size();
  log.n_val = split.val.size();
  const auto per_epoch = static_cast<long long>((split.train.size() + static_cast<std::size_t>(spec.batch_size) - 1) /
                                                static_cast<std::size_t>(spec.batch_size));
  log.planned_steps = per_epoch * spec.epochs;
  const ScheduleConfig sched{spec.lr0, std::max<long long>(1, log.planned_steps), spec.power};

  const bool has_val = !split.val.empty();
  if (has_val) {
    const ValOutcome v0 = validate(split.val);
    log.initial_val_loss = v0.loss;
    log.best_val_loss = v0.loss;
    log.epochs.push_back({0, 0.0, v0.loss, v0.accuracy});
    keep_best();
  }

  long long t = 0;
  int since_best = 0;
  std::vector<std::size_t> order = split.train;
  for (int epoch = 1; epoch <= spec.epochs; ++epoch) {
    order = split.train;
    auto rng = make_rng(spec.seed, {tag(Stream::shuffle), static_cast<std::uint64_t>(spec.stage),
                                    static_cast<std::uint64_t>(epoch)});
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(spec.batch_size)) {
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(spec.batch_size));
      const std::span<const std::size_t> batch(order.data() + b, e - b);
      const double lr = poly_lr(t, sched);
      const BatchOutcome out = step(batch, epoch, lr);
      log.steps.push_back({t, lr, out.prd, out.cf, out.lr, out.total});
      epoch_loss += out.total * static_cast<double>(batch.size());
      ++t;
    }
    EpochRecord rec{epoch, order.empty() ? 0.0 : epoch_loss / static_cast<double>(order.size()), {}, {}};
    if (has_val) {
      const ValOutcome v = validate(split.val);
      rec.val_loss = v.loss;
      rec.val_accuracy = v.accuracy;
      if (v.loss < *log.best_val_loss) {
        log.best_val_loss = v.loss;
        log.best_epoch = epoch;
        keep_best();
        since_best = 0;
      } else {
        ++since_best;
      }
    }
    log.epochs.push_back(rec);
    if (has_val && spec.patience > 0 && since_best >= spec.patience) break;
  }
  if (!has_val) {
    log.best_epoch = log.epochs.empty() ? 0 : log.epochs.back().epoch;
    keep_best();
  }
  return log;
}

AugmentParams augment_draw(const Example& ex, const TrainConfig& cfg, Stage stage, int epoch) {
  auto rng = make_rng(cfg.seed, {tag(Stream::augment), static_cast<std::uint64_t>(stage),
                                 static_cast<std::uint64_t>(epoch), fnv1a(ex.id)});
  return draw_augment(rng);
}

Image2D train_input(const Example& ex, View view, const TrainConfig& cfg, Stage stage, int epoch) {
  if (!cfg.augment) return ex.patches[view];
  return apply_augment(ex.patches[view], augment_draw(ex, cfg, stage, epoch));
}

struct RoleLoss {
  double loss = 0.0;
  Row dlogits;
};

RoleLoss role_loss(Role role, std::span<const float> logits, const LabelVector& label, double eps) {
  const Row z = row_of(logits);
  const Row y = row_of(label);
  if (role == Role::cf) {
    const Row s = sigmoid_all(z);
    return {loss_cf(s, y, eps), loss_cf_grad_logits(s, y, eps)};
  }
  const Row p = softmax_rows(z);
  return {cross_entropy(p, y, eps), cross_entropy_grad_logits(p, y, eps)};
}

void require_labels(std::span<const Example> data, LabelKind kind, const char* what) {
  for (const auto& ex : data) {
    if (ex.label.kind() != kind) {
      throw DataError(std::string(what) + ": sample '" + ex.id + "' has a " + to_string(ex.label.kind()) +
                      " label, expected " + to_string(kind));
    }
  }
}

void require_input(std::span<const Example> data, const BackboneSpec& spec, View view) {
  for (const auto& ex : data) {
    const Image2D& im = ex.patches[view];
    if (im.rows != spec.input_size || im.cols != spec.input_size) {
      throw DataError("sample '" + ex.id + "' patch is " + std::to_string(im.rows) + "x" + std::to_string(im.cols) +
                      ", network expects " + std::to_string(spec.input_size));
    }
  }
}

LoopSpec loop_spec(const char* name, Stage stage, const TrainConfig& cfg, double lr0, int epochs) {
  return {name, stage, cfg.seed, epochs, cfg.batch_size, lr0, cfg.poly_power, cfg.patience};
}

}  // namespace

// ---------------------------------------------------------------------------
// Single network

Trained<Backbone> train_single(Role role, Backbone init, View view, std::span<const Example> data,
                               const TrainConfig& cfg, double lr0, Stage stage) {
  cfg.validate();
  if (data.empty()) throw DataError(std::string("cannot train ") + to_string(role) + " network on an empty subset");
  require_labels(data, role == Role::cf ? LabelKind::candidate : LabelKind::onehot, to_string(role));
  require_input(data, init.spec(), view);

  Trained<Backbone> out{init, {}};
  Backbone& net = out.model;
  Backbone best = net;
  Adam adam(net.params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
  ParamSet grads = net.params().zeros_like();
  const double eps = cfg.loss.eps;
  // CR and LR data for the prd and lr roles, IC data for cf.
  const Split split = make_split(data.size(), cfg.val_fraction, cfg.seed, role);

  auto step = [&](std::span<const std::size_t> batch, int epoch, double lr) {
    grads.set_zero();
    double total = 0.0;
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (auto i : batch) {
      const Trace tr = net.forward(train_input(data[i], view, cfg, stage, epoch));
      const RoleLoss rl = role_loss(role, tr.logits, data[i].label, eps);
      total += rl.loss;
      const auto g = to_floats(rl.dlogits, scale);
      net.backward(tr, g, grads);
    }
    adam.step(net.params(), grads, lr);
    BatchOutcome o;
    o.total = total * scale;
    (role == Role::prd ? o.prd : role == Role::cf ? o.cf : o.lr) = o.total;
    return o;
  };
  auto validate = [&](std::span<const std::size_t> idx) {
    double total = 0.0;
    long correct = 0;
    for (auto i : idx) {
      const Trace tr = net.forward(data[i].patches[view]);
      total += role_loss(role, tr.logits, data[i].label, eps).loss;
      if (role != Role::cf && argmax(tr.logits) == data[i].label.hot_class()) ++correct;
    }
    ValOutcome v{total / static_cast<double>(idx.size()), {}};
    if (role != Role::cf) v.accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
    return v;
  };
  const std::string name = std::string(stage == Stage::finetune ? "continue_" : "pretrain_") + to_string(role);
  out.log = run_loop(loop_spec(name.c_str(), stage, cfg, lr0, cfg.epochs), split, step, validate,
                     [&] { best = net; });
  net = std::move(best);
  return out;
}

Trained<Backbone> pretrain(Role role, View view, std::span<const Example> data, const TrainConfig& cfg,
                           int input_size, int q) {
  cfg.validate();
  const BackboneSpec spec = cfg.backbone(input_size, q);
  const auto seed = derive_seed(cfg.seed, {tag(Stream::init), static_cast<std::uint64_t>(role),
                                           static_cast<std::uint64_t>(view)});
  return train_single(role, Backbone::init(spec, seed), view, data, cfg, cfg.lr_pretrain, pretrain_stage(role));
}

// ---------------------------------------------------------------------------
// DAR fine-tuning

namespace {

struct DarSampleLoss {
  DarLossBreakdown parts;
  DarLogitGrads grads;
};

// Probabilities are recomputed in double from the logits, matching role_loss.
DarSampleLoss dar_sample_loss(const DarTrace& t, const LabelVector& label, const LossConfig& loss) {
  const Row y = row_of(label);
  const Row prd = softmax_rows(row_of(t.prd.logits));
  DarSampleLoss out;
  if (t.siblings) {
    const Row cf = sigmoid_all(row_of(t.cf.logits)), lr = softmax_rows(row_of(t.lr.logits));
    out.parts = loss_dar(prd, cf, lr, y, loss);
    out.grads = loss_dar_grad_logits(prd, cf, lr, y, loss);
  } else {
    const double eps = loss.eps;
    out.parts.prd = cross_entropy(prd, y, eps);
    out.parts.total = out.parts.prd;
    out.grads.prd = cross_entropy_grad_logits(prd, y, eps);
  }
  return out;
}

}  // namespace

Trained<DarModel> finetune_dar(View view, const Backbone& prd, const Backbone& cf, const Backbone& lr,
                               std::span<const Example> cr, const TrainConfig& cfg, int k) {
  cfg.validate();
  if (cr.empty()) throw DataError("cannot fine-tune DAR on an empty CR subset");
  Trained<DarModel> out{{prd, cf, lr, k}, {}};
  DarModel& model = out.model;
  model.validate();
  require_labels(cr, LabelKind::onehot, "finetune_dar");
  require_input(cr, model.spec(), view);

  const bool siblings = model.transfer_enabled() || cfg.loss.mu > 0.0 || cfg.loss.delta > 0.0;
  const TrainableRoles trainable{true, cfg.finetune_siblings, cfg.finetune_siblings};
  DarModel best = model;
  Adam adam_prd(model.prd.params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
  Adam adam_cf(model.cf.params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
  Adam adam_lr(model.lr.params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
  DarGrads grads = zero_grads(model);
  const Split split = make_split(cr.size(), cfg.val_fraction, cfg.seed, Role::prd);

  auto step = [&](std::span<const std::size_t> batch, int epoch, double lr_now) {
    grads.prd.set_zero();
    grads.cf.set_zero();
    grads.lr.set_zero();
    DarLossBreakdown sum;
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (auto i : batch) {
      const DarTrace t = dar_forward(model, train_input(cr[i], view, cfg, Stage::finetune, epoch), siblings);
      const DarSampleLoss sl = dar_sample_loss(t, cr[i].label, cfg.loss);
      sum.prd += sl.parts.prd;
      sum.cf += sl.parts.cf;
      sum.lr += sl.parts.lr;
      sum.total += sl.parts.total;
      const auto gp = to_floats(sl.grads.prd, scale);
      if (t.siblings) {
        const auto gc = to_floats(sl.grads.cf, scale), gl = to_floats(sl.grads.lr, scale);
        dar_backward(model, t, gp, gc, gl, grads, trainable);
      } else {
        dar_backward(model, t, gp, {}, {}, grads, trainable);
      }
    }
    adam_prd.step(model.prd.params(), grads.prd, lr_now);
    if (siblings && cfg.finetune_siblings) {
      adam_cf.step(model.cf.params(), grads.cf, lr_now);
      adam_lr.step(model.lr.params(), grads.lr, lr_now);
    }
    BatchOutcome o;
    o.prd = sum.prd * scale;
    if (siblings) {
      o.cf = sum.cf * scale;
      o.lr = sum.lr * scale;
    }
    o.total = sum.total * scale;
    return o;
  };
  auto validate = [&](std::span<const std::size_t> idx) {
    double total = 0.0;
    long correct = 0;
    for (auto i : idx) {
      const DarTrace t = dar_forward(model, cr[i].patches[view], siblings);
      total += dar_sample_loss(t, cr[i].label, cfg.loss).parts.total;
      if (argmax(t.y_prd) == cr[i].label.hot_class()) ++correct;
    }
    return ValOutcome{total / static_cast<double>(idx.size()),
                      static_cast<double>(correct) / static_cast<double>(idx.size())};
  };
  out.log = run_loop(loop_spec("finetune_dar", Stage::finetune, cfg, cfg.lr_finetune, cfg.epochs), split, step,
                     validate, [&] { best = model; });
  model = std::move(best);
  return out;
}

// ---------------------------------------------------------------------------
// Fusion

namespace {

ParamSet fusion_params(const MvModel& mv) {
  const int q = mv.q();
  return ParamSet{{Tensor{"fusion.weight", {q, 3 * q}, mv.fusion_weight}, Tensor{"fusion.bias", {q}, mv.fusion_bias}}};
}

void set_fusion_params(MvModel& mv, const ParamSet& p) {
  mv.fusion_weight = p.tensors[0].data;
  mv.fusion_bias = p.tensors[1].data;
}

std::vector<float> concat_probs(const MvModel& mv, const PatchTriplet& patches) {
  std::vector<float> x;
  x.reserve(static_cast<std::size_t>(3 * mv.q()));
  for (View v : kViews) {
    const DarTrace t = dar_forward(mv.views[static_cast<std::size_t>(v)], patches[v], false);
    x.insert(x.end(), t.y_prd.begin(), t.y_prd.end());
  }
  return x;
}

// Cross-entropy of softmax(W x + b); accumulates dW, db and returns dL/dx.
double fusion_sample(const MvModel& mv, std::span<const float> x, const LabelVector& label, double eps, double scale,
                     ParamSet* grads, std::vector<float>* dx, int* predicted) {
  const std::vector<float> logits = fusion_forward(mv, x);
  if (predicted) *predicted = argmax(logits);
  const Row p = softmax_rows(row_of(logits));
  const Row y = row_of(label);
  const double loss = cross_entropy(p, y, eps);
  if (!grads) return loss;
  const Row g = cross_entropy_grad_logits(p, y, eps);
  const int q = mv.q();
  auto& gw = grads->tensors[0].data;
  auto& gb = grads->tensors[1].data;
  if (dx) dx->assign(static_cast<std::size_t>(3 * q), 0.0f);
  for (int o = 0; o < q; ++o) {
    const auto go = static_cast<float>(g(0, o) * scale);
    gb[static_cast<std::size_t>(o)] += go;
    for (int i = 0; i < 3 * q; ++i) {
      const auto wi = static_cast<std::size_t>(o * 3 * q + i);
      gw[wi] += go * x[static_cast<std::size_t>(i)];
      if (dx) (*dx)[static_cast<std::size_t>(i)] += go * mv.fusion_weight[wi];
    }
  }
  return loss;
}

}  // namespace

Trained<MvModel> train_fusion(MvModel model, std::span<const Example> cr, const TrainConfig& cfg) {
  cfg.validate();
  if (cr.empty()) throw DataError("cannot train fusion on an empty CR subset");
  model.validate();
  for (View v : kViews) require_input(cr, model.views[static_cast<std::size_t>(v)].spec(), v);
  require_labels(cr, LabelKind::onehot, "train_fusion");

  const int q = model.q();
  const double eps = cfg.loss.eps;
  ParamSet fp = fusion_params(model);
  Adam adam(fp, cfg.beta1, cfg.beta2, cfg.adam_eps);
  ParamSet grads = fp.zeros_like();
  MvModel best = model;
  const Split split = make_split(cr.size(), cfg.val_fraction, cfg.seed, Role::prd);

  // Frozen views: the fused inputs never change, so compute them once.
  std::vector<std::vector<float>> cache;
  if (!cfg.joint_fusion) {
    cache.reserve(cr.size());
    for (const auto& ex : cr) cache.push_back(concat_probs(model, ex.patches));
  }

  std::array<Adam, 3> adam_prd{Adam(model.views[0].prd.params(), cfg.beta1, cfg.beta2, cfg.adam_eps),
                               Adam(model.views[1].prd.params(), cfg.beta1, cfg.beta2, cfg.adam_eps),
                               Adam(model.views[2].prd.params(), cfg.beta1, cfg.beta2, cfg.adam_eps)};
  std::array<Adam, 3> adam_cf{Adam(model.views[0].cf.params(), cfg.beta1, cfg.beta2, cfg.adam_eps),
                              Adam(model.views[1].cf.params(), cfg.beta1, cfg.beta2, cfg.adam_eps),
                              Adam(model.views[2].cf.params(), cfg.beta1, cfg.beta2, cfg.adam_eps)};
  std::array<Adam, 3> adam_lr{Adam(model.views[0].lr.params(), cfg.beta1, cfg.beta2, cfg.adam_eps),
                              Adam(model.views[1].lr.params(), cfg.beta1, cfg.beta2, cfg.adam_eps),
                              Adam(model.views[2].lr.params(), cfg.beta1, cfg.beta2, cfg.adam_eps)};
  const TrainableRoles trainable{true, cfg.finetune_siblings, cfg.finetune_siblings};

  auto step = [&](std::span<const std::size_t> batch, int epoch, double lr_now) {
    grads.set_zero();
    const double scale = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    if (!cfg.joint_fusion) {
      for (auto i : batch) total += fusion_sample(model, cache[i], cr[i].label, eps, scale, &grads, nullptr, nullptr);
    } else {
      std::array<DarGrads, 3> vg{zero_grads(model.views[0]), zero_grads(model.views[1]), zero_grads(model.views[2])};
      for (auto i : batch) {
        const PatchTriplet in =
            cfg.augment ? apply_augment(cr[i].patches, augment_draw(cr[i], cfg, Stage::fusion, epoch)) : cr[i].patches;
        std::array<DarTrace, 3> traces;
        std::vector<float> x;
        for (View v : kViews) {
          const auto vi = static_cast<std::size_t>(v);
          traces[vi] = dar_forward(model.views[vi], in[v], false);
          x.insert(x.end(), traces[vi].y_prd.begin(), traces[vi].y_prd.end());
        }
        std::vector<float> dx;
        total += fusion_sample(model, x, cr[i].label, eps, scale, &grads, &dx, nullptr);
        for (View v : kViews) {
          const auto vi = static_cast<std::size_t>(v);
          const auto& y = traces[vi].y_prd;
          const auto off = vi * static_cast<std::size_t>(q);
          // Softmax Jacobian: dz = y * (dy - <dy, y>).
          double dot = 0.0;
          for (int c = 0; c < q; ++c) dot += static_cast<double>(dx[off + static_cast<std::size_t>(c)]) * y[static_cast<std::size_t>(c)];
          std::vector<float> dz(static_cast<std::size_t>(q));
          for (int c = 0; c < q; ++c) {
            dz[static_cast<std::size_t>(c)] =
                static_cast<float>(y[static_cast<std::size_t>(c)] * (dx[off + static_cast<std::size_t>(c)] - dot));
          }
          const std::vector<float> zero(static_cast<std::size_t>(q), 0.0f);
          dar_backward(model.views[vi], traces[vi], dz, zero, zero, vg[vi], trainable);
        }
      }
      for (std::size_t vi = 0; vi < 3; ++vi) {
        adam_prd[vi].step(model.views[vi].prd.params(), vg[vi].prd, cfg.lr_finetune);
        if (model.views[vi].transfer_enabled() && cfg.finetune_siblings) {
          adam_cf[vi].step(model.views[vi].cf.params(), vg[vi].cf, cfg.lr_finetune);
          adam_lr[vi].step(model.views[vi].lr.params(), vg[vi].lr, cfg.lr_finetune);
        }
      }
    }
    adam.step(fp, grads, lr_now);
    set_fusion_params(model, fp);
    BatchOutcome o;
    o.total = total * scale;
    return o;
  };
  auto validate = [&](std::span<const std::size_t> idx) {
    double total = 0.0;
    long correct = 0;
    for (auto i : idx) {
      int pred = 0;
      const std::vector<float> x = cfg.joint_fusion ? concat_probs(model, cr[i].patches) : cache[i];
      total += fusion_sample(model, x, cr[i].label, eps, 1.0, nullptr, nullptr, &pred);
      if (pred == cr[i].label.hot_class()) ++correct;
    }
    return ValOutcome{total / static_cast<double>(idx.size()),
                      static_cast<double>(correct) / static_cast<double>(idx.size())};
  };
  Trained<MvModel> out{model, {}};
  out.log = run_loop(loop_spec(cfg.joint_fusion ? "fusion_joint" : "fusion", Stage::fusion, cfg, cfg.lr_fusion,
                               cfg.resolved_fusion_epochs()),
                     split, step, validate, [&] { best = model; });
  out.model = std::move(best);
  return out;
}

// ---------------------------------------------------------------------------
// Prediction

std::vector<double> predict_view(const DarModel& model, const Image2D& patch) {
  const DarTrace t = dar_forward(model, patch, false);
  return {t.y_prd.begin(), t.y_prd.end()};
}

std::vector<double> predict_mv(const MvModel& model, const PatchTriplet& patches) {
  const std::vector<float> logits = mv_forward(model, patches);
  const Row p = softmax_rows(row_of(logits));
  return {p.data(), p.data() + p.size()};
}

MetricsReport evaluate(const MvModel& model, std::span<const Example> test) {
  if (test.empty()) throw DataError("evaluate: empty test set");
  std::vector<std::vector<double>> scores;
  std::vector<int> truth;
  scores.reserve(test.size());
  for (const auto& ex : test) {
    if (ex.truth < 1) throw DataError("evaluate: sample '" + ex.id + "' has no ground truth");
    scores.push_back(predict_mv(model, ex.patches));
    truth.push_back(ex.truth);
  }
  return evaluate_scores(scores, truth, model.q());
}

double view_accuracy(const Backbone& net, View view, std::span<const Example> data) {
  if (data.empty()) throw DataError("view_accuracy: empty set");
  long correct = 0;
  for (const auto& ex : data) {
    const Trace t = net.forward(ex.patches[view]);
    const int want = ex.truth > 0 ? ex.truth : ex.label.hot_class();
    if (argmax(t.logits) == want) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace dar
