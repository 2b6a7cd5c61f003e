#include "dar/network.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <Eigen/Core>

#include "dar/error.hpp"
#include "dar/image_io.hpp"
#include "dar/rng.hpp"

namespace dar {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

constexpr float kNormEps = 1e-5f;

inline float silu(float x) { return x * sigmoid(x); }
inline float silu_grad(float x) {
  const float s = sigmoid(x);
  return s * (1.0f + x * (1.0f - s));
}

std::string block_name(int j, const char* part) { return "block" + std::to_string(j) + "." + part; }

Tensor make_tensor(std::string name, std::vector<int> shape, float fill = 0.0f) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return {std::move(name), std::move(shape), std::vector<float>(n, fill)};
}

struct ConvGeom {
  int cin, h, w, cout, stride, ho, wo;
};

ConvGeom geom_for(const BackboneSpec& spec, int j) {
  ConvGeom g{};
  if (j == 1) {
    g.cin = spec.in_channels;
    g.h = g.w = spec.input_size;
  } else {
    const auto prev = spec.block_shape(j - 1);
    g.cin = prev[0];
    g.h = prev[1];
    g.w = prev[2];
  }
  g.cout = spec.blocks[static_cast<std::size_t>(j - 1)].channels;
  g.stride = spec.blocks[static_cast<std::size_t>(j - 1)].stride;
  g.ho = (g.h - 1) / g.stride + 1;
  g.wo = (g.w - 1) / g.stride + 1;
  return g;
}

void im2col(const float* x, const ConvGeom& g, float* cols) {
  const int p = g.ho * g.wo;
  for (int ci = 0; ci < g.cin; ++ci) {
    const float* xc = x + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        float* row = cols + static_cast<std::size_t>(ci * 9 + ky * 3 + kx) * p;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride + ky - 1;
          float* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, 0.0f);
            continue;
          }
          const float* src = xc + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride + kx - 1;
            dst[ox] = (ix < 0 || ix >= g.w) ? 0.0f : src[ix];
          }
        }
      }
    }
  }
}

void col2im(const float* cols, const ConvGeom& g, float* x) {
  const int p = g.ho * g.wo;
  std::fill(x, x + static_cast<std::size_t>(g.cin) * g.h * g.w, 0.0f);
  for (int ci = 0; ci < g.cin; ++ci) {
    float* xc = x + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const float* row = cols + static_cast<std::size_t>(ci * 9 + ky * 3 + kx) * p;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride + ky - 1;
          if (iy < 0 || iy >= g.h) continue;
          float* dst = xc + static_cast<std::size_t>(iy) * g.w;
          const float* src = row + oy * g.wo;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride + kx - 1;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

std::vector<float> softmax(std::span<const float> z) {
  std::vector<float> p(z.begin(), z.end());
  const float mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (float& v : p) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (float& v : p) v = static_cast<float>(v / sum);
  return p;
}

std::vector<float> sigmoid_vec(std::span<const float> z) {
  std::vector<float> s(z.size());
  std::transform(z.begin(), z.end(), s.begin(), [](float v) { return sigmoid(v); });
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamSet

std::size_t ParamSet::total_size() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet z;
  z.tensors.reserve(tensors.size());
  for (const auto& t : tensors) z.tensors.push_back({t.name, t.shape, std::vector<float>(t.size(), 0.0f)});
  return z;
}

void ParamSet::set_zero() {
  for (auto& t : tensors) std::fill(t.data.begin(), t.data.end(), 0.0f);
}

void ParamSet::add_scaled(const ParamSet& other, float scale) {
  if (!same_layout(other)) throw RuntimeError("parameter layouts differ");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& a = tensors[i].data;
    const auto& b = other.tensors[i].data;
    for (std::size_t k = 0; k < a.size(); ++k) a[k] += scale * b[k];
  }
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (tensors.size() != other.tensors.size()) return false;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].name != other.tensors[i].name || tensors[i].shape != other.tensors[i].shape) return false;
  }
  return true;
}

const Tensor& ParamSet::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw RuntimeError("no parameter named " + name);
}

bool operator==(const ParamSet& a, const ParamSet& b) {
  if (!a.same_layout(b)) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    // Bitwise comparison: reproducibility checks must not treat -0 == 0 or NaN specially.
    if (std::memcmp(a.tensors[i].data.data(), b.tensors[i].data.data(), a.tensors[i].size() * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// BackboneSpec

std::array<int, 3> BackboneSpec::block_shape(int j) const {
  if (j < 1 || j > m()) throw DataError("block index " + std::to_string(j) + " outside 1.." + std::to_string(m()));
  int size = input_size;
  for (int i = 0; i < j; ++i) size = (size - 1) / blocks[static_cast<std::size_t>(i)].stride + 1;
  return {blocks[static_cast<std::size_t>(j - 1)].channels, size, size};
}

void BackboneSpec::validate() const {
  if (m() < 2) throw ConfigError("backbone needs at least two blocks");
  if (input_size < 1 || in_channels < 1) throw ConfigError("backbone input must be non-empty");
  if (q < 2) throw ConfigError("backbone needs q >= 2");
  for (const auto& b : blocks) {
    if (b.channels < 1) throw ConfigError("block channels must be positive");
    if (b.stride != 1 && b.stride != 2) throw ConfigError("block stride must be 1 or 2");
  }
}

BackboneSpec BackboneSpec::make(int input_size, int m, int q, int base_channels, int max_channels) {
  BackboneSpec s;
  s.input_size = input_size;
  s.q = q;
  int size = input_size;
  int ch = base_channels;
  for (int i = 0; i < m; ++i) {
    const bool down = (i % 2 == 0) && size >= 8;
    if (down && i > 0) ch = std::min(ch * 2, max_channels);
    const int stride = down ? 2 : 1;
    s.blocks.push_back({ch, stride});
    size = (size - 1) / stride + 1;
  }
  s.validate();
  return s;
}

int default_transfer_start(int m) {
  const int transferred = (6 * m + 15) / 16;
  return std::max(1, m - transferred + 1);
}

const char* to_string(Role role) {
  switch (role) {
    case Role::prd:
      return "prd";
    case Role::cf:
      return "cf";
    case Role::lr:
      return "lr";
  }
  return "unknown";
}

Role role_from_string(const std::string& name) {
  for (Role r : {Role::prd, Role::cf, Role::lr}) {
    if (name == to_string(r)) return r;
  }
  throw ConfigError("unknown role '" + name + "'");
}

// ---------------------------------------------------------------------------
// Backbone

Backbone::Backbone(BackboneSpec spec, ParamSet params) : spec_(std::move(spec)), params_(std::move(params)) {
  spec_.validate();
  if (!params_.same_layout(zero_params(spec_))) throw DataError("parameters do not match the backbone spec");
}

ParamSet Backbone::zero_params(const BackboneSpec& spec) {
  spec.validate();
  ParamSet p;
  for (int j = 1; j <= spec.m(); ++j) {
    const ConvGeom g = geom_for(spec, j);
    p.tensors.push_back(make_tensor(block_name(j, "conv"), {g.cout, g.cin * 9}));
    p.tensors.push_back(make_tensor(block_name(j, "gamma"), {g.cout}));
    p.tensors.push_back(make_tensor(block_name(j, "beta"), {g.cout}));
  }
  const int c_last = spec.blocks.back().channels;
  p.tensors.push_back(make_tensor("head.weight", {spec.q, c_last}));
  p.tensors.push_back(make_tensor("head.bias", {spec.q}));
  return p;
}

Backbone Backbone::init(const BackboneSpec& spec, std::uint64_t seed) {
  ParamSet p = zero_params(spec);
  auto rng = make_rng(seed, {tag(Stream::init)});
  for (int j = 1; j <= spec.m(); ++j) {
    const ConvGeom g = geom_for(spec, j);
    std::normal_distribution<float> he(0.0f, std::sqrt(2.0f / static_cast<float>(9 * g.cin)));
    auto& conv = p.tensors[static_cast<std::size_t>(3 * (j - 1))].data;
    for (float& w : conv) w = he(rng);
    auto& gamma = p.tensors[static_cast<std::size_t>(3 * (j - 1) + 1)].data;
    std::fill(gamma.begin(), gamma.end(), 1.0f);
  }
  const int c_last = spec.blocks.back().channels;
  std::normal_distribution<float> head(0.0f, std::sqrt(1.0f / static_cast<float>(c_last)));
  for (float& w : p.tensors[p.tensors.size() - 2].data) w = head(rng);
  return Backbone(spec, std::move(p));
}

Trace Backbone::forward(const Image2D& patch, const ForwardHook& hook) const {
  if (patch.rows != spec_.input_size || patch.cols != spec_.input_size || spec_.in_channels != 1) {
    throw DataError("backbone expects a " + std::to_string(spec_.input_size) + "x" +
                    std::to_string(spec_.input_size) + " patch, got " + std::to_string(patch.rows) + "x" +
                    std::to_string(patch.cols));
  }
  const int m = spec_.m();
  Trace t;
  t.blocks.resize(static_cast<std::size_t>(m));
  std::vector<float> input = patch.values;
  for (int j = 1; j <= m; ++j) {
    const ConvGeom g = geom_for(spec_, j);
    BlockCache& bc = t.blocks[static_cast<std::size_t>(j - 1)];
    const int p = g.ho * g.wo;
    const std::size_t n = static_cast<std::size_t>(g.cout) * p;
    bc.cols.resize(static_cast<std::size_t>(9 * g.cin) * p);
    im2col(input.data(), g, bc.cols.data());

    const auto& W = params_.tensors[static_cast<std::size_t>(3 * (j - 1))].data;
    const auto& gamma = params_.tensors[static_cast<std::size_t>(3 * (j - 1) + 1)].data;
    const auto& beta = params_.tensors[static_cast<std::size_t>(3 * (j - 1) + 2)].data;
    bc.zhat.resize(n);
    MapMat z(bc.zhat.data(), g.cout, p);
    z.noalias() = ConstMapMat(W.data(), g.cout, 9 * g.cin) * ConstMapMat(bc.cols.data(), 9 * g.cin, p);

    double mean = 0.0;
    for (float v : bc.zhat) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (float v : bc.zhat) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    bc.inv_std = static_cast<float>(1.0 / std::sqrt(var + kNormEps));
    const float fmean = static_cast<float>(mean);

    bc.pre.resize(n);
    bc.raw = FeatureMap(g.cout, g.ho, g.wo, 0.0f, j);
    for (int c = 0; c < g.cout; ++c) {
      for (int i = 0; i < p; ++i) {
        const std::size_t idx = static_cast<std::size_t>(c) * p + i;
        const float zh = (bc.zhat[idx] - fmean) * bc.inv_std;
        bc.zhat[idx] = zh;
        const float y = gamma[c] * zh + beta[c];
        bc.pre[idx] = y;
        bc.raw.values[idx] = silu(y);
      }
    }
    if (hook) {
      FeatureMap fed = bc.raw;
      hook(j, fed);
      input = std::move(fed.values);
    } else {
      input = bc.raw.values;
    }
  }

  // Global average pool of the (possibly augmented) last map, then the head.
  const auto last = spec_.block_shape(m);
  const int c_last = last[0], hw = last[1] * last[2];
  t.pooled.assign(static_cast<std::size_t>(c_last), 0.0f);
  for (int c = 0; c < c_last; ++c) {
    double s = 0.0;
    for (int i = 0; i < hw; ++i) s += input[static_cast<std::size_t>(c) * hw + i];
    t.pooled[static_cast<std::size_t>(c)] = static_cast<float>(s / hw);
  }
  const auto& hw_w = params_.tensors[params_.tensors.size() - 2].data;
  const auto& hw_b = params_.tensors.back().data;
  t.logits.assign(static_cast<std::size_t>(spec_.q), 0.0f);
  for (int o = 0; o < spec_.q; ++o) {
    float acc = hw_b[static_cast<std::size_t>(o)];
    for (int c = 0; c < c_last; ++c) acc += hw_w[static_cast<std::size_t>(o * c_last + c)] * t.pooled[static_cast<std::size_t>(c)];
    t.logits[static_cast<std::size_t>(o)] = acc;
  }
  return t;
}

void Backbone::backward(const Trace& trace, std::span<const float> dlogits, ParamSet& grads,
                        const BackwardHook& hook) const {
  const int m = spec_.m();
  if (dlogits.size() != static_cast<std::size_t>(spec_.q)) throw DataError("dlogits has the wrong length");
  if (!grads.same_layout(params_)) throw RuntimeError("gradient buffer layout mismatch");

  const auto last = spec_.block_shape(m);
  const int c_last = last[0], hw = last[1] * last[2];
  const auto& head_w = params_.tensors[params_.tensors.size() - 2].data;
  auto& g_head_w = grads.tensors[grads.tensors.size() - 2].data;
  auto& g_head_b = grads.tensors.back().data;
  std::vector<float> g_out(static_cast<std::size_t>(c_last) * hw, 0.0f);
  for (int o = 0; o < spec_.q; ++o) {
    const float d = dlogits[static_cast<std::size_t>(o)];
    g_head_b[static_cast<std::size_t>(o)] += d;
    for (int c = 0; c < c_last; ++c) g_head_w[static_cast<std::size_t>(o * c_last + c)] += d * trace.pooled[static_cast<std::size_t>(c)];
  }
  for (int c = 0; c < c_last; ++c) {
    float dg = 0.0f;
    for (int o = 0; o < spec_.q; ++o) dg += head_w[static_cast<std::size_t>(o * c_last + c)] * dlogits[static_cast<std::size_t>(o)];
    dg /= static_cast<float>(hw);
    std::fill_n(g_out.begin() + static_cast<std::ptrdiff_t>(c) * hw, hw, dg);
  }

  std::vector<float> g_pre, g_cols;
  for (int j = m; j >= 1; --j) {
    if (hook) hook(j, g_out);
    const ConvGeom g = geom_for(spec_, j);
    const BlockCache& bc = trace.blocks[static_cast<std::size_t>(j - 1)];
    const int p = g.ho * g.wo;
    const std::size_t n = static_cast<std::size_t>(g.cout) * p;
    const auto& W = params_.tensors[static_cast<std::size_t>(3 * (j - 1))].data;
    const auto& gamma = params_.tensors[static_cast<std::size_t>(3 * (j - 1) + 1)].data;
    auto& gW = grads.tensors[static_cast<std::size_t>(3 * (j - 1))].data;
    auto& g_gamma = grads.tensors[static_cast<std::size_t>(3 * (j - 1) + 1)].data;
    auto& g_beta = grads.tensors[static_cast<std::size_t>(3 * (j - 1) + 2)].data;

    g_pre.resize(n);
    double m1 = 0.0, m2 = 0.0;
    for (int c = 0; c < g.cout; ++c) {
      double sg = 0.0, sb = 0.0;
      for (int i = 0; i < p; ++i) {
        const std::size_t idx = static_cast<std::size_t>(c) * p + i;
        const float gp = g_out[idx] * silu_grad(bc.pre[idx]);
        sg += gp * bc.zhat[idx];
        sb += gp;
        const float gz = gp * gamma[static_cast<std::size_t>(c)];
        g_pre[idx] = gz;
        m1 += gz;
        m2 += gz * bc.zhat[idx];
      }
      g_gamma[static_cast<std::size_t>(c)] += static_cast<float>(sg);
      g_beta[static_cast<std::size_t>(c)] += static_cast<float>(sb);
    }
    const float fm1 = static_cast<float>(m1 / n), fm2 = static_cast<float>(m2 / n);
    for (std::size_t idx = 0; idx < n; ++idx) g_pre[idx] = bc.inv_std * (g_pre[idx] - fm1 - bc.zhat[idx] * fm2);

    ConstMapMat gz(g_pre.data(), g.cout, p);
    MapMat(gW.data(), g.cout, 9 * g.cin).noalias() += gz * ConstMapMat(bc.cols.data(), 9 * g.cin, p).transpose();
    if (j > 1) {
      g_cols.resize(static_cast<std::size_t>(9 * g.cin) * p);
      MapMat(g_cols.data(), 9 * g.cin, p).noalias() = ConstMapMat(W.data(), g.cout, 9 * g.cin).transpose() * gz;
      g_out.assign(static_cast<std::size_t>(g.cin) * g.h * g.w, 0.0f);
      col2im(g_cols.data(), g, g_out.data());
    }
  }
}

// ---------------------------------------------------------------------------
// DAR

void DarModel::validate() const {
  if (!(prd.spec() == cf.spec()) || !(prd.spec() == lr.spec())) {
    throw DataError("Prd, CF and LR networks must share one backbone spec");
  }
  if (k < 1 || k > spec().m() + 1) {
    throw ConfigError("transfer start k=" + std::to_string(k) + " outside 1.." + std::to_string(spec().m() + 1));
  }
}

DarTrace dar_forward(const DarModel& model, const Image2D& patch, bool need_siblings) {
  model.validate();
  DarTrace t;
  const bool transfer = model.transfer_enabled();
  t.siblings = need_siblings || transfer;
  if (t.siblings) {
    t.cf = model.cf.forward(patch);
    t.lr = model.lr.forward(patch);
    t.y_cf = sigmoid_vec(t.cf.logits);
    t.y_lr = softmax(t.lr.logits);
  }
  ForwardHook hook;
  if (transfer) {
    hook = [&](int j, FeatureMap& f) {
      if (j >= model.k) f = augment_features(f, t.cf.features(j), t.lr.features(j));
    };
  }
  t.prd = model.prd.forward(patch, hook);
  t.y_prd = softmax(t.prd.logits);
  return t;
}

DarGrads zero_grads(const DarModel& model) {
  return {model.prd.params().zeros_like(), model.cf.params().zeros_like(), model.lr.params().zeros_like()};
}

void dar_backward(const DarModel& model, const DarTrace& trace, std::span<const float> dlogits_prd,
                  std::span<const float> dlogits_cf, std::span<const float> dlogits_lr, DarGrads& grads,
                  const TrainableRoles& trainable) {
  const int m = model.spec().m();
  const bool transfer = model.transfer_enabled();
  std::vector<std::vector<float>> extra_cf(static_cast<std::size_t>(m + 1)), extra_lr(static_cast<std::size_t>(m + 1));

  BackwardHook prd_hook;
  if (transfer) {
    prd_hook = [&](int j, std::vector<float>& g) {
      if (j < model.k) return;
      const FeatureMap& f = trace.prd.features(j);
      FeatureMap go(f.channels, f.height, f.width, 0.0f, j);
      go.values = g;
      auto ag = augment_backward(f, trace.cf.features(j), trace.lr.features(j), go);
      g = std::move(ag.prd.values);
      extra_cf[static_cast<std::size_t>(j)] = std::move(ag.cf.values);
      extra_lr[static_cast<std::size_t>(j)] = std::move(ag.lr.values);
    };
  }
  model.prd.backward(trace.prd, dlogits_prd, grads.prd, prd_hook);

  if (!trace.siblings) return;
  auto sibling_hook = [](std::vector<std::vector<float>>& extra) {
    return [&extra](int j, std::vector<float>& g) {
      const auto& e = extra[static_cast<std::size_t>(j)];
      if (e.empty()) return;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += e[i];
    };
  };
  if (trainable.cf) model.cf.backward(trace.cf, dlogits_cf, grads.cf, sibling_hook(extra_cf));
  if (trainable.lr) model.lr.backward(trace.lr, dlogits_lr, grads.lr, sibling_hook(extra_lr));
}

// ---------------------------------------------------------------------------
// MV fusion

void MvModel::init_fusion_average() {
  const int qq = q();
  fusion_weight.assign(static_cast<std::size_t>(qq * 3 * qq), 0.0f);
  fusion_bias.assign(static_cast<std::size_t>(qq), 0.0f);
  for (int o = 0; o < qq; ++o) {
    for (int v = 0; v < 3; ++v) fusion_weight[static_cast<std::size_t>(o * 3 * qq + v * qq + o)] = 1.0f / 3.0f;
  }
}

void MvModel::validate() const {
  const int qq = q();
  for (const auto& v : views) {
    v.validate();
    if (v.spec().q != qq) throw DataError("views disagree on Q");
  }
  if (fusion_weight.size() != static_cast<std::size_t>(qq * 3 * qq) || fusion_bias.size() != static_cast<std::size_t>(qq)) {
    throw DataError("fusion parameters must be Q x 3Q weights plus Q biases");
  }
}

std::vector<float> fusion_forward(const MvModel& model, std::span<const float> concat_probs) {
  const int qq = model.q();
  if (concat_probs.size() != static_cast<std::size_t>(3 * qq)) throw DataError("fusion input must have length 3Q");
  std::vector<float> out(model.fusion_bias);
  for (int o = 0; o < qq; ++o) {
    for (int i = 0; i < 3 * qq; ++i) out[static_cast<std::size_t>(o)] += model.fusion_weight[static_cast<std::size_t>(o * 3 * qq + i)] * concat_probs[static_cast<std::size_t>(i)];
  }
  return out;
}

std::vector<float> mv_forward(const MvModel& model, const PatchTriplet& triplet) {
  std::vector<float> concat;
  concat.reserve(static_cast<std::size_t>(3 * model.q()));
  for (View v : kViews) {
    const DarModel& dm = model.views[static_cast<std::size_t>(v)];
    const DarTrace t = dar_forward(dm, triplet[v], false);
    concat.insert(concat.end(), t.y_prd.begin(), t.y_prd.end());
  }
  return fusion_forward(model, concat);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCkptMagic[8] = {'D', 'A', 'R', 'C', 'K', 'P', 'T', '1'};

void write_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

std::uint64_t read_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

void append_prefixed(std::vector<Tensor>& out, const ParamSet& p, const std::string& prefix) {
  for (const auto& t : p.tensors) out.push_back({prefix + t.name, t.shape, t.data});
}

// Pulls tensors named prefix+<layout name> out of `ckpt` in layout order.
ParamSet take_prefixed(const Checkpoint& ckpt, std::size_t& cursor, const ParamSet& layout, const std::string& prefix) {
  ParamSet p = layout;
  for (auto& t : p.tensors) {
    if (cursor >= ckpt.tensors.size()) throw DataError("checkpoint is missing tensor " + prefix + t.name);
    const Tensor& src = ckpt.tensors[cursor++];
    if (src.name != prefix + t.name) throw DataError("checkpoint tensor " + src.name + " where " + prefix + t.name + " was expected");
    if (src.shape != t.shape) throw DataError("checkpoint tensor " + src.name + " has a shape that does not match its header");
    t.data = src.data;
  }
  return p;
}

json base_header(const char* kind, const BackboneSpec& spec) {
  return json{{"format", "dar-checkpoint"}, {"version", 1}, {"kind", kind}, {"spec", spec}, {"q", spec.q}};
}

void expect_kind(const Checkpoint& c, const char* kind) {
  if (c.header.value("kind", std::string()) != kind) {
    throw DataError(std::string("expected a '") + kind + "' checkpoint, found '" + c.header.value("kind", std::string("?")) + "'");
  }
}

}  // namespace

void write_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  json header = ckpt.header;
  json list = json::array();
  for (const auto& t : ckpt.tensors) list.push_back({{"name", t.name}, {"shape", t.shape}});
  header["tensors"] = list;
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kCkptMagic, 8);
  write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : ckpt.tensors) {
    if constexpr (std::endian::native == std::endian::little) {
      out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 4));
    } else {
      for (float v : t.data) {
        auto bits = std::bit_cast<std::uint32_t>(v);
        char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
        out.write(b, 4);
      }
    }
  }
  if (!out) throw DataError("write failed for " + path.string());
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCkptMagic, 8) != 0) {
    throw DataError(path.string() + ": not a checkpoint file");
  }
  const std::uint64_t hlen = read_u64(bytes.data() + 8);
  if (hlen > bytes.size() - 16) throw DataError(path.string() + ": truncated header");
  Checkpoint c;
  try {
    c.header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": bad header: " + e.what());
  }
  std::size_t off = 16 + hlen;
  for (const auto& entry : c.header.at("tensors")) {
    Tensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<int>>();
    std::size_t n = 1;
    for (int d : t.shape) {
      if (d < 0) throw DataError(path.string() + ": negative dimension in " + t.name);
      n *= static_cast<std::size_t>(d);
    }
    if (off + n * 4 > bytes.size()) throw DataError(path.string() + ": truncated blob " + t.name);
    t.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + 4 * i + b])) << (8 * b);
      t.data[i] = std::bit_cast<float>(bits);
    }
    off += n * 4;
    c.tensors.push_back(std::move(t));
  }
  c.header.erase("tensors");
  return c;
}

void save_backbone(const fs::path& path, const Backbone& net, Role role, View view) {
  Checkpoint c{base_header("backbone", net.spec()), {}};
  c.header["role"] = to_string(role);
  c.header["view"] = to_string(view);
  append_prefixed(c.tensors, net.params(), "");
  write_checkpoint(path, c);
}

Backbone load_backbone(const fs::path& path, Role* role, View* view) {
  const Checkpoint c = read_checkpoint(path);
  expect_kind(c, "backbone");
  const BackboneSpec spec = c.header.at("spec").get<BackboneSpec>();
  std::size_t cursor = 0;
  ParamSet p = take_prefixed(c, cursor, Backbone::zero_params(spec), "");
  if (cursor != c.tensors.size()) throw DataError(path.string() + ": unexpected extra tensors");
  if (role) *role = role_from_string(c.header.at("role").get<std::string>());
  if (view) *view = view_from_string(c.header.at("view").get<std::string>());
  return Backbone(spec, std::move(p));
}

void save_dar(const fs::path& path, const DarModel& model, View view) {
  model.validate();
  Checkpoint c{base_header("dar", model.spec()), {}};
  c.header["k"] = model.k;
  c.header["view"] = to_string(view);
  c.header["roles"] = {"prd", "cf", "lr"};
  append_prefixed(c.tensors, model.prd.params(), "prd/");
  append_prefixed(c.tensors, model.cf.params(), "cf/");
  append_prefixed(c.tensors, model.lr.params(), "lr/");
  write_checkpoint(path, c);
}

DarModel load_dar(const fs::path& path, View* view) {
  const Checkpoint c = read_checkpoint(path);
  expect_kind(c, "dar");
  const BackboneSpec spec = c.header.at("spec").get<BackboneSpec>();
  const ParamSet layout = Backbone::zero_params(spec);
  std::size_t cursor = 0;
  DarModel m;
  m.prd = Backbone(spec, take_prefixed(c, cursor, layout, "prd/"));
  m.cf = Backbone(spec, take_prefixed(c, cursor, layout, "cf/"));
  m.lr = Backbone(spec, take_prefixed(c, cursor, layout, "lr/"));
  m.k = c.header.at("k").get<int>();
  m.validate();
  if (view) *view = view_from_string(c.header.at("view").get<std::string>());
  return m;
}

void save_mv(const fs::path& path, const MvModel& model) {
  model.validate();
  Checkpoint c{base_header("mv", model.views[0].spec()), {}};
  json views = json::array();
  for (View v : kViews) {
    const DarModel& dm = model.views[static_cast<std::size_t>(v)];
    views.push_back({{"view", to_string(v)}, {"k", dm.k}, {"spec", dm.spec()}});
    const std::string pre = std::string(to_string(v)) + "/";
    append_prefixed(c.tensors, dm.prd.params(), pre + "prd/");
    append_prefixed(c.tensors, dm.cf.params(), pre + "cf/");
    append_prefixed(c.tensors, dm.lr.params(), pre + "lr/");
  }
  c.header["views"] = views;
  const int q = model.q();
  c.tensors.push_back({"fusion.weight", {q, 3 * q}, model.fusion_weight});
  c.tensors.push_back({"fusion.bias", {q}, model.fusion_bias});
  write_checkpoint(path, c);
}

MvModel load_mv(const fs::path& path) {
  const Checkpoint c = read_checkpoint(path);
  expect_kind(c, "mv");
  MvModel m;
  std::size_t cursor = 0;
  const auto& views = c.header.at("views");
  if (views.size() != 3) throw DataError(path.string() + ": MV checkpoint must hold three views");
  for (std::size_t i = 0; i < 3; ++i) {
    const View v = view_from_string(views[i].at("view").get<std::string>());
    if (static_cast<std::size_t>(v) != i) throw DataError(path.string() + ": views out of order");
    const BackboneSpec spec = views[i].at("spec").get<BackboneSpec>();
    const ParamSet layout = Backbone::zero_params(spec);
    const std::string pre = std::string(to_string(v)) + "/";
    DarModel& dm = m.views[i];
    dm.prd = Backbone(spec, take_prefixed(c, cursor, layout, pre + "prd/"));
    dm.cf = Backbone(spec, take_prefixed(c, cursor, layout, pre + "cf/"));
    dm.lr = Backbone(spec, take_prefixed(c, cursor, layout, pre + "lr/"));
    dm.k = views[i].at("k").get<int>();
  }
  const int q = m.views[0].spec().q;
  ParamSet fusion;
  fusion.tensors.push_back(make_tensor("fusion.weight", {q, 3 * q}));
  fusion.tensors.push_back(make_tensor("fusion.bias", {q}));
  fusion = take_prefixed(c, cursor, fusion, "");
  m.fusion_weight = fusion.tensors[0].data;
  m.fusion_bias = fusion.tensors[1].data;
  if (cursor != c.tensors.size()) throw DataError(path.string() + ": unexpected extra tensors");
  m.validate();
  return m;
}

void to_json(json& j, const BackboneSpec& s) {
  json blocks = json::array();
  for (const auto& b : s.blocks) blocks.push_back({{"channels", b.channels}, {"stride", b.stride}});
  j = json{{"input_size", s.input_size}, {"in_channels", s.in_channels}, {"q", s.q}, {"blocks", blocks}};
}

void from_json(const json& j, BackboneSpec& s) {
  s.input_size = j.at("input_size").get<int>();
  s.in_channels = j.value("in_channels", 1);
  s.q = j.at("q").get<int>();
  s.blocks.clear();
  for (const auto& b : j.at("blocks")) s.blocks.push_back({b.at("channels").get<int>(), b.at("stride").get<int>()});
  s.validate();
}

// ---------------------------------------------------------------------------
// Feature dumps

namespace {

Image2D channel_sum(const FeatureMap& f) {
  Image2D out(f.height, f.width, 0.0f);
  for (int c = 0; c < f.channels; ++c) {
    for (int y = 0; y < f.height; ++y) {
      for (int x = 0; x < f.width; ++x) out(y, x) += f(c, y, x);
    }
  }
  return out;
}

}  // namespace

FeatureDump channel_sums(const DarModel& model, const Image2D& patch, int block) {
  model.validate();
  if (block < model.k || block > model.spec().m()) {
    throw DataError("feature dump block " + std::to_string(block) + " outside the transferred range " +
                    std::to_string(model.k) + ".." + std::to_string(model.spec().m()));
  }
  const DarTrace t = dar_forward(model, patch, true);
  const FeatureMap& f = t.prd.features(block);
  const FeatureMap& fc = t.cf.features(block);
  const FeatureMap& fl = t.lr.features(block);
  FeatureDump d;
  d.prd = channel_sum(f);
  d.lr = channel_sum(fl);
  d.cf = channel_sum(fc);
  d.na = channel_sum(na_module(fc, f));
  d.ca = channel_sum(ca_module(fl, f));
  d.augmented = channel_sum(augment_features(f, fc, fl));
  return d;
}

Image2D minmax_normalize(const Image2D& field) {
  Image2D out = field;
  if (field.values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(field.values.begin(), field.values.end());
  const float mn = *lo, mx = *hi;
  for (float& v : out.values) v = mx > mn ? (v - mn) / (mx - mn) : 0.5f;
  return out;
}

std::vector<fs::path> dump_feature_maps(const DarModel& model, const Image2D& patch, int block, const fs::path& out_stem) {
  const FeatureDump d = channel_sums(model, patch, block);
  std::vector<fs::path> paths;
  const std::pair<const char*, const Image2D*> items[] = {
      {"prd", &d.prd}, {"lr", &d.lr}, {"cf", &d.cf}, {"aug", &d.augmented}};
  for (const auto& [suffix, img] : items) {
    fs::path p = out_stem;
    p += std::string("_") + suffix + ".png";
    write_png_gray(p, minmax_normalize(*img));
    paths.push_back(p);
  }
  return paths;
}

}  // namespace dar
