#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dar/attention.hpp"
#include "dar/volume.hpp"

namespace dar {

// ---------------------------------------------------------------------------
// Parameters

struct Tensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;

  std::size_t size() const noexcept { return data.size(); }
};

/// Ordered, named parameter blobs. Gradients use a ParamSet of the same layout.
struct ParamSet {
  std::vector<Tensor> tensors;

  std::size_t total_size() const;
  ParamSet zeros_like() const;
  void set_zero();
  void add_scaled(const ParamSet& other, float scale);
  bool same_layout(const ParamSet& other) const;
  const Tensor& find(const std::string& name) const;
  friend bool operator==(const ParamSet& a, const ParamSet& b);
};

// ---------------------------------------------------------------------------
// Backbone contract

struct BlockSpec {
  int channels = 8;
  int stride = 1;
  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

/// m blocks of conv3x3 -> layer norm -> SiLU, then global average pool and an
/// affine head with Q outputs.
struct BackboneSpec {
  int input_size = 64;
  int in_channels = 1;
  int q = 5;
  std::vector<BlockSpec> blocks;

  int m() const noexcept { return static_cast<int>(blocks.size()); }
  /// (C, H, W) emitted by 1-based block j.
  std::array<int, 3> block_shape(int j) const;
  void validate() const;
  friend bool operator==(const BackboneSpec&, const BackboneSpec&) = default;

  /// Stride 2 on every other block (starting with the first) while the map
  /// is at least 8 wide; channels double after each downsampling.
  static BackboneSpec make(int input_size, int m, int q, int base_channels = 8, int max_channels = 64);
};

/// First transferred block for an m-block backbone: transfers the last
/// ceil(6m/16) blocks, i.e. 11 of 16 at full scale and 4 of 6 at desk scale.
int default_transfer_start(int m);

enum class Role { prd, cf, lr };
const char* to_string(Role role);
Role role_from_string(const std::string& name);

/// Per-sample forward record needed by backward().
struct BlockCache {
  std::vector<float> cols;  // im2col of the block input, (9*Cin) x (Ho*Wo)
  std::vector<float> zhat;  // normalized conv output
  std::vector<float> pre;   // pre-activation (after affine)
  float inv_std = 1.0f;
  FeatureMap raw;  // block output before any hook
};

struct Trace {
  std::vector<BlockCache> blocks;
  std::vector<float> pooled;
  std::vector<float> logits;

  const FeatureMap& features(int block) const { return blocks.at(static_cast<std::size_t>(block - 1)).raw; }
};

/// Called after block j (1-based) with the block output; may replace it with
/// the map fed to block j+1.
using ForwardHook = std::function<void(int block, FeatureMap& features)>;
/// Called during backward with dL/d(map fed onward from block j); must turn it
/// into dL/d(raw block output) in place.
using BackwardHook = std::function<void(int block, std::vector<float>& grad)>;

class Backbone {
 public:
  Backbone() = default;
  Backbone(BackboneSpec spec, ParamSet params);

  /// He-normal conv weights, unit gamma, zero beta and head bias.
  static Backbone init(const BackboneSpec& spec, std::uint64_t seed);
  static ParamSet zero_params(const BackboneSpec& spec);

  const BackboneSpec& spec() const noexcept { return spec_; }
  const ParamSet& params() const noexcept { return params_; }
  ParamSet& params() noexcept { return params_; }

  Trace forward(const Image2D& patch, const ForwardHook& hook = {}) const;
  /// Accumulates parameter gradients into `grads` (same layout as params()).
  void backward(const Trace& trace, std::span<const float> dlogits, ParamSet& grads,
                const BackwardHook& hook = {}) const;

 private:
  BackboneSpec spec_;
  ParamSet params_;
};

// ---------------------------------------------------------------------------
// Single-view divide-and-rule model

struct DarModel {
  Backbone prd;
  Backbone cf;
  Backbone lr;
  int k = 1;  // first transferred block; k = m + 1 disables transfer

  const BackboneSpec& spec() const noexcept { return prd.spec(); }
  bool transfer_enabled() const noexcept { return k <= spec().m(); }
  void validate() const;
};

struct DarTrace {
  Trace prd;
  Trace cf;
  Trace lr;
  bool siblings = false;  // cf/lr streams were run
  std::vector<float> y_prd;
  std::vector<float> y_cf;
  std::vector<float> y_lr;
};

/// CF and LR run plain forwards; Prd-Net's block j >= k output is replaced by
/// f + NA(f_cf, f) + CA(f_lr, f) before feeding block j+1. With
/// `need_siblings` false and transfer disabled, the sibling streams are skipped.
DarTrace dar_forward(const DarModel& model, const Image2D& patch, bool need_siblings = true);

struct DarGrads {
  ParamSet prd;
  ParamSet cf;
  ParamSet lr;
};

DarGrads zero_grads(const DarModel& model);

struct TrainableRoles {
  bool prd = true;
  bool cf = true;
  bool lr = true;
};

/// Backpropagates head-logit gradients of all three streams, including the
/// attention paths from Prd-Net into the siblings' transferred blocks.
void dar_backward(const DarModel& model, const DarTrace& trace, std::span<const float> dlogits_prd,
                  std::span<const float> dlogits_cf, std::span<const float> dlogits_lr, DarGrads& grads,
                  const TrainableRoles& trainable = {});

// ---------------------------------------------------------------------------
// Multi-view fusion

struct MvModel {
  std::array<DarModel, 3> views;  // indexed by View
  std::vector<float> fusion_weight;  // Q x 3Q, row-major
  std::vector<float> fusion_bias;    // Q

  int q() const noexcept { return views[0].spec().q; }
  /// Averaging init: weight [I | I | I] / 3, zero bias.
  void init_fusion_average();
  void validate() const;
};

/// Fusion logits P = W concat(y_prd^axial, y_prd^sagittal, y_prd^coronal) + b.
std::vector<float> fusion_forward(const MvModel& model, std::span<const float> concat_probs);
std::vector<float> mv_forward(const MvModel& model, const PatchTriplet& triplet);

// ---------------------------------------------------------------------------
// Checkpoints: magic, JSON header, then named f32 little-endian blobs.

struct Checkpoint {
  nlohmann::json header;
  std::vector<Tensor> tensors;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

void save_backbone(const std::filesystem::path& path, const Backbone& net, Role role, View view);
Backbone load_backbone(const std::filesystem::path& path, Role* role = nullptr, View* view = nullptr);
void save_dar(const std::filesystem::path& path, const DarModel& model, View view);
DarModel load_dar(const std::filesystem::path& path, View* view = nullptr);
void save_mv(const std::filesystem::path& path, const MvModel& model);
MvModel load_mv(const std::filesystem::path& path);

void to_json(nlohmann::json& j, const BackboneSpec& s);
void from_json(const nlohmann::json& j, BackboneSpec& s);

// ---------------------------------------------------------------------------
// Feature-map dumps

struct FeatureDump {
  Image2D prd;
  Image2D lr;
  Image2D cf;
  Image2D na;  // O_na and O_ca, so the augmented sum can be checked
  Image2D ca;
  Image2D augmented;
};

/// Channel-wise sums (before normalization) of f_prd, f_lr, f_cf and the
/// augmented map at `block`.
FeatureDump channel_sums(const DarModel& model, const Image2D& patch, int block);
/// Min-max to [0, 1]; a constant field maps to 0.5.
Image2D minmax_normalize(const Image2D& field);
/// Writes <stem>_{prd,lr,cf,aug}.png (normalized) and returns their paths.
std::vector<std::filesystem::path> dump_feature_maps(const DarModel& model, const Image2D& patch, int block,
                                                     const std::filesystem::path& out_stem);

}  // namespace dar
