#pragma once

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

#include "ssllab/layers.hpp"

namespace ssllab {

// ---------------------------------------------------------------------------
// Config shared by all backbone families. Unused fields are ignored by
// families that don't need them (e.g. patch_size for the CNN).
// ---------------------------------------------------------------------------

struct BackboneConfig {
  std::string family = "resnet_small";  // resnet_small | vit_tiny | pit_tiny
  int64_t in_channels = 3;
  int64_t in_h = 32;
  int64_t in_w = 32;
  int64_t embed_dim = 64;   // transformer token width
  int64_t depth = 2;        // resnet: residual blocks per stage; transformers: encoder blocks
  int64_t heads = 4;        // first-stage head count (PiT scales it with width)
  int64_t patch_size = 4;
  double width_multiplier = 1.0;  // resnet channel scale
  bool mean_pool = false;         // transformer readout: token mean instead of class token
};

template <typename T>
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual Tensor<T> forward(const Tensor<T>& images) = 0;
  virtual void visit(const std::string& prefix, const ParamVisitor<T>& fn) = 0;
  virtual void set_mode(Mode m) = 0;
  virtual int64_t output_dim() const = 0;
  const BackboneConfig& config() const { return config_; }

 protected:
  explicit Backbone(BackboneConfig cfg) : config_(std::move(cfg)) {}

  void check_input(const Tensor<T>& x) const {
    if (x.ndim() != 4 || x.dim(1) != config_.in_channels ||
        x.dim(2) != config_.in_h || x.dim(3) != config_.in_w)
      throw ShapeError("backbone: expected [N," +
                       std::to_string(config_.in_channels) + "," +
                       std::to_string(config_.in_h) + "," +
                       std::to_string(config_.in_w) + "], got " +
                       shape_str(x.shape()));
  }

  BackboneConfig config_;
};

// ---------------------------------------------------------------------------
// Residual CNN, CIFAR-style: 3x3 stride-1 stem (no initial max-pool), four
// stages with channel doubling and stride-2 downsampling between stages,
// global average pooling at the end.
// ---------------------------------------------------------------------------

template <typename T>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(int64_t c_in, int64_t c_out, int64_t stride, uint64_t seed)
      : downsample_(stride != 1 || c_in != c_out),
        conv1_(c_in, c_out, 3, stride, 1, mix_seed(seed, 1)),
        bn1_(c_out),
        conv2_(c_out, c_out, 3, 1, 1, mix_seed(seed, 2)),
        bn2_(c_out) {
    if (downsample_) {
      skip_conv_ = Conv2dLayer<T>(c_in, c_out, 1, stride, 0, mix_seed(seed, 3));
      skip_bn_ = BatchNorm<T>(c_out);
    }
  }

  Tensor<T> forward(const Tensor<T>& x) {
    auto main = bn2_.forward(conv2_.forward(relu(bn1_.forward(conv1_.forward(x)))));
    auto skip = downsample_ ? skip_bn_.forward(skip_conv_.forward(x)) : x;
    return relu(add(main, skip));
  }

  /// The skip path on its own (identity unless downsampling) — lets tests
  /// verify that a zeroed residual branch reduces the block to it.
  Tensor<T> skip_path(const Tensor<T>& x) {
    return downsample_ ? skip_bn_.forward(skip_conv_.forward(x)) : x;
  }

  void set_mode(Mode m) {
    bn1_.set_mode(m);
    bn2_.set_mode(m);
    if (downsample_) skip_bn_.set_mode(m);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    conv1_.visit(prefix + ".conv1", fn);
    bn1_.visit(prefix + ".bn1", fn);
    conv2_.visit(prefix + ".conv2", fn);
    bn2_.visit(prefix + ".bn2", fn);
    if (downsample_) {
      skip_conv_.visit(prefix + ".skip.conv", fn);
      skip_bn_.visit(prefix + ".skip.bn", fn);
    }
  }

  Conv2dLayer<T>& conv1() { return conv1_; }
  Conv2dLayer<T>& conv2() { return conv2_; }

 private:
  bool downsample_ = false;
  Conv2dLayer<T> conv1_;
  BatchNorm<T> bn1_;
  Conv2dLayer<T> conv2_;
  BatchNorm<T> bn2_;
  Conv2dLayer<T> skip_conv_;
  BatchNorm<T> skip_bn_;
};

template <typename T>
class ResNetSmall : public Backbone<T> {
 public:
  ResNetSmall(BackboneConfig cfg, uint64_t seed) : Backbone<T>(std::move(cfg)) {
    const auto& c = this->config_;
    if (c.depth < 1)
      throw ConfigError("resnet_small: depth must be >= 1");
    if (c.width_multiplier <= 0.0)
      throw ConfigError("resnet_small: width_multiplier must be > 0");
    const int64_t base[4] = {64, 128, 256, 512};
    int64_t channels[4];
    for (int i = 0; i < 4; ++i)
      channels[i] = std::max<int64_t>(
          1, static_cast<int64_t>(base[i] * c.width_multiplier));
    stem_ = Conv2dLayer<T>(c.in_channels, channels[0], 3, 1, 1,
                           mix_seed(seed, 100));
    stem_bn_ = BatchNorm<T>(channels[0]);
    int64_t c_in = channels[0];
    uint64_t k = 200;
    for (int stage = 0; stage < 4; ++stage) {
      for (int64_t b = 0; b < c.depth; ++b) {
        const int64_t stride = (stage > 0 && b == 0) ? 2 : 1;
        blocks_.emplace_back(c_in, channels[stage], stride, mix_seed(seed, k++));
        c_in = channels[stage];
      }
    }
    out_dim_ = channels[3];
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    this->check_input(x);
    auto h = relu(stem_bn_.forward(stem_.forward(x)));
    for (auto& b : blocks_) h = b.forward(h);
    return global_avg_pool(h);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) override {
    stem_.visit(prefix + "stem.conv", fn);
    stem_bn_.visit(prefix + "stem.bn", fn);
    for (size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].visit(prefix + "block" + std::to_string(i), fn);
  }

  void set_mode(Mode m) override {
    stem_bn_.set_mode(m);
    for (auto& b : blocks_) b.set_mode(m);
  }

  int64_t output_dim() const override { return out_dim_; }
  std::vector<ResidualBlock<T>>& blocks() { return blocks_; }

 private:
  Conv2dLayer<T> stem_;
  BatchNorm<T> stem_bn_;
  std::vector<ResidualBlock<T>> blocks_;
  int64_t out_dim_ = 0;
};

// ---------------------------------------------------------------------------
// Tiny ViT: patchify conv, class token, learned position embeddings, pre-norm
// encoder blocks, final LayerNorm, class-token (or mean-token) readout.
// ---------------------------------------------------------------------------

template <typename T>
class ViTTiny : public Backbone<T> {
 public:
  ViTTiny(BackboneConfig cfg, uint64_t seed) : Backbone<T>(std::move(cfg)) {
    const auto& c = this->config_;
    validate(c);
    patch_ = Conv2dLayer<T>(c.in_channels, c.embed_dim, c.patch_size,
                            c.patch_size, 0, mix_seed(seed, 300),
                            /*bias=*/true);
    // patchify projection follows the transformer init convention
    patch_.weight() = Tensor<T>::trunc_normal(patch_.weight().shape(), 0.02,
                                              mix_seed(seed, 301));
    patch_.weight().set_requires_grad(true);
    tokens_ = (c.in_h / c.patch_size) * (c.in_w / c.patch_size);
    cls_ = Tensor<T>::trunc_normal({1, 1, c.embed_dim}, 0.02, mix_seed(seed, 302));
    cls_.set_requires_grad(true);
    posemb_ = Tensor<T>::trunc_normal({1, tokens_ + 1, c.embed_dim}, 0.02,
                                      mix_seed(seed, 303));
    posemb_.set_requires_grad(true);
    for (int64_t i = 0; i < c.depth; ++i)
      blocks_.emplace_back(c.embed_dim, c.heads, mix_seed(seed, 400 + i));
    final_ln_ = LayerNorm<T>(c.embed_dim);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    this->check_input(x);
    const auto& c = this->config_;
    const int64_t n = x.dim(0);
    auto grid = patch_.forward(x);  // [N, D, gh, gw]
    auto seq = permute(reshape(grid, {n, c.embed_dim, tokens_}), {0, 2, 1});
    auto cls = broadcast_to(cls_, {n, 1, c.embed_dim});
    auto h = add(concat<T>({cls, seq}, 1), posemb_);
    for (auto& b : blocks_) h = b.forward(h);
    h = final_ln_.forward(h);
    if (c.mean_pool) return reshape(mean(h, {1}), {n, c.embed_dim});
    return reshape(slice(h, 1, 0, 1), {n, c.embed_dim});
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) override {
    patch_.visit(prefix + "patch", fn);
    fn(prefix + "cls", cls_, true);
    fn(prefix + "posemb", posemb_, true);
    for (size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].visit(prefix + "enc" + std::to_string(i), fn);
    final_ln_.visit(prefix + "final_ln", fn);
  }

  void set_mode(Mode) override {}  // no batch-dependent layers

  int64_t output_dim() const override { return this->config_.embed_dim; }
  Tensor<T>& position_embedding() { return posemb_; }
  int64_t token_count() const { return tokens_ + 1; }

 private:
  static void validate(const BackboneConfig& c) {
    if (c.patch_size < 1 || c.in_h % c.patch_size != 0 ||
        c.in_w % c.patch_size != 0)
      throw ConfigError("vit_tiny: image " + std::to_string(c.in_h) + "x" +
                        std::to_string(c.in_w) +
                        " not divisible by patch_size " +
                        std::to_string(c.patch_size));
    if (c.heads < 1 || c.embed_dim % c.heads != 0)
      throw ConfigError("vit_tiny: embed_dim " + std::to_string(c.embed_dim) +
                        " not divisible by heads " + std::to_string(c.heads));
    if (c.depth < 1) throw ConfigError("vit_tiny: depth must be >= 1");
  }

  Conv2dLayer<T> patch_;
  int64_t tokens_ = 0;
  Tensor<T> cls_, posemb_;
  std::vector<EncoderBlock<T>> blocks_;
  LayerNorm<T> final_ln_;
};

// ---------------------------------------------------------------------------
// Tiny PiT: ViT-style stage 1, then two pooling stages that halve the token
// grid (2x2 average pooling) and double the channel width via a linear
// projection (a separate linear pools the class token). Head count scales
// with width so per-head dimension stays constant.
// ---------------------------------------------------------------------------

template <typename T>
class PiTTiny : public Backbone<T> {
 public:
  PiTTiny(BackboneConfig cfg, uint64_t seed) : Backbone<T>(std::move(cfg)) {
    const auto& c = this->config_;
    validate(c);
    patch_ = Conv2dLayer<T>(c.in_channels, c.embed_dim, c.patch_size,
                            c.patch_size, 0, mix_seed(seed, 500),
                            /*bias=*/true);
    patch_.weight() = Tensor<T>::trunc_normal(patch_.weight().shape(), 0.02,
                                              mix_seed(seed, 501));
    patch_.weight().set_requires_grad(true);
    gh_ = c.in_h / c.patch_size;
    gw_ = c.in_w / c.patch_size;
    cls_ = Tensor<T>::trunc_normal({1, 1, c.embed_dim}, 0.02, mix_seed(seed, 502));
    cls_.set_requires_grad(true);
    posemb_ = Tensor<T>::trunc_normal({1, gh_ * gw_ + 1, c.embed_dim}, 0.02,
                                      mix_seed(seed, 503));
    posemb_.set_requires_grad(true);
    // Stage depths: first and last get depth/3, the middle takes the rest
    // (a stage with zero blocks still pools and projects).
    const int64_t d1 = c.depth / 3;
    const int64_t d3 = c.depth / 3;
    const int64_t d2 = c.depth - d1 - d3;
    const int64_t dims[3] = {c.embed_dim, 2 * c.embed_dim, 4 * c.embed_dim};
    const int64_t heads[3] = {c.heads, 2 * c.heads, 4 * c.heads};
    const int64_t depths[3] = {d1, d2, d3};
    uint64_t k = 600;
    for (int s = 0; s < 3; ++s)
      for (int64_t i = 0; i < depths[s]; ++i)
        stages_[s].emplace_back(dims[s], heads[s], mix_seed(seed, k++));
    pool_proj_[0] = Linear<T>(dims[0], dims[1], mix_seed(seed, 700), true,
                              InitKind::trunc_normal_002);
    pool_proj_[1] = Linear<T>(dims[1], dims[2], mix_seed(seed, 701), true,
                              InitKind::trunc_normal_002);
    cls_proj_[0] = Linear<T>(dims[0], dims[1], mix_seed(seed, 702), true,
                             InitKind::trunc_normal_002);
    cls_proj_[1] = Linear<T>(dims[1], dims[2], mix_seed(seed, 703), true,
                             InitKind::trunc_normal_002);
    final_ln_ = LayerNorm<T>(dims[2]);
    out_dim_ = dims[2];
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    this->check_input(x);
    const auto& c = this->config_;
    const int64_t n = x.dim(0);
    auto grid = patch_.forward(x);
    auto seq = permute(reshape(grid, {n, c.embed_dim, gh_ * gw_}), {0, 2, 1});
    auto cls = broadcast_to(cls_, {n, 1, c.embed_dim});
    auto h = add(concat<T>({cls, seq}, 1), posemb_);
    int64_t gh = gh_, gw = gw_, dim = c.embed_dim;
    for (int s = 0; s < 3; ++s) {
      for (auto& b : stages_[s]) h = b.forward(h);
      if (s == 2) break;
      // split class token from grid tokens, pool the grid, project both
      auto cls_tok = slice(h, 1, 0, 1);                  // [N,1,dim]
      auto grid_tok = slice(h, 1, 1, gh * gw);           // [N,gh*gw,dim]
      auto as_img = permute(grid_tok, {0, 2, 1});        // [N,dim,gh*gw]
      auto pooled = pool2d(reshape(as_img, {n, dim, gh, gw}), PoolKind::avg, 2);
      gh /= 2;
      gw /= 2;
      auto back = permute(reshape(pooled, {n, dim, gh * gw}), {0, 2, 1});
      auto grid_flat = reshape(back, {n * gh * gw, dim});
      auto grid_proj = pool_proj_[s].forward(grid_flat);
      auto cls_proj = cls_proj_[s].forward(reshape(cls_tok, {n, dim}));
      dim *= 2;
      h = concat<T>({reshape(cls_proj, {n, 1, dim}),
                     reshape(grid_proj, {n, gh * gw, dim})},
                    1);
    }
    h = final_ln_.forward(h);
    if (c.mean_pool) return reshape(mean(h, {1}), {n, out_dim_});
    return reshape(slice(h, 1, 0, 1), {n, out_dim_});
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) override {
    patch_.visit(prefix + "patch", fn);
    fn(prefix + "cls", cls_, true);
    fn(prefix + "posemb", posemb_, true);
    for (int s = 0; s < 3; ++s) {
      for (size_t i = 0; i < stages_[s].size(); ++i)
        stages_[s][i].visit(prefix + "stage" + std::to_string(s) + ".enc" +
                                std::to_string(i),
                            fn);
      if (s < 2) {
        pool_proj_[s].visit(prefix + "pool" + std::to_string(s) + ".grid", fn);
        cls_proj_[s].visit(prefix + "pool" + std::to_string(s) + ".cls", fn);
      }
    }
    final_ln_.visit(prefix + "final_ln", fn);
  }

  void set_mode(Mode) override {}

  int64_t output_dim() const override { return out_dim_; }

 private:
  static void validate(const BackboneConfig& c) {
    const int64_t unit = c.patch_size * 4;  // two 2x halvings of the grid
    if (c.patch_size < 1 || c.in_h % unit != 0 || c.in_w % unit != 0)
      throw ConfigError("pit_tiny: image " + std::to_string(c.in_h) + "x" +
                        std::to_string(c.in_w) + " not divisible by " +
                        std::to_string(unit) +
                        " (patch_size x 4 for two pooling stages)");
    if (c.heads < 1 || c.embed_dim % c.heads != 0)
      throw ConfigError("pit_tiny: embed_dim " + std::to_string(c.embed_dim) +
                        " not divisible by heads " + std::to_string(c.heads));
    if (c.depth < 1) throw ConfigError("pit_tiny: depth must be >= 1");
  }

  Conv2dLayer<T> patch_;
  int64_t gh_ = 0, gw_ = 0;
  Tensor<T> cls_, posemb_;
  std::vector<EncoderBlock<T>> stages_[3];
  Linear<T> pool_proj_[2], cls_proj_[2];
  LayerNorm<T> final_ln_;
  int64_t out_dim_ = 0;
};

template <typename T>
std::unique_ptr<Backbone<T>> build_backbone(const BackboneConfig& cfg,
                                            uint64_t seed) {
  if (cfg.family == "resnet_small")
    return std::make_unique<ResNetSmall<T>>(cfg, seed);
  if (cfg.family == "vit_tiny")
    return std::make_unique<ViTTiny<T>>(cfg, seed);
  if (cfg.family == "pit_tiny")
    return std::make_unique<PiTTiny<T>>(cfg, seed);
  throw ConfigError("unknown backbone family: " + cfg.family);
}

}  // namespace ssllab
