#pragma once

// Transformer denoiser: clean and noisy posed views are tokenized jointly,
// processed by adaLN-Zero conditioned pre-norm blocks with cross-view
// self-attention, upsampled back to pixels by a patch-stride transposed
// convolution and decoded by five linear heads into 12-channel raw
// Gaussian attribute maps.

#include "novelgs/autograd.hpp"
#include "novelgs/gaussians.hpp"
#include "novelgs/geometry.hpp"
#include "novelgs/image.hpp"
#include "novelgs/nn.hpp"
#include "novelgs/tokenizer.hpp"

#include <json.hpp>

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace novelgs {

struct HeadBias {
  Real depth = 0.0;                                // sigmoid(0): mid-range depth
  std::vector<Real> rotation{1.0, 0.0, 0.0, 0.0};  // identity quaternion
  Real scale = 0.0;                                // sigmoid(0): mid-range scale
  Real opacity = -2.1972245773362196;              // logit(0.1)
  Real color = 0.0;
};

struct DenoiserConfig {
  std::size_t width = 64;
  std::size_t layer_count = 4;
  std::size_t head_count = 4;
  std::size_t patch_size = 8;
  std::size_t register_token_count = 0;
  std::size_t time_frequency_dim = 256;
  std::size_t time_embedding_dim = 64;
  std::size_t mlp_ratio = 4;
  std::size_t upsample_channels = 32;
  std::size_t timestep_count = 1000;
  Resolution resolution{32, 32};
  HeadBias bias;
  std::uint64_t init_seed = 0;

  void validate() const {
    if (width == 0 || layer_count == 0 || head_count == 0 || patch_size == 0 || time_frequency_dim == 0 ||
        time_embedding_dim == 0 || mlp_ratio == 0 || upsample_channels == 0 || timestep_count == 0)
      throw std::invalid_argument("DenoiserConfig: all counts must be positive");
    if (width % head_count != 0) throw std::invalid_argument("DenoiserConfig: width must be divisible by head_count");
    if (time_frequency_dim % 2 != 0) throw std::invalid_argument("DenoiserConfig: time_frequency_dim must be even");
    if (bias.rotation.size() != 4) throw std::invalid_argument("DenoiserConfig: rotation bias needs 4 values");
    check_patch_divisible(resolution, patch_size);
  }

  // Full-size preset at the first-stage resolution.
  static DenoiserConfig full_size_preset() {
    DenoiserConfig c;
    c.width = 768;
    c.layer_count = 24;
    c.head_count = 12;
    c.time_embedding_dim = 768;
    c.upsample_channels = 64;
    c.resolution = {256, 256};
    return c;
  }
};

inline nlohmann::json to_json(const DenoiserConfig& c) {
  return {{"width", c.width},
          {"layer_count", c.layer_count},
          {"head_count", c.head_count},
          {"patch_size", c.patch_size},
          {"register_token_count", c.register_token_count},
          {"time_frequency_dim", c.time_frequency_dim},
          {"time_embedding_dim", c.time_embedding_dim},
          {"mlp_ratio", c.mlp_ratio},
          {"upsample_channels", c.upsample_channels},
          {"timestep_count", c.timestep_count},
          {"resolution", {c.resolution.height, c.resolution.width}},
          {"bias",
           {{"depth", c.bias.depth},
            {"rotation", c.bias.rotation},
            {"scale", c.bias.scale},
            {"opacity", c.bias.opacity},
            {"color", c.bias.color}}},
          {"init_seed", c.init_seed}};
}

inline DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.width = j.value("width", c.width);
  c.layer_count = j.value("layer_count", c.layer_count);
  c.head_count = j.value("head_count", c.head_count);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.register_token_count = j.value("register_token_count", c.register_token_count);
  c.time_frequency_dim = j.value("time_frequency_dim", c.time_frequency_dim);
  c.time_embedding_dim = j.value("time_embedding_dim", c.time_embedding_dim);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.upsample_channels = j.value("upsample_channels", c.upsample_channels);
  c.timestep_count = j.value("timestep_count", c.timestep_count);
  if (j.contains("resolution")) {
    const auto r = j.at("resolution").get<std::vector<int>>();
    if (r.size() != 2) throw std::invalid_argument("DenoiserConfig: resolution must be [height, width]");
    c.resolution = {r[0], r[1]};
  }
  if (j.contains("bias")) {
    const auto& b = j.at("bias");
    c.bias.depth = b.value("depth", c.bias.depth);
    c.bias.rotation = b.value("rotation", c.bias.rotation);
    c.bias.scale = b.value("scale", c.bias.scale);
    c.bias.opacity = b.value("opacity", c.bias.opacity);
    c.bias.color = b.value("color", c.bias.color);
  }
  c.init_seed = j.value("init_seed", c.init_seed);
  c.validate();
  return c;
}

// Sinusoidal features [cos(t * f_i), sin(t * f_i)] with f_i = 10000^(-i/half).
inline std::vector<Real> timestep_frequencies(int t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<Real> out(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const Real freq = std::exp(-std::log(10000.0) * static_cast<Real>(i) / static_cast<Real>(half));
    const Real arg = static_cast<Real>(t) * freq;
    out[i] = std::cos(arg);
    out[half + i] = std::sin(arg);
  }
  return out;
}

// [V*gh*gw, p*p*C] patch rows -> [V*H*W, C] pixel rows.
inline ad::Var unpatchify(const ad::Var& x, std::size_t views, std::size_t gh, std::size_t gw, std::size_t patch,
                          std::size_t channels) {
  ad::require_shape(x, {views * gh * gw, patch * patch * channels}, "unpatchify");
  const std::size_t width = gw * patch, height = gh * patch;
  std::vector<std::size_t> index(x.size());  // output element -> input element
  for (std::size_t v = 0; v < views; ++v)
    for (std::size_t by = 0; by < gh; ++by)
      for (std::size_t bx = 0; bx < gw; ++bx)
        for (std::size_t py = 0; py < patch; ++py)
          for (std::size_t px = 0; px < patch; ++px)
            for (std::size_t c = 0; c < channels; ++c) {
              const std::size_t src = ((v * gh + by) * gw + bx) * patch * patch * channels + (py * patch + px) * channels + c;
              const std::size_t dst = ((v * height + by * patch + py) * width + bx * patch + px) * channels + c;
              index[dst] = src;
            }
  std::vector<Real> value(x.size());
  for (std::size_t i = 0; i < value.size(); ++i) value[i] = x.value()[index[i]];
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(index));
  return ad::make_op({views * height * width, channels}, std::move(value), {x}, [idx](ad::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*idx)[i]] += self.grad[i];
  });
}

class Denoiser {
 public:
  struct Block {
    Linear modulation;  // time embedding -> 6 * width
    Linear qkv;
    Linear attn_out;
    Linear mlp_in;
    Linear mlp_out;
  };

  Denoiser() = default;
  explicit Denoiser(const DenoiserConfig& config) : config_(config) {
    config_.validate();
    Rng rng(config_.init_seed);
    const std::size_t d = config_.width, e = config_.time_embedding_dim;
    tokenizer_ = Tokenizer(params_, "tokenizer", config_.patch_size, d, config_.resolution, rng);
    if (config_.register_token_count > 0)
      registers_ = params_.add("registers", {config_.register_token_count, d},
                               init_normal(config_.register_token_count * d, 0.02, rng));
    time_in_ = Linear(params_, "time.fc1", config_.time_frequency_dim, e, rng);
    time_out_ = Linear(params_, "time.fc2", e, e, rng);
    for (auto* w : {&time_in_.weight(), &time_out_.weight()})
      for (auto& v : w->mutable_value()) v = 0.02 * standard_normal(rng);
    for (std::size_t l = 0; l < config_.layer_count; ++l) {
      const std::string p = "blocks." + std::to_string(l);
      Block b;
      b.modulation = Linear(params_, p + ".adaln", e, 6 * d, rng);
      b.modulation.fill_weight(0.0);
      b.qkv = Linear(params_, p + ".attn.qkv", d, 3 * d, rng);
      b.attn_out = Linear(params_, p + ".attn.proj", d, d, rng);
      b.mlp_in = Linear(params_, p + ".mlp.fc1", d, config_.mlp_ratio * d, rng);
      b.mlp_out = Linear(params_, p + ".mlp.fc2", config_.mlp_ratio * d, d, rng);
      blocks_.push_back(std::move(b));
    }
    final_modulation_ = Linear(params_, "final.adaln", e, 2 * d, rng);
    final_modulation_.fill_weight(0.0);
    const std::size_t c = config_.upsample_channels, p = config_.patch_size;
    upsample_ = Linear(params_, "upsample.weight_map", d, p * p * c, rng, /*with_bias=*/false);
    upsample_bias_ = params_.add("upsample.bias", {1, c}, std::vector<Real>(c, 0.0));
    head_depth_ = Linear(params_, "heads.depth", c, 1, rng);
    head_rotation_ = Linear(params_, "heads.rotation", c, 4, rng);
    head_scale_ = Linear(params_, "heads.scale", c, 3, rng);
    head_opacity_ = Linear(params_, "heads.opacity", c, 1, rng);
    head_color_ = Linear(params_, "heads.color", c, 3, rng);
    reset_heads();
  }

  // Zero head weights and configured constant biases.
  void reset_heads() {
    const auto& b = config_.bias;
    head_depth_.fill_weight(0.0);
    head_depth_.set_bias({b.depth});
    head_rotation_.fill_weight(0.0);
    head_rotation_.set_bias(b.rotation);
    head_scale_.fill_weight(0.0);
    head_scale_.set_bias({b.scale, b.scale, b.scale});
    head_opacity_.fill_weight(0.0);
    head_opacity_.set_bias({b.opacity});
    head_color_.fill_weight(0.0);
    head_color_.set_bias({b.color, b.color, b.color});
  }

  ad::Var timestep_embedding(int t) const {
    if (t < 0 || static_cast<std::size_t>(t) >= config_.timestep_count)
      throw std::out_of_range("timestep_embedding: t=" + std::to_string(t) + " outside [0, " +
                              std::to_string(config_.timestep_count) + ")");
    auto freq = ad::Var::constant({1, config_.time_frequency_dim}, timestep_frequencies(t, config_.time_frequency_dim));
    return time_out_(ad::silu(time_in_(freq)));
  }

  // One pre-norm residual block; `cond` is silu(time embedding).
  ad::Var block_forward(std::size_t index, const ad::Var& tokens, const ad::Var& cond) const {
    const Block& b = blocks_.at(index);
    const std::size_t d = config_.width;
    const auto mod = b.modulation(cond);
    auto chunk = [&](std::size_t k) { return ad::slice_cols(mod, k * d, d); };
    const auto attn_in = ad::modulate(ad::layer_norm(tokens), chunk(0), chunk(1));
    const auto attn = b.attn_out(self_attention(b.qkv(attn_in), config_.head_count));
    const auto x = ad::gated_residual(tokens, chunk(2), attn);
    const auto mlp_in = ad::modulate(ad::layer_norm(x), chunk(3), chunk(4));
    const auto mlp = b.mlp_out(ad::gelu(b.mlp_in(mlp_in)));
    return ad::gated_residual(x, chunk(5), mlp);
  }

  // Views are ordered clean first, then noisy; images in [0,1] scale. Returns
  // stacked raw attribute rows [V*H*W, 12].
  ad::Var forward(const std::vector<const Image*>& images, const std::vector<Camera>& cameras, int t) const {
    if (images.size() != cameras.size())
      throw std::invalid_argument("denoiser: " + std::to_string(images.size()) + " views but " +
                                  std::to_string(cameras.size()) + " cameras");
    if (images.empty()) throw std::invalid_argument("denoiser: no input views");
    std::vector<RayMap> rays;
    rays.reserve(cameras.size());
    for (std::size_t v = 0; v < cameras.size(); ++v) {
      if (cameras[v].resolution != images[v]->resolution)
        throw std::invalid_argument("denoiser: camera resolution differs from its image");
      rays.push_back(ray_map(cameras[v]));
    }
    return forward_rays(images, rays, t);
  }

  ad::Var forward_rays(const std::vector<const Image*>& images, const std::vector<RayMap>& rays, int t) const {
    const TokenGrid grid = tokenizer_.tokenize(images, rays);
    const std::size_t token_count = grid.tokens.rows();
    const auto cond = ad::silu(timestep_embedding(t));

    ad::Var x = grid.tokens;
    const std::size_t nreg = config_.register_token_count;
    if (nreg > 0) x = ad::concat_rows({registers_, x});
    for (std::size_t l = 0; l < blocks_.size(); ++l) x = block_forward(l, x, cond);
    const auto fmod = final_modulation_(cond);
    x = ad::modulate(ad::layer_norm(x), ad::slice_cols(fmod, 0, config_.width),
                     ad::slice_cols(fmod, config_.width, config_.width));
    if (nreg > 0) x = ad::slice_rows(x, nreg, token_count);

    const std::size_t c = config_.upsample_channels;
    auto features = unpatchify(upsample_(x), grid.views, grid.grid_height, grid.grid_width, config_.patch_size, c);
    features = ad::add_row(features, upsample_bias_);
    return ad::concat_cols({head_depth_(features), head_rotation_(features), head_scale_(features),
                            head_opacity_(features), head_color_(features)});
  }

  std::vector<AttributeMap> predict_attribute_maps(const std::vector<const Image*>& clean,
                                                   const std::vector<const Image*>& noisy,
                                                   const std::vector<Camera>& cameras, int t) const {
    if (clean.empty()) throw std::invalid_argument("predict_attribute_maps: at least one clean view is required");
    std::vector<const Image*> views(clean);
    views.insert(views.end(), noisy.begin(), noisy.end());
    const auto raw = forward(views, cameras, t);
    return split_attribute_maps(raw, views.front()->resolution, views.size());
  }

  static std::vector<AttributeMap> split_attribute_maps(const ad::Var& raw, Resolution res, std::size_t views) {
    const std::size_t per = res.pixels() * raw_channel::kCount;
    std::vector<AttributeMap> maps;
    for (std::size_t v = 0; v < views; ++v)
      maps.emplace_back(res, std::vector<Real>(raw.value().begin() + static_cast<std::ptrdiff_t>(v * per),
                                               raw.value().begin() + static_cast<std::ptrdiff_t>((v + 1) * per)));
    return maps;
  }

  // Re-targets the model to another input resolution (same patch size); the
  // positional embedding grid is bilinearly resampled.
  void set_resolution(Resolution res) {
    check_patch_divisible(res, config_.patch_size);
    if (res == config_.resolution) return;
    const std::size_t p = config_.patch_size, d = config_.width;
    const auto old = tokenizer_.positional_embedding();
    const auto resampled = resample_grid(tokenizer_.positional_embedding().value(), config_.resolution.height / p,
                                         config_.resolution.width / p, res.height / p, res.width / p, d);
    for (auto& [name, var] : params_.entries()) {
      if (name != "tokenizer.pos_embed") continue;
      var = ad::Var::parameter({resampled.size() / d, d}, resampled);
      tokenizer_.replace_positional_embedding(var, res);
    }
    config_.resolution = res;
  }

  const DenoiserConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  const Block& block(std::size_t i) const { return blocks_.at(i); }
  Block& block(std::size_t i) { return blocks_.at(i); }
  const Tokenizer& tokenizer() const { return tokenizer_; }

  // Deep copy with independent parameter storage.
  Denoiser clone() const {
    Denoiser copy(config_);
    copy.load_values(*this);
    return copy;
  }

  void load_values(const Denoiser& other) {
    auto& mine = params_.entries();
    const auto& theirs = other.params_.entries();
    if (mine.size() != theirs.size()) throw std::invalid_argument("load_values: parameter lists differ");
    for (std::size_t i = 0; i < mine.size(); ++i) {
      if (mine[i].first != theirs[i].first || mine[i].second.shape() != theirs[i].second.shape())
        throw std::invalid_argument("load_values: parameter " + mine[i].first + " differs");
      std::copy(theirs[i].second.value().begin(), theirs[i].second.value().end(),
                mine[i].second.mutable_value().begin());
    }
  }

 private:
  DenoiserConfig config_;
  ParameterSet params_;
  Tokenizer tokenizer_;
  ad::Var registers_;
  Linear time_in_, time_out_;
  std::vector<Block> blocks_;
  Linear final_modulation_;
  Linear upsample_;
  ad::Var upsample_bias_;
  Linear head_depth_, head_rotation_, head_scale_, head_opacity_, head_color_;
};

}  // namespace novelgs
