#pragma once

// Posed-image tokenizer: RGB + Plücker rays (9 channels) cut into
// non-overlapping p x p patches, linearly projected, plus learnable 2D
// patch-position embeddings shared by all views.

#include "novelgs/autograd.hpp"
#include "novelgs/geometry.hpp"
#include "novelgs/image.hpp"
#include "novelgs/nn.hpp"

#include <stdexcept>
#include <string>
#include <vector>

namespace novelgs {

inline constexpr std::size_t kTokenInputChannels = 9;

struct TokenGrid {
  std::size_t views = 0;
  std::size_t grid_height = 0;
  std::size_t grid_width = 0;
  std::size_t patch_size = 0;
  ad::Var tokens;  // [views * grid_height * grid_width, width]

  std::size_t tokens_per_view() const { return grid_height * grid_width; }
};

inline void check_patch_divisible(Resolution res, std::size_t patch) {
  if (patch == 0 || res.height % static_cast<int>(patch) != 0 || res.width % static_cast<int>(patch) != 0)
    throw std::invalid_argument("tokenize: resolution " + std::to_string(res.height) + "x" +
                                std::to_string(res.width) + " is not divisible by patch size " +
                                std::to_string(patch));
}

// Flattens views into [V * (H/p) * (W/p), 9 * p * p]; within a patch values are
// ordered (row, col, channel) with channels RGB then (o x d, d).
inline ad::Var patchify(const std::vector<const Image*>& images, const std::vector<RayMap>& rays, std::size_t patch) {
  if (images.size() != rays.size()) throw std::invalid_argument("tokenize: image and ray map counts differ");
  if (images.empty()) throw std::invalid_argument("tokenize: no views");
  const Resolution res = images.front()->resolution;
  check_patch_divisible(res, patch);
  const std::size_t gh = res.height / patch, gw = res.width / patch;
  const std::size_t row_len = kTokenInputChannels * patch * patch;
  std::vector<Real> values(images.size() * gh * gw * row_len);
  for (std::size_t v = 0; v < images.size(); ++v) {
    if (images[v]->resolution != res || rays[v].resolution != res)
      throw std::invalid_argument("tokenize: views and ray maps must share one resolution");
    for (std::size_t by = 0; by < gh; ++by) {
      for (std::size_t bx = 0; bx < gw; ++bx) {
        Real* row = values.data() + ((v * gh + by) * gw + bx) * row_len;
        std::size_t k = 0;
        for (std::size_t py = 0; py < patch; ++py) {
          for (std::size_t px = 0; px < patch; ++px) {
            const std::size_t pix = (by * patch + py) * res.width + bx * patch + px;
            for (int c = 0; c < 3; ++c) row[k++] = images[v]->rgb[pix * 3 + c];
            for (int c = 0; c < 6; ++c) row[k++] = rays[v].values[pix * 6 + c];
          }
        }
      }
    }
  }
  return ad::Var::constant({images.size() * gh * gw, row_len}, std::move(values));
}

class Tokenizer {
 public:
  Tokenizer() = default;
  Tokenizer(ParameterSet& params, const std::string& prefix, std::size_t patch, std::size_t width, Resolution res,
            Rng& rng)
      : patch_(patch), width_(width) {
    check_patch_divisible(res, patch);
    grid_h_ = res.height / patch;
    grid_w_ = res.width / patch;
    proj_ = Linear(params, prefix + ".proj", kTokenInputChannels * patch * patch, width, rng);
    pos_ = params.add(prefix + ".pos_embed", {grid_h_ * grid_w_, width}, init_normal(grid_h_ * grid_w_ * width, 0.02, rng));
  }

  TokenGrid tokenize(const std::vector<const Image*>& images, const std::vector<RayMap>& rays) const {
    const Resolution res = images.empty() ? Resolution{} : images.front()->resolution;
    check_patch_divisible(res, patch_);
    if (res.height / patch_ != grid_h_ || res.width / patch_ != grid_w_)
      throw std::invalid_argument("tokenize: resolution does not match the positional embedding grid");
    TokenGrid grid{images.size(), grid_h_, grid_w_, patch_, {}};
    grid.tokens = ad::add_tiled(proj_(patchify(images, rays, patch_)), pos_);
    return grid;
  }

  void replace_positional_embedding(ad::Var pos, Resolution res) {
    check_patch_divisible(res, patch_);
    if (pos.shape() != ad::Shape{(res.height / patch_) * (res.width / patch_), width_})
      throw std::invalid_argument("replace_positional_embedding: shape does not match the patch grid");
    grid_h_ = res.height / patch_;
    grid_w_ = res.width / patch_;
    pos_ = std::move(pos);
  }

  std::size_t patch_size() const { return patch_; }
  std::size_t grid_height() const { return grid_h_; }
  std::size_t grid_width() const { return grid_w_; }
  const Linear& projection() const { return proj_; }
  const ad::Var& positional_embedding() const { return pos_; }

 private:
  std::size_t patch_ = 8;
  std::size_t width_ = 0;
  std::size_t grid_h_ = 0;
  std::size_t grid_w_ = 0;
  Linear proj_;
  ad::Var pos_;
};

// Bilinear resampling of a [gh*gw, D] embedding grid to [nh*nw, D] (align-corners).
inline std::vector<Real> resample_grid(std::span<const Real> grid, std::size_t gh, std::size_t gw, std::size_t nh,
                                       std::size_t nw, std::size_t d) {
  std::vector<Real> out(nh * nw * d);
  auto src = [&](std::size_t n, std::size_t g) { return n <= 1 || g <= 1 ? 0.0 : Real(g - 1) / Real(n - 1); };
  const Real sy = src(nh, gh), sx = src(nw, gw);
  for (std::size_t y = 0; y < nh; ++y) {
    const Real fy = y * sy;
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, gh - 1);
    const Real ty = fy - y0;
    for (std::size_t x = 0; x < nw; ++x) {
      const Real fx = x * sx;
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, gw - 1);
      const Real tx = fx - x0;
      for (std::size_t c = 0; c < d; ++c) {
        const Real a = grid[(y0 * gw + x0) * d + c], b = grid[(y0 * gw + x1) * d + c];
        const Real e = grid[(y1 * gw + x0) * d + c], f = grid[(y1 * gw + x1) * d + c];
        out[(y * nw + x) * d + c] = (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * e + tx * f);
      }
    }
  }
  return out;
}

}  // namespace novelgs
