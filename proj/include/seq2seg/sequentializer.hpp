#pragma once

#include <map>
#include <utility>

#include "seq2seg/ops.hpp"

namespace seq2seg {

// One flattened patch per row: [L, P*P*3] with L = (H/P)*(W/P). Rows follow
// the grid row-major; within a patch the pixel order is row-major (y, x, c).
struct PatchGrid {
    Tensor rows;
    int gh = 0, gw = 0, patch = 0;
    int length() const { return gh * gw; }
};

// Splits img[H,W,3] into a grid of patch vectors. H and W must be divisible by
// the patch size; no implicit padding.
PatchGrid patchify(const Tensor& img, int patch);

// Inverse rearrangement; patchify then unpatchify is bit-exact.
Tensor unpatchify(const PatchGrid& grid);

enum class InitMode { TruncNormal, Zeros };

// Learned linear projection f plus the learned per-location position table.
// Produces the encoder input E with row i equal to f(patch_i) + p_i.
class PatchEmbed {
public:
    PatchEmbed() = default;
    PatchEmbed(int patch, int hidden, int native_gh, int native_gw, Rng& rng,
               InitMode init = InitMode::TruncNormal);

    // E = project(patchify(img)) for an already-normalized image.
    Tensor forward(const Tensor& img);

    Tensor embed(const PatchGrid& grid);

    // Position table resampled to the requested grid. Interpolation happens
    // lazily per distinct grid and is cached for inference passes (no active
    // tape); training passes recompute so gradients reach the native table.
    Tensor position_for_grid(int gh, int gw);

    void invalidate_cache() { cache_.clear(); }

    int patch_size() const { return patch_; }
    int hidden() const { return hidden_; }
    int native_gh() const { return native_gh_; }
    int native_gw() const { return native_gw_; }

    Tensor proj_w;  // [P*P*3, C]
    Tensor proj_b;  // [C]
    Tensor pos;     // [gh0, gw0, C]

private:
    int patch_ = 0, hidden_ = 0, native_gh_ = 0, native_gw_ = 0;
    std::map<std::pair<int, int>, Tensor> cache_;
};

// Channelwise align-corners resampling of a position table [gh,gw,C].
Tensor interpolate_pos_embed(const Tensor& pos, int new_gh, int new_gw);

}  // namespace seq2seg
