#include "seq2seg/sequentializer.hpp"

#include <cstring>

namespace seq2seg {

namespace {

// gather/scatter index plan shared by patchify forward and backward
struct PatchPlan {
    int h, w, gh, gw, patch, cols;
};

PatchPlan plan_for(const Tensor& img, int patch) {
    if (img.rank() != 3 || img.dim(2) != 3) {
        throw ShapeError("patchify: expected [H,W,3], got " + img.shape_str());
    }
    if (patch <= 0) throw ShapeError("patchify: patch size must be positive");
    PatchPlan p;
    p.h = img.dim(0);
    p.w = img.dim(1);
    if (p.h % patch != 0 || p.w % patch != 0) {
        throw ShapeError("patchify: image " + img.shape_str() + " is not divisible by patch size " +
                         std::to_string(patch));
    }
    p.patch = patch;
    p.gh = p.h / patch;
    p.gw = p.w / patch;
    p.cols = patch * patch * 3;
    return p;
}

}  // namespace

PatchGrid patchify(const Tensor& img, int patch) {
    const PatchPlan p = plan_for(img, patch);
    Tensor rows = Tensor::zeros({p.gh * p.gw, p.cols});
    const float* src = img.data();
    float* dst = rows.data();
    for (int gy = 0; gy < p.gh; ++gy) {
        for (int gx = 0; gx < p.gw; ++gx) {
            float* row = dst + (static_cast<size_t>(gy) * p.gw + gx) * p.cols;
            for (int py = 0; py < p.patch; ++py) {
                const int iy = gy * p.patch + py;
                const float* line = src + (static_cast<size_t>(iy) * p.w + gx * p.patch) * 3;
                std::memcpy(row + static_cast<size_t>(py) * p.patch * 3, line,
                            static_cast<size_t>(p.patch) * 3 * sizeof(float));
            }
        }
    }
    if (Tape::active() && img.requires_grad()) {
        Tensor iv = img, rv = rows;
        rows.set_requires_grad(true);
        Tape::active()->record([iv, rv, p]() mutable {
            const auto& og = rv.grad_const();
            if (og.empty() || !iv.requires_grad()) return;
            auto& ig = iv.grad();
            for (int gy = 0; gy < p.gh; ++gy)
                for (int gx = 0; gx < p.gw; ++gx) {
                    const float* row = og.data() + (static_cast<size_t>(gy) * p.gw + gx) * p.cols;
                    for (int py = 0; py < p.patch; ++py) {
                        const int iy = gy * p.patch + py;
                        float* line = ig.data() + (static_cast<size_t>(iy) * p.w + gx * p.patch) * 3;
                        const float* srcline = row + static_cast<size_t>(py) * p.patch * 3;
                        for (int k = 0; k < p.patch * 3; ++k) line[k] += srcline[k];
                    }
                }
        }, {img});
    }
    PatchGrid grid;
    grid.rows = rows;
    grid.gh = p.gh;
    grid.gw = p.gw;
    grid.patch = patch;
    return grid;
}

Tensor unpatchify(const PatchGrid& grid) {
    const int patch = grid.patch;
    const int h = grid.gh * patch, w = grid.gw * patch;
    const int cols = patch * patch * 3;
    if (grid.rows.rank() != 2 || grid.rows.dim(0) != grid.length() || grid.rows.dim(1) != cols) {
        throw ShapeError("unpatchify: rows " + grid.rows.shape_str() + " do not match grid");
    }
    Tensor img = Tensor::zeros({h, w, 3});
    const float* src = grid.rows.data();
    float* dst = img.data();
    for (int gy = 0; gy < grid.gh; ++gy) {
        for (int gx = 0; gx < grid.gw; ++gx) {
            const float* row = src + (static_cast<size_t>(gy) * grid.gw + gx) * cols;
            for (int py = 0; py < patch; ++py) {
                const int iy = gy * patch + py;
                std::memcpy(dst + (static_cast<size_t>(iy) * w + gx * patch) * 3,
                            row + static_cast<size_t>(py) * patch * 3,
                            static_cast<size_t>(patch) * 3 * sizeof(float));
            }
        }
    }
    return img;
}

Tensor interpolate_pos_embed(const Tensor& pos, int new_gh, int new_gw) {
    if (pos.rank() != 3) {
        throw ShapeError("interpolate_pos_embed: expected [gh,gw,C], got " + pos.shape_str());
    }
    if (new_gh < 1 || new_gw < 1) throw ShapeError("interpolate_pos_embed: target grid must be nonempty");
    Tensor batched = stack_maps({pos});
    Tensor resized = bilinear_resize(batched, new_gh, new_gw);
    return reshape(resized, {new_gh, new_gw, pos.dim(2)});
}

PatchEmbed::PatchEmbed(int patch, int hidden, int native_gh, int native_gw, Rng& rng, InitMode init)
    : patch_(patch), hidden_(hidden), native_gh_(native_gh), native_gw_(native_gw) {
    const int in_dim = patch * patch * 3;
    if (init == InitMode::TruncNormal) {
        proj_w = Tensor::trunc_normal({in_dim, hidden}, rng, 0.02f, true);
        pos = Tensor::trunc_normal({native_gh, native_gw, hidden}, rng, 0.02f, true);
    } else {
        proj_w = Tensor::zeros({in_dim, hidden}, true);
        pos = Tensor::zeros({native_gh, native_gw, hidden}, true);
    }
    proj_b = Tensor::zeros({hidden}, true);
}

Tensor PatchEmbed::position_for_grid(int gh, int gw) {
    if (gh == native_gh_ && gw == native_gw_) {
        return reshape(pos, {gh * gw, hidden_});
    }
    if (!Tape::active()) {
        const auto key = std::make_pair(gh, gw);
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
        Tensor flat = reshape(interpolate_pos_embed(pos, gh, gw), {gh * gw, hidden_});
        cache_.emplace(key, flat);
        return flat;
    }
    return reshape(interpolate_pos_embed(pos, gh, gw), {gh * gw, hidden_});
}

Tensor PatchEmbed::embed(const PatchGrid& grid) {
    if (grid.rows.dim(1) != proj_w.dim(0)) {
        throw ShapeError("embed: patch vectors " + grid.rows.shape_str() +
                         " do not match projection " + proj_w.shape_str());
    }
    Tensor projected = add_bias_rows(matmul(grid.rows, proj_w), proj_b);
    Tensor p = position_for_grid(grid.gh, grid.gw);
    return add(projected, p);
}

Tensor PatchEmbed::forward(const Tensor& img) {
    return embed(patchify(img, patch_));
}

}  // namespace seq2seg
