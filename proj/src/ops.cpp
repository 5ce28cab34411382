#include "seq2seg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace seq2seg {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::active()) return false;
    for (const Tensor* t : inputs) {
        if (t && t->defined() && t->requires_grad()) return true;
    }
    return false;
}

void mark_and_record(Tensor& out, std::function<void()> step, std::vector<Tensor> touched) {
    out.set_requires_grad(true);
    Tape::active()->record(std::move(step), std::move(touched));
}

void require_rank(const Tensor& t, int rank, const char* op) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank-" + std::to_string(rank) +
                         " tensor, got " + t.shape_str());
    }
}

// The gradient of `out` if any step downstream wrote one; empty span otherwise.
std::span<const float> out_grad(const Tensor& out) {
    const auto& g = out.grad_const();
    return {g.data(), g.size()};
}

// --- gemm kernels (double accumulation, fixed order) ---

// C[M,N] (+)= A[M,K] * B[K,N]
void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate) {
    std::vector<double> row(static_cast<size_t>(n));
    for (int i = 0; i < m; ++i) {
        std::fill(row.begin(), row.end(), 0.0);
        const float* arow = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            const float* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) row[static_cast<size_t>(j)] += av * brow[j];
        }
        float* crow = c + static_cast<size_t>(i) * n;
        if (accumulate) {
            for (int j = 0; j < n; ++j) crow[j] += static_cast<float>(row[static_cast<size_t>(j)]);
        } else {
            for (int j = 0; j < n; ++j) crow[j] = static_cast<float>(row[static_cast<size_t>(j)]);
        }
    }
}

// C[M,K] (+)= A[M,N] * B[K,N]^T
void gemm_nt(const float* a, const float* b, float* c, int m, int n, int k, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<size_t>(i) * n;
        float* crow = c + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const float* brow = b + static_cast<size_t>(p) * n;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += static_cast<double>(arow[j]) * brow[j];
            if (accumulate) crow[p] += static_cast<float>(dot);
            else crow[p] = static_cast<float>(dot);
        }
    }
}

// C[K,N] (+)= A[M,K]^T * B[M,N]
void gemm_tn(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate) {
    std::vector<double> acc(static_cast<size_t>(k) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<size_t>(i) * k;
        const float* brow = b + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* dst = acc.data() + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) dst[j] += av * brow[j];
        }
    }
    const size_t total = static_cast<size_t>(k) * n;
    if (accumulate) {
        for (size_t i = 0; i < total; ++i) c[i] += static_cast<float>(acc[i]);
    } else {
        for (size_t i = 0; i < total; ++i) c[i] = static_cast<float>(acc[i]);
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions disagree: " + a.shape_str() + " vs " +
                         b.shape_str());
    }
    Tensor out = Tensor::zeros({m, n});
    gemm_nn(a.data(), b.data(), out.data(), m, k, n, false);
    check_finite(out, "matmul");
    if (wants_grad({&a, &b})) {
        Tensor av = a, bv = b, ov = out;
        mark_and_record(out, [av, bv, ov, m, k, n]() mutable {
            auto og = out_grad(ov);
            if (og.empty()) return;
            if (av.requires_grad()) gemm_nt(og.data(), bv.data(), av.grad().data(), m, n, k, true);
            if (bv.requires_grad()) gemm_tn(av.data(), og.data(), bv.grad().data(), m, k, n, true);
        }, {a, b});
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const int r = a.dim(0), c = a.dim(1);
    Tensor out = Tensor::zeros({c, r});
    const float* src = a.data();
    float* dst = out.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            dst[static_cast<size_t>(j) * r + i] = src[static_cast<size_t>(i) * c + j];
    if (wants_grad({&a})) {
        Tensor av = a, ov = out;
        mark_and_record(out, [av, ov, r, c]() mutable {
            auto og = out_grad(ov);
            if (og.empty() || !av.requires_grad()) return;
            auto& ag = av.grad();
            for (int j = 0; j < c; ++j)
                for (int i = 0; i < r; ++i)
                    ag[static_cast<size_t>(i) * c + j] += og[static_cast<size_t>(j) * r + i];
        }, {a});
    }
    return out;
}

Tensor softmax_rows(const Tensor& a) {
    require_rank(a, 2, "softmax_rows");
    check_finite(a, "softmax_rows(input)");
    const int r = a.dim(0), c = a.dim(1);
    Tensor out = Tensor::zeros({r, c});
    const float* src = a.data();
    float* dst = out.data();
    for (int i = 0; i < r; ++i) {
        const float* row = src + static_cast<size_t>(i) * c;
        float* orow = dst + static_cast<size_t>(i) * c;
        float mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            const double e = std::exp(static_cast<double>(row[j]) - mx);
            orow[j] = static_cast<float>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < c; ++j) orow[j] = static_cast<float>(orow[j] * inv);
    }
    check_finite(out, "softmax_rows");
    if (wants_grad({&a})) {
        Tensor av = a, ov = out;
        mark_and_record(out, [av, ov, r, c]() mutable {
            auto og = out_grad(ov);
            if (og.empty() || !av.requires_grad()) return;
            auto& ag = av.grad();
            const float* y = ov.data();
            for (int i = 0; i < r; ++i) {
                const size_t base = static_cast<size_t>(i) * c;
                double dot = 0.0;
                for (int j = 0; j < c; ++j) dot += static_cast<double>(y[base + j]) * og[base + j];
                for (int j = 0; j < c; ++j)
                    ag[base + j] += static_cast<float>(y[base + j] * (og[base + j] - dot));
            }
        }, {a});
    }
    return out;
}

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, float eps) {
    require_rank(a, 2, "layer_norm");
    require_rank(gamma, 1, "layer_norm");
    require_rank(beta, 1, "layer_norm");
    const int r = a.dim(0), c = a.dim(1);
    if (gamma.dim(0) != c || beta.dim(0) != c) {
        throw ShapeError("layer_norm: affine shape " + gamma.shape_str() + "/" + beta.shape_str() +
                         " does not match feature width of " + a.shape_str());
    }
    Tensor out = Tensor::zeros({r, c});
    std::vector<float> inv_std(static_cast<size_t>(r));
    std::vector<float> mean(static_cast<size_t>(r));
    const float* src = a.data();
    const float* g = gamma.data();
    const float* b = beta.data();
    float* dst = out.data();
    for (int i = 0; i < r; ++i) {
        const float* row = src + static_cast<size_t>(i) * c;
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += row[j];
        const double mu = s / c;
        double v = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = row[j] - mu;
            v += d * d;
        }
        const double istd = 1.0 / std::sqrt(v / c + eps);
        mean[static_cast<size_t>(i)] = static_cast<float>(mu);
        inv_std[static_cast<size_t>(i)] = static_cast<float>(istd);
        float* orow = dst + static_cast<size_t>(i) * c;
        for (int j = 0; j < c; ++j)
            orow[j] = static_cast<float>((row[j] - mu) * istd) * g[j] + b[j];
    }
    check_finite(out, "layer_norm");
    if (wants_grad({&a, &gamma, &beta})) {
        Tensor av = a, gv = gamma, bv = beta, ov = out;
        mark_and_record(out, [av, gv, bv, ov, r, c, mean, inv_std]() mutable {
            auto og = out_grad(ov);
            if (og.empty()) return;
            const float* x = av.data();
            const float* g = gv.data();
            for (int i = 0; i < r; ++i) {
                const size_t base = static_cast<size_t>(i) * c;
                const float mu = mean[static_cast<size_t>(i)];
                const float istd = inv_std[static_cast<size_t>(i)];
                double sum_gy = 0.0, sum_gyx = 0.0;
                for (int j = 0; j < c; ++j) {
                    const double xh = (x[base + j] - mu) * istd;
                    const double gy = static_cast<double>(og[base + j]) * g[j];
                    sum_gy += gy;
                    sum_gyx += gy * xh;
                }
                const double m_gy = sum_gy / c, m_gyx = sum_gyx / c;
                if (av.requires_grad()) {
                    auto& ag = av.grad();
                    for (int j = 0; j < c; ++j) {
                        const double xh = (x[base + j] - mu) * istd;
                        const double gy = static_cast<double>(og[base + j]) * g[j];
                        ag[base + j] += static_cast<float>((gy - m_gy - xh * m_gyx) * istd);
                    }
                }
                if (gv.requires_grad()) {
                    auto& gg = gv.grad();
                    for (int j = 0; j < c; ++j) {
                        const double xh = (x[base + j] - mu) * istd;
                        gg[static_cast<size_t>(j)] += static_cast<float>(og[base + j] * xh);
                    }
                }
                if (bv.requires_grad()) {
                    auto& bg = bv.grad();
                    for (int j = 0; j < c; ++j) bg[static_cast<size_t>(j)] += og[base + j];
                }
            }
        }, {a, gamma, beta});
    }
    return out;
}

Tensor relu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const float* src = a.data();
    float* dst = out.data();
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) dst[i] = src[i] > 0.0f ? src[i] : 0.0f;
    check_finite(out, "relu");
    if (wants_grad({&a})) {
        Tensor av = a, ov = out;
        mark_and_record(out, [av, ov, n]() mutable {
            auto og = out_grad(ov);
            if (og.empty() || !av.requires_grad()) return;
            auto& ag = av.grad();
            const float* x = av.data();
            for (size_t i = 0; i < n; ++i)
                if (x[i] > 0.0f) ag[i] += og[i];
        }, {a});
    }
    return out;
}

Tensor gelu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const float* src = a.data();
    float* dst = out.data();
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) {
        const double x = src[i];
        dst[i] = static_cast<float>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
    }
    check_finite(out, "gelu");
    if (wants_grad({&a})) {
        Tensor av = a, ov = out;
        mark_and_record(out, [av, ov, n]() mutable {
            auto og = out_grad(ov);
            if (og.empty() || !av.requires_grad()) return;
            auto& ag = av.grad();
            const float* x = av.data();
            for (size_t i = 0; i < n; ++i) {
                const double v = x[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                ag[i] += static_cast<float>(og[i] * (cdf + v * pdf));
            }
        }, {a});
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shapes differ: " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor out = Tensor::zeros(a.shape());
    const float* pa = a.data();
    const float* pb = b.data();
    float* dst = out.data();
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) dst[i] = pa[i] + pb[i];
    check_finite(out, "add");
    if (wants_grad({&a, &b})) {
        Tensor av = a, bv = b, ov = out;
        mark_and_record(out, [av, bv, ov, n]() mutable {
            auto og = out_grad(ov);
            if (og.empty()) return;
            if (av.requires_grad()) {
                auto& ag = av.grad();
                for (size_t i = 0; i < n; ++i) ag[i] += og[i];
            }
            if (bv.requires_grad()) {
                auto& bg = bv.grad();
                for (size_t i = 0; i < n; ++i) bg[i] += og[i];
            }
        }, {a, b});
    }
    return out;
}

Tensor scale(const Tensor& a, float s) {
    Tensor out = Tensor::zeros(a.shape());
    const float* src = a.data();
    float* dst = out.data();
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) dst[i] = src[i] * s;
    check_finite(out, "scale");
    if (wants_grad({&a})) {
        Tensor av = a, ov = out;
        mark_and_record(out, [av, ov, n, s]() mutable {
            auto og = out_grad(ov);
            if (og.empty() || !av.requires_grad()) return;
            auto& ag = av.grad();
            for (size_t i = 0; i < n; ++i) ag[i] += og[i] * s;
        }, {a});
    }
    return out;
}

Tensor add_bias_rows(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "add_bias_rows");
    require_rank(b, 1, "add_bias_rows");
    const int r = a.dim(0), c = a.dim(1);
    if (b.dim(0) != c) {
        throw ShapeError("add_bias_rows: bias " + b.shape_str() + " does not match " + a.shape_str());
    }
    Tensor out = Tensor::zeros({r, c});
    const float* pa = a.data();
    const float* pb = b.data();
    float* dst = out.data();
    for (int i = 0; i < r; ++i) {
        const size_t base = static_cast<size_t>(i) * c;
        for (int j = 0; j < c; ++j) dst[base + j] = pa[base + j] + pb[j];
    }
    check_finite(out, "add_bias_rows");
    if (wants_grad({&a, &b})) {
        Tensor av = a, bv = b, ov = out;
        mark_and_record(out, [av, bv, ov, r, c]() mutable {
            auto og = out_grad(ov);
            if (og.empty()) return;
            if (av.requires_grad()) {
                auto& ag = av.grad();
                for (size_t i = 0; i < static_cast<size_t>(r) * c; ++i) ag[i] += og[i];
            }
            if (bv.requires_grad()) {
                auto& bg = bv.grad();
                for (int j = 0; j < c; ++j) {
                    double s = 0.0;
                    for (int i = 0; i < r; ++i) s += og[static_cast<size_t>(i) * c + j];
                    bg[static_cast<size_t>(j)] += static_cast<float>(s);
                }
            }
        }, {a, b});
    }
    return out;
}

Tensor col_slice(const Tensor& a, int c0, int len) {
    require_rank(a, 2, "col_slice");
    const int r = a.dim(0), c = a.dim(1);
    if (c0 < 0 || len <= 0 || c0 + len > c) {
        throw ShapeError("col_slice: range [" + std::to_string(c0) + ", " + std::to_string(c0 + len) +
                         ") out of bounds for " + a.shape_str());
    }
    Tensor out = Tensor::zeros({r, len});
    const float* src = a.data();
    float* dst = out.data();
    for (int i = 0; i < r; ++i)
        std::memcpy(dst + static_cast<size_t>(i) * len,
                    src + static_cast<size_t>(i) * c + c0,
                    static_cast<size_t>(len) * sizeof(float));
    if (wants_grad({&a})) {
        Tensor av = a, ov = out;
        mark_and_record(out, [av, ov, r, c, c0, len]() mutable {
            auto og = out_grad(ov);
            if (og.empty() || !av.requires_grad()) return;
            auto& ag = av.grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < len; ++j)
                    ag[static_cast<size_t>(i) * c + c0 + j] += og[static_cast<size_t>(i) * len + j];
        }, {a});
    }
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const int r = parts[0].dim(0);
    int total = 0;
    for (const auto& p : parts) {
        require_rank(p, 2, "concat_cols");
        if (p.dim(0) != r) {
            throw ShapeError("concat_cols: row counts differ: " + parts[0].shape_str() + " vs " +
                             p.shape_str());
        }
        total += p.dim(1);
    }
    Tensor out = Tensor::zeros({r, total});
    float* dst = out.data();
    int off = 0;
    for (const auto& p : parts) {
        const int c = p.dim(1);
        const float* src = p.data();
        for (int i = 0; i < r; ++i)
            std::memcpy(dst + static_cast<size_t>(i) * total + off,
                        src + static_cast<size_t>(i) * c,
                        static_cast<size_t>(c) * sizeof(float));
        off += c;
    }
    bool need = Tape::active() != nullptr &&
                std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (need) {
        std::vector<Tensor> held = parts;
        Tensor ov = out;
        mark_and_record(out, [held, ov, r, total]() mutable {
            auto og = out_grad(ov);
            if (og.empty()) return;
            int off = 0;
            for (auto& p : held) {
                const int c = p.dim(1);
                if (p.requires_grad()) {
                    auto& pg = p.grad();
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j)
                            pg[static_cast<size_t>(i) * c + j] +=
                                og[static_cast<size_t>(i) * total + off + j];
                }
                off += c;
            }
        }, parts);
    }
    return out;
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    const float* src = a.data();
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) s += src[i];
    Tensor out = Tensor::from_data({1}, {static_cast<float>(s)});
    check_finite(out, "sum_all");
    if (wants_grad({&a})) {
        Tensor av = a, ov = out;
        mark_and_record(out, [av, ov, n]() mutable {
            auto og = out_grad(ov);
            if (og.empty() || !av.requires_grad()) return;
            auto& ag = av.grad();
            for (size_t i = 0; i < n; ++i) ag[i] += og[0];
        }, {a});
    }
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + a.shape_str() + " as " + shape_to_string(shape));
    }
    Tensor out = Tensor::from_data(std::move(shape), a.vec());
    if (wants_grad({&a})) {
        Tensor av = a, ov = out;
        mark_and_record(out, [av, ov]() mutable {
            auto og = out_grad(ov);
            if (og.empty() || !av.requires_grad()) return;
            auto& ag = av.grad();
            for (size_t i = 0; i < ag.size(); ++i) ag[i] += og[i];
        }, {a});
    }
    return out;
}

Tensor dropout(const Tensor& a, float p, Rng& rng) {
    if (p < 0.0f || p >= 1.0f) throw Error("dropout: p must be in [0, 1)");
    if (p == 0.0f) return a;
    const size_t n = a.numel();
    std::vector<float> mask(n);
    const float keep_scale = 1.0f / (1.0f - p);
    for (size_t i = 0; i < n; ++i) mask[i] = rng.bernoulli(p) ? 0.0f : keep_scale;
    Tensor out = Tensor::zeros(a.shape());
    const float* src = a.data();
    float* dst = out.data();
    for (size_t i = 0; i < n; ++i) dst[i] = src[i] * mask[i];
    check_finite(out, "dropout");
    if (wants_grad({&a})) {
        Tensor av = a, ov = out;
        auto m = std::make_shared<std::vector<float>>(std::move(mask));
        mark_and_record(out, [av, ov, m, n]() mutable {
            auto og = out_grad(ov);
            if (og.empty() || !av.requires_grad()) return;
            auto& ag = av.grad();
            for (size_t i = 0; i < n; ++i) ag[i] += og[i] * (*m)[i];
        }, {a});
    }
    return out;
}

// --- conv2d ---

namespace {

struct ConvDims {
    int n, h, w, ci, kh, kw, co, oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& kernel, int stride, int pad) {
    require_rank(x, 4, "conv2d");
    require_rank(kernel, 4, "conv2d");
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    if (pad < 0) throw ShapeError("conv2d: padding must be >= 0");
    ConvDims d;
    d.n = x.dim(0); d.h = x.dim(1); d.w = x.dim(2); d.ci = x.dim(3);
    d.kh = kernel.dim(0); d.kw = kernel.dim(1); d.co = kernel.dim(3);
    if (kernel.dim(2) != d.ci) {
        throw ShapeError("conv2d: kernel " + kernel.shape_str() + " does not match input channels of " +
                         x.shape_str());
    }
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw || d.oh <= 0 || d.ow <= 0) {
        throw ShapeError("conv2d: non-positive output size for input " + x.shape_str() +
                         ", kernel " + kernel.shape_str() + ", stride " + std::to_string(stride) +
                         ", pad " + std::to_string(pad));
    }
    return d;
}

// Gathers conv patches: rows = N*OH*OW, cols = kh*kw*Ci.
std::vector<float> im2col(const float* x, const ConvDims& d, int stride, int pad) {
    const size_t cols = static_cast<size_t>(d.kh) * d.kw * d.ci;
    std::vector<float> buf(static_cast<size_t>(d.n) * d.oh * d.ow * cols, 0.0f);
    for (int n = 0; n < d.n; ++n) {
        const float* img = x + static_cast<size_t>(n) * d.h * d.w * d.ci;
        for (int oy = 0; oy < d.oh; ++oy) {
            for (int ox = 0; ox < d.ow; ++ox) {
                float* row = buf.data() +
                             ((static_cast<size_t>(n) * d.oh + oy) * d.ow + ox) * cols;
                for (int ky = 0; ky < d.kh; ++ky) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= d.h) continue;
                    for (int kx = 0; kx < d.kw; ++kx) {
                        const int ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= d.w) continue;
                        std::memcpy(row + (static_cast<size_t>(ky) * d.kw + kx) * d.ci,
                                    img + (static_cast<size_t>(iy) * d.w + ix) * d.ci,
                                    static_cast<size_t>(d.ci) * sizeof(float));
                    }
                }
            }
        }
    }
    return buf;
}

// Scatter-adds patch gradients back to input layout.
void col2im_add(const float* cols, float* dx, const ConvDims& d, int stride, int pad) {
    const size_t ncols = static_cast<size_t>(d.kh) * d.kw * d.ci;
    for (int n = 0; n < d.n; ++n) {
        float* img = dx + static_cast<size_t>(n) * d.h * d.w * d.ci;
        for (int oy = 0; oy < d.oh; ++oy) {
            for (int ox = 0; ox < d.ow; ++ox) {
                const float* row = cols + ((static_cast<size_t>(n) * d.oh + oy) * d.ow + ox) * ncols;
                for (int ky = 0; ky < d.kh; ++ky) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= d.h) continue;
                    for (int kx = 0; kx < d.kw; ++kx) {
                        const int ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= d.w) continue;
                        const float* src = row + (static_cast<size_t>(ky) * d.kw + kx) * d.ci;
                        float* dst = img + (static_cast<size_t>(iy) * d.w + ix) * d.ci;
                        for (int c = 0; c < d.ci; ++c) dst[c] += src[c];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, int pad) {
    const ConvDims d = conv_dims(x, kernel, stride, pad);
    if (bias.defined()) {
        require_rank(bias, 1, "conv2d");
        if (bias.dim(0) != d.co) {
            throw ShapeError("conv2d: bias " + bias.shape_str() + " does not match kernel " +
                             kernel.shape_str());
        }
    }
    const int rows = d.n * d.oh * d.ow;
    const int cols = d.kh * d.kw * d.ci;
    // 1x1/stride-1/no-pad convs use the input directly as the patch matrix.
    const bool pointwise = (d.kh == 1 && d.kw == 1 && stride == 1 && pad == 0);
    std::vector<float> patch_store;
    const float* patches = nullptr;
    if (pointwise) {
        patches = x.data();
    } else {
        patch_store = im2col(x.data(), d, stride, pad);
        patches = patch_store.data();
    }
    Tensor out = Tensor::zeros({d.n, d.oh, d.ow, d.co});
    gemm_nn(patches, kernel.data(), out.data(), rows, cols, d.co, false);
    if (bias.defined()) {
        float* dst = out.data();
        const float* pb = bias.data();
        for (int i = 0; i < rows; ++i) {
            float* row = dst + static_cast<size_t>(i) * d.co;
            for (int c = 0; c < d.co; ++c) row[c] += pb[c];
        }
    }
    check_finite(out, "conv2d");
    if (wants_grad({&x, &kernel, &bias})) {
        Tensor xv = x, kv = kernel, bv = bias, ov = out;
        auto cached = std::make_shared<std::vector<float>>(std::move(patch_store));
        mark_and_record(out, [xv, kv, bv, ov, cached, d, stride, pad, rows, cols, pointwise]() mutable {
            auto og = out_grad(ov);
            if (og.empty()) return;
            if (bv.defined() && bv.requires_grad()) {
                auto& bg = bv.grad();
                for (int c = 0; c < d.co; ++c) {
                    double s = 0.0;
                    for (int i = 0; i < rows; ++i) s += og[static_cast<size_t>(i) * d.co + c];
                    bg[static_cast<size_t>(c)] += static_cast<float>(s);
                }
            }
            const float* patches = pointwise ? xv.data() : cached->data();
            if (kv.requires_grad()) {
                gemm_tn(patches, og.data(), kv.grad().data(), rows, cols, d.co, true);
            }
            if (xv.requires_grad()) {
                if (pointwise) {
                    gemm_nt(og.data(), kv.data(), xv.grad().data(), rows, d.co, cols, true);
                } else {
                    std::vector<float> dcols(static_cast<size_t>(rows) * cols);
                    gemm_nt(og.data(), kv.data(), dcols.data(), rows, d.co, cols, false);
                    col2im_add(dcols.data(), xv.grad().data(), d, stride, pad);
                }
            }
        }, {x, kernel, bias});
    }
    return out;
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int pad) {
    return conv2d(x, kernel, Tensor(), stride, pad);
}

// --- bilinear resize ---

namespace {
struct AxisMap {
    std::vector<int> lo, hi;
    std::vector<double> frac;
};

AxisMap make_axis_map(int in, int out) {
    AxisMap m;
    m.lo.resize(static_cast<size_t>(out));
    m.hi.resize(static_cast<size_t>(out));
    m.frac.resize(static_cast<size_t>(out));
    for (int i = 0; i < out; ++i) {
        const double src = (out == 1) ? 0.0
                                      : static_cast<double>(i) * (in - 1) / (out - 1);
        int lo = static_cast<int>(src);
        if (lo > in - 1) lo = in - 1;
        const double f = src - lo;
        m.lo[static_cast<size_t>(i)] = lo;
        m.hi[static_cast<size_t>(i)] = std::min(lo + 1, in - 1);
        m.frac[static_cast<size_t>(i)] = f;
    }
    return m;
}
}  // namespace

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
    require_rank(x, 4, "bilinear_resize");
    if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output size must be >= 1");
    const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    if (out_h == h && out_w == w) {
        // Same-size resize is the identity, bit for bit.
        Tensor out = Tensor::from_data(x.shape(), x.vec());
        if (wants_grad({&x})) {
            Tensor xv = x, ov = out;
            mark_and_record(out, [xv, ov]() mutable {
                auto og = out_grad(ov);
                if (og.empty() || !xv.requires_grad()) return;
                auto& xg = xv.grad();
                for (size_t i = 0; i < xg.size(); ++i) xg[i] += og[i];
            }, {x});
        }
        return out;
    }
    const AxisMap ym = make_axis_map(h, out_h);
    const AxisMap xm = make_axis_map(w, out_w);
    Tensor out = Tensor::zeros({n, out_h, out_w, c});
    const float* src = x.data();
    float* dst = out.data();
    for (int b = 0; b < n; ++b) {
        const float* img = src + static_cast<size_t>(b) * h * w * c;
        for (int oy = 0; oy < out_h; ++oy) {
            const int y0 = ym.lo[static_cast<size_t>(oy)], y1 = ym.hi[static_cast<size_t>(oy)];
            const double fy = ym.frac[static_cast<size_t>(oy)];
            for (int ox = 0; ox < out_w; ++ox) {
                const int x0 = xm.lo[static_cast<size_t>(ox)], x1 = xm.hi[static_cast<size_t>(ox)];
                const double fx = xm.frac[static_cast<size_t>(ox)];
                const float* p00 = img + (static_cast<size_t>(y0) * w + x0) * c;
                const float* p01 = img + (static_cast<size_t>(y0) * w + x1) * c;
                const float* p10 = img + (static_cast<size_t>(y1) * w + x0) * c;
                const float* p11 = img + (static_cast<size_t>(y1) * w + x1) * c;
                const double w00 = (1.0 - fy) * (1.0 - fx), w01 = (1.0 - fy) * fx;
                const double w10 = fy * (1.0 - fx), w11 = fy * fx;
                float* o = dst + ((static_cast<size_t>(b) * out_h + oy) * out_w + ox) * c;
                for (int ch = 0; ch < c; ++ch) {
                    o[ch] = static_cast<float>(w00 * p00[ch] + w01 * p01[ch] +
                                               w10 * p10[ch] + w11 * p11[ch]);
                }
            }
        }
    }
    check_finite(out, "bilinear_resize");
    if (wants_grad({&x})) {
        Tensor xv = x, ov = out;
        mark_and_record(out, [xv, ov, ym, xm, n, h, w, c, out_h, out_w]() mutable {
            auto og = out_grad(ov);
            if (og.empty() || !xv.requires_grad()) return;
            auto& xg = xv.grad();
            for (int b = 0; b < n; ++b) {
                float* gimg = xg.data() + static_cast<size_t>(b) * h * w * c;
                for (int oy = 0; oy < out_h; ++oy) {
                    const int y0 = ym.lo[static_cast<size_t>(oy)], y1 = ym.hi[static_cast<size_t>(oy)];
                    const double fy = ym.frac[static_cast<size_t>(oy)];
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int x0 = xm.lo[static_cast<size_t>(ox)], x1 = xm.hi[static_cast<size_t>(ox)];
                        const double fx = xm.frac[static_cast<size_t>(ox)];
                        const double w00 = (1.0 - fy) * (1.0 - fx), w01 = (1.0 - fy) * fx;
                        const double w10 = fy * (1.0 - fx), w11 = fy * fx;
                        const float* go = og.data() +
                            ((static_cast<size_t>(b) * out_h + oy) * out_w + ox) * c;
                        float* g00 = gimg + (static_cast<size_t>(y0) * w + x0) * c;
                        float* g01 = gimg + (static_cast<size_t>(y0) * w + x1) * c;
                        float* g10 = gimg + (static_cast<size_t>(y1) * w + x0) * c;
                        float* g11 = gimg + (static_cast<size_t>(y1) * w + x1) * c;
                        for (int ch = 0; ch < c; ++ch) {
                            g00[ch] += static_cast<float>(w00 * go[ch]);
                            g01[ch] += static_cast<float>(w01 * go[ch]);
                            g10[ch] += static_cast<float>(w10 * go[ch]);
                            g11[ch] += static_cast<float>(w11 * go[ch]);
                        }
                    }
                }
            }
        }, {x});
    }
    return out;
}

// --- batch norm ---

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    BatchNormState& state, bool train, float eps, float momentum) {
    require_rank(x, 4, "batch_norm2d");
    const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    if (gamma.dim(0) != c || beta.dim(0) != c) {
        throw ShapeError("batch_norm2d: affine shape " + gamma.shape_str() +
                         " does not match channels of " + x.shape_str());
    }
    const size_t count = static_cast<size_t>(n) * h * w;
    std::vector<float> mean(static_cast<size_t>(c));
    std::vector<float> inv_std(static_cast<size_t>(c));
    if (train) {
        if (!state.running_mean.defined()) {
            state.running_mean = Tensor::zeros({c});
            state.running_var = Tensor::full({c}, 1.0f);
        }
        std::vector<double> sum(static_cast<size_t>(c), 0.0);
        std::vector<double> sumsq(static_cast<size_t>(c), 0.0);
        const float* src = x.data();
        for (size_t i = 0; i < count; ++i) {
            const float* px = src + i * c;
            for (int ch = 0; ch < c; ++ch) {
                sum[static_cast<size_t>(ch)] += px[ch];
                sumsq[static_cast<size_t>(ch)] += static_cast<double>(px[ch]) * px[ch];
            }
        }
        float* rm = state.running_mean.data();
        float* rv = state.running_var.data();
        for (int ch = 0; ch < c; ++ch) {
            const double mu = sum[static_cast<size_t>(ch)] / static_cast<double>(count);
            double var = sumsq[static_cast<size_t>(ch)] / static_cast<double>(count) - mu * mu;
            if (var < 0.0) var = 0.0;
            mean[static_cast<size_t>(ch)] = static_cast<float>(mu);
            inv_std[static_cast<size_t>(ch)] = static_cast<float>(1.0 / std::sqrt(var + eps));
            const double unbiased = count > 1 ? var * static_cast<double>(count) / (count - 1) : var;
            rm[ch] = static_cast<float>((1.0 - momentum) * rm[ch] + momentum * mu);
            rv[ch] = static_cast<float>((1.0 - momentum) * rv[ch] + momentum * unbiased);
        }
        state.initialized = true;
    } else {
        if (!state.initialized) {
            throw Error("batch_norm2d: eval mode requires initialized running statistics");
        }
        const float* rm = state.running_mean.data();
        const float* rv = state.running_var.data();
        for (int ch = 0; ch < c; ++ch) {
            mean[static_cast<size_t>(ch)] = rm[ch];
            inv_std[static_cast<size_t>(ch)] = static_cast<float>(1.0 / std::sqrt(static_cast<double>(rv[ch]) + eps));
        }
    }
    Tensor out = Tensor::zeros(x.shape());
    {
        const float* src = x.data();
        float* dst = out.data();
        const float* g = gamma.data();
        const float* b = beta.data();
        for (size_t i = 0; i < count; ++i) {
            const float* px = src + i * c;
            float* po = dst + i * c;
            for (int ch = 0; ch < c; ++ch) {
                po[ch] = (px[ch] - mean[static_cast<size_t>(ch)]) * inv_std[static_cast<size_t>(ch)] * g[ch] + b[ch];
            }
        }
    }
    check_finite(out, "batch_norm2d");
    if (wants_grad({&x, &gamma, &beta})) {
        Tensor xv = x, gv = gamma, bv = beta, ov = out;
        auto mu = std::make_shared<std::vector<float>>(std::move(mean));
        auto istd = std::make_shared<std::vector<float>>(std::move(inv_std));
        mark_and_record(out, [xv, gv, bv, ov, mu, istd, count, c, train]() mutable {
            auto og = out_grad(ov);
            if (og.empty()) return;
            const float* src = xv.data();
            const float* g = gv.data();
            std::vector<double> sum_gy(static_cast<size_t>(c), 0.0);
            std::vector<double> sum_gyx(static_cast<size_t>(c), 0.0);
            for (size_t i = 0; i < count; ++i) {
                const float* px = src + i * c;
                const float* pg = og.data() + i * c;
                for (int ch = 0; ch < c; ++ch) {
                    const double xh = (px[ch] - (*mu)[static_cast<size_t>(ch)]) * (*istd)[static_cast<size_t>(ch)];
                    sum_gy[static_cast<size_t>(ch)] += pg[ch];
                    sum_gyx[static_cast<size_t>(ch)] += pg[ch] * xh;
                }
            }
            if (gv.requires_grad()) {
                auto& gg = gv.grad();
                for (int ch = 0; ch < c; ++ch) gg[static_cast<size_t>(ch)] += static_cast<float>(sum_gyx[static_cast<size_t>(ch)]);
            }
            if (bv.requires_grad()) {
                auto& bg = bv.grad();
                for (int ch = 0; ch < c; ++ch) bg[static_cast<size_t>(ch)] += static_cast<float>(sum_gy[static_cast<size_t>(ch)]);
            }
            if (xv.requires_grad()) {
                auto& xg = xv.grad();
                const double inv_count = 1.0 / static_cast<double>(count);
                for (size_t i = 0; i < count; ++i) {
                    const float* px = src + i * c;
                    const float* pg = og.data() + i * c;
                    float* pxg = xg.data() + i * c;
                    for (int ch = 0; ch < c; ++ch) {
                        const double is = (*istd)[static_cast<size_t>(ch)];
                        const double xh = (px[ch] - (*mu)[static_cast<size_t>(ch)]) * is;
                        double dx;
                        if (train) {
                            dx = g[ch] * is *
                                 (pg[ch] - sum_gy[static_cast<size_t>(ch)] * inv_count -
                                  xh * sum_gyx[static_cast<size_t>(ch)] * inv_count);
                        } else {
                            dx = g[ch] * is * pg[ch];
                        }
                        pxg[ch] += static_cast<float>(dx);
                    }
                }
            }
        }, {x, gamma, beta});
    }
    return out;
}

// --- cross entropy ---

Tensor cross_entropy_map(const Tensor& logits, std::span<const uint16_t> labels, int ignore_index) {
    require_rank(logits, 4, "cross_entropy_map");
    const int n = logits.dim(0), h = logits.dim(1), w = logits.dim(2), k = logits.dim(3);
    const size_t pixels = static_cast<size_t>(n) * h * w;
    if (labels.size() != pixels) {
        throw ShapeError("cross_entropy_map: " + std::to_string(labels.size()) +
                         " labels for logits " + logits.shape_str());
    }
    std::vector<float> lse(pixels, 0.0f);
    const float* src = logits.data();
    double loss_sum = 0.0;
    size_t scored = 0;
    for (size_t i = 0; i < pixels; ++i) {
        const int t = labels[i];
        if (t == ignore_index) continue;
        if (t >= k) {
            throw Error("cross_entropy_map: label " + std::to_string(t) + " out of range for " +
                        std::to_string(k) + " classes");
        }
        const float* row = src + i * k;
        float mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int j = 0; j < k; ++j) s += std::exp(static_cast<double>(row[j]) - mx);
        const double l = mx + std::log(s);
        lse[i] = static_cast<float>(l);
        loss_sum += l - row[t];
        ++scored;
    }
    const float loss = scored ? static_cast<float>(loss_sum / static_cast<double>(scored)) : 0.0f;
    Tensor out = Tensor::from_data({1}, {loss});
    check_finite(out, "cross_entropy_map");
    if (wants_grad({&logits})) {
        Tensor lv = logits, ov = out;
        auto lse_keep = std::make_shared<std::vector<float>>(std::move(lse));
        std::vector<uint16_t> labels_copy(labels.begin(), labels.end());
        auto lab = std::make_shared<std::vector<uint16_t>>(std::move(labels_copy));
        mark_and_record(out, [lv, ov, lse_keep, lab, pixels, k, ignore_index, scored]() mutable {
            auto og = out_grad(ov);
            if (og.empty() || !lv.requires_grad() || scored == 0) return;
            const double gscale = static_cast<double>(og[0]) / static_cast<double>(scored);
            auto& lg = lv.grad();
            const float* src = lv.data();
            for (size_t i = 0; i < pixels; ++i) {
                const int t = (*lab)[i];
                if (t == ignore_index) continue;
                const float* row = src + i * k;
                float* grow = lg.data() + i * k;
                const double l = (*lse_keep)[i];
                for (int j = 0; j < k; ++j) {
                    const double p = std::exp(static_cast<double>(row[j]) - l);
                    grow[j] += static_cast<float>(gscale * (p - (j == t ? 1.0 : 0.0)));
                }
            }
        }, {logits});
    }
    return out;
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no inputs");
    require_rank(parts[0], 4, "concat_channels");
    const int n = parts[0].dim(0), h = parts[0].dim(1), w = parts[0].dim(2);
    int total = 0;
    for (const auto& p : parts) {
        require_rank(p, 4, "concat_channels");
        if (p.dim(0) != n || p.dim(1) != h || p.dim(2) != w) {
            throw ShapeError("concat_channels: spatial dims differ: " + parts[0].shape_str() +
                             " vs " + p.shape_str());
        }
        total += p.dim(3);
    }
    Tensor out = Tensor::zeros({n, h, w, total});
    const size_t pixels = static_cast<size_t>(n) * h * w;
    float* dst = out.data();
    int off = 0;
    for (const auto& p : parts) {
        const int c = p.dim(3);
        const float* src = p.data();
        for (size_t i = 0; i < pixels; ++i)
            std::memcpy(dst + i * total + off, src + i * c, static_cast<size_t>(c) * sizeof(float));
        off += c;
    }
    bool need = Tape::active() != nullptr &&
                std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (need) {
        std::vector<Tensor> held = parts;
        Tensor ov = out;
        mark_and_record(out, [held, ov, pixels, total]() mutable {
            auto og = out_grad(ov);
            if (og.empty()) return;
            int off = 0;
            for (auto& p : held) {
                const int c = p.dim(3);
                if (p.requires_grad()) {
                    auto& pg = p.grad();
                    for (size_t i = 0; i < pixels; ++i)
                        for (int ch = 0; ch < c; ++ch)
                            pg[i * c + ch] += og[i * total + off + ch];
                }
                off += c;
            }
        }, parts);
    }
    return out;
}

Tensor stack_maps(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("stack_maps: no inputs");
    require_rank(parts[0], 3, "stack_maps");
    const Shape base = parts[0].shape();
    for (const auto& p : parts) {
        require_rank(p, 3, "stack_maps");
        if (p.shape() != base) {
            throw ShapeError("stack_maps: shapes differ: " + shape_to_string(base) + " vs " +
                             p.shape_str());
        }
    }
    const int n = static_cast<int>(parts.size());
    const size_t per = parts[0].numel();
    Tensor out = Tensor::zeros({n, base[0], base[1], base[2]});
    float* dst = out.data();
    for (int i = 0; i < n; ++i)
        std::memcpy(dst + static_cast<size_t>(i) * per, parts[static_cast<size_t>(i)].data(),
                    per * sizeof(float));
    bool need = Tape::active() != nullptr &&
                std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (need) {
        std::vector<Tensor> held = parts;
        Tensor ov = out;
        mark_and_record(out, [held, ov, per]() mutable {
            auto og = out_grad(ov);
            if (og.empty()) return;
            for (size_t i = 0; i < held.size(); ++i) {
                if (!held[i].requires_grad()) continue;
                auto& pg = held[i].grad();
                const float* src = og.data() + i * per;
                for (size_t j = 0; j < per; ++j) pg[j] += src[j];
            }
        }, parts);
    }
    return out;
}

}  // namespace seq2seg
