#pragma once

// Central finite differences against forward_backward. The selection state
// (masks, gate indicator, aux target) is captured once and reused, so the
// numerical derivative sees the same surrogate the analytic one does.

#include "adaptivek/training.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace gradcheck {

using namespace adaptivek;

struct TensorError {
    std::string name;
    double rel = 0.0;      // ||analytic - numeric|| / max(||analytic||, ||numeric||)
    double analytic_norm = 0.0;
};

struct Report {
    std::vector<TensorError> tensors;
    double worst() const {
        double w = 0.0;
        for (const auto& t : tensors) w = std::max(w, t.rel);
        return w;
    }
};

inline double rel_error(const std::vector<double>& a, const std::vector<double>& n) {
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - n[i]) * (a[i] - n[i]);
        na += a[i] * a[i];
        nn += n[i] * n[i];
    }
    const double scale = std::max(std::sqrt(na), std::sqrt(nn));
    return scale > 0.0 ? std::sqrt(diff) / scale : 0.0;
}

/// Checks every trainable tensor. `probe` is mutated in place for the probe
/// terms and restored.
inline Report check(SaeParams params, const Batch& batch, StepContext ctx, ProbeModel* probe, double h = 1e-6) {
    FrozenSelection frozen;
    Gradients g;
    if (probe) ctx.probe = probe;
    forward_backward(params, batch, ctx, frozen, &g);

    auto total = [&] {
        FrozenSelection f = frozen;
        return forward_backward(params, batch, ctx, f, nullptr).total;
    };
    auto numeric = [&](double* data, std::size_t n) {
        std::vector<double> out(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double saved = data[i];
            data[i] = saved + h;
            const double up = total();
            data[i] = saved - h;
            const double down = total();
            data[i] = saved;
            out[i] = (up - down) / (2.0 * h);
        }
        return out;
    };
    auto as_vec = [](const double* p, std::size_t n) { return std::vector<double>(p, p + n); };

    Report rep;
    auto add = [&](const std::string& name, double* value, const double* grad, std::size_t n) {
        if (n == 0) return;
        const auto num = numeric(value, n);
        const auto ana = as_vec(grad, n);
        double norm = 0.0;
        for (double v : ana) norm += v * v;
        rep.tensors.push_back({name, rel_error(ana, num), std::sqrt(norm)});
    };

    const Variant v = ctx.variant.variant;
    add("W_enc", params.W_enc.data(), g.W_enc.data(), static_cast<std::size_t>(params.W_enc.size()));
    add("W_dec", params.W_dec.data(), g.W_dec.data(), static_cast<std::size_t>(params.W_dec.size()));
    add("b_pre", params.b_pre.data(), g.b_pre.data(), static_cast<std::size_t>(params.b_pre.size()));
    if (v != Variant::adaptive_k && v != Variant::gated)
        add("b_enc", params.b_enc.data(), g.b_enc.data(), static_cast<std::size_t>(params.b_enc.size()));
    if (v == Variant::gated) {
        add("r", params.r.data(), g.r.data(), static_cast<std::size_t>(params.r.size()));
        add("b_gate", params.b_gate.data(), g.b_gate.data(), static_cast<std::size_t>(params.b_gate.size()));
        add("b_mag", params.b_mag.data(), g.b_mag.data(), static_cast<std::size_t>(params.b_mag.size()));
    }
    if (probe && ctx.probe_anchor) {
        add("probe_w", probe->w.data(), g.probe_w.data(), static_cast<std::size_t>(probe->w.size()));
        add("probe_b", &probe->b, &g.probe_b, 1);
    }
    return rep;
}

} // namespace gradcheck

#include "adaptivek/rng.hpp"

namespace gradcheck {

struct ToyCase {
    SaeParams params;
    Batch batch;
    StepContext ctx;
    ProbeModel probe;
    ProbeModel anchor;
    bool joint = false;
};

inline Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale) {
    Matrix m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
        for (Eigen::Index i = 0; i < r; ++i) m(i, j) = scale * rng.normal();
    return m;
}

/// d=4, M=8, two rows. Latents 5..7 are marked dead so the auxiliary term is
/// live for the top-k family; `joint` adds the probe terms.
inline ToyCase toy_case(const VariantConfig& variant, std::uint64_t seed, bool joint = false) {
    constexpr Eigen::Index d = 4, M = 8, N = 2;
    Rng rng(derive_seed(seed, 77));
    ToyCase t;
    t.params.W_enc = random_matrix(rng, M, d, 0.8);
    t.params.W_dec = random_matrix(rng, d, M, 0.8);
    t.params.b_pre = random_matrix(rng, d, 1, 0.2);
    t.params.b_enc = random_matrix(rng, M, 1, 0.3);
    if (variant.variant == Variant::gated) {
        t.params.r = random_matrix(rng, M, 1, 0.3);
        t.params.b_gate = random_matrix(rng, M, 1, 0.3);
        t.params.b_mag = random_matrix(rng, M, 1, 0.3);
    }
    t.batch.x = random_matrix(rng, N, d, 1.0);
    t.batch.c = Vector(N);
    for (Eigen::Index i = 0; i < N; ++i) t.batch.c(i) = rng.uniform(0.0, 10.0);
    t.batch.index = {0, 1};
    t.probe.w = random_matrix(rng, d, 1, 1.0);
    t.probe.b = 5.0 + rng.normal();
    t.anchor.w = t.probe.w + random_matrix(rng, d, 1, 0.3);
    t.anchor.b = t.probe.b + 0.5 + rng.uniform();
    t.ctx.variant = variant;
    t.ctx.dead.assign(M, false);
    if (is_topk_family(variant.variant)) t.ctx.dead[5] = t.ctx.dead[6] = t.ctx.dead[7] = true;
    if (variant.variant == Variant::p_anneal) t.ctx.p = 0.6;
    t.ctx.weights.beta = 0.5;  // large enough that an error in the aux gradient shows
    t.joint = joint;
    return t;
}

/// Runs the check with the probe pointers wired to this case.
inline Report run(ToyCase& t, double h = 1e-6) {
    StepContext ctx = t.ctx;
    ctx.probe_anchor = t.joint ? &t.anchor : nullptr;
    const bool uses_probe = t.joint || t.ctx.variant.variant == Variant::adaptive_k;
    return check(t.params, t.batch, ctx, uses_probe ? &t.probe : nullptr, h);
}

} // namespace gradcheck
