#include "adaptivek/training.hpp"
#include "adaptivek/rng.hpp"

#include <algorithm>
#include <cmath>

namespace adaptivek {

namespace {

TensorRef view(Matrix& value, const Matrix& grad) {
    return {{value.data(), static_cast<std::size_t>(value.size())},
            {grad.data(), static_cast<std::size_t>(grad.size())}};
}

TensorRef view(Vector& value, const Vector& grad) {
    return {{value.data(), static_cast<std::size_t>(value.size())},
            {grad.data(), static_cast<std::size_t>(grad.size())}};
}

bool grads_finite(const Gradients& g) {
    return g.W_enc.allFinite() && g.W_dec.allFinite() && g.b_pre.allFinite() && g.b_enc.allFinite() &&
           g.r.allFinite() && g.b_gate.allFinite() && g.b_mag.allFinite() && g.probe_w.allFinite() &&
           std::isfinite(g.probe_b);
}

Dataset load_all(RecordSource& src) {
    Dataset out(src.d_model(), src.score_present());
    std::vector<float> acts(static_cast<std::size_t>(src.count()) * src.d_model());
    std::vector<float> cs(static_cast<std::size_t>(src.count()));
    src.read(0, src.count(), acts.data(), cs.data());
    for (std::uint64_t i = 0; i < src.count(); ++i)
        out.push_back({acts.data() + i * src.d_model(), src.d_model()}, cs[i]);
    return out;
}

Vector leading_mean(RecordSource& src, std::uint64_t limit) {
    const std::uint64_t n = std::min(limit, src.count());
    std::vector<float> acts(static_cast<std::size_t>(n) * src.d_model());
    std::vector<float> cs(static_cast<std::size_t>(n));
    src.read(0, n, acts.data(), cs.data());
    Vector mean = Vector::Zero(src.d_model());
    for (std::uint64_t i = 0; i < n; ++i)
        for (std::uint32_t j = 0; j < src.d_model(); ++j) mean(j) += acts[i * src.d_model() + j];
    return mean / static_cast<double>(std::max<std::uint64_t>(n, 1));
}

} // namespace

void adam_step(std::span<const TensorRef> tensors, OptimizerState& state, double lr, const AdamConfig& cfg) {
    for (const auto& t : tensors) {
        require_dims(t.value.size() == t.grad.size(), "adam: value and gradient sizes differ");
        for (double g : t.grad)
            if (!std::isfinite(g)) throw NumericError("non-finite gradient; optimizer step rejected");
    }
    if (state.m.empty()) {
        for (const auto& t : tensors) {
            state.m.emplace_back(t.value.size(), 0.0);
            state.v.emplace_back(t.value.size(), 0.0);
        }
    }
    require_dims(state.m.size() == tensors.size(), "adam: tensor count changed between steps");
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        auto& m = state.m[i];
        auto& v = state.v[i];
        require_dims(m.size() == tensors[i].value.size(), "adam: tensor shape changed between steps");
        for (std::size_t j = 0; j < m.size(); ++j) {
            const double g = tensors[i].grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            tensors[i].value[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.eps);
        }
    }
}

std::vector<TensorRef> sae_tensors(SaeParams& p, const Gradients& g) {
    std::vector<TensorRef> out{view(p.W_enc, g.W_enc), view(p.W_dec, g.W_dec), view(p.b_pre, g.b_pre),
                               view(p.b_enc, g.b_enc)};
    if (p.has_gate()) {
        out.push_back(view(p.r, g.r));
        out.push_back(view(p.b_gate, g.b_gate));
        out.push_back(view(p.b_mag, g.b_mag));
    }
    return out;
}

void TrainConfig::validate() const {
    require(dict_size >= 1, "dict_size must be >= 1");
    variant.validate(dict_size);
    if (schedule.total_steps != 0) schedule.validate();
    weights.validate();
    require(dead_threshold >= 1, "dead_threshold must be >= 1");
    require(folds >= 2, "folds must be >= 2");
    require(!lambda_grid.empty(), "lambda grid is empty");
    for (double l : lambda_grid) require(l >= 0.0 && std::isfinite(l), "lambda grid values must be >= 0");
    if (probe_lambda) require(*probe_lambda >= 0.0, "probe lambda must be >= 0");
    require(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0,
            "invalid Adam settings");
}

nlohmann::json log_entry_json(const TrainLogEntry& e) {
    return {{"step", e.step},
            {"phase", e.phase},
            {"lr", e.lr},
            {"L_recon", e.components.recon},
            {"L_sparsity", e.components.sparsity},
            {"L_aux", e.components.aux},
            {"L_probe", e.components.probe},
            {"L_dev", e.components.deviation},
            {"total", e.total},
            {"delta", e.delta},
            {"mean_L0", e.mean_l0},
            {"dead_count", e.dead_count}};
}

TrainResult train(const TrainInputs& inputs, const TrainConfig& cfg_in) {
    if (!inputs.data) throw InvalidArgument("training needs a data source");
    RecordSource& src = *inputs.data;
    require(src.count() >= 1, "training dataset is empty");

    TrainConfig cfg = cfg_in;
    if (cfg.schedule.total_steps == 0) {
        const auto bs = static_cast<std::uint64_t>(std::max(cfg.schedule.batch_size, 1));
        cfg.schedule.total_steps = static_cast<int>((src.count() + bs - 1) / bs);
        cfg.schedule.warmup_steps = std::min(cfg.schedule.warmup_steps, cfg.schedule.total_steps - 1);
    }
    cfg.validate();
    cfg.schedule.validate();

    const Variant v = cfg.variant.variant;
    const bool adaptive = v == Variant::adaptive_k;
    const auto d = static_cast<Eigen::Index>(src.d_model());
    const TrainSchedule& sched = cfg.schedule;
    const int T = sched.total_steps;

    TrainResult result;
    ProbeModel probe;
    if (adaptive) {
        if (inputs.pretrained_probe) {
            probe = *inputs.pretrained_probe;
            require_dims(probe.d_model() == d, "pretrained probe dimension differs from the dataset");
            result.probe_pretrained = probe;
        } else {
            Dataset owned;
            const Dataset* pd = inputs.probe_data;
            if (!pd) {
                owned = load_all(src);
                pd = &owned;
            }
            if (!pd->score_present()) throw InvalidArgument("adaptive training needs complexity labels");
            require_dims(pd->d_model() == static_cast<std::uint32_t>(d), "probe data dimension differs");
            const Matrix A = pd->activation_matrix();
            const Vector y = pd->complexity_vector();
            if (cfg.probe_lambda) {
                probe = fit_ridge(A, y, *cfg.probe_lambda);
            } else {
                result.cv = cross_validate(A, y, cfg.lambda_grid, cfg.folds, derive_seed(cfg.seed, 4));
                probe = result.cv->model;
            }
            result.probe_pretrained = probe;
        }
    }

    SaeParams params = SaeParams::init(d, cfg.dict_size, v == Variant::gated, derive_seed(cfg.seed, 1));
    params.b_pre = leading_mean(src, 4096);

    const std::uint64_t capacity = cfg.buffer_capacity == 0 ? src.count() : cfg.buffer_capacity;
    Buffer buffer(inputs.data, capacity, derive_seed(cfg.seed, 2));
    Rng renorm_rng(derive_seed(cfg.seed, 3));
    DeadFeatureTracker tracker(cfg.dict_size, cfg.dead_threshold);
    OptimizerState sae_state, probe_state;
    LossWeights weights = cfg.weights;
    std::vector<double> probe_history;
    ProbeModel anchor;

    const int joint_start = adaptive ? sched.joint_start() : T;

    for (int t = 0; t < T; ++t) {
        const bool phase3 = t >= joint_start;
        if (t == joint_start) {
            anchor = probe;
            result.probe_snapshot = anchor;
        }
        Batch batch = buffer.read_batch(static_cast<std::size_t>(sched.batch_size));
        if (phase3 && !batch.has_labels) throw InvalidArgument("joint phase needs complexity labels");

        StepContext ctx{cfg.variant, weights, adaptive ? &probe : nullptr, phase3 ? &anchor : nullptr,
                        tracker.dead_mask(), 1.0};
        if (v == Variant::p_anneal) ctx.p = p_anneal_exponent(t, T, *cfg.variant.p_end);

        FrozenSelection frozen;
        Gradients grads;
        ForwardResult fr = forward_backward(params, batch, ctx, frozen, &grads);

        if (!std::isfinite(fr.total) || !grads_finite(grads)) {
            if (inputs.divergence_dump) save_sae({cfg.variant, params}, *inputs.divergence_dump);
            throw NumericError("training diverged at step " + std::to_string(t) +
                               " (non-finite loss or gradient)");
        }

        const double lr = lr_at(t, sched);
        const auto tensors = sae_tensors(params, grads);
        adam_step(tensors, sae_state, lr, cfg.adam);
        if (phase3) {
            const std::vector<TensorRef> probe_tensors{
                view(probe.w, grads.probe_w),
                {{&probe.b, 1}, {&grads.probe_b, 1}}};
            adam_step(probe_tensors, probe_state, lr, cfg.adam);
        }
        normalize_decoder(params, renorm_rng);
        tracker.update(fr.Z);

        if (phase3) {
            probe_history.push_back(fr.components.probe);
            weights.delta = update_delta(probe_history, weights.delta);
            ++result.phase3_steps;
        } else {
            ++result.phase2_steps;
        }

        TrainLogEntry entry{t, phase3 ? 3 : 2, lr, fr.components, fr.total, weights.delta, fr.mean_l0,
                            tracker.dead_count()};
        if (inputs.on_step) inputs.on_step(entry);
        result.log.push_back(entry);
    }

    result.sae = {cfg.variant, std::move(params)};
    if (adaptive) result.probe = probe;
    return result;
}

} // namespace adaptivek
