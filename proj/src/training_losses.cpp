#include "adaptivek/training.hpp"

#include <algorithm>
#include <cmath>

namespace adaptivek {

namespace {

Matrix aux_selection(const Matrix& pre, const std::vector<bool>& dead, int k_aux) {
    Matrix mask = Matrix::Zero(pre.rows(), pre.cols());
    if (k_aux <= 0) return mask;
    Vector masked(pre.cols());
    for (Eigen::Index i = 0; i < pre.rows(); ++i) {
        for (Eigen::Index j = 0; j < pre.cols(); ++j) masked(j) = dead[static_cast<std::size_t>(j)] ? pre(i, j) : 0.0;
        for (auto j : topk_indices(masked, std::min<int>(k_aux, static_cast<int>(pre.cols())))) mask(i, j) = 1.0;
    }
    return mask;
}

int count_dead(const std::vector<bool>& dead) { return static_cast<int>(std::count(dead.begin(), dead.end(), true)); }

} // namespace

void LossWeights::validate() const {
    require(alpha >= 0.0 && beta >= 0.0 && gamma >= 0.0, "loss weights must be nonnegative");
    require(delta >= delta_min && delta <= delta_max, "delta must lie in [0.01, 0.5]");
}

void TrainSchedule::validate() const {
    require(total_steps >= 1, "total_steps must be >= 1");
    require(phase_ratio > 0.0 && phase_ratio <= 1.0, "phase_ratio must be in (0, 1]");
    require(warmup_steps >= 0 && warmup_steps < total_steps, "warmup_steps must be < total_steps");
    require(decay_start_fraction >= 0.0 && decay_start_fraction <= 1.0, "decay_start_fraction must be in [0, 1]");
    require(base_lr > 0.0, "base_lr must be positive");
    require(batch_size >= 1, "batch_size must be >= 1");
}

int TrainSchedule::joint_start() const {
    const double boundary = phase_ratio * total_steps;
    return std::min(total_steps, static_cast<int>(std::floor(boundary + 1e-9)));
}

double lr_at(int step, const TrainSchedule& s) {
    require(step >= 0 && step <= s.total_steps, "lr_at: step outside [0, total_steps]");
    double factor = 1.0;
    if (s.warmup_steps > 0 && step < s.warmup_steps) factor = static_cast<double>(step + 1) / s.warmup_steps;
    const double decay_start = s.decay_start_fraction * s.total_steps;
    if (step > decay_start) factor = std::min(factor, (s.total_steps - step) / (s.total_steps - decay_start));
    return s.base_lr * std::max(0.0, factor);
}

DeadFeatureTracker::DeadFeatureTracker(Eigen::Index dict_size, int dead_threshold)
    : steps_since_fire_(static_cast<std::size_t>(dict_size), 0), threshold_(dead_threshold) {
    require(dead_threshold >= 1, "dead_threshold must be >= 1");
}

void DeadFeatureTracker::update(const Matrix& Z) {
    require_dims(Z.cols() == static_cast<Eigen::Index>(steps_since_fire_.size()), "tracker width mismatch");
    for (Eigen::Index j = 0; j < Z.cols(); ++j) {
        auto& s = steps_since_fire_[static_cast<std::size_t>(j)];
        s = (Z.col(j).array() != 0.0).any() ? 0 : s + 1;
    }
}

std::vector<bool> DeadFeatureTracker::dead_mask() const {
    std::vector<bool> out(steps_since_fire_.size());
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = steps_since_fire_[j] >= threshold_;
    return out;
}

int DeadFeatureTracker::dead_count() const {
    return static_cast<int>(std::count_if(steps_since_fire_.begin(), steps_since_fire_.end(),
                                          [this](int s) { return s >= threshold_; }));
}

double sparsity_weight(Variant v, const LossWeights& w) {
    if (v == Variant::adaptive_k) return w.alpha;
    return is_topk_family(v) ? 0.0 : 1.0;
}

double sae_objective(const LossComponents& c, const LossWeights& w, double sw) {
    return c.recon + sw * c.sparsity + w.beta * c.aux;
}

double joint_objective(const LossComponents& c, const LossWeights& w, double sw) {
    return sae_objective(c, w, sw) + w.gamma * (c.probe + w.delta * c.deviation);
}

double recon_loss(const Matrix& X, const Matrix& X_hat) {
    require_dims(X.rows() == X_hat.rows() && X.cols() == X_hat.cols(), "recon_loss: shape mismatch");
    if (X.rows() == 0) return 0.0;
    return (X - X_hat).squaredNorm() / static_cast<double>(X.rows());
}

double p_anneal_exponent(int step, int total_steps, double p_end) {
    require(p_end > 0.0 && p_end <= 1.0, "p_end must be in (0, 1]");
    if (total_steps <= 0) return 1.0;
    const double t = std::clamp(static_cast<double>(step) / total_steps, 0.0, 1.0);
    return 1.0 - (1.0 - p_end) * t;
}

double sparsity_penalty(const Matrix& Z, const Matrix& X, Variant variant, double lambda_s, double p,
                        const Vector* decoder_norms) {
    require_dims(Z.rows() == X.rows(), "sparsity_penalty: row mismatch");
    if (Z.rows() == 0) return 0.0;
    const double n = static_cast<double>(Z.rows());
    switch (variant) {
    case Variant::adaptive_k: {
        double s = 0.0;
        for (Eigen::Index i = 0; i < Z.rows(); ++i) {
            const double xn = X.row(i).norm();
            if (xn > 0.0) s += Z.row(i).lpNorm<1>() / xn;
        }
        return s / n;
    }
    case Variant::relu:
    case Variant::gated:
        return lambda_s * Z.cwiseAbs().sum() / n;
    case Variant::relu_new: {
        if (!decoder_norms) throw InvalidArgument("relu_new penalty needs decoder norms");
        require_dims(decoder_norms->size() == Z.cols(), "decoder norm count mismatch");
        return lambda_s * (Z.cwiseAbs() * *decoder_norms).sum() / n;
    }
    case Variant::p_anneal: {
        if (!(p > 0.0)) throw InvalidArgument("P-anneal exponent must be positive");
        double s = 0.0;
        for (Eigen::Index i = 0; i < Z.rows(); ++i)
            for (Eigen::Index j = 0; j < Z.cols(); ++j)
                if (Z(i, j) != 0.0) s += std::pow(std::abs(Z(i, j)), p);
        return lambda_s * s / n;
    }
    default:
        return 0.0;
    }
}

double aux_loss(const Matrix& X, const Matrix& X_hat, const Matrix& pre, const std::vector<bool>& dead,
                const Matrix& W_dec, int k_aux) {
    require_dims(X.rows() == X_hat.rows() && X.cols() == X_hat.cols(), "aux_loss: shape mismatch");
    require_dims(pre.cols() == W_dec.cols() && (dead.empty() || dead.size() == static_cast<std::size_t>(pre.cols())),
                 "aux_loss: latent count mismatch");
    const int n_dead = count_dead(dead);
    if (n_dead == 0 || k_aux <= 0) return 0.0;
    const Matrix E = X - X_hat;
    const double denom = E.squaredNorm();
    if (denom <= 0.0) return 0.0;
    const Matrix mask = aux_selection(pre, dead, std::min(k_aux, n_dead));
    const Matrix Za = mask.cwiseProduct(pre.cwiseMax(0.0));
    const Matrix E_hat = Za * W_dec.transpose();
    return (E - E_hat).squaredNorm() / denom;
}

double probe_loss(const Vector& predicted, const Vector& labels) {
    require_dims(predicted.size() == labels.size(), "probe_loss: length mismatch");
    if (predicted.size() == 0) throw InvalidArgument("probe_loss needs labelled rows");
    return (predicted - labels).squaredNorm() / static_cast<double>(predicted.size());
}

double deviation_loss(const Vector& w, double b, const Vector& w0, double b0) {
    require_dims(w.size() == w0.size(), "deviation_loss: shape mismatch with snapshot");
    return (w - w0).norm() + std::abs(b - b0);
}

double update_delta(std::span<const double> recent, double delta) {
    if (recent.size() < 3) return delta;
    const double oldest = recent[recent.size() - 3];
    const double newest = recent.back();
    const double rate = (oldest - newest) / std::max(oldest, 1e-12);
    const double next = rate > 0.5 ? 0.8 * delta : 1.2 * delta;
    return std::clamp(next, LossWeights::delta_min, LossWeights::delta_max);
}

// ---------------------------------------------------------------------------

Gradients Gradients::zeros_like(const SaeParams& p, Eigen::Index probe_dim) {
    Gradients g;
    g.W_enc = Matrix::Zero(p.W_enc.rows(), p.W_enc.cols());
    g.W_dec = Matrix::Zero(p.W_dec.rows(), p.W_dec.cols());
    g.b_pre = Vector::Zero(p.b_pre.size());
    g.b_enc = Vector::Zero(p.b_enc.size());
    g.r = Vector::Zero(p.r.size());
    g.b_gate = Vector::Zero(p.b_gate.size());
    g.b_mag = Vector::Zero(p.b_mag.size());
    g.probe_w = Vector::Zero(probe_dim);
    return g;
}

ForwardResult forward_backward(const SaeParams& params, const Batch& batch, const StepContext& ctx,
                               FrozenSelection& frozen, Gradients* grads) {
    const auto& cfg = ctx.variant;
    const Variant v = cfg.variant;
    const Matrix& X = batch.x;
    const Eigen::Index N = X.rows(), M = params.M();
    require(N >= 1, "empty batch");
    require_dims(X.cols() == params.d(), "batch width must equal d");
    const double inv_n = 1.0 / static_cast<double>(N);
    const double sw = sparsity_weight(v, ctx.weights);
    const bool joint = ctx.probe_anchor != nullptr;
    if (v == Variant::adaptive_k && !ctx.probe) throw InvalidArgument("adaptive_k needs a probe");
    if (joint && !batch.has_labels) throw InvalidArgument("joint loss needs complexity labels");
    if (v == Variant::gated && !params.has_gate()) throw InvalidArgument("gated variant needs gate parameters");

    const bool with_bias = v != Variant::adaptive_k && v != Variant::gated;
    const Matrix Xc = X.rowwise() - params.b_pre.transpose();
    const Matrix P = Xc * params.W_enc.transpose();
    const Matrix pre = with_bias ? Matrix(P.rowwise() + params.b_enc.transpose()) : P;
    const Matrix relu_deriv = (pre.array() > 0.0).cast<double>();

    // Selections.
    if (!frozen.ready) {
        frozen.masks.clear();
        frozen.k.assign(static_cast<std::size_t>(N), 0);
        if (v == Variant::topk || v == Variant::adaptive_k) {
            if (v == Variant::adaptive_k) frozen.c = predict_rows(*ctx.probe, X);
            Matrix mask = Matrix::Zero(N, M);
            for (Eigen::Index i = 0; i < N; ++i) {
                const int k = v == Variant::topk ? *cfg.k
                                                 : std::min<int>(adaptive_k(frozen.c(i), *cfg.adaptive), static_cast<int>(M));
                frozen.k[static_cast<std::size_t>(i)] = k;
                for (auto j : topk_indices(pre.row(i).transpose(), k)) mask(i, j) = 1.0;
            }
            frozen.masks.push_back(std::move(mask));
        } else if (v == Variant::batch_topk) {
            frozen.masks.push_back((batch_topk_select(pre, *cfg.k).array() != 0.0).cast<double>());
            std::fill(frozen.k.begin(), frozen.k.end(), *cfg.k);
        } else if (v == Variant::matryoshka) {
            for (int m : cfg.prefixes) {
                const Matrix sel = batch_topk_select(pre.leftCols(m), std::min(*cfg.k, m));
                frozen.masks.push_back((sel.array() != 0.0).cast<double>());
            }
            std::fill(frozen.k.begin(), frozen.k.end(), *cfg.k);
        } else if (v == Variant::gated) {
            frozen.gate_mask = ((P.rowwise() + params.b_gate.transpose()).array() > 0.0).cast<double>();
            frozen.W_dec_frozen = params.W_dec;
            frozen.b_pre_frozen = params.b_pre;
        }
    }

    ForwardResult out;
    LossComponents& comp = out.components;
    Matrix dpre = Matrix::Zero(N, M);     // gradient wrt pre (or P for gated)
    Matrix dZ = Matrix::Zero(N, M);
    if (grads) *grads = Gradients::zeros_like(params, ctx.probe ? ctx.probe->d_model() : 0);

    // Codes and reconstruction.
    Matrix Z;
    Matrix G, Mg, exp_r;
    if (v == Variant::matryoshka) {
        const double scale = 1.0 / static_cast<double>(cfg.prefixes.size());
        for (std::size_t pi = 0; pi < cfg.prefixes.size(); ++pi) {
            const int m = cfg.prefixes[pi];
            const Matrix Zm = frozen.masks[pi].cwiseProduct(pre.leftCols(m).cwiseMax(0.0));
            const Matrix Xh = (Zm * params.W_dec.leftCols(m).transpose()).rowwise() + params.b_pre.transpose();
            const Matrix R = Xh - X;
            comp.recon += scale * R.squaredNorm() * inv_n;
            if (grads) {
                const Matrix dXh = (2.0 * scale * inv_n) * R;
                grads->W_dec.leftCols(m) += dXh.transpose() * Zm;
                grads->b_pre += dXh.colwise().sum().transpose();
                dpre.leftCols(m) += (dXh * params.W_dec.leftCols(m))
                                        .cwiseProduct(frozen.masks[pi])
                                        .cwiseProduct(relu_deriv.leftCols(m));
            }
            if (pi + 1 == cfg.prefixes.size()) {
                Z = Matrix::Zero(N, M);
                Z.leftCols(m) = Zm;
                out.X_hat = Xh;
            }
        }
    } else {
        if (v == Variant::gated) {
            G = P.rowwise() + params.b_gate.transpose();
            exp_r = params.r.array().exp().matrix().transpose();  // 1 x M
            Mg = (P.array().rowwise() * exp_r.row(0).array()).matrix();
            Mg.rowwise() += params.b_mag.transpose();
            Z = frozen.gate_mask.cwiseProduct(Mg.cwiseMax(0.0));
        } else if (is_topk_family(v)) {
            Z = frozen.masks[0].cwiseProduct(pre.cwiseMax(0.0));
        } else {
            Z = pre.cwiseMax(0.0);
        }
        out.X_hat = (Z * params.W_dec.transpose()).rowwise() + params.b_pre.transpose();
        const Matrix R = out.X_hat - X;
        comp.recon = R.squaredNorm() * inv_n;
        if (grads) {
            const Matrix dXh = (2.0 * inv_n) * R;
            grads->W_dec += dXh.transpose() * Z;
            grads->b_pre += dXh.colwise().sum().transpose();
            dZ += dXh * params.W_dec;
        }
    }

    // Sparsity.
    switch (v) {
    case Variant::relu:
        comp.sparsity = *cfg.lambda_s * Z.sum() * inv_n;
        if (grads) dZ.array() += sw * *cfg.lambda_s * inv_n;
        break;
    case Variant::relu_new: {
        const Vector norms = params.W_dec.colwise().norm().transpose();
        comp.sparsity = *cfg.lambda_s * (Z * norms).sum() * inv_n;
        if (grads) {
            dZ.rowwise() += (sw * *cfg.lambda_s * inv_n) * norms.transpose();
            const Vector col_sums = Z.colwise().sum().transpose();
            for (Eigen::Index j = 0; j < M; ++j)
                if (norms(j) > 0.0)
                    grads->W_dec.col(j) += (sw * *cfg.lambda_s * inv_n * col_sums(j) / norms(j)) * params.W_dec.col(j);
        }
        break;
    }
    case Variant::p_anneal: {
        double s = 0.0;
        for (Eigen::Index i = 0; i < N; ++i)
            for (Eigen::Index j = 0; j < M; ++j)
                if (Z(i, j) > 0.0) {
                    s += std::pow(Z(i, j), ctx.p);
                    if (grads) dZ(i, j) += sw * *cfg.lambda_s * inv_n * ctx.p * std::pow(Z(i, j), ctx.p - 1.0);
                }
        comp.sparsity = *cfg.lambda_s * s * inv_n;
        break;
    }
    case Variant::adaptive_k: {
        double s = 0.0;
        for (Eigen::Index i = 0; i < N; ++i) {
            const double xn = X.row(i).norm();
            if (xn <= 0.0) continue;
            s += Z.row(i).sum() / xn;
            if (grads) dZ.row(i).array() += sw * inv_n / xn;
        }
        comp.sparsity = s * inv_n;
        break;
    }
    case Variant::gated: {
        // L1 on the gate plus a reconstruction through the gate alone against a
        // frozen decoder; both only train the gate path.
        const Matrix Gr = G.cwiseMax(0.0);
        const Matrix gate_deriv = (G.array() > 0.0).cast<double>();
        const Matrix Xg = (Gr * frozen.W_dec_frozen.transpose()).rowwise() + frozen.b_pre_frozen.transpose();
        const Matrix Rg = Xg - X;
        comp.sparsity = *cfg.lambda_s * (Gr.sum() + Rg.squaredNorm()) * inv_n;
        if (grads) {
            const Matrix dG = (sw * *cfg.lambda_s * inv_n) *
                              (Matrix::Ones(N, M) + 2.0 * Rg * frozen.W_dec_frozen).cwiseProduct(gate_deriv);
            grads->b_gate += dG.colwise().sum().transpose();
            dpre += dG;
        }
        break;
    }
    default:
        break;
    }

    // Dead-latent auxiliary loss (top-k family).
    const int n_dead = count_dead(ctx.dead);
    if (is_topk_family(v) && n_dead > 0) {
        if (frozen.aux_mask.size() == 0 && !frozen.ready) {
            double mean_k = 0.0;
            for (int k : frozen.k) mean_k += k;
            mean_k /= static_cast<double>(N);
            const int k_aux = std::min<int>(static_cast<int>(std::lround(2.0 * mean_k)), n_dead);
            frozen.aux_mask = aux_selection(pre, ctx.dead, k_aux);
            frozen.aux_target = X - out.X_hat;
        }
        const double denom = frozen.aux_target.squaredNorm();
        if (frozen.aux_mask.size() > 0 && denom > 0.0) {
            const Matrix Za = frozen.aux_mask.cwiseProduct(pre.cwiseMax(0.0));
            const Matrix Eh = Za * params.W_dec.transpose();
            const Matrix Ra = Eh - frozen.aux_target;
            comp.aux = Ra.squaredNorm() / denom;
            if (grads) {
                const Matrix dEh = (ctx.weights.beta * 2.0 / denom) * Ra;
                grads->W_dec += dEh.transpose() * Za;
                dpre += (dEh * params.W_dec).cwiseProduct(frozen.aux_mask).cwiseProduct(relu_deriv);
            }
        }
    }
    frozen.ready = true;

    // Back through the encoder.
    if (grads) {
        Matrix dP;
        if (v == Variant::gated) {
            const Matrix dMg = dZ.cwiseProduct(frozen.gate_mask).cwiseProduct((Mg.array() > 0.0).cast<double>().matrix());
            const Matrix dMg_scaled = (dMg.array().rowwise() * exp_r.row(0).array()).matrix();
            grads->r += (dMg.cwiseProduct(P).colwise().sum().array() * exp_r.row(0).array()).matrix().transpose();
            grads->b_mag += dMg.colwise().sum().transpose();
            dP = dpre + dMg_scaled;
        } else {
            if (v != Variant::matryoshka) {
                const Matrix sel = is_topk_family(v) ? frozen.masks[0].cwiseProduct(relu_deriv) : relu_deriv;
                dpre += dZ.cwiseProduct(sel);
            }
            dP = dpre;
            if (with_bias) grads->b_enc += dP.colwise().sum().transpose();
        }
        grads->W_enc += dP.transpose() * Xc;
        grads->b_pre -= params.W_enc.transpose() * dP.colwise().sum().transpose();
    }

    // Probe terms of the joint loss.
    if (joint) {
        const ProbeModel& probe = *ctx.probe;
        const ProbeModel& anchor = *ctx.probe_anchor;
        const Vector pred = predict_rows(probe, X);
        const Vector resid = pred - batch.c;
        comp.probe = resid.squaredNorm() * inv_n;
        const Vector dw = probe.w - anchor.w;
        const double db = probe.b - anchor.b;
        comp.deviation = dw.norm() + std::abs(db);
        if (grads) {
            const double g = ctx.weights.gamma;
            grads->probe_w = (g * 2.0 * inv_n) * (X.transpose() * resid);
            grads->probe_b = g * 2.0 * inv_n * resid.sum();
            const double dn = dw.norm();
            if (dn > 0.0) grads->probe_w += (g * ctx.weights.delta / dn) * dw;
            if (db != 0.0) grads->probe_b += g * ctx.weights.delta * (db > 0.0 ? 1.0 : -1.0);
        }
    }

    out.total = joint ? joint_objective(comp, ctx.weights, sw) : sae_objective(comp, ctx.weights, sw);
    out.mean_l0 = (Z.array() != 0.0).cast<double>().sum() * inv_n;
    out.Z = std::move(Z);
    return out;
}

ForwardResult sae_loss(const Batch& batch, const SaeParams& params, const VariantConfig& variant,
                       const LossWeights& weights, const DeadFeatureTracker& tracker, const ProbeModel* probe, double p) {
    StepContext ctx{variant, weights, probe, nullptr, tracker.dead_mask(), p};
    FrozenSelection frozen;
    return forward_backward(params, batch, ctx, frozen, nullptr);
}

ForwardResult joint_loss(const Batch& batch, const SaeParams& params, const ProbeModel& probe,
                         const ProbeModel& anchor, const VariantConfig& variant, const LossWeights& weights,
                         const DeadFeatureTracker& tracker) {
    StepContext ctx{variant, weights, &probe, &anchor, tracker.dead_mask(), 1.0};
    FrozenSelection frozen;
    return forward_backward(params, batch, ctx, frozen, nullptr);
}

} // namespace adaptivek
