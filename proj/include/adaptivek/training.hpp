#pragma once

// Losses with hand-written gradients, Adam, the learning-rate schedule and the
// three-phase trainer: closed-form probe fit, SAE training against a frozen
// probe, then joint fine-tuning with a deviation penalty anchoring the probe.

#include "adaptivek/activation_store.hpp"
#include "adaptivek/common.hpp"
#include "adaptivek/complexity_probe.hpp"
#include "adaptivek/sae_models.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace adaptivek {

struct LossWeights {
    static constexpr double delta_min = 0.01;
    static constexpr double delta_max = 0.5;

    double alpha = 0.005;       // normalized L1 (AdaptiveK)
    double beta = 1.0 / 32.0;   // dead-latent auxiliary loss
    double gamma = 0.9;         // probe terms in the joint loss
    double delta = 0.2;         // deviation penalty, adapted during the joint phase

    void validate() const;
};

struct TrainSchedule {
    int total_steps = 0;
    double phase_ratio = 0.9;
    int warmup_steps = 15;
    double decay_start_fraction = 0.7;
    double base_lr = 1e-3;
    int batch_size = 2048;

    void validate() const;
    /// First step of the joint phase; equals total_steps when phase_ratio == 1.
    int joint_start() const;
};

/// Linear warm-up from base_lr / warmup_steps, flat, then linear decay to 0 at
/// total_steps starting at decay_start_fraction * total_steps.
double lr_at(int step, const TrainSchedule& schedule);

class DeadFeatureTracker {
public:
    DeadFeatureTracker(Eigen::Index dict_size, int dead_threshold = 64);

    /// Advances every counter by one step and resets latents that fired in Z.
    void update(const Matrix& Z);

    bool is_dead(Eigen::Index j) const { return steps_since_fire_[static_cast<std::size_t>(j)] >= threshold_; }
    std::vector<bool> dead_mask() const;
    int dead_count() const;
    int threshold() const { return threshold_; }
    const std::vector<int>& steps_since_fire() const { return steps_since_fire_; }

    /// Test hook.
    void set_steps_since_fire(Eigen::Index j, int steps) { steps_since_fire_[static_cast<std::size_t>(j)] = steps; }

private:
    std::vector<int> steps_since_fire_;
    int threshold_;
};

struct LossComponents {
    double recon = 0.0;
    double sparsity = 0.0;
    double aux = 0.0;
    double probe = 0.0;
    double deviation = 0.0;
};

/// Weight applied to the sparsity component: alpha for AdaptiveK, 1 for the
/// penalty variants (whose penalty already carries lambda_s), 0 otherwise.
double sparsity_weight(Variant v, const LossWeights& w);

/// L_recon + sw L_sparsity + beta L_aux.
double sae_objective(const LossComponents& c, const LossWeights& w, double sw);
/// L_SAE + gamma (L_probe + delta L_deviation).
double joint_objective(const LossComponents& c, const LossWeights& w, double sw);

/// Mean over rows of the squared L2 residual.
double recon_loss(const Matrix& X, const Matrix& X_hat);

/// Exponent of the P-anneal penalty at a step: 1 - (1 - p_end) t / T.
double p_anneal_exponent(int step, int total_steps, double p_end);

/// Per-variant sparsity penalty, averaged over rows. For gated pass the
/// ReLU'd gate pre-activations as Z. relu_new needs decoder column norms.
double sparsity_penalty(const Matrix& Z, const Matrix& X, Variant variant, double lambda_s, double p = 1.0,
                        const Vector* decoder_norms = nullptr);

/// Normalized auxiliary reconstruction of the residual X - X_hat from the top
/// k_aux dead latents of each row. Zero when nothing is dead.
double aux_loss(const Matrix& X, const Matrix& X_hat, const Matrix& pre, const std::vector<bool>& dead,
                const Matrix& W_dec, int k_aux);

double probe_loss(const Vector& predicted, const Vector& labels);
double deviation_loss(const Vector& w, double b, const Vector& w0, double b0);

/// Adapts the deviation weight from the last three probe losses (oldest first).
/// Fewer than three entries leaves delta unchanged.
double update_delta(std::span<const double> recent_probe_losses, double delta);

// ---------------------------------------------------------------------------
// Fused forward/backward

struct StepContext {
    VariantConfig variant;
    LossWeights weights;
    const ProbeModel* probe = nullptr;         // adaptive k selection; trainable when anchor is set
    const ProbeModel* probe_anchor = nullptr;  // (w0, b0); non-null enables the joint loss
    std::vector<bool> dead;                    // empty = nothing dead
    double p = 1.0;                            // current P-anneal exponent
};

/// Quantities the gradient treats as constants: top-k masks, per-row k, the
/// gate indicator, the auxiliary residual target and the decoder copy used by
/// the gated auxiliary term. Filled on the first evaluation, reused afterwards.
struct FrozenSelection {
    bool ready = false;
    std::vector<Matrix> masks;   // one per matryoshka prefix, else one
    std::vector<int> k;          // allocated k per row
    Vector c;                    // predicted complexity per row
    Matrix gate_mask;
    Matrix aux_mask;             // empty when the auxiliary term is off
    Matrix aux_target;
    Matrix W_dec_frozen;
    Vector b_pre_frozen;
};

struct Gradients {
    Matrix W_enc, W_dec;
    Vector b_pre, b_enc, r, b_gate, b_mag;
    Vector probe_w;
    double probe_b = 0.0;

    static Gradients zeros_like(const SaeParams& p, Eigen::Index probe_dim);
};

struct ForwardResult {
    LossComponents components;
    double total = 0.0;
    double mean_l0 = 0.0;
    Matrix Z;      // final codes
    Matrix X_hat;  // final reconstruction
};

ForwardResult forward_backward(const SaeParams& params, const Batch& batch, const StepContext& ctx,
                               FrozenSelection& frozen, Gradients* grads);

/// L_SAE for a batch with the tracker's dead set.
ForwardResult sae_loss(const Batch& batch, const SaeParams& params, const VariantConfig& variant,
                       const LossWeights& weights, const DeadFeatureTracker& tracker,
                       const ProbeModel* probe = nullptr, double p = 1.0);

/// L_joint for an AdaptiveK model.
ForwardResult joint_loss(const Batch& batch, const SaeParams& params, const ProbeModel& probe,
                         const ProbeModel& anchor, const VariantConfig& variant, const LossWeights& weights,
                         const DeadFeatureTracker& tracker);

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TensorRef {
    std::span<double> value;
    std::span<const double> grad;
};

struct OptimizerState {
    std::vector<std::vector<double>> m, v;
    long step = 0;
};

/// One bias-corrected Adam update over all tensors. Throws NumericError and
/// leaves everything untouched if any gradient is non-finite.
void adam_step(std::span<const TensorRef> tensors, OptimizerState& state, double lr, const AdamConfig& cfg = {});

/// Tensor views of the trainable SAE parameters paired with their gradients.
std::vector<TensorRef> sae_tensors(SaeParams& params, const Gradients& grads);

// ---------------------------------------------------------------------------
// Trainer

struct TrainConfig {
    VariantConfig variant = VariantConfig::make_topk(80);
    Eigen::Index dict_size = 16384;
    TrainSchedule schedule;
    LossWeights weights;
    AdamConfig adam;
    int dead_threshold = 64;
    std::uint64_t seed = 0;
    std::uint64_t buffer_capacity = 0;  // 0 = whole dataset
    std::vector<double> lambda_grid = default_lambda_grid;
    int folds = 5;
    std::optional<double> probe_lambda;  // skips cross-validation when set

    void validate() const;
};

struct TrainLogEntry {
    int step = 0;
    int phase = 2;
    double lr = 0.0;
    LossComponents components;
    double total = 0.0;
    double delta = 0.0;
    double mean_l0 = 0.0;
    int dead_count = 0;
};

nlohmann::json log_entry_json(const TrainLogEntry& e);

struct TrainResult {
    SaeCheckpoint sae;
    std::optional<ProbeModel> probe;           // final (after the joint phase)
    std::optional<ProbeModel> probe_snapshot;  // at the start of the joint phase
    std::optional<ProbeModel> probe_pretrained;
    std::optional<CvTable> cv;
    std::vector<TrainLogEntry> log;
    int phase2_steps = 0;
    int phase3_steps = 0;
};

struct TrainInputs {
    std::shared_ptr<RecordSource> data;
    const Dataset* probe_data = nullptr;            // labelled rows for the probe fit
    std::optional<ProbeModel> pretrained_probe;     // skips the fit when set
    std::function<void(const TrainLogEntry&)> on_step;
    std::optional<std::filesystem::path> divergence_dump;  // checkpoint written before aborting
};

TrainResult train(const TrainInputs& inputs, const TrainConfig& cfg);

} // namespace adaptivek
