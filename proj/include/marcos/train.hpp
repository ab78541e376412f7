#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "marcos/corpus.hpp"
#include "marcos/model.hpp"

namespace marcos {

// Per-step record of the teacher-forced chain.
struct StepTrace {
    NeuronState state_after;
    GaussianParams prior;      // populated when the KL term is active
    GaussianParams posterior;  // populated when randomness is active
    RandomDraw draw;
    Real log_lik = 0;  // joint token log-likelihood of y_k (<= 0)
    Real kl = 0;
    Real sparse = 0;
    int correct_tokens = 0;
    int total_tokens = 0;
};

// Loss terms per step. `re` stores log-likelihoods, so the minimized total is
// sum_k(-re[k] + kl[k] + lambda*sparse[k]) with inactive terms held at zero.
struct LossBreakdown {
    std::vector<Real> re, kl, sparse;
    Real lambda = 0;
    Real total = 0;

    // Canonical fold; matches the graph evaluation bit for bit.
    Real recomputed_total() const {
        Real acc = 0;
        for (std::size_t k = 0; k < re.size(); ++k) acc += (-re[k] + kl[k]) + lambda * sparse[k];
        return acc;
    }
};

struct LossOptions {
    Real lambda = 1e-3;
    bool include_re = true;
    bool include_kl = true;
    bool include_sparse = true;
    bool deterministic_noise = false;  // reparameterize with eps = 0
    std::uint64_t noise_seed = 0;
    bool keep_traces = false;
};

struct StepLossGraph {
    ad::Var<Real> total;  // invalid when no term is active
    LossBreakdown breakdown;
    std::vector<StepTrace> traces;
};

// Teacher-forced chain over an example segmented to exactly K steps: posterior
// draw, think, speaker likelihood, with the KL and sparsity terms gated by the
// options. Builds onto the supplied graph context.
StepLossGraph build_step_losses(const Model& model, GraphCtx<Real>& g, const TrainingExample& ex,
                                const LossOptions& opts);

// Evaluation-only wrapper (no recording).
std::pair<LossBreakdown, std::vector<StepTrace>> step_losses(const Model& model,
                                                             const TrainingExample& ex,
                                                             std::uint64_t seed,
                                                             LossOptions opts = {});

// Closed-form diagonal-Gaussian KL, summed over entries.
Real kl_gaussian(const GaussianParams& p, const GaussianParams& q);

// Re-segments and re-tokenizes an example to exactly K steps.
TrainingExample segment_example(const TrainingExample& ex, int k, const Vocabulary& vocab);
std::vector<TrainingExample> segment_corpus(const std::vector<TrainingExample>& corpus, int k,
                                            const Vocabulary& vocab);

// Decoupled-weight-decay Adam stepping exactly the masked parameters.
class AdamW {
public:
    AdamW(Real beta1 = 0.9, Real beta2 = 0.999, Real eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}

    // `grads` is indexed by param id; empty matrices are treated as zero.
    void step(ParamStore<Real>& params, const std::vector<char>& mask,
              const std::vector<Mat<Real>>& grads, Real lr, Real weight_decay, Real clip_norm);

    int iterations() const { return t_; }
    void set_iterations(int t) { t_ = t; }

private:
    Real b1_, b2_, eps_;
    int t_ = 0;
};

struct CurveRow {
    int phase = 0;
    int epoch = 0;
    int step = 0;  // optimizer iterations completed
    Real re = 0, kl = 0, sparse = 0, total = 0;
};

struct PhaseResult {
    std::vector<CurveRow> curve;
    Real mean_abs_r = 0;         // over the final epoch
    Real token_accuracy = 0;     // teacher-forced, final epoch
    Real final_mean_kl = 0;      // per-example mean, final epoch
    Real first_mean_kl = 0;      // per-example mean, first epoch
    int iterations = 0;
    double seconds = 0;
};

struct TrainHooks {
    // Called after each epoch; returning false stops training early.
    std::function<bool(const CurveRow&)> on_epoch;
    std::string diagnostic_path;  // non-finite-loss snapshot destination
};

// One example's contribution to a training objective: graph root plus the
// reported terms. Used to run the shared loop with a custom loss.
using ExampleLoss = std::function<StepLossGraph(GraphCtx<Real>&, std::size_t index,
                                                const TrainingExample&, std::uint64_t noise_seed)>;

PhaseResult run_training_loop(Model& model, const std::vector<TrainingExample>& corpus,
                              const TrainConfig& cfg, const TrainHooks& hooks, int phase,
                              const std::vector<char>& mask, const ExampleLoss& example_loss);

// Phase 1: reconstruction + sparsity through the posterior encoder along the
// teacher-forced chain. The prior predictor never enters the graph.
PhaseResult train_phase1(Model& model, const std::vector<TrainingExample>& segmented,
                         const TrainConfig& cfg, const TrainHooks& hooks = {});

// Phase 2: KL between prior and the frozen posteriors; only the prior trains.
PhaseResult train_phase2(Model& model, const std::vector<TrainingExample>& segmented,
                         const TrainConfig& cfg, const TrainHooks& hooks = {});

// Supervised pass teaching the non-autoregressive speaker to emit every step
// in one 128-position pass, from prior-mean chain banks with all else frozen.
PhaseResult train_nar(Model& model, const std::vector<TrainingExample>& segmented,
                      const TrainConfig& cfg, const TrainHooks& hooks = {});

// Trainability masks by sub-network prefix.
std::vector<char> phase1_mask(const Model& model);
std::vector<char> phase2_mask(const Model& model);
std::vector<char> nar_mask(const Model& model);
std::vector<char> full_mask(const Model& model);

struct GradCoord {
    int param_id = 0;
    Eigen::Index row = 0, col = 0;
};

struct GradCheckReport {
    Real max_rel_error = 0;
    int coords = 0;
    std::string worst_param;
};

// Central-difference check of `loss_fn` against analytic gradients already
// accumulated in params[i].grad. `loss_fn` must re-evaluate the loss at the
// current parameter values.
GradCheckReport gradient_check(const std::function<Real()>& loss_fn, ParamStore<Real>& params,
                               const std::vector<GradCoord>& coords, Real eps);

// Full-loss gradient check on one example: analytic backward through every
// sub-network, then >= `min_coords` coordinates spanning all of them.
GradCheckReport gradient_check_model(Model& model, const TrainingExample& segmented,
                                     const LossOptions& opts, Real eps, int min_coords,
                                     std::uint64_t coord_seed);

}  // namespace marcos
