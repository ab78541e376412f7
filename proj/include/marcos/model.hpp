#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "marcos/config.hpp"
#include "marcos/nn.hpp"
#include "marcos/vocab.hpp"

namespace marcos {

using ad::Var;
using MatR = Mat<Real>;

// The pair of continuous-thought banks at step k.
struct NeuronState {
    MatR deep;     // T x d
    MatR shallow;  // S x d
    int k = 0;
};

struct GaussianParams {
    MatR mean;    // tau x d
    MatR stddev;  // tau x d, clamped to [e^-5, e^2]
    enum class Source { prior, posterior } source = Source::prior;
};

struct RandomDraw {
    MatR value;  // mean + stddev .* noise
    MatR noise;  // standard normal, or zero in deterministic mode
    bool deterministic = false;
};

struct SpeakResult {
    std::vector<int> tokens;  // without BOS; EOS/PAD stripped
    std::string text;
    bool truncated = false;
    int decoder_passes = 0;
};

// Graph-level counterparts used while building training graphs.
struct VarState {
    Var<Real> deep;
    Var<Real> shallow;
    int k = 0;
};

struct VarGaussian {
    Var<Real> mean;
    Var<Real> stddev;
};

// Separation-of-stages instrumentation.
struct PassCounters {
    std::atomic<std::uint64_t> thinker{0};
    std::atomic<std::uint64_t> speaker_ar{0};   // one per decoder forward (per generated token)
    std::atomic<std::uint64_t> speaker_nar{0};  // one per 128-position pass
    std::atomic<std::uint64_t> prior{0};
    std::atomic<std::uint64_t> posterior{0};

    void reset() {
        thinker = speaker_ar = speaker_nar = prior = posterior = 0;
    }
};

struct CheckpointMeta {
    bool phase1_done = false;
    bool phase2_done = false;
    bool nar_done = false;
    // Training progress, for resumable runs.
    int phase_in_progress = 0;  // 0 = none
    int epochs_done = 0;
    int opt_iterations = 0;
};

constexpr int kNarLength = 128;  // positions emitted by one non-autoregressive pass

// The full network: understander, thinker over the two neuron banks with
// injected step randomness, speaker (AR and NAR), posterior encoder f and
// prior predictor g. A constructed model is immutable during inference;
// training mutates parameters and needs exclusive access.
class Model {
public:
    explicit Model(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    ParamStore<Real>& params() { return params_; }
    const ParamStore<Real>& params() const { return params_; }
    PassCounters& counters() const { return counters_; }
    CheckpointMeta& meta() { return meta_; }
    const CheckpointMeta& meta() const { return meta_; }

    // --- graph-level forward passes (shared by training and inference) ---
    Var<Real> fw_understand(GraphCtx<Real>& g, const std::vector<int>& question_tokens,
                            Eigen::Index pad_to = -1) const;
    VarState fw_init_neurons(GraphCtx<Real>& g) const;
    VarGaussian fw_prior(GraphCtx<Real>& g, const VarState& state, Var<Real> h) const;
    VarGaussian fw_posterior(GraphCtx<Real>& g, const std::vector<int>& step_tokens) const;
    VarState fw_think(GraphCtx<Real>& g, const VarState& state, Var<Real> h,
                      std::optional<Var<Real>> r) const;
    // Teacher-forced speaker logits over [BOS, y...]; one row per input position.
    Var<Real> fw_speak_logits(GraphCtx<Real>& g, const std::vector<int>& step_tokens,
                              Var<Real> shallow) const;
    Var<Real> fw_nar_logits(GraphCtx<Real>& g, Var<Real> shallow) const;

    // --- contract-level operations (plain matrices, no recording) ---
    MatR understand(const std::vector<int>& question_tokens) const;
    NeuronState init_neurons() const;
    GaussianParams predict_prior(const NeuronState& state, const MatR& h) const;
    GaussianParams encode_posterior(const std::vector<int>& step_tokens) const;
    static RandomDraw sample_randomness(const GaussianParams& params, std::uint64_t seed,
                                        bool deterministic);
    NeuronState think(const NeuronState& state, const MatR& h, const RandomDraw& r) const;
    SpeakResult speak_ar(const MatR& shallow, int max_tokens, bool greedy = true,
                         std::uint64_t sample_seed = 0) const;
    SpeakResult speak_nar(const MatR& shallow) const;

    const Vocabulary& vocab() const { return vocab_; }

    // Checkpoint container I/O. Loading rebuilds the exact config and fails
    // hard on any mismatch in the tensor directory.
    void save(const std::string& path, bool with_optimizer_state = false) const;
    static std::unique_ptr<Model> load(const std::string& path, bool with_optimizer_state = false);

    // Prefix-based parameter groups, the unit of phase freezing.
    static const std::vector<std::string>& submodule_prefixes();
    bool param_in(const Param<Real>& p, const std::string& prefix) const;

private:
    ModelConfig cfg_;
    Vocabulary vocab_;
    ParamStore<Real> params_;
    CheckpointMeta meta_;
    mutable PassCounters counters_;

    nn::SequenceTransformer<Real> understander_;
    nn::SequenceTransformer<Real> posterior_trunk_;
    nn::Linear<Real> f1_, f2_;
    std::vector<nn::Block<Real>> thinker_blocks_;
    nn::LayerNorm<Real> thinker_ln_f_;
    Param<Real>* seg_deep_ = nullptr;
    Param<Real>* seg_shallow_ = nullptr;
    Param<Real>* seg_r_ = nullptr;
    Param<Real>* neurons0_deep_ = nullptr;
    Param<Real>* neurons0_shallow_ = nullptr;
    nn::SequenceTransformer<Real> speaker_;
    nn::Linear<Real> speaker_head_;
    Param<Real>* nar_queries_ = nullptr;
    std::vector<nn::Block<Real>> nar_blocks_;
    nn::LayerNorm<Real> nar_ln_f_;
    nn::Linear<Real> nar_head_;
    nn::Linear<Real> g1_, g2_;

    VarGaussian split_gaussian(GraphCtx<Real>& g, Var<Real> packed) const;
};

}  // namespace marcos
