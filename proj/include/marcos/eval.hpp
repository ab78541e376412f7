#pragma once

#include <functional>
#include <memory>

#include "marcos/infer.hpp"
#include "marcos/train.hpp"

namespace marcos {

struct ItemRecord {
    std::string question;
    std::vector<std::string> spoken;
    std::optional<long long> answer;
    long long ground_truth = 0;
    bool correct = false;
    bool no_answer = false;
    int thinking_passes = 0;
    int speaker_passes = 0;
    StageTimings timings;
    std::string error;
};

struct EvalReport {
    std::string variant = "full";
    Real accuracy = 0;
    double test_seconds = 0;
    double train_seconds = 0;  // one epoch per phase, summed, when known
    int n = 0;
    int no_answer = 0;
    Real mean_thinking_passes = 0;
    Real mean_speaker_passes = 0;
};

// Pure fold from per-item records to the report figures (minus timings).
EvalReport fold_records(const std::vector<ItemRecord>& records);

// A solver maps one batch of examples to records; the harness owns batching
// and timing so every system is measured identically.
using BatchSolverFn =
    std::function<std::vector<ItemRecord>(const std::vector<const TrainingExample*>&)>;

struct HarnessResult {
    EvalReport report;
    std::vector<ItemRecord> records;
};

HarnessResult evaluate_with(const BatchSolverFn& solver, const std::vector<TrainingExample>& corpus,
                            int batch_size);

struct EvalOptions {
    SampleMode mode = SampleMode::mean;
    DecodeMode decode = DecodeMode::ar;
    SpeakPolicy speak = SpeakPolicy::final_only;
    int batch = 64;
    int threads = 0;
    std::uint64_t seed = 0;
    int max_tokens = kNarLength;
};

HarnessResult evaluate(const Model& model, const std::vector<TrainingExample>& corpus,
                       const EvalOptions& opts);

Real corpus_mean_solution_tokens(const std::vector<TrainingExample>& corpus, const Vocabulary& vocab);

// --- token-level chain-of-thought baseline -----------------------------------

// A single causal decoder of the same width and depth as one sub-network,
// trained next-token on question ; solution. Its sequential pass count at
// decode time equals the number of emitted tokens.
struct BaselineConfig {
    int d = 128;
    int layers = 2;
    int heads = 4;
    int vocab = 0;
    int max_seq = 320;
    int mlp_ratio = 4;
    std::uint64_t init_seed = 1;
};

class CotBaseline {
public:
    explicit CotBaseline(const BaselineConfig& cfg);

    const BaselineConfig& config() const { return cfg_; }
    ParamStore<Real>& params() { return params_; }
    const Vocabulary& vocab() const { return vocab_; }

    PhaseResult train(const std::vector<TrainingExample>& corpus, const TrainConfig& cfg,
                      const TrainHooks& hooks = {});

    struct Decode {
        std::vector<int> tokens;  // without the terminating EOS
        std::string text;
        int passes = 0;          // decoder forwards
        int emitted_tokens = 0;  // tokens produced, EOS included
        bool truncated = false;
    };
    Decode decode(const std::vector<int>& question_tokens, int max_tokens) const;

    void save(const std::string& path) const;
    static std::unique_ptr<CotBaseline> load(const std::string& path);

    static std::string solution_text(const TrainingExample& ex);

private:
    BaselineConfig cfg_;
    Vocabulary vocab_;
    ParamStore<Real> params_;
    nn::SequenceTransformer<Real> decoder_;
    nn::Linear<Real> head_;
    bool trained_ = false;

    ad::Var<Real> loss_graph(GraphCtx<Real>& g, const TrainingExample& ex, Real* nll_out,
                             int* correct, int* total) const;
};

HarnessResult evaluate_baseline(const CotBaseline& baseline,
                                const std::vector<TrainingExample>& corpus, int batch,
                                int threads, int max_tokens);

// --- ablations ----------------------------------------------------------------

enum class AblationVariant { full, no_deep, no_R, no_sparsity };

AblationVariant parse_variant(const std::string& s);
const char* variant_name(AblationVariant v);
ModelConfig apply_ablation(ModelConfig cfg, AblationVariant v);
TrainConfig apply_ablation(TrainConfig cfg, AblationVariant v);

struct AblationOutcome {
    std::string variant;
    EvalReport report;
    Real mean_abs_r = 0;        // final-epoch mean |R|
    double train_seconds = 0;   // both phases
    double phase1_epoch_seconds = 0;
    double phase2_epoch_seconds = 0;
    std::unique_ptr<Model> model;
};

AblationOutcome run_ablation(AblationVariant v, const std::vector<TrainingExample>& train_corpus,
                             const std::vector<TrainingExample>& test_corpus,
                             const ModelConfig& mc, const TrainConfig& tc, const EvalOptions& eo);

// Collapse heuristic relative to the full model at the matched epoch:
// accuracy under a quarter of full AND drawn magnitudes over five times full.
struct CollapseFlag {
    bool collapsed = false;
    Real accuracy_ratio = 0;
    Real abs_r_ratio = 0;
};

CollapseFlag collapse_flag(const AblationOutcome& full, const AblationOutcome& variant);

}  // namespace marcos
