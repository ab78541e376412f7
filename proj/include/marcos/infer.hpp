#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "marcos/model.hpp"

namespace marcos {

enum class SampleMode { mean, sample };
enum class SpeakPolicy { final_only, all, none };
enum class DecodeMode { ar, nar };

SampleMode parse_sample_mode(const std::string& s);
SpeakPolicy parse_speak_policy(const std::string& s);
DecodeMode parse_decode_mode(const std::string& s);

// Fixed-value overwrite of chosen flat R dimensions (row-major r*d + c),
// applied to the drawn randomness at every thinking step.
struct InterventionSpec {
    std::vector<int> dims;
    Real value = 0;
};

struct InferTrace {
    NeuronState state;
    GaussianParams prior;
    RandomDraw draw;
};

struct StageTimings {
    double understand_s = 0;
    double think_s = 0;
    double speak_s = 0;
};

struct Solution {
    std::vector<InferTrace> traces;
    std::vector<std::string> spoken;  // trailing no-op emissions stripped
    std::optional<long long> answer;
    StageTimings timings;
    int thinking_passes = 0;
    int speaker_passes = 0;  // decoder forwards (token-level for AR, 1 per NAR pass)
    bool truncated = false;
    std::string error;  // set on per-item failure inside a batch
};

struct SolveOptions {
    SampleMode mode = SampleMode::mean;
    std::uint64_t seed = 0;
    SpeakPolicy speak = SpeakPolicy::final_only;
    DecodeMode decode = DecodeMode::ar;
    int max_tokens = kNarLength;
    std::optional<InterventionSpec> intervention;
};

// Parses the integer after the last "####" marker.
long long extract_answer(const std::string& final_text);

Solution solve(const Model& model, const std::string& question, const SolveOptions& opts);
Solution solve_tokens(const Model& model, const std::vector<int>& question_tokens,
                      const SolveOptions& opts);

struct BatchResult {
    std::vector<Solution> solutions;
    double wall_seconds = 0;
    double think_seconds = 0;  // duration of the chained thinking stage
    double speak_seconds = 0;  // duration of the parallel speaking stage
};

struct BatchOptions {
    SolveOptions solve;
    int threads = 0;
    // Speaking tasks normally fan out over (item, step) pairs; turning this
    // off serializes the steps of each item for the self-relative timing
    // comparison.
    bool parallel_speak = true;
};

// Per-item seeds derive from (seed, item index), so results never depend on
// batch composition or order. Item errors propagate per item, not batch-wide.
BatchResult batch_solve(const Model& model, const std::vector<std::string>& questions,
                        const BatchOptions& opts);

}  // namespace marcos
