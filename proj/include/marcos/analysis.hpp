#pragma once

#include "marcos/eval.hpp"

namespace marcos {

// Flattened R_k (row-major, flat = row * d + col) for one (example, step).
struct ActivationRecord {
    int example = 0;
    int step = 0;  // k, 0-based
    StyleRecord style;
    Eigen::VectorXd values;  // length tau * d
};

struct CollectOptions {
    bool sampled = false;  // default: posterior means, fully deterministic
    std::uint64_t seed = 0;
    int threads = 0;
};

// Teacher-forced posterior codes over the corpus: one record per
// (example, step). Never touches model parameters.
std::vector<ActivationRecord> collect_activations(const Model& model,
                                                  const std::vector<TrainingExample>& segmented,
                                                  const CollectOptions& opts = {});

// Count per flat dimension of records with |value| strictly above threshold.
std::vector<long> activation_frequency(const std::vector<ActivationRecord>& records,
                                       Real threshold = 0.1);

struct CorrelationGraph {
    std::vector<int> dims;                      // selected flat dimensions
    MatR corr;                                  // pairwise Pearson r over dims
    std::vector<std::pair<int, int>> edges;     // dim pairs with r > threshold
    std::vector<std::vector<int>> cliques;      // maximal cliques (dim ids)
    std::vector<int> excluded_constant;         // selected dims with zero variance
};

CorrelationGraph correlation_graph(const std::vector<ActivationRecord>& records,
                                   Real top_fraction = 0.01, Real edge_threshold = 0.9);

struct InterventionReport {
    Real mean_length_delta_pct = 0;  // spoken token length vs un-intervened run
    Real format_rate = 0;            // fraction of final outputs carrying "####"
    Real accuracy = 0;
    Real baseline_mean_length = 0;
    Real baseline_format_rate = 0;
    Real baseline_accuracy = 0;
    int n = 0;
    bool identical_to_baseline = false;  // bytewise, for the empty intervention
};

struct InterveneOptions {
    SpeakPolicy speak = SpeakPolicy::all;
    int threads = 0;
    int max_tokens = kNarLength;
};

InterventionReport intervene(const Model& model, const std::vector<TrainingExample>& corpus,
                             const InterventionSpec& spec, const InterveneOptions& opts = {});

// Histogram mutual information (nats) between each dimension's value series
// and each binary style factor.
struct StyleAttribution {
    std::vector<std::string> factors;  // "verbose", "units", "fraction"
    MatR mi;                           // dims x factors
    int bins = 16;

    int top_dim(const std::string& factor) const;
};

StyleAttribution style_attribution(const std::vector<ActivationRecord>& records);

// MI between a value series and binary labels via equal-width binning.
Real histogram_mi(const std::vector<Real>& values, const std::vector<int>& labels, int bins = 16);

// Rendering classifier for the fraction-vs-decimal surface factor.
enum class NumberRendering { fraction, decimal, unknown };
NumberRendering classify_rendering(const std::string& text);

}  // namespace marcos
