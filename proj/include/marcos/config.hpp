#pragma once

#include <cstdint>
#include <string>

#include "marcos/common.hpp"

namespace marcos {

using Real = double;

// Ablation switches live in the model shape itself: removing the deep bank
// means T = 0, removing the random variable drops the R rows and disables
// both density networks.
struct ModelConfig {
    int d = 128;            // embedding width
    int deep_neurons = 10;  // T
    int shallow_neurons = 100;  // S
    int tau = 16;           // randomness scale factor
    int steps = 3;          // K thinking steps
    int layers = 2;         // per sub-network
    int heads = 4;
    int vocab = 0;          // set from the vocabulary
    int max_step_tokens = 128;
    int max_question_tokens = 64;
    int mlp_ratio = 4;
    int g_hidden = 0;  // 0 = 4*d
    int f_hidden = 0;  // 0 = 4*d
    bool use_randomness = true;
    std::uint64_t init_seed = 1;

    int resolved_g_hidden() const { return g_hidden > 0 ? g_hidden : 4 * d; }
    int resolved_f_hidden() const { return f_hidden > 0 ? f_hidden : 4 * d; }
    int r_dims() const { return tau * d; }

    void validate() const {
        require(d > 0 && shallow_neurons > 0 && tau > 0 && steps > 0 && layers > 0 && heads > 0,
                ErrorKind::invalid_argument, "model dimensions must be positive");
        require(deep_neurons >= 0, ErrorKind::invalid_argument, "deep neuron count must be >= 0");
        require(vocab > 0, ErrorKind::invalid_argument, "vocab size must be set");
        require(d % heads == 0, ErrorKind::invalid_argument, "d must be divisible by heads");
    }
};

// Small profile used by the fast test suites.
inline ModelConfig test_profile(int vocab) {
    ModelConfig c;
    c.d = 64;
    c.deep_neurons = 4;
    c.shallow_neurons = 16;
    c.tau = 4;
    c.steps = 3;
    c.vocab = vocab;
    return c;
}

struct TrainConfig {
    Real lr = 1e-4;
    Real weight_decay = 0.01;
    int batch = 256;
    int epochs = 10;      // per phase
    Real lambda = 1e-3;   // sparsity weight
    std::uint64_t seed = 1;
    int phase = 1;        // 1 or 2
    int warmup_iters = 100;
    Real clip_norm = 1.0;
    int threads = 0;      // 0 = hardware
    int start_epoch = 0;       // resume point
    int start_iterations = 0;  // optimizer iterations already taken

    void validate() const {
        require(lr > 0 && batch > 0 && epochs >= 0, ErrorKind::invalid_argument,
                "lr/batch/epochs must be positive");
        require(lambda >= 0, ErrorKind::invalid_argument, "lambda must be >= 0");
        require(phase == 1 || phase == 2, ErrorKind::invalid_argument, "phase must be 1 or 2");
    }
};

}  // namespace marcos
