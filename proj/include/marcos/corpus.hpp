#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "marcos/vocab.hpp"

namespace marcos {

// Surface-style latents for text supervision. They are stored with each
// example so analysis can compare discovered randomness dimensions against
// known ground truth.
struct StyleRecord {
    std::string name = "equation";  // "equation" | "text"
    bool verbose = false;
    bool units = false;
    bool fraction = false;  // result rendered as "(2v)/2" instead of "v.0"
    std::string unit_word;
};

struct ArithmeticChain {
    std::vector<std::pair<long long, long long>> operands;  // (lhs, rhs) per step
    std::vector<char> ops;                                  // '+', '-', '*'
    std::vector<long long> intermediate_values;
    long long final_answer = 0;
};

struct TrainingExample {
    std::string question;
    std::vector<int> question_tokens;
    std::vector<std::string> step_texts;
    std::vector<std::vector<int>> step_tokens;
    long long answer = 0;
    StyleRecord style;
    std::uint64_t seed = 0;
    ArithmeticChain chain;
};

enum class CorpusStyle { equation, text };

CorpusStyle parse_style(const std::string& s);

// Deterministic in `seed`. Question text is the left-to-right chain
// expression; steps carry the marker "####" plus the answer on the last one.
TrainingExample generate_problem(std::uint64_t seed, int num_steps, CorpusStyle style,
                                 long long max_operand = 99);

// Regroups N step texts into exactly K: identity at N == K, near-even
// concatenation (larger groups first) above, "<NOP>" padding below.
std::vector<std::string> segment_steps(const std::vector<std::string>& step_texts, int k);

void write_corpus(const std::string& path, const std::vector<TrainingExample>& examples);
std::vector<TrainingExample> read_corpus(const std::string& path, const Vocabulary& vocab);

struct CorpusSpec {
    int n_train = 0;
    int n_test = 0;
    CorpusStyle style = CorpusStyle::equation;
    int min_steps = 1;
    int max_steps = 4;
    std::uint64_t seed = 0;
    std::uint64_t test_seed = 0;  // 0 = continue after the train range
    long long max_operand = 99;
};

struct GeneratedCorpus {
    std::vector<TrainingExample> train;
    std::vector<TrainingExample> test;
    std::uint64_t train_seed_begin = 0, train_seed_end = 0;  // half-open candidate ranges
    std::uint64_t test_seed_begin = 0, test_seed_end = 0;
};

// Candidate seeds are consumed sequentially; questions already seen are
// rejected, so the two splits never share a question string. An explicit
// test seed inside the consumed train range is a hard error.
GeneratedCorpus generate_corpus(const CorpusSpec& spec, const Vocabulary& vocab);

}  // namespace marcos
