#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <functional>
#include <unordered_set>

#include "marcos/corpus.hpp"

using namespace marcos;

namespace {

// Independent interpreter: evaluates the question expression left to right,
// never consulting the generator's own chain record.
long long oracle_eval(const std::string& question) {
    std::size_t i = 0;
    auto read_int = [&]() {
        bool neg = false;
        if (question[i] == '-') {
            neg = true;
            ++i;
        }
        long long v = 0;
        while (i < question.size() && question[i] >= '0' && question[i] <= '9') {
            v = v * 10 + (question[i] - '0');
            ++i;
        }
        return neg ? -v : v;
    };
    long long acc = read_int();
    while (i < question.size()) {
        char op = question[i++];
        long long rhs = read_int();
        if (op == '+') acc += rhs;
        else if (op == '-') acc -= rhs;
        else acc *= rhs;
    }
    return acc;
}

// Brute-force grouping reference over all non-increasing partitions of n into
// k parts: minimize the largest group, then take the lexicographically
// smallest size vector. The survivor is the unique partition whose sizes
// differ by at most one, larger groups first.
std::vector<int> oracle_group_sizes(int n, int k) {
    std::vector<int> best;
    std::vector<int> cur(static_cast<std::size_t>(k), 0);
    std::function<void(int, int)> rec = [&](int pos, int left) {
        if (pos == k) {
            if (left != 0) return;
            for (int i = 0; i + 1 < k; ++i)
                if (cur[static_cast<std::size_t>(i)] < cur[static_cast<std::size_t>(i + 1)]) return;
            auto max_of = [](const std::vector<int>& v) {
                int m = 0;
                for (int x : v) m = std::max(m, x);
                return m;
            };
            if (best.empty() || max_of(cur) < max_of(best) || (max_of(cur) == max_of(best) && cur < best))
                best = cur;
            return;
        }
        for (int take = 1; take <= left; ++take) {
            cur[static_cast<std::size_t>(pos)] = take;
            rec(pos + 1, left - take);
        }
    };
    rec(0, n);
    return best;
}

}  // namespace

TEST_CASE("generated problems match the independent arithmetic oracle") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        int steps = 1 + static_cast<int>(seed % 6);
        auto style = seed % 2 == 0 ? CorpusStyle::equation : CorpusStyle::text;
        TrainingExample ex = generate_problem(seed, steps, style);
        CAPTURE(ex.question);
        CHECK(oracle_eval(ex.question) == ex.answer);
        CHECK(std::abs(ex.answer) < (1ll << 31));
        for (long long v : ex.chain.intermediate_values) CHECK(std::abs(v) < (1ll << 31));
        // Final step carries the marker and the answer.
        const std::string marker = "#### " + std::to_string(ex.answer);
        CHECK(ex.step_texts.back().find(marker) != std::string::npos);
        CHECK(static_cast<int>(ex.step_texts.size()) == steps);
    }
}

TEST_CASE("generation is deterministic in the seed") {
    TrainingExample a = generate_problem(0, 2, CorpusStyle::equation);
    TrainingExample b = generate_problem(0, 2, CorpusStyle::equation);
    CHECK(a.question == b.question);
    CHECK(a.step_texts == b.step_texts);
    CHECK(a.answer == b.answer);
    CHECK(a.question_tokens == b.question_tokens);
}

TEST_CASE("equation steps use the << >> format") {
    TrainingExample ex = generate_problem(0, 2, CorpusStyle::equation);
    for (const auto& s : ex.step_texts) {
        CHECK(s.substr(0, 2) == "<<");
        CHECK(s.find(">>") != std::string::npos);
        CHECK(s.find('=') != std::string::npos);
    }
}

TEST_CASE("single-step problems carry the answer marker") {
    TrainingExample ex = generate_problem(5, 1, CorpusStyle::equation);
    CHECK(ex.step_texts.size() == 1);
    CHECK(ex.step_texts[0].find("#### " + std::to_string(ex.answer)) != std::string::npos);
}

TEST_CASE("out-of-range step counts are rejected") {
    CHECK_THROWS_AS(generate_problem(0, 0, CorpusStyle::equation), Error);
    CHECK_THROWS_AS(generate_problem(0, 7, CorpusStyle::equation), Error);
}

TEST_CASE("segment_steps grouping matches the brute-force partitioner") {
    auto mk = [](int n) {
        std::vector<std::string> v;
        for (int i = 0; i < n; ++i) v.push_back("s" + std::to_string(i));
        return v;
    };
    for (int n = 1; n <= 9; ++n) {
        for (int k = 1; k <= 5; ++k) {
            auto out = segment_steps(mk(n), k);
            REQUIRE(static_cast<int>(out.size()) == k);
            if (n >= k) {
                std::vector<int> sizes;
                for (const auto& g : out) {
                    int cnt = 1;
                    for (char ch : g)
                        if (ch == ' ') ++cnt;
                    sizes.push_back(cnt);
                }
                CHECK(sizes == oracle_group_sizes(n, k));
            }
            // Joining the output (minus padding) reproduces the joined input.
            std::string joined_out, joined_in;
            for (const auto& g : out) {
                if (g == Vocabulary::NOP_TEXT) continue;
                if (!joined_out.empty()) joined_out += " ";
                joined_out += g;
            }
            for (int i = 0; i < n; ++i) {
                if (!joined_in.empty()) joined_in += " ";
                joined_in += "s" + std::to_string(i);
            }
            CHECK(joined_out == joined_in);
        }
    }
}

TEST_CASE("segment_steps identity and padding cases") {
    std::vector<std::string> three = {"a", "b", "c"};
    CHECK(segment_steps(three, 3) == three);
    std::vector<std::string> two = {"a", "b"};
    auto padded = segment_steps(two, 3);
    CHECK(padded == std::vector<std::string>{"a", "b", "<NOP>"});
    auto five = segment_steps({"a", "b", "c", "d", "e"}, 3);
    CHECK(five == std::vector<std::string>{"a b", "c d", "e"});
    CHECK_THROWS_AS(segment_steps({}, 3), Error);
}

TEST_CASE("tokenizer round-trips every corpus string") {
    Vocabulary v;
    CHECK(v.size() <= 512);
    CHECK(v.tokenize("").empty());
    CHECK(v.detokenize({}) == "");
    CHECK(v.detokenize(v.tokenize("#### 35")) == "#### 35");
    CHECK(v.tokenize("<NOP>") == std::vector<int>{Vocabulary::NOP});
    CHECK(v.detokenize({Vocabulary::NOP}) == "<NOP>");
    CHECK_THROWS_AS(v.tokenize("caf\xc3\xa9"), Error);

    for (std::uint64_t seed = 300; seed < 380; ++seed) {
        auto style = seed % 2 == 0 ? CorpusStyle::equation : CorpusStyle::text;
        TrainingExample ex = generate_problem(seed, 1 + static_cast<int>(seed % 4), style);
        CHECK(v.detokenize(v.tokenize(ex.question)) == ex.question);
        for (std::size_t i = 0; i < ex.step_texts.size(); ++i) {
            CHECK(v.detokenize(ex.step_tokens[i]) == ex.step_texts[i]);
        }
    }
}

TEST_CASE("corpus files round-trip and report parse errors with line numbers") {
    Vocabulary vocab;
    std::vector<TrainingExample> examples;
    for (std::uint64_t s = 0; s < 100; ++s)
        examples.push_back(generate_problem(s, 1 + static_cast<int>(s % 3),
                                            s % 2 ? CorpusStyle::text : CorpusStyle::equation));
    const std::string path = "test_corpus_roundtrip.jsonl";
    write_corpus(path, examples);
    auto back = read_corpus(path, vocab);
    REQUIRE(back.size() == examples.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].question == examples[i].question);
        CHECK(back[i].step_texts == examples[i].step_texts);
        CHECK(back[i].answer == examples[i].answer);
        CHECK(back[i].style.name == examples[i].style.name);
        CHECK(back[i].style.fraction == examples[i].style.fraction);
        CHECK(back[i].seed == examples[i].seed);
    }

    // Truncate mid-record: the error must name the failing line.
    {
        std::ifstream in(path);
        std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::ofstream out("test_corpus_truncated.jsonl");
        out << all.substr(0, all.size() / 2);
    }
    try {
        read_corpus("test_corpus_truncated.jsonl", vocab);
        FAIL("expected parse error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::parse);
        CHECK(std::string(e.what()).find("line") != std::string::npos);
    }

    {
        std::ofstream out("test_corpus_empty.jsonl");
    }
    CHECK(read_corpus("test_corpus_empty.jsonl", vocab).empty());
    std::remove(path.c_str());
    std::remove("test_corpus_truncated.jsonl");
    std::remove("test_corpus_empty.jsonl");
}

TEST_CASE("train/test splits never share a question") {
    Vocabulary vocab;
    CorpusSpec spec;
    spec.n_train = 300;
    spec.n_test = 100;
    spec.min_steps = 1;
    spec.max_steps = 2;
    spec.seed = 11;
    spec.max_operand = 15;  // small space forces real collisions
    auto corpus = generate_corpus(spec, vocab);
    REQUIRE(corpus.train.size() == 300);
    REQUIRE(corpus.test.size() == 100);
    std::unordered_set<std::uint64_t> train_hashes;
    for (const auto& ex : corpus.train) train_hashes.insert(fnv1a(ex.question));
    for (const auto& ex : corpus.test) CHECK(train_hashes.count(fnv1a(ex.question)) == 0);

    // Same spec, same corpus.
    auto again = generate_corpus(spec, vocab);
    REQUIRE(again.train.size() == corpus.train.size());
    bool identical = true;
    for (std::size_t i = 0; i < again.train.size(); ++i)
        identical = identical && again.train[i].question == corpus.train[i].question;
    CHECK(identical);
}

TEST_CASE("explicit test seed inside the train range is rejected") {
    Vocabulary vocab;
    CorpusSpec spec;
    spec.n_train = 50;
    spec.n_test = 10;
    spec.seed = 100;
    spec.test_seed = 120;  // inside the consumed train candidate range
    CHECK_THROWS_AS(generate_corpus(spec, vocab), Error);
}

TEST_CASE("text style varies surface form with stored latents") {
    int frac = 0, verbose = 0, units = 0;
    const int n = 200;
    for (std::uint64_t s = 1000; s < 1000 + n; ++s) {
        TrainingExample ex = generate_problem(s, 2, CorpusStyle::text);
        frac += ex.style.fraction;
        verbose += ex.style.verbose;
        units += ex.style.units;
        // The stored latent matches the rendered surface.
        bool has_fraction = ex.step_texts[0].find("/2") != std::string::npos;
        bool has_decimal = ex.step_texts[0].find(".0") != std::string::npos;
        CHECK(has_fraction == ex.style.fraction);
        CHECK(has_decimal == !ex.style.fraction);
        if (ex.style.units) CHECK(ex.step_texts[0].find(ex.style.unit_word) != std::string::npos);
    }
    // All three factors actually vary.
    CHECK(frac > n / 5);
    CHECK(frac < 4 * n / 5);
    CHECK(verbose > n / 5);
    CHECK(units > n / 5);
}
