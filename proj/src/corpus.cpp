#include "marcos/corpus.hpp"

#include <fstream>
#include <unordered_set>

#include <json.hpp>

#include "marcos/rng.hpp"

namespace marcos {

using nlohmann::json;

CorpusStyle parse_style(const std::string& s) {
    if (s == "equation") return CorpusStyle::equation;
    if (s == "text") return CorpusStyle::text;
    fail(ErrorKind::invalid_argument, "unknown corpus style: " + s);
}

namespace {

constexpr long long kMulGuard = 500;  // no '*' beyond this magnitude
const char* kUnitWords[] = {"apples", "dollars", "points", "pens", "miles"};

std::string render_value(long long v, const StyleRecord& style) {
    if (style.fraction) return std::to_string(2 * v) + "/2";
    return std::to_string(v) + ".0";
}

std::string connector(int k, int n) {
    if (k == 0) return "First";
    if (k == n - 1) return "Finally";
    return k % 2 == 1 ? "Next" : "Then";
}

std::string text_step(char op, long long a, long long b, long long v, int k, int n,
                      const StyleRecord& style) {
    std::string r = render_value(v, style);
    if (style.units) r += " " + style.unit_word;
    std::string s;
    if (style.verbose) {
        std::string conn = connector(k, n);
        switch (op) {
            case '+': s = conn + ", we add " + std::to_string(b) + " to " + std::to_string(a) +
                          ", which gives us " + r + "."; break;
            case '-': s = conn + ", we subtract " + std::to_string(b) + " from " + std::to_string(a) +
                          ", which gives us " + r + "."; break;
            default:  s = conn + ", we multiply " + std::to_string(a) + " by " + std::to_string(b) +
                          ", which gives us " + r + "."; break;
        }
    } else {
        switch (op) {
            case '+': s = "Add " + std::to_string(b) + " to " + std::to_string(a) + " to get " + r + "."; break;
            case '-': s = "Subtract " + std::to_string(b) + " from " + std::to_string(a) + " to get " + r + "."; break;
            default:  s = "Multiply " + std::to_string(a) + " by " + std::to_string(b) + " to get " + r + "."; break;
        }
    }
    return s;
}

std::string equation_step(char op, long long a, long long b, long long v) {
    return "<<" + std::to_string(a) + std::string(1, op) + std::to_string(b) + "=" + std::to_string(v) + ">>";
}

long long apply_op(char op, long long a, long long b) {
    switch (op) {
        case '+': return a + b;
        case '-': return a - b;
        default: return a * b;
    }
}

}  // namespace

TrainingExample generate_problem(std::uint64_t seed, int num_steps, CorpusStyle style,
                                 long long max_operand) {
    require(num_steps >= 1 && num_steps <= 6, ErrorKind::invalid_argument,
            "num_steps must be in [1, 6], got " + std::to_string(num_steps));
    require(max_operand >= 2 && max_operand <= 99, ErrorKind::invalid_argument,
            "max_operand must be in [2, 99]");
    Rng rng(derive_seed(seed, 0x70b1));

    TrainingExample ex;
    ex.seed = seed;
    ex.style.name = style == CorpusStyle::equation ? "equation" : "text";
    if (style == CorpusStyle::text) {
        ex.style.verbose = rng.bernoulli(0.5);
        ex.style.units = rng.bernoulli(0.5);
        ex.style.fraction = rng.bernoulli(0.5);
        ex.style.unit_word = kUnitWords[rng.below(sizeof(kUnitWords) / sizeof(kUnitWords[0]))];
    }

    long long value = rng.range(2, max_operand);
    ex.question = std::to_string(value);
    for (int i = 0; i < num_steps; ++i) {
        char op;
        long long magnitude = value < 0 ? -value : value;
        if (magnitude > kMulGuard) {
            op = rng.bernoulli(0.5) ? '+' : '-';
        } else {
            const char ops[3] = {'+', '-', '*'};
            op = ops[rng.below(3)];
        }
        long long hi = max_operand;
        if (op == '*' && magnitude > 99) hi = std::min<long long>(9, max_operand);
        long long rhs = rng.range(2, hi);
        long long next = apply_op(op, value, rhs);
        ex.chain.operands.emplace_back(value, rhs);
        ex.chain.ops.push_back(op);
        ex.chain.intermediate_values.push_back(next);
        ex.question += std::string(1, op) + std::to_string(rhs);
        value = next;
    }
    ex.chain.final_answer = value;
    ex.answer = value;

    int n = num_steps;
    for (int i = 0; i < n; ++i) {
        auto [a, b] = ex.chain.operands[static_cast<std::size_t>(i)];
        char op = ex.chain.ops[static_cast<std::size_t>(i)];
        long long v = ex.chain.intermediate_values[static_cast<std::size_t>(i)];
        std::string s = style == CorpusStyle::equation ? equation_step(op, a, b, v)
                                                       : text_step(op, a, b, v, i, n, ex.style);
        if (i == n - 1) s += " #### " + std::to_string(ex.answer);
        ex.step_texts.push_back(std::move(s));
    }

    Vocabulary vocab;
    ex.question_tokens = vocab.tokenize(ex.question);
    for (const auto& s : ex.step_texts) ex.step_tokens.push_back(vocab.tokenize(s));
    return ex;
}

std::vector<std::string> segment_steps(const std::vector<std::string>& step_texts, int k) {
    require(!step_texts.empty(), ErrorKind::invalid_argument, "segment_steps: empty step list");
    require(k >= 1, ErrorKind::invalid_argument, "segment_steps: K must be >= 1");
    int n = static_cast<int>(step_texts.size());
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(k));
    if (n <= k) {
        out = step_texts;
        for (int i = n; i < k; ++i) out.emplace_back(Vocabulary::NOP_TEXT);
        return out;
    }
    int base = n / k;
    int larger = n % k;  // the first `larger` groups take one extra step
    int at = 0;
    for (int g = 0; g < k; ++g) {
        int take = base + (g < larger ? 1 : 0);
        std::string joined;
        for (int i = 0; i < take; ++i) {
            if (i > 0) joined += " ";
            joined += step_texts[static_cast<std::size_t>(at++)];
        }
        out.push_back(std::move(joined));
    }
    return out;
}

namespace {

json style_to_json(const StyleRecord& s) {
    json j;
    j["name"] = s.name;
    if (s.name == "text") {
        j["verbose"] = s.verbose;
        j["units"] = s.units;
        j["fraction"] = s.fraction;
        j["unit_word"] = s.unit_word;
    }
    return j;
}

StyleRecord style_from_json(const json& j) {
    StyleRecord s;
    s.name = j.at("name").get<std::string>();
    if (s.name == "text") {
        s.verbose = j.at("verbose").get<bool>();
        s.units = j.at("units").get<bool>();
        s.fraction = j.at("fraction").get<bool>();
        s.unit_word = j.at("unit_word").get<std::string>();
    }
    return s;
}

}  // namespace

void write_corpus(const std::string& path, const std::vector<TrainingExample>& examples) {
    std::ofstream f(path);
    require(f.good(), ErrorKind::io, "cannot write corpus file: " + path);
    for (const auto& ex : examples) {
        json j;
        j["question"] = ex.question;
        j["steps"] = ex.step_texts;
        j["answer"] = ex.answer;
        j["style"] = style_to_json(ex.style);
        j["seed"] = ex.seed;
        f << j.dump() << "\n";
    }
    require(f.good(), ErrorKind::io, "write failed: " + path);
}

std::vector<TrainingExample> read_corpus(const std::string& path, const Vocabulary& vocab) {
    std::ifstream f(path);
    require(f.good(), ErrorKind::io, "cannot read corpus file: " + path);
    std::vector<TrainingExample> out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
            TrainingExample ex;
            ex.question = j.at("question").get<std::string>();
            ex.step_texts = j.at("steps").get<std::vector<std::string>>();
            ex.answer = j.at("answer").get<long long>();
            ex.style = style_from_json(j.at("style"));
            ex.seed = j.at("seed").get<std::uint64_t>();
            ex.question_tokens = vocab.tokenize(ex.question);
            for (const auto& s : ex.step_texts) ex.step_tokens.push_back(vocab.tokenize(s));
            require(!ex.step_texts.empty(), ErrorKind::parse, "example without steps");
            out.push_back(std::move(ex));
        } catch (const Error&) {
            throw;
        } catch (const std::exception& e) {
            fail(ErrorKind::parse, path + ": parse error at line " + std::to_string(line_no) +
                                       " (last good line " + std::to_string(line_no - 1) + "): " + e.what());
        }
    }
    return out;
}

GeneratedCorpus generate_corpus(const CorpusSpec& spec, const Vocabulary& vocab) {
    require(spec.n_train >= 0 && spec.n_test >= 0, ErrorKind::invalid_argument,
            "split sizes must be >= 0");
    require(spec.min_steps >= 1 && spec.max_steps <= 6 && spec.min_steps <= spec.max_steps,
            ErrorKind::invalid_argument, "step range must satisfy 1 <= min <= max <= 6");
    (void)vocab;

    GeneratedCorpus out;
    std::unordered_set<std::string> seen;

    auto fill = [&](std::vector<TrainingExample>& dst, int want, std::uint64_t seed_begin,
                    std::uint64_t* seed_end) {
        std::uint64_t s = seed_begin;
        long long attempts = 0;
        const long long max_attempts = 1000ll * (want + 1) + 100000;
        while (static_cast<int>(dst.size()) < want) {
            require(attempts++ < max_attempts, ErrorKind::numeric,
                    "question space exhausted before filling the requested split");
            int span = spec.max_steps - spec.min_steps + 1;
            int steps = spec.min_steps + static_cast<int>(derive_seed(s, 0x57e9) % static_cast<std::uint64_t>(span));
            TrainingExample ex = generate_problem(s, steps, spec.style, spec.max_operand);
            ++s;
            if (!seen.insert(ex.question).second) continue;
            dst.push_back(std::move(ex));
        }
        *seed_end = s;
    };

    out.train_seed_begin = spec.seed;
    fill(out.train, spec.n_train, spec.seed, &out.train_seed_end);

    out.test_seed_begin = spec.test_seed != 0 ? spec.test_seed : out.train_seed_end;
    require(spec.test_seed == 0 || spec.test_seed >= out.train_seed_end || spec.test_seed < spec.seed,
            ErrorKind::precondition,
            "test seed range overlaps the consumed train seed range [" +
                std::to_string(out.train_seed_begin) + ", " + std::to_string(out.train_seed_end) + ")");
    fill(out.test, spec.n_test, out.test_seed_begin, &out.test_seed_end);
    require(spec.test_seed == 0 || out.test_seed_end <= spec.seed || out.test_seed_begin >= out.train_seed_end,
            ErrorKind::precondition, "test seed range ran into the train seed range");
    return out;
}

}  // namespace marcos
