#include "marcos/infer.hpp"

#include <algorithm>
#include <cctype>

#include "marcos/rng.hpp"

namespace marcos {

SampleMode parse_sample_mode(const std::string& s) {
    if (s == "mean") return SampleMode::mean;
    if (s == "sample") return SampleMode::sample;
    fail(ErrorKind::usage, "unknown mode: " + s);
}

SpeakPolicy parse_speak_policy(const std::string& s) {
    if (s == "final_only") return SpeakPolicy::final_only;
    if (s == "all") return SpeakPolicy::all;
    if (s == "none") return SpeakPolicy::none;
    fail(ErrorKind::usage, "unknown speak policy: " + s);
}

DecodeMode parse_decode_mode(const std::string& s) {
    if (s == "ar") return DecodeMode::ar;
    if (s == "nar") return DecodeMode::nar;
    fail(ErrorKind::usage, "unknown decode mode: " + s);
}

long long extract_answer(const std::string& final_text) {
    std::size_t pos = final_text.rfind("####");
    require(pos != std::string::npos, ErrorKind::invalid_argument,
            "no-answer: missing #### marker");
    std::size_t i = pos + 4;
    while (i < final_text.size() && final_text[i] == ' ') ++i;
    bool neg = false;
    if (i < final_text.size() && (final_text[i] == '-' || final_text[i] == '+')) {
        neg = final_text[i] == '-';
        ++i;
    }
    require(i < final_text.size() && std::isdigit(static_cast<unsigned char>(final_text[i])),
            ErrorKind::invalid_argument, "no-answer: non-numeric tail after ####");
    long long v = 0;
    while (i < final_text.size() && std::isdigit(static_cast<unsigned char>(final_text[i]))) {
        v = v * 10 + (final_text[i] - '0');
        ++i;
    }
    return neg ? -v : v;
}

namespace {

void apply_intervention(RandomDraw& draw, const InterventionSpec& spec, int d) {
    for (int flat : spec.dims) {
        require(flat >= 0 && flat < static_cast<int>(draw.value.size()), ErrorKind::invalid_argument,
                "intervention dimension out of range: " + std::to_string(flat));
        draw.value(flat / d, flat % d) = spec.value;
    }
}

SpeakResult decode_step(const Model& model, const MatR& bank, const SolveOptions& opts) {
    if (opts.decode == DecodeMode::nar) return model.speak_nar(bank);
    return model.speak_ar(bank, opts.max_tokens);
}

}  // namespace

Solution solve_tokens(const Model& model, const std::vector<int>& question_tokens,
                      const SolveOptions& opts) {
    const ModelConfig& cfg = model.config();
    if (cfg.use_randomness) {
        require(model.meta().phase2_done, ErrorKind::precondition,
                "prior-not-trained: run phase 2 before inference through g");
    }
    if (opts.decode == DecodeMode::nar)
        require(model.meta().nar_done, ErrorKind::precondition,
                "NAR speaker is untrained; run the nar phase first");

    Solution sol;
    Stopwatch total;

    Stopwatch t_u;
    MatR h = model.understand(question_tokens);
    sol.timings.understand_s = t_u.seconds();

    Stopwatch t_think;
    NeuronState state = model.init_neurons();
    for (int k = 0; k < cfg.steps; ++k) {
        InferTrace trace;
        RandomDraw draw;
        if (cfg.use_randomness) {
            GaussianParams prior = model.predict_prior(state, h);
            draw = Model::sample_randomness(prior, derive_seed(opts.seed, static_cast<std::uint64_t>(k)),
                                            opts.mode == SampleMode::mean);
            if (opts.intervention) apply_intervention(draw, *opts.intervention, cfg.d);
            trace.prior = prior;
        }
        state = model.think(state, h, draw);
        trace.state = state;
        trace.draw = draw;
        sol.traces.push_back(std::move(trace));
        ++sol.thinking_passes;
    }
    sol.timings.think_s = t_think.seconds();

    Stopwatch t_speak;
    std::vector<std::string> spoken;
    if (opts.speak == SpeakPolicy::all) {
        for (int k = 0; k < cfg.steps; ++k) {
            SpeakResult r = decode_step(model, sol.traces[static_cast<std::size_t>(k)].state.shallow, opts);
            sol.speaker_passes += r.decoder_passes;
            sol.truncated = sol.truncated || r.truncated;
            spoken.push_back(r.text);
        }
    } else if (opts.speak == SpeakPolicy::final_only) {
        // Walk back over trailing no-op emissions so the final spoken step is
        // the content-bearing one.
        for (int k = cfg.steps - 1; k >= 0; --k) {
            SpeakResult r = decode_step(model, sol.traces[static_cast<std::size_t>(k)].state.shallow, opts);
            sol.speaker_passes += r.decoder_passes;
            sol.truncated = sol.truncated || r.truncated;
            spoken.insert(spoken.begin(), r.text);
            if (r.text != Vocabulary::NOP_TEXT) break;
        }
    }
    while (!spoken.empty() && spoken.back() == Vocabulary::NOP_TEXT) spoken.pop_back();
    sol.spoken = std::move(spoken);
    sol.timings.speak_s = t_speak.seconds();

    if (!sol.spoken.empty() && sol.spoken.back().find("####") != std::string::npos) {
        try {
            sol.answer = extract_answer(sol.spoken.back());
        } catch (const Error&) {
            sol.answer.reset();
        }
    }
    (void)total;
    return sol;
}

Solution solve(const Model& model, const std::string& question, const SolveOptions& opts) {
    return solve_tokens(model, model.vocab().tokenize(question), opts);
}

BatchResult batch_solve(const Model& model, const std::vector<std::string>& questions,
                        const BatchOptions& opts) {
    require(!questions.empty(), ErrorKind::invalid_argument, "batch_solve: empty batch");
    const ModelConfig& cfg = model.config();
    BatchResult out;
    out.solutions.resize(questions.size());
    std::vector<std::string> errors(questions.size());
    Stopwatch wall;

    // Stage 1: understanding + the K-step latent chain, parallel over items.
    Stopwatch t_think;
    SolveOptions base = opts.solve;
    parallel_for(questions.size(), opts.threads, [&](std::size_t i, int) {
        SolveOptions item = base;
        item.seed = derive_seed(base.seed, i);
        item.speak = SpeakPolicy::none;
        try {
            out.solutions[i] = solve(model, questions[i], item);
        } catch (const Error& e) {
            errors[i] = e.what();
        }
    });
    out.think_seconds = t_think.seconds();

    // Stage 2: speaking, fanned out over (item, step) pairs.
    Stopwatch t_speak;
    if (base.speak != SpeakPolicy::none) {
        struct Task {
            std::size_t item;
            int k;
        };
        std::vector<Task> tasks;
        for (std::size_t i = 0; i < questions.size(); ++i) {
            if (!errors[i].empty()) continue;
            if (base.speak == SpeakPolicy::all || base.speak == SpeakPolicy::final_only) {
                for (int k = 0; k < cfg.steps; ++k) tasks.push_back({i, k});
            }
        }
        std::vector<SpeakResult> results(tasks.size());
        auto speak_task = [&](std::size_t t, int) {
            const Task& task = tasks[t];
            const MatR& bank = out.solutions[task.item].traces[static_cast<std::size_t>(task.k)].state.shallow;
            results[t] = decode_step(model, bank, base);
        };
        if (base.speak == SpeakPolicy::all) {
            if (opts.parallel_speak) {
                parallel_for(tasks.size(), opts.threads, speak_task);
            } else {
                for (std::size_t t = 0; t < tasks.size(); ++t) speak_task(t, 0);
            }
            for (std::size_t t = 0; t < tasks.size(); ++t) {
                Solution& sol = out.solutions[tasks[t].item];
                sol.spoken.push_back(results[t].text);
                sol.speaker_passes += results[t].decoder_passes;
                sol.truncated = sol.truncated || results[t].truncated;
            }
        } else {
            // final_only: decode the last step for every item in parallel,
            // falling back per item over trailing no-op emissions.
            parallel_for(questions.size(), opts.threads, [&](std::size_t i, int) {
                if (!errors[i].empty()) return;
                Solution& sol = out.solutions[i];
                std::vector<std::string> spoken;
                for (int k = cfg.steps - 1; k >= 0; --k) {
                    SpeakResult r =
                        decode_step(model, sol.traces[static_cast<std::size_t>(k)].state.shallow, base);
                    sol.speaker_passes += r.decoder_passes;
                    sol.truncated = sol.truncated || r.truncated;
                    spoken.insert(spoken.begin(), r.text);
                    if (r.text != Vocabulary::NOP_TEXT) break;
                }
                sol.spoken = std::move(spoken);
            });
        }
        for (std::size_t i = 0; i < questions.size(); ++i) {
            if (!errors[i].empty()) continue;
            Solution& sol = out.solutions[i];
            while (!sol.spoken.empty() && sol.spoken.back() == Vocabulary::NOP_TEXT)
                sol.spoken.pop_back();
            if (!sol.spoken.empty() && sol.spoken.back().find("####") != std::string::npos) {
                try {
                    sol.answer = extract_answer(sol.spoken.back());
                } catch (const Error&) {
                    sol.answer.reset();
                }
            }
        }
    }
    out.speak_seconds = t_speak.seconds();
    out.wall_seconds = wall.seconds();

    // Per-item failures ride along in the result instead of aborting the batch.
    for (std::size_t i = 0; i < errors.size(); ++i)
        if (!errors[i].empty()) out.solutions[i].error = errors[i];
    return out;
}

}  // namespace marcos
