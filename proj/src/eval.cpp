#include "marcos/eval.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "marcos/checkpoint.hpp"
#include "marcos/rng.hpp"

namespace marcos {

using nlohmann::json;

EvalReport fold_records(const std::vector<ItemRecord>& records) {
    EvalReport rep;
    rep.n = static_cast<int>(records.size());
    if (records.empty()) return rep;
    long correct = 0, no_answer = 0, think = 0, speak = 0;
    for (const auto& r : records) {
        correct += r.correct ? 1 : 0;
        no_answer += r.no_answer ? 1 : 0;
        think += r.thinking_passes;
        speak += r.speaker_passes;
    }
    rep.accuracy = static_cast<Real>(correct) / static_cast<Real>(records.size());
    rep.no_answer = static_cast<int>(no_answer);
    rep.mean_thinking_passes = static_cast<Real>(think) / static_cast<Real>(records.size());
    rep.mean_speaker_passes = static_cast<Real>(speak) / static_cast<Real>(records.size());
    return rep;
}

HarnessResult evaluate_with(const BatchSolverFn& solver, const std::vector<TrainingExample>& corpus,
                            int batch_size) {
    require(!corpus.empty(), ErrorKind::invalid_argument, "evaluation corpus is empty");
    require(batch_size > 0, ErrorKind::invalid_argument, "batch size must be positive");
    HarnessResult out;
    Stopwatch watch;
    for (std::size_t begin = 0; begin < corpus.size(); begin += static_cast<std::size_t>(batch_size)) {
        std::size_t end = std::min(corpus.size(), begin + static_cast<std::size_t>(batch_size));
        std::vector<const TrainingExample*> batch;
        for (std::size_t i = begin; i < end; ++i) batch.push_back(&corpus[i]);
        std::vector<ItemRecord> records = solver(batch);
        require(records.size() == batch.size(), ErrorKind::invalid_argument,
                "solver returned a mismatched record count");
        for (auto& r : records) out.records.push_back(std::move(r));
    }
    out.report = fold_records(out.records);
    out.report.test_seconds = watch.seconds();
    return out;
}

HarnessResult evaluate(const Model& model, const std::vector<TrainingExample>& corpus,
                       const EvalOptions& opts) {
    BatchSolverFn solver = [&](const std::vector<const TrainingExample*>& batch) {
        std::vector<std::string> questions;
        questions.reserve(batch.size());
        for (const auto* ex : batch) questions.push_back(ex->question);
        BatchOptions bo;
        bo.solve.mode = opts.mode;
        bo.solve.decode = opts.decode;
        bo.solve.speak = opts.speak;
        bo.solve.seed = opts.seed;
        bo.solve.max_tokens = opts.max_tokens;
        bo.threads = opts.threads;
        BatchResult br = batch_solve(model, questions, bo);
        std::vector<ItemRecord> records(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            ItemRecord& r = records[i];
            const Solution& s = br.solutions[i];
            r.question = batch[i]->question;
            r.spoken = s.spoken;
            r.answer = s.answer;
            r.ground_truth = batch[i]->answer;
            r.no_answer = !s.answer.has_value();
            r.correct = s.answer.has_value() && *s.answer == batch[i]->answer;
            r.thinking_passes = s.thinking_passes;
            r.speaker_passes = s.speaker_passes;
            r.timings = s.timings;
            r.error = s.error;
        }
        return records;
    };
    return evaluate_with(solver, corpus, opts.batch);
}

Real corpus_mean_solution_tokens(const std::vector<TrainingExample>& corpus,
                                 const Vocabulary& vocab) {
    require(!corpus.empty(), ErrorKind::invalid_argument, "empty corpus");
    long long total = 0;
    for (const auto& ex : corpus) {
        std::string joined;
        for (std::size_t i = 0; i < ex.step_texts.size(); ++i) {
            if (i > 0) joined += " ";
            joined += ex.step_texts[i];
        }
        total += static_cast<long long>(vocab.tokenize(joined).size());
    }
    return static_cast<Real>(total) / static_cast<Real>(corpus.size());
}

// --- baseline -------------------------------------------------------------------

CotBaseline::CotBaseline(const BaselineConfig& cfg) : cfg_(cfg), params_(cfg.init_seed) {
    BaselineConfig checked = cfg_;
    if (checked.vocab == 0) checked.vocab = vocab_.size();
    cfg_ = checked;
    require(cfg_.vocab == vocab_.size(), ErrorKind::invalid_argument,
            "baseline vocab does not match the fixed vocabulary");
    decoder_ = nn::SequenceTransformer<Real>::create(
        params_, "decoder", cfg_.vocab, cfg_.d, cfg_.max_seq, cfg_.layers, cfg_.heads,
        static_cast<Eigen::Index>(cfg_.d) * cfg_.mlp_ratio, /*causal=*/true, /*cross=*/false);
    head_ = nn::Linear<Real>::create(params_, "head", cfg_.d, cfg_.vocab);
}

std::string CotBaseline::solution_text(const TrainingExample& ex) {
    std::string joined;
    for (std::size_t i = 0; i < ex.step_texts.size(); ++i) {
        if (i > 0) joined += " ";
        joined += ex.step_texts[i];
    }
    return joined;
}

ad::Var<Real> CotBaseline::loss_graph(GraphCtx<Real>& g, const TrainingExample& ex, Real* nll_out,
                                      int* correct, int* total) const {
    std::vector<int> sol = vocab_.tokenize(solution_text(ex));
    std::vector<int> input;
    input.push_back(Vocabulary::BOS);
    input.insert(input.end(), ex.question_tokens.begin(), ex.question_tokens.end());
    input.push_back(vocab_.tokenize(";")[0]);
    input.insert(input.end(), sol.begin(), sol.end());
    require(static_cast<int>(input.size()) <= cfg_.max_seq, ErrorKind::invalid_argument,
            "sequence exceeds the baseline context window");

    ad::Var<Real> x = decoder_(g, input, ad::Var<Real>{});
    ad::Var<Real> logits = head_(g, x);
    // Loss on the solution span only: rows qlen+1 .. end predict sol + EOS.
    Eigen::Index qlen = static_cast<Eigen::Index>(ex.question_tokens.size());
    Eigen::Index rows = static_cast<Eigen::Index>(sol.size()) + 1;
    ad::Var<Real> span = ad::slice_rows(logits, qlen + 1, rows);
    std::vector<int> targets = sol;
    targets.push_back(Vocabulary::EOS);
    ad::Var<Real> nll = ad::cross_entropy_rows(span, targets);
    *nll_out = g.tape.val(nll)(0, 0);
    const MatR& z = g.tape.val(span);
    *total = static_cast<int>(targets.size());
    *correct = 0;
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        int arg = 0;
        z.row(r).maxCoeff(&arg);
        if (arg == targets[static_cast<std::size_t>(r)]) ++*correct;
    }
    return nll;
}

PhaseResult CotBaseline::train(const std::vector<TrainingExample>& corpus, const TrainConfig& cfg,
                               const TrainHooks& hooks) {
    std::vector<char> mask(params_.size(), 1);
    // The shared loop wants a Model&, so the baseline drives its own copy of
    // the same machinery: static-partition workers, worker-order reduction,
    // AdamW with warmup and clipping.
    cfg.validate();
    require(!corpus.empty(), ErrorKind::invalid_argument, "empty training corpus");
    Stopwatch watch;
    PhaseResult result;
    AdamW opt;
    opt.set_iterations(cfg.start_iterations);
    int workers = resolve_threads(cfg.threads);
    std::vector<std::vector<MatR>> worker_grads(static_cast<std::size_t>(workers),
                                                std::vector<MatR>(params_.size()));
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = cfg.start_epoch; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, 0xBA5E, static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order.begin(), order.end());
        Real epoch_nll = 0;
        long correct = 0, total = 0;
        int count = 0;

        for (std::size_t begin = 0; begin < order.size();
             begin += static_cast<std::size_t>(cfg.batch)) {
            std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch));
            std::size_t batch_n = end - begin;
            std::vector<Real> nlls(batch_n, 0);
            std::vector<int> corrects(batch_n, 0), totals(batch_n, 0);
            parallel_for(batch_n, workers, [&](std::size_t bi, int w) {
                const TrainingExample& ex = corpus[order[begin + bi]];
                ad::Tape<Real> tape;
                GraphCtx<Real> g(tape, &mask);
                ad::Var<Real> nll = loss_graph(g, ex, &nlls[bi], &corrects[bi], &totals[bi]);
                tape.backward(nll);
                auto& acc = worker_grads[static_cast<std::size_t>(w)];
                tape.for_each_param_grad([&](int id, const MatR& gm) {
                    auto& slot = acc[static_cast<std::size_t>(id)];
                    if (slot.size() == 0)
                        slot = gm;
                    else
                        slot += gm;
                });
            });
            for (std::size_t bi = 0; bi < batch_n; ++bi) {
                require(std::isfinite(nlls[bi]), ErrorKind::numeric, "non-finite baseline loss");
                epoch_nll += nlls[bi];
                correct += corrects[bi];
                total += totals[bi];
                ++count;
            }
            std::vector<MatR> grads(params_.size());
            for (int w = 0; w < workers; ++w) {
                auto& acc = worker_grads[static_cast<std::size_t>(w)];
                for (std::size_t i = 0; i < params_.size(); ++i) {
                    if (acc[i].size() == 0) continue;
                    if (grads[i].size() == 0)
                        grads[i] = acc[i];
                    else
                        grads[i] += acc[i];
                    acc[i].resize(0, 0);
                }
            }
            Real inv = Real(1) / static_cast<Real>(batch_n);
            for (auto& gm : grads)
                if (gm.size() != 0) gm *= inv;
            Real lr = cfg.lr;
            if (cfg.warmup_iters > 0)
                lr *= std::min<Real>(1, Real(opt.iterations() + 1) / Real(cfg.warmup_iters));
            opt.step(params_, mask, grads, lr, cfg.weight_decay, cfg.clip_norm);
        }

        CurveRow row;
        row.phase = 0;
        row.epoch = epoch;
        row.step = opt.iterations();
        row.re = count > 0 ? -epoch_nll / count : 0;
        row.total = count > 0 ? epoch_nll / count : 0;
        result.curve.push_back(row);
        result.token_accuracy = total > 0 ? Real(correct) / Real(total) : 0;
        if (hooks.on_epoch && !hooks.on_epoch(row)) break;
    }
    result.iterations = opt.iterations();
    result.seconds = watch.seconds();
    trained_ = true;
    return result;
}

CotBaseline::Decode CotBaseline::decode(const std::vector<int>& question_tokens,
                                        int max_tokens) const {
    Decode out;
    std::vector<int> prefix;
    prefix.push_back(Vocabulary::BOS);
    prefix.insert(prefix.end(), question_tokens.begin(), question_tokens.end());
    prefix.push_back(vocab_.tokenize(";")[0]);
    const std::size_t prompt_len = prefix.size();
    while (static_cast<int>(prefix.size() - prompt_len) < max_tokens) {
        require(static_cast<int>(prefix.size()) < cfg_.max_seq, ErrorKind::invalid_argument,
                "baseline decode exceeded the context window");
        ad::Tape<Real> tape;
        tape.recording = false;
        GraphCtx<Real> g(tape);
        ad::Var<Real> x = decoder_(g, prefix, ad::Var<Real>{});
        ad::Var<Real> logits = head_(g, x);
        const MatR& z = tape.val(logits);
        int next = 0;
        z.row(z.rows() - 1).maxCoeff(&next);
        ++out.passes;
        ++out.emitted_tokens;
        if (next == Vocabulary::EOS) break;
        prefix.push_back(next);
        if (static_cast<int>(prefix.size() - prompt_len) >= max_tokens) out.truncated = true;
    }
    out.tokens.assign(prefix.begin() + static_cast<std::ptrdiff_t>(prompt_len), prefix.end());
    out.text = vocab_.detokenize(out.tokens);
    return out;
}

void CotBaseline::save(const std::string& path) const {
    json m;
    m["model_type"] = "cot_baseline";
    m["config"] = {{"d", cfg_.d},           {"layers", cfg_.layers},
                   {"heads", cfg_.heads},   {"vocab", cfg_.vocab},
                   {"max_seq", cfg_.max_seq}, {"mlp_ratio", cfg_.mlp_ratio},
                   {"init_seed", cfg_.init_seed}};
    m["trained"] = trained_;
    std::vector<std::pair<std::string, const MatR*>> tensors;
    for (const auto& p : params_) tensors.emplace_back(p.name, &p.value);
    write_tensor_file(path, m, tensors);
}

std::unique_ptr<CotBaseline> CotBaseline::load(const std::string& path) {
    NamedTensors nt = read_tensor_file(path);
    require(nt.meta.at("model_type").get<std::string>() == "cot_baseline", ErrorKind::parse,
            "checkpoint is not a cot_baseline model: " + path);
    const json& c = nt.meta.at("config");
    BaselineConfig cfg;
    cfg.d = c.at("d").get<int>();
    cfg.layers = c.at("layers").get<int>();
    cfg.heads = c.at("heads").get<int>();
    cfg.vocab = c.at("vocab").get<int>();
    cfg.max_seq = c.at("max_seq").get<int>();
    cfg.mlp_ratio = c.at("mlp_ratio").get<int>();
    cfg.init_seed = c.at("init_seed").get<std::uint64_t>();
    auto b = std::make_unique<CotBaseline>(cfg);
    for (auto& p : b->params_) {
        const MatR* m = nt.find(p.name);
        require(m != nullptr && m->rows() == p.value.rows() && m->cols() == p.value.cols(),
                ErrorKind::parse, "baseline checkpoint mismatch for " + p.name);
        p.value = *m;
    }
    b->trained_ = nt.meta.at("trained").get<bool>();
    return b;
}

HarnessResult evaluate_baseline(const CotBaseline& baseline,
                                const std::vector<TrainingExample>& corpus, int batch, int threads,
                                int max_tokens) {
    BatchSolverFn solver = [&](const std::vector<const TrainingExample*>& items) {
        std::vector<ItemRecord> records(items.size());
        parallel_for(items.size(), threads, [&](std::size_t i, int) {
            const TrainingExample& ex = *items[i];
            ItemRecord& r = records[i];
            r.question = ex.question;
            r.ground_truth = ex.answer;
            CotBaseline::Decode d = baseline.decode(ex.question_tokens, max_tokens);
            r.spoken = {d.text};
            r.speaker_passes = d.passes;
            r.thinking_passes = d.passes;  // every pass is sequential for the baseline
            try {
                r.answer = extract_answer(d.text);
                r.correct = *r.answer == ex.answer;
            } catch (const Error&) {
                r.no_answer = true;
            }
        });
        return records;
    };
    return evaluate_with(solver, corpus, batch);
}

// --- ablations -------------------------------------------------------------------

AblationVariant parse_variant(const std::string& s) {
    if (s == "full") return AblationVariant::full;
    if (s == "no_deep") return AblationVariant::no_deep;
    if (s == "no_R") return AblationVariant::no_R;
    if (s == "no_sparsity") return AblationVariant::no_sparsity;
    fail(ErrorKind::usage, "unknown ablation variant: " + s);
}

const char* variant_name(AblationVariant v) {
    switch (v) {
        case AblationVariant::full: return "full";
        case AblationVariant::no_deep: return "no_deep";
        case AblationVariant::no_R: return "no_R";
        case AblationVariant::no_sparsity: return "no_sparsity";
    }
    return "?";
}

ModelConfig apply_ablation(ModelConfig cfg, AblationVariant v) {
    switch (v) {
        case AblationVariant::no_deep: cfg.deep_neurons = 0; break;
        case AblationVariant::no_R: cfg.use_randomness = false; break;
        default: break;
    }
    return cfg;
}

TrainConfig apply_ablation(TrainConfig cfg, AblationVariant v) {
    if (v == AblationVariant::no_sparsity) cfg.lambda = 0;
    return cfg;
}

AblationOutcome run_ablation(AblationVariant v, const std::vector<TrainingExample>& train_corpus,
                             const std::vector<TrainingExample>& test_corpus,
                             const ModelConfig& mc, const TrainConfig& tc, const EvalOptions& eo) {
    AblationOutcome out;
    out.variant = variant_name(v);
    ModelConfig vmc = apply_ablation(mc, v);
    TrainConfig vtc = apply_ablation(tc, v);
    out.model = std::make_unique<Model>(vmc);

    auto segmented = segment_corpus(train_corpus, vmc.steps, out.model->vocab());
    PhaseResult p1 = train_phase1(*out.model, segmented, vtc);
    PhaseResult p2 = train_phase2(*out.model, segmented, vtc);
    out.mean_abs_r = p1.mean_abs_r;
    out.train_seconds = p1.seconds + p2.seconds;
    out.phase1_epoch_seconds = vtc.epochs > 0 ? p1.seconds / vtc.epochs : 0;
    out.phase2_epoch_seconds = vtc.epochs > 0 ? p2.seconds / vtc.epochs : 0;

    HarnessResult hr = evaluate(*out.model, test_corpus, eo);
    out.report = hr.report;
    out.report.variant = out.variant;
    out.report.train_seconds = out.phase1_epoch_seconds + out.phase2_epoch_seconds;
    return out;
}

CollapseFlag collapse_flag(const AblationOutcome& full, const AblationOutcome& variant) {
    CollapseFlag flag;
    flag.accuracy_ratio =
        full.report.accuracy > 0 ? variant.report.accuracy / full.report.accuracy : 0;
    flag.abs_r_ratio = full.mean_abs_r > 0 ? variant.mean_abs_r / full.mean_abs_r : 0;
    flag.collapsed = flag.accuracy_ratio < 0.25 && flag.abs_r_ratio > 5.0;
    return flag;
}

}  // namespace marcos
