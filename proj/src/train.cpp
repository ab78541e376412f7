#include "marcos/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "marcos/rng.hpp"

namespace marcos {

namespace {

ad::Var<Real> kl_gaussian_var(GraphCtx<Real>& g, const VarGaussian& p, const VarGaussian& q) {
    using namespace ad;
    Var<Real> log_ratio = sub(clog(q.stddev), clog(p.stddev));
    Var<Real> num = add(square(p.stddev), square(sub(p.mean, q.mean)));
    Var<Real> frac = cdiv(num, scale(square(q.stddev), Real(2)));
    Var<Real> per_entry = add(log_ratio, frac);
    Eigen::Index count = g.tape.val(per_entry).size();
    return add_scalar(sum_all(per_entry), Real(-0.5) * Real(count));
}

MatR gaussian_noise(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    Rng rng(seed);
    MatR m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.gauss();
    return m;
}

}  // namespace

Real kl_gaussian(const GaussianParams& p, const GaussianParams& q) {
    require(p.mean.rows() == q.mean.rows() && p.mean.cols() == q.mean.cols(),
            ErrorKind::invalid_argument, "kl_gaussian: shape mismatch");
    require((p.stddev.array() > 0).all() && (q.stddev.array() > 0).all(),
            ErrorKind::invalid_argument, "kl_gaussian: standard deviations must be positive");
    Real acc = 0;
    for (Eigen::Index r = 0; r < p.mean.rows(); ++r) {
        for (Eigen::Index c = 0; c < p.mean.cols(); ++c) {
            Real sp = p.stddev(r, c), sq = q.stddev(r, c);
            Real dm = p.mean(r, c) - q.mean(r, c);
            acc += std::log(sq / sp) + (sp * sp + dm * dm) / (2 * sq * sq) - Real(0.5);
        }
    }
    return acc;
}

TrainingExample segment_example(const TrainingExample& ex, int k, const Vocabulary& vocab) {
    TrainingExample out = ex;
    out.step_texts = segment_steps(ex.step_texts, k);
    out.step_tokens.clear();
    for (const auto& s : out.step_texts) out.step_tokens.push_back(vocab.tokenize(s));
    return out;
}

std::vector<TrainingExample> segment_corpus(const std::vector<TrainingExample>& corpus, int k,
                                            const Vocabulary& vocab) {
    std::vector<TrainingExample> out;
    out.reserve(corpus.size());
    for (const auto& ex : corpus) out.push_back(segment_example(ex, k, vocab));
    return out;
}

StepLossGraph build_step_losses(const Model& model, GraphCtx<Real>& g, const TrainingExample& ex,
                                const LossOptions& opts) {
    const ModelConfig& cfg = model.config();
    require(static_cast<int>(ex.step_tokens.size()) == cfg.steps, ErrorKind::invalid_argument,
            "example must be segmented to exactly K steps, got " +
                std::to_string(ex.step_tokens.size()));
    const bool with_r = cfg.use_randomness;
    const bool want_kl = opts.include_kl && with_r;
    const bool want_sparse = opts.include_sparse && with_r;

    StepLossGraph out;
    out.breakdown.lambda = opts.lambda;
    out.breakdown.re.assign(static_cast<std::size_t>(cfg.steps), 0);
    out.breakdown.kl.assign(static_cast<std::size_t>(cfg.steps), 0);
    out.breakdown.sparse.assign(static_cast<std::size_t>(cfg.steps), 0);

    ad::Tape<Real>& t = g.tape;
    ad::Var<Real> h = model.fw_understand(g, ex.question_tokens);
    VarState state = model.fw_init_neurons(g);
    ad::Var<Real> total;
    bool has_total = false;
    auto fold = [&](ad::Var<Real> term) {
        total = has_total ? ad::add(total, term) : term;
        has_total = true;
    };

    for (int k = 0; k < cfg.steps; ++k) {
        const std::vector<int>& y = ex.step_tokens[static_cast<std::size_t>(k)];
        StepTrace trace;
        std::optional<ad::Var<Real>> r_var;
        std::optional<ad::Var<Real>> kl_var, sparse_var;

        if (with_r) {
            VarGaussian post = model.fw_posterior(g, y);
            MatR eps = opts.deterministic_noise
                           ? MatR::Zero(cfg.tau, cfg.d)
                           : gaussian_noise(cfg.tau, cfg.d, derive_seed(opts.noise_seed, 7, k));
            ad::Var<Real> r = ad::add(post.mean, ad::hadamard(post.stddev, t.constant(eps)));
            r_var = r;
            if (want_kl) {
                VarGaussian prior = model.fw_prior(g, state, h);
                kl_var = kl_gaussian_var(g, prior, post);
                out.breakdown.kl[static_cast<std::size_t>(k)] = t.val(*kl_var)(0, 0);
                if (opts.keep_traces)
                    trace.prior = GaussianParams{t.val(prior.mean), t.val(prior.stddev),
                                                 GaussianParams::Source::prior};
            }
            if (want_sparse) {
                sparse_var = ad::mean_abs(r);
                out.breakdown.sparse[static_cast<std::size_t>(k)] = t.val(*sparse_var)(0, 0);
            }
            if (opts.keep_traces) {
                trace.posterior = GaussianParams{t.val(post.mean), t.val(post.stddev),
                                                 GaussianParams::Source::posterior};
                trace.draw = RandomDraw{t.val(r), eps, opts.deterministic_noise};
            }
            state = model.fw_think(g, state, h, r_var);
        } else {
            state = model.fw_think(g, state, h, std::nullopt);
        }

        std::optional<ad::Var<Real>> nll_var;
        if (opts.include_re) {
            ad::Var<Real> logits = model.fw_speak_logits(g, y, state.shallow);
            std::vector<int> targets = y;
            targets.push_back(Vocabulary::EOS);
            nll_var = ad::cross_entropy_rows(logits, targets);
            out.breakdown.re[static_cast<std::size_t>(k)] = -t.val(*nll_var)(0, 0);
            const MatR& z = t.val(logits);
            trace.total_tokens = static_cast<int>(targets.size());
            for (Eigen::Index row = 0; row < z.rows(); ++row) {
                int arg = 0;
                z.row(row).maxCoeff(&arg);
                if (arg == targets[static_cast<std::size_t>(row)]) ++trace.correct_tokens;
            }
        }

        // Left-fold in the canonical order (-re, kl, lambda*sparse) so the
        // reported total matches recomputed_total() bit for bit.
        std::optional<ad::Var<Real>> step_term = nll_var;
        if (kl_var) step_term = step_term ? ad::add(*step_term, *kl_var) : *kl_var;
        if (sparse_var) {
            ad::Var<Real> weighted = ad::scale(*sparse_var, opts.lambda);
            step_term = step_term ? ad::add(*step_term, weighted) : weighted;
        }
        if (step_term) fold(*step_term);

        trace.log_lik = out.breakdown.re[static_cast<std::size_t>(k)];
        trace.kl = out.breakdown.kl[static_cast<std::size_t>(k)];
        trace.sparse = out.breakdown.sparse[static_cast<std::size_t>(k)];
        if (opts.keep_traces)
            trace.state_after = NeuronState{t.val(state.deep), t.val(state.shallow), state.k};
        out.traces.push_back(std::move(trace));
    }

    if (!has_total) total = t.scalar(0);
    out.total = total;
    out.breakdown.total = t.val(total)(0, 0);
    return out;
}

std::pair<LossBreakdown, std::vector<StepTrace>> step_losses(const Model& model,
                                                             const TrainingExample& ex,
                                                             std::uint64_t seed, LossOptions opts) {
    opts.noise_seed = seed;
    opts.keep_traces = true;
    ad::Tape<Real> tape;
    tape.recording = false;
    GraphCtx<Real> g(tape);
    StepLossGraph r = build_step_losses(model, g, ex, opts);
    return {r.breakdown, std::move(r.traces)};
}

// --- masks -------------------------------------------------------------------

namespace {

std::vector<char> mask_for_prefixes(const Model& model, const std::vector<std::string>& prefixes) {
    std::vector<char> mask(model.params().size(), 0);
    for (const auto& p : model.params()) {
        for (const auto& pre : prefixes) {
            if (p.name.rfind(pre, 0) == 0) {
                mask[static_cast<std::size_t>(p.id)] = 1;
                break;
            }
        }
    }
    return mask;
}

}  // namespace

std::vector<char> phase1_mask(const Model& model) {
    std::vector<std::string> prefixes = {"understander.", "thinker.", "speaker.", "neurons0."};
    if (model.config().use_randomness) prefixes.push_back("posterior.");
    return mask_for_prefixes(model, prefixes);
}

std::vector<char> phase2_mask(const Model& model) { return mask_for_prefixes(model, {"prior."}); }

std::vector<char> nar_mask(const Model& model) { return mask_for_prefixes(model, {"nar_speaker."}); }

std::vector<char> full_mask(const Model& model) {
    return std::vector<char>(model.params().size(), 1);
}

// --- optimizer ----------------------------------------------------------------

void AdamW::step(ParamStore<Real>& params, const std::vector<char>& mask,
                 const std::vector<Mat<Real>>& grads, Real lr, Real weight_decay, Real clip_norm) {
    ++t_;
    Real norm_sq = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!mask[i] || grads[i].size() == 0) continue;
        norm_sq += grads[i].squaredNorm();
    }
    Real scale = 1;
    if (clip_norm > 0) {
        Real norm = std::sqrt(norm_sq);
        if (norm > clip_norm) scale = clip_norm / norm;
    }
    Real bc1 = 1 - std::pow(b1_, t_);
    Real bc2 = 1 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!mask[i]) continue;
        Param<Real>& p = params.at(static_cast<int>(i));
        MatR g = grads[i].size() == 0 ? MatR::Zero(p.value.rows(), p.value.cols())
                                      : (grads[i] * scale).eval();
        if (p.adam_m.size() == 0) {
            p.adam_m = MatR::Zero(p.value.rows(), p.value.cols());
            p.adam_v = MatR::Zero(p.value.rows(), p.value.cols());
        }
        p.adam_m = b1_ * p.adam_m + (1 - b1_) * g;
        p.adam_v = b2_ * p.adam_v + (1 - b2_) * g.cwiseProduct(g);
        MatR mhat = p.adam_m / bc1;
        MatR vhat = p.adam_v / bc2;
        // Weight decay applies to matrices only; rows of 1 are biases/norms.
        Real wd = p.value.rows() > 1 ? weight_decay : Real(0);
        p.value -= lr * (mhat.array() / (vhat.array().sqrt() + eps_) + wd * p.value.array()).matrix();
    }
}

// --- training loop -------------------------------------------------------------

namespace {

struct EpochStats {
    Real re = 0, kl = 0, sparse = 0, total = 0, abs_r = 0;
    long correct = 0, tokens = 0;
    int count = 0;

    void add(const LossBreakdown& b, const std::vector<StepTrace>& traces) {
        Real ex_re = 0, ex_kl = 0, ex_sp = 0;
        for (std::size_t k = 0; k < b.re.size(); ++k) {
            ex_re += b.re[k];
            ex_kl += b.kl[k];
            ex_sp += b.sparse[k];
        }
        re += ex_re;
        kl += ex_kl;
        sparse += ex_sp;
        total += b.total;
        abs_r += b.sparse.empty() ? 0 : ex_sp / static_cast<Real>(b.sparse.size());
        for (const auto& tr : traces) {
            correct += tr.correct_tokens;
            tokens += tr.total_tokens;
        }
        ++count;
    }

    void merge(const EpochStats& o) {
        re += o.re;
        kl += o.kl;
        sparse += o.sparse;
        total += o.total;
        abs_r += o.abs_r;
        correct += o.correct;
        tokens += o.tokens;
        count += o.count;
    }
};

void dump_diagnostic(const std::string& path, int phase, int epoch, std::size_t index,
                     const LossBreakdown& b) {
    if (path.empty()) return;
    nlohmann::json j;
    j["phase"] = phase;
    j["epoch"] = epoch;
    j["example_index"] = index;
    j["total"] = b.total;
    j["re"] = b.re;
    j["kl"] = b.kl;
    j["sparse"] = b.sparse;
    std::ofstream f(path);
    f << j.dump(2) << "\n";
}

}  // namespace

PhaseResult run_training_loop(Model& model, const std::vector<TrainingExample>& corpus,
                              const TrainConfig& cfg, const TrainHooks& hooks, int phase,
                              const std::vector<char>& mask, const ExampleLoss& example_loss) {
    cfg.validate();
    require(!corpus.empty(), ErrorKind::invalid_argument, "empty training corpus");
    Stopwatch watch;
    PhaseResult result;
    AdamW opt;
    opt.set_iterations(cfg.start_iterations);
    int workers = resolve_threads(cfg.threads);

    ParamStore<Real>& params = model.params();
    std::vector<std::vector<MatR>> worker_grads(
        static_cast<std::size_t>(workers), std::vector<MatR>(params.size()));

    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = cfg.start_epoch; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, 0xEF0C, static_cast<std::uint64_t>(epoch),
                                    static_cast<std::uint64_t>(phase)));
        shuffle_rng.shuffle(order.begin(), order.end());
        EpochStats stats;

        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch)) {
            std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch));
            std::size_t batch_n = end - begin;
            std::vector<EpochStats> worker_stats(static_cast<std::size_t>(workers));
            std::vector<std::pair<std::size_t, LossBreakdown>> bad(static_cast<std::size_t>(workers));
            std::vector<char> bad_flag(static_cast<std::size_t>(workers), 0);

            parallel_for(batch_n, workers, [&](std::size_t bi, int w) {
                std::size_t idx = order[begin + bi];
                const TrainingExample& ex = corpus[idx];
                std::uint64_t noise_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch),
                                                       idx, static_cast<std::uint64_t>(phase));
                ad::Tape<Real> tape;
                GraphCtx<Real> g(tape, &mask);
                StepLossGraph slg = example_loss(g, idx, ex, noise_seed);
                if (!std::isfinite(slg.breakdown.total)) {
                    bad[static_cast<std::size_t>(w)] = {idx, slg.breakdown};
                    bad_flag[static_cast<std::size_t>(w)] = 1;
                    return;
                }
                tape.backward(slg.total);
                auto& acc = worker_grads[static_cast<std::size_t>(w)];
                tape.for_each_param_grad([&](int id, const MatR& gm) {
                    auto& slot = acc[static_cast<std::size_t>(id)];
                    if (slot.size() == 0)
                        slot = gm;
                    else
                        slot += gm;
                });
                worker_stats[static_cast<std::size_t>(w)].add(slg.breakdown, slg.traces);
            });

            for (int w = 0; w < workers; ++w) {
                if (bad_flag[static_cast<std::size_t>(w)]) {
                    const auto& [idx, b] = bad[static_cast<std::size_t>(w)];
                    dump_diagnostic(hooks.diagnostic_path, phase, epoch, idx, b);
                    fail(ErrorKind::numeric, "non-finite loss at phase " + std::to_string(phase) +
                                                 " epoch " + std::to_string(epoch) + " example " +
                                                 std::to_string(idx));
                }
            }

            // Deterministic reduction: worker order, then batch mean.
            std::vector<MatR> grads(params.size());
            for (int w = 0; w < workers; ++w) {
                auto& acc = worker_grads[static_cast<std::size_t>(w)];
                for (std::size_t i = 0; i < params.size(); ++i) {
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
            opt.step(params, mask, grads, lr, cfg.weight_decay, cfg.clip_norm);
            for (int w = 0; w < workers; ++w) stats.merge(worker_stats[static_cast<std::size_t>(w)]);
        }

        CurveRow row;
        row.phase = phase;
        row.epoch = epoch;
        row.step = opt.iterations();
        Real n = std::max(1, stats.count);
        row.re = stats.re / n;
        row.kl = stats.kl / n;
        row.sparse = stats.sparse / n;
        row.total = stats.total / n;
        result.curve.push_back(row);
        result.mean_abs_r = stats.abs_r / n;
        result.token_accuracy = stats.tokens > 0 ? Real(stats.correct) / Real(stats.tokens) : 0;
        result.final_mean_kl = row.kl;
        if (epoch == 0) result.first_mean_kl = row.kl;
        if (hooks.on_epoch && !hooks.on_epoch(row)) break;
    }
    result.iterations = opt.iterations();
    result.seconds = watch.seconds();
    return result;
}

PhaseResult train_phase1(Model& model, const std::vector<TrainingExample>& segmented,
                         const TrainConfig& cfg, const TrainHooks& hooks) {
    LossOptions opts;
    opts.lambda = cfg.lambda;
    opts.include_re = true;
    opts.include_kl = false;
    opts.include_sparse = model.config().use_randomness;
    auto builder = [&model, opts](GraphCtx<Real>& g, std::size_t, const TrainingExample& ex,
                                  std::uint64_t noise_seed) {
        LossOptions o = opts;
        o.noise_seed = noise_seed;
        return build_step_losses(model, g, ex, o);
    };
    PhaseResult r = run_training_loop(model, segmented, cfg, hooks, 1, phase1_mask(model), builder);
    model.meta().phase1_done = true;
    model.meta().phase_in_progress = 0;
    return r;
}

PhaseResult train_phase2(Model& model, const std::vector<TrainingExample>& segmented,
                         const TrainConfig& cfg, const TrainHooks& hooks) {
    require(model.meta().phase1_done, ErrorKind::precondition,
            "phase 2 requires a phase-1 checkpoint");
    if (!model.config().use_randomness) {
        // Nothing to fit: the variant has no prior network in the loop.
        model.meta().phase2_done = true;
        return {};
    }
    LossOptions opts;
    opts.lambda = 0;
    opts.include_re = false;
    opts.include_kl = true;
    opts.include_sparse = false;
    auto builder = [&model, opts](GraphCtx<Real>& g, std::size_t, const TrainingExample& ex,
                                  std::uint64_t noise_seed) {
        LossOptions o = opts;
        o.noise_seed = noise_seed;
        return build_step_losses(model, g, ex, o);
    };
    PhaseResult r = run_training_loop(model, segmented, cfg, hooks, 2, phase2_mask(model), builder);
    model.meta().phase2_done = true;
    model.meta().phase_in_progress = 0;
    return r;
}

namespace {

// Shallow banks along the inference chain (prior means, deterministic). The
// result is what the NAR speaker will actually see at decode time.
std::vector<MatR> inference_banks(const Model& model, const TrainingExample& ex) {
    MatR h = model.understand(ex.question_tokens);
    NeuronState state = model.init_neurons();
    std::vector<MatR> banks;
    for (int k = 0; k < model.config().steps; ++k) {
        RandomDraw draw;
        if (model.config().use_randomness) {
            GaussianParams prior = model.predict_prior(state, h);
            draw = Model::sample_randomness(prior, 0, /*deterministic=*/true);
        }
        state = model.think(state, h, draw);
        banks.push_back(state.shallow);
    }
    return banks;
}

}  // namespace

PhaseResult train_nar(Model& model, const std::vector<TrainingExample>& segmented,
                      const TrainConfig& cfg, const TrainHooks& hooks) {
    require(model.meta().phase1_done, ErrorKind::precondition,
            "NAR training requires a phase-1 checkpoint");
    require(!model.config().use_randomness || model.meta().phase2_done, ErrorKind::precondition,
            "NAR training requires the trained prior (phase 2)");
    const int K = model.config().steps;

    // The thinking path is frozen, so the banks can be computed once.
    std::size_t bank_bytes = segmented.size() * static_cast<std::size_t>(K) *
                             static_cast<std::size_t>(model.config().shallow_neurons) *
                             static_cast<std::size_t>(model.config().d) * sizeof(Real);
    const bool cache_banks = bank_bytes <= (512ull << 20);
    std::vector<std::vector<MatR>> cache;
    if (cache_banks) {
        cache.resize(segmented.size());
        parallel_for(segmented.size(), cfg.threads,
                     [&](std::size_t i, int) { cache[i] = inference_banks(model, segmented[i]); });
    }

    auto builder = [&, K](GraphCtx<Real>& g, std::size_t idx, const TrainingExample& ex,
                          std::uint64_t) {
        std::vector<MatR> banks = cache_banks ? cache[idx] : inference_banks(model, ex);
        StepLossGraph out;
        out.breakdown.re.assign(static_cast<std::size_t>(K), 0);
        out.breakdown.kl.assign(static_cast<std::size_t>(K), 0);
        out.breakdown.sparse.assign(static_cast<std::size_t>(K), 0);
        ad::Var<Real> total;
        bool has_total = false;
        for (int k = 0; k < K; ++k) {
            const auto& y = ex.step_tokens[static_cast<std::size_t>(k)];
            require(static_cast<int>(y.size()) < kNarLength, ErrorKind::invalid_argument,
                    "step longer than the NAR budget");
            std::vector<int> targets = y;
            targets.push_back(Vocabulary::EOS);
            targets.resize(kNarLength, Vocabulary::PAD);
            ad::Var<Real> logits = model.fw_nar_logits(g, g.tape.constant(banks[static_cast<std::size_t>(k)]));
            ad::Var<Real> nll = ad::cross_entropy_rows(logits, targets);
            out.breakdown.re[static_cast<std::size_t>(k)] = -g.tape.val(nll)(0, 0);
            StepTrace trace;
            trace.log_lik = out.breakdown.re[static_cast<std::size_t>(k)];
            const MatR& z = g.tape.val(logits);
            trace.total_tokens = kNarLength;
            for (Eigen::Index row = 0; row < z.rows(); ++row) {
                int arg = 0;
                z.row(row).maxCoeff(&arg);
                if (arg == targets[static_cast<std::size_t>(row)]) ++trace.correct_tokens;
            }
            out.traces.push_back(trace);
            total = has_total ? ad::add(total, nll) : nll;
            has_total = true;
        }
        out.total = total;
        out.breakdown.total = g.tape.val(total)(0, 0);
        return out;
    };
    PhaseResult r = run_training_loop(model, segmented, cfg, hooks, 3, nar_mask(model), builder);
    model.meta().nar_done = true;
    model.meta().phase_in_progress = 0;
    return r;
}

// --- gradient checking -----------------------------------------------------

GradCheckReport gradient_check(const std::function<Real()>& loss_fn, ParamStore<Real>& params,
                               const std::vector<GradCoord>& coords, Real eps) {
    require(eps >= 1e-5 && eps <= 1e-2, ErrorKind::invalid_argument,
            "gradient check eps must lie in [1e-5, 1e-2]");
    GradCheckReport report;
    for (const auto& c : coords) {
        Param<Real>& p = params.at(c.param_id);
        Real saved = p.value(c.row, c.col);
        p.value(c.row, c.col) = saved + eps;
        Real up = loss_fn();
        p.value(c.row, c.col) = saved - eps;
        Real dn = loss_fn();
        p.value(c.row, c.col) = saved;
        require(std::isfinite(up) && std::isfinite(dn), ErrorKind::numeric,
                "non-finite loss during gradient check");
        Real numeric = (up - dn) / (2 * eps);
        Real analytic = p.grad.size() == 0 ? 0 : p.grad(c.row, c.col);
        Real mag = std::max(std::abs(analytic), std::abs(numeric));
        Real rel = mag >= 1e-6 ? std::abs(analytic - numeric) / mag : std::abs(analytic - numeric);
        if (rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_param = p.name;
        }
        ++report.coords;
    }
    return report;
}

GradCheckReport gradient_check_model(Model& model, const TrainingExample& segmented,
                                     const LossOptions& opts_in, Real eps, int min_coords,
                                     std::uint64_t coord_seed) {
    LossOptions opts = opts_in;
    opts.deterministic_noise = true;  // loss must be a fixed function of parameters

    std::vector<char> mask = full_mask(model);
    auto loss_fn = [&]() {
        ad::Tape<Real> tape;
        tape.recording = false;
        GraphCtx<Real> g(tape);
        return build_step_losses(model, g, segmented, opts).breakdown.total;
    };

    // Analytic pass.
    for (auto& p : model.params()) p.zero_grad();
    {
        ad::Tape<Real> tape;
        GraphCtx<Real> g(tape, &mask);
        StepLossGraph slg = build_step_losses(model, g, segmented, opts);
        tape.backward(slg.total);
        tape.for_each_param_grad(
            [&](int id, const MatR& gm) { model.params().at(id).grad += gm; });
    }

    // Coordinates spanning every sub-network group.
    Rng rng(derive_seed(coord_seed, 0xC0D));
    std::vector<GradCoord> coords;
    std::vector<std::string> groups;
    for (const auto& prefix : Model::submodule_prefixes()) {
        if (prefix == "nar_speaker.") continue;  // not part of this loss
        for (const auto& p : model.params()) {
            if (p.name.rfind(prefix, 0) == 0 && p.value.size() > 0) {
                groups.push_back(prefix);
                break;
            }
        }
    }
    require(!groups.empty(), ErrorKind::invalid_argument, "model exposes no parameters");
    int per_group =
        (min_coords + static_cast<int>(groups.size()) - 1) / static_cast<int>(groups.size());
    for (const auto& prefix : groups) {
        std::vector<int> ids;
        for (const auto& p : model.params())
            if (p.name.rfind(prefix, 0) == 0 && p.value.size() > 0) ids.push_back(p.id);
        for (int i = 0; i < per_group; ++i) {
            const Param<Real>& p = model.params().at(ids[rng.below(ids.size())]);
            GradCoord c;
            c.param_id = p.id;
            c.row = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(p.value.rows())));
            c.col = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(p.value.cols())));
            coords.push_back(c);
        }
    }
    return gradient_check(loss_fn, model.params(), coords, eps);
}

}  // namespace marcos
