#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "marcos/rng.hpp"
#include "marcos/train.hpp"

using namespace marcos;

namespace {

ModelConfig tiny_config() {
    Vocabulary v;
    ModelConfig cfg = test_profile(v.size());
    cfg.init_seed = 21;
    return cfg;
}

std::vector<TrainingExample> tiny_corpus(int n, int steps, CorpusStyle style, int k,
                                         long long max_operand = 20) {
    Vocabulary vocab;
    CorpusSpec spec;
    spec.n_train = n;
    spec.min_steps = steps;
    spec.max_steps = steps;
    spec.style = style;
    spec.seed = 77;
    spec.max_operand = max_operand;
    auto c = generate_corpus(spec, vocab);
    return segment_corpus(c.train, k, vocab);
}

// Monte Carlo estimate of KL(p || q) = E_p[log p - log q] for one entry.
double mc_kl(double mp, double sp, double mq, double sq, int n, std::uint64_t seed) {
    Rng rng(seed);
    double acc = 0;
    for (int i = 0; i < n; ++i) {
        double x = mp + sp * rng.gauss();
        double lp = -0.5 * std::pow((x - mp) / sp, 2) - std::log(sp);
        double lq = -0.5 * std::pow((x - mq) / sq, 2) - std::log(sq);
        acc += lp - lq;
    }
    return acc / n;
}

GaussianParams single(double mean, double stddev, GaussianParams::Source src) {
    GaussianParams p;
    p.mean = MatR::Constant(1, 1, mean);
    p.stddev = MatR::Constant(1, 1, stddev);
    p.source = src;
    return p;
}

}  // namespace

TEST_CASE("kl_gaussian closed form matches hand values and Monte Carlo") {
    using Src = GaussianParams::Source;
    CHECK(kl_gaussian(single(1, 1, Src::prior), single(1, 1, Src::posterior)) == 0.0);
    CHECK(kl_gaussian(single(1, 1, Src::prior), single(0, 1, Src::posterior)) == doctest::Approx(0.5).epsilon(1e-12));
    // ln(1/2) + 4/2 - 1/2
    double expect = std::log(0.5) + 2.0 - 0.5;
    CHECK(expect == doctest::Approx(0.8068528194400547).epsilon(1e-12));
    CHECK(kl_gaussian(single(0, 2, Src::prior), single(0, 1, Src::posterior)) ==
          doctest::Approx(expect).epsilon(1e-12));
    CHECK(mc_kl(0, 2, 0, 1, 400000, 5) == doctest::Approx(expect).epsilon(0.02));

    GaussianParams bad = single(0, 0, Src::prior);
    CHECK_THROWS_AS(kl_gaussian(bad, single(0, 1, Src::posterior)), Error);

    GaussianParams wide = single(0, 1, Src::prior);
    wide.mean = MatR::Zero(2, 2);
    wide.stddev = MatR::Ones(2, 2);
    CHECK_THROWS_AS(kl_gaussian(wide, single(0, 1, Src::posterior)), Error);
}

TEST_CASE("step_losses: decomposition, determinism, and gating") {
    Model model(tiny_config());
    auto corpus = tiny_corpus(4, 2, CorpusStyle::equation, model.config().steps);

    LossOptions opts;
    opts.lambda = 1e-3;
    auto [b1, traces1] = step_losses(model, corpus[0], 42, opts);
    auto [b2, traces2] = step_losses(model, corpus[0], 42, opts);

    CHECK(b1.total == b2.total);  // bitwise reproducible
    CHECK(b1.total == b1.recomputed_total());
    CHECK(static_cast<int>(traces1.size()) == model.config().steps);
    for (std::size_t k = 0; k < b1.kl.size(); ++k) {
        CHECK(b1.kl[k] >= 0.0);
        CHECK(b1.sparse[k] >= 0.0);
        CHECK(b1.re[k] <= 0.0);
    }

    // KL of a distribution against itself vanishes.
    CHECK(kl_gaussian(traces1[0].posterior, traces1[0].posterior) == 0.0);

    // lambda = 0, KL off: total reduces to the summed NLL.
    LossOptions p1;
    p1.lambda = 0;
    p1.include_kl = false;
    auto [bp, tp] = step_losses(model, corpus[0], 42, p1);
    Real nll_sum = 0;
    for (std::size_t k = 0; k < bp.re.size(); ++k) nll_sum += -bp.re[k] + 0.0 * bp.sparse[k];
    CHECK(bp.total == nll_sum);

    // Deterministic noise: the drawn value equals the posterior mean.
    LossOptions det;
    det.deterministic_noise = true;
    auto [bd, td] = step_losses(model, corpus[0], 1, det);
    CHECK((td[0].draw.value - td[0].posterior.mean).cwiseAbs().maxCoeff() == 0.0);
    CHECK(td[0].draw.noise.cwiseAbs().maxCoeff() == 0.0);

    // Wrong segmentation count is rejected.
    TrainingExample wrong = corpus[0];
    wrong.step_tokens.pop_back();
    wrong.step_texts.pop_back();
    CHECK_THROWS_AS(step_losses(model, wrong, 0, opts), Error);
}

TEST_CASE("reparameterized draws keep the identity inside the loss graph") {
    Model model(tiny_config());
    auto corpus = tiny_corpus(1, 2, CorpusStyle::text, model.config().steps);
    LossOptions opts;
    auto [b, traces] = step_losses(model, corpus[0], 9, opts);
    for (const auto& tr : traces) {
        MatR recon = tr.posterior.mean + tr.posterior.stddev.cwiseProduct(tr.draw.noise);
        CHECK((tr.draw.value - recon).cwiseAbs().maxCoeff() == 0.0);
        CHECK((tr.posterior.stddev.array() >= std::exp(-5.0) - 1e-15).all());
        CHECK((tr.posterior.stddev.array() <= std::exp(2.0) + 1e-15).all());
    }
}

TEST_CASE("gradient flow reaches every phase-1 sub-network after one step") {
    Model model(tiny_config());
    auto corpus = tiny_corpus(1, 2, CorpusStyle::equation, model.config().steps);
    LossOptions opts;
    opts.lambda = 1e-3;
    opts.include_kl = false;
    opts.noise_seed = 3;

    std::vector<char> mask = phase1_mask(model);
    ad::Tape<Real> tape;
    GraphCtx<Real> g(tape, &mask);
    StepLossGraph slg = build_step_losses(model, g, corpus[0], opts);
    tape.backward(slg.total);

    std::vector<Real> by_param(model.params().size(), 0);
    tape.for_each_param_grad([&](int id, const MatR& gm) {
        by_param[static_cast<std::size_t>(id)] += gm.cwiseAbs().sum();
    });

    auto group_grad = [&](const std::string& prefix) {
        Real acc = 0;
        for (const auto& p : model.params())
            if (p.name.rfind(prefix, 0) == 0) acc += by_param[static_cast<std::size_t>(p.id)];
        return acc;
    };
    CHECK(group_grad("understander.") > 0);
    CHECK(group_grad("thinker.") > 0);
    CHECK(group_grad("speaker.") > 0);
    CHECK(group_grad("posterior.") > 0);
    CHECK(group_grad("neurons0.") > 0);
    CHECK(group_grad("prior.") == 0);      // not in the phase-1 graph
    CHECK(group_grad("nar_speaker.") == 0);
}

TEST_CASE("gradient_check: quadratic probe and zero-loss region") {
    ParamStore<Real> ps(1);
    Param<Real>* p = ps.add("theta", 3, 3, Init::normal, 1.0);
    auto loss = [&]() { return 0.5 * p->value.squaredNorm(); };
    p->grad = p->value;  // analytic gradient of ||theta||^2/2
    std::vector<GradCoord> coords;
    for (Eigen::Index r = 0; r < 3; ++r)
        for (Eigen::Index c = 0; c < 3; ++c) coords.push_back({p->id, r, c});
    GradCheckReport rep = gradient_check(loss, ps, coords, 1e-4);
    CHECK(rep.coords == 9);
    CHECK(rep.max_rel_error < 1e-6);

    // Constant loss: both sides vanish.
    auto zero_loss = [&]() { return 0.0; };
    p->zero_grad();
    GradCheckReport zrep = gradient_check(zero_loss, ps, coords, 1e-4);
    CHECK(zrep.max_rel_error == 0.0);
}

TEST_CASE("full-loss gradients match finite differences on the test profile") {
    Model model(tiny_config());
    auto corpus = tiny_corpus(1, 2, CorpusStyle::equation, model.config().steps);
    LossOptions opts;
    opts.lambda = 1e-3;
    GradCheckReport rep = gradient_check_model(model, corpus[0], opts, 1e-4, 60, 123);
    CHECK(rep.coords >= 60);
    CAPTURE(rep.worst_param);
    CHECK(rep.max_rel_error < 1e-3);
}

TEST_CASE("phase freezing and two-run determinism") {
    auto corpus_run = [](std::uint64_t seed, Real lambda, std::uint64_t* hash_out,
                         Real* abs_r_out) {
        ModelConfig mc = tiny_config();
        Model model(mc);
        auto corpus = tiny_corpus(8, 2, CorpusStyle::equation, mc.steps);
        TrainConfig tc;
        tc.lr = 3e-4;
        tc.batch = 8;
        tc.epochs = 2;
        tc.lambda = lambda;
        tc.seed = seed;
        tc.threads = 2;
        tc.warmup_iters = 0;
        PhaseResult r = train_phase1(model, corpus, tc);
        *hash_out = model.params().value_hash();
        *abs_r_out = r.mean_abs_r;
    };
    std::uint64_t h1 = 0, h2 = 0;
    Real r1 = 0, r2 = 0;
    corpus_run(5, 1e-3, &h1, &r1);
    corpus_run(5, 1e-3, &h2, &r2);
    CHECK(h1 == h2);  // identical corpus+config+seed -> identical parameters
    CHECK(r1 == r2);
}

TEST_CASE("phase 1 leaves the prior untouched; phase 2 trains only the prior") {
    ModelConfig mc = tiny_config();
    Model model(mc);
    auto corpus = tiny_corpus(8, 2, CorpusStyle::equation, mc.steps);
    TrainConfig tc;
    tc.lr = 3e-4;
    tc.batch = 8;
    tc.epochs = 2;
    tc.seed = 3;
    tc.threads = 1;
    tc.warmup_iters = 0;

    auto snapshot = [&](const std::string& prefix) {
        std::vector<MatR> vals;
        for (const auto& p : model.params())
            if (p.name.rfind(prefix, 0) == 0) vals.push_back(p.value);
        return vals;
    };
    auto equal = [](const std::vector<MatR>& a, const std::vector<MatR>& b) {
        if (a.size() != b.size()) return false;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a[i].rows() != b[i].rows() || (a[i] - b[i]).cwiseAbs().maxCoeff() != 0.0) return false;
        return true;
    };

    auto g_before = snapshot("prior.");
    auto nar_before = snapshot("nar_speaker.");
    train_phase1(model, corpus, tc);
    CHECK(equal(g_before, snapshot("prior.")));
    CHECK(equal(nar_before, snapshot("nar_speaker.")));

    auto understander_before = snapshot("understander.");
    auto speaker_before = snapshot("speaker.");
    auto posterior_before = snapshot("posterior.");
    auto thinker_before = snapshot("thinker.");
    auto neurons_before = snapshot("neurons0.");
    tc.phase = 2;
    PhaseResult p2 = train_phase2(model, corpus, tc);
    CHECK(equal(understander_before, snapshot("understander.")));
    CHECK(equal(speaker_before, snapshot("speaker.")));
    CHECK(equal(posterior_before, snapshot("posterior.")));
    CHECK(equal(thinker_before, snapshot("thinker.")));
    CHECK(equal(neurons_before, snapshot("neurons0.")));
    CHECK_FALSE(equal(g_before, snapshot("prior.")));
    for (const auto& row : p2.curve) CHECK(row.kl >= 0.0);
}

TEST_CASE("phase 2 without phase 1 is a precondition error") {
    Model model(tiny_config());
    auto corpus = tiny_corpus(2, 2, CorpusStyle::equation, model.config().steps);
    TrainConfig tc;
    tc.epochs = 1;
    CHECK_THROWS_AS(train_phase2(model, corpus, tc), Error);
}

TEST_CASE("sparsity pressure lowers the drawn magnitudes on paired seeds") {
    auto run = [](Real lambda) {
        ModelConfig mc = tiny_config();
        Model model(mc);
        auto corpus = tiny_corpus(8, 2, CorpusStyle::text, mc.steps);
        TrainConfig tc;
        tc.lr = 1e-3;
        tc.batch = 8;
        tc.epochs = 12;
        tc.lambda = lambda;
        tc.seed = 9;
        tc.threads = 2;
        tc.warmup_iters = 0;
        return train_phase1(model, corpus, tc).mean_abs_r;
    };
    Real with_l1 = run(0.1);
    Real without = run(0.0);
    CHECK(with_l1 < without);
}

TEST_CASE("non-finite loss aborts with a diagnostic snapshot") {
    ModelConfig mc = tiny_config();
    Model model(mc);
    // Poison one parameter so the forward pass explodes.
    model.params().find("speaker.head.w")->value.setConstant(1e308);
    auto corpus = tiny_corpus(2, 1, CorpusStyle::equation, mc.steps);
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch = 2;
    TrainHooks hooks;
    hooks.diagnostic_path = "test_train_diag.json";
    CHECK_THROWS_AS(train_phase1(model, corpus, tc, hooks), Error);
    std::ifstream f(hooks.diagnostic_path);
    CHECK(f.good());
    std::remove(hooks.diagnostic_path.c_str());
}
