#include <doctest.h>

#include <cstdio>

#include "marcos/analysis.hpp"
#include "marcos/checkpoint.hpp"
#include "marcos/rng.hpp"

using namespace marcos;

namespace {

ActivationRecord make_record(const std::vector<Real>& values, bool fraction = false) {
    ActivationRecord r;
    r.values = Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
    r.style.name = "text";
    r.style.fraction = fraction;
    return r;
}

std::unique_ptr<Model> trained_flags_model() {
    Vocabulary v;
    ModelConfig cfg = test_profile(v.size());
    cfg.init_seed = 77;
    auto m = std::make_unique<Model>(cfg);
    m->meta().phase1_done = true;
    m->meta().phase2_done = true;
    return m;
}

}  // namespace

TEST_CASE("activation threshold is strictly greater-than") {
    std::vector<ActivationRecord> records = {make_record({0.0, 0.1, 0.2, -0.2}),
                                             make_record({0.0, -0.1, 0.0, 0.0})};
    auto counts = activation_frequency(records, 0.1);
    CHECK(counts[0] == 0);
    CHECK(counts[1] == 0);  // exactly 0.1 never counts, either sign
    CHECK(counts[2] == 1);
    CHECK(counts[3] == 1);

    std::vector<ActivationRecord> zeros = {make_record({0, 0, 0}), make_record({0, 0, 0})};
    auto zc = activation_frequency(zeros, 0.1);
    CHECK(zc == std::vector<long>{0, 0, 0});

    std::vector<ActivationRecord> one = {make_record({0.0, 0.0, 0.0, 0.2})};
    auto oc = activation_frequency(one, 0.1);
    CHECK(oc == std::vector<long>{0, 0, 0, 1});
}

TEST_CASE("frequency counts conserve the record-wise activation total") {
    Rng rng(5);
    std::vector<ActivationRecord> records;
    long direct = 0;
    for (int i = 0; i < 50; ++i) {
        std::vector<Real> vals(32);
        for (auto& v : vals) {
            v = rng.gauss() * 0.15;
            if (std::abs(v) > 0.1) ++direct;
        }
        records.push_back(make_record(vals));
    }
    auto counts = activation_frequency(records, 0.1);
    long folded = 0;
    for (long c : counts) folded += c;
    CHECK(folded == direct);
}

TEST_CASE("correlation graph: duplicated and negated columns, symmetry") {
    Rng rng(8);
    std::vector<ActivationRecord> records;
    for (int i = 0; i < 200; ++i) {
        Real base = rng.gauss();
        Real other = rng.gauss();
        // dims: 0 = base, 1 = duplicate, 2 = negated, 3 = independent
        records.push_back(make_record({base, base, -base, other}));
    }
    CorrelationGraph g = correlation_graph(records, 1.0, 0.9);
    REQUIRE(g.dims.size() == 4);
    // Symmetric with unit diagonal.
    for (Eigen::Index i = 0; i < g.corr.rows(); ++i) {
        CHECK(g.corr(i, i) == doctest::Approx(1.0));
        for (Eigen::Index j = 0; j < g.corr.cols(); ++j)
            CHECK(g.corr(i, j) == doctest::Approx(g.corr(j, i)));
    }
    CHECK(g.corr(0, 1) == doctest::Approx(1.0));
    CHECK(g.corr(0, 2) == doctest::Approx(-1.0));
    bool dup_edge = false, neg_edge = false;
    for (auto [a, b] : g.edges) {
        if (a == 0 && b == 1) dup_edge = true;
        if (a == 0 && b == 2) neg_edge = true;
    }
    CHECK(dup_edge);
    CHECK_FALSE(neg_edge);  // threshold applies to signed r

    bool has_01_clique = false;
    for (const auto& cl : g.cliques)
        if (cl == std::vector<int>{0, 1}) has_01_clique = true;
    CHECK(has_01_clique);
}

TEST_CASE("constant dimensions are excluded and listed") {
    Rng rng(9);
    std::vector<ActivationRecord> records;
    for (int i = 0; i < 50; ++i) records.push_back(make_record({rng.gauss(), 3.0, rng.gauss()}));
    CorrelationGraph g = correlation_graph(records, 1.0, 0.9);
    CHECK(g.excluded_constant == std::vector<int>{1});
    CHECK(g.dims == std::vector<int>{0, 2});
}

TEST_CASE("independent columns produce no spurious 0.9 edges (Monte Carlo null)") {
    // With n = 1000 samples, P(|r| > 0.9) for independent Gaussians is
    // astronomically small; across 45 pairs the union bound stays ~0.
    Rng rng(10);
    std::vector<ActivationRecord> records;
    for (int i = 0; i < 1000; ++i) {
        std::vector<Real> vals(10);
        for (auto& v : vals) v = rng.gauss();
        records.push_back(make_record(vals));
    }
    CorrelationGraph g = correlation_graph(records, 1.0, 0.9);
    CHECK(g.edges.empty());
}

TEST_CASE("histogram MI: analytic cases and the shuffled-label null") {
    Rng rng(11);
    const int n = 4000;
    std::vector<Real> dependent(n), independent(n);
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) {
        labels[i] = rng.bernoulli(0.5) ? 1 : 0;
        dependent[i] = labels[i] == 1 ? 2.0 : -1.0;  // deterministic function of the factor
        independent[i] = rng.gauss();
    }
    // Deterministic binary function: MI equals the label entropy.
    Real p1 = 0;
    for (int l : labels) p1 += l;
    p1 /= n;
    Real entropy = -(p1 * std::log(p1) + (1 - p1) * std::log(1 - p1));
    CHECK(histogram_mi(dependent, labels) == doctest::Approx(entropy).epsilon(1e-9));

    // Independent series: MI within the shuffled-label null band.
    Real mi_indep = histogram_mi(independent, labels);
    std::vector<Real> null_mis;
    std::vector<int> shuffled = labels;
    for (int rep = 0; rep < 50; ++rep) {
        rng.shuffle(shuffled.begin(), shuffled.end());
        null_mis.push_back(histogram_mi(independent, shuffled));
    }
    std::sort(null_mis.begin(), null_mis.end());
    Real null95 = null_mis[47];
    CHECK(mi_indep < null95 + 0.01);
}

TEST_CASE("style attribution finds a factor-coded dimension") {
    Rng rng(12);
    std::vector<ActivationRecord> records;
    for (int i = 0; i < 500; ++i) {
        bool fraction = rng.bernoulli(0.5);
        std::vector<Real> vals(8);
        for (auto& v : vals) v = rng.gauss() * 0.1;
        vals[5] = fraction ? 0.8 : -0.2;  // dimension 5 encodes the factor
        records.push_back(make_record(vals, fraction));
    }
    StyleAttribution attr = style_attribution(records);
    CHECK(attr.top_dim("fraction") == 5);
    CHECK(attr.mi(5, 2) > attr.mi(0, 2) + 0.1);
}

TEST_CASE("rendering classifier separates fractions from decimals") {
    CHECK(classify_rendering("to get 38/2 apples.") == NumberRendering::fraction);
    CHECK(classify_rendering("to get 19.0.") == NumberRendering::decimal);
    CHECK(classify_rendering("#### 35") == NumberRendering::unknown);
}

TEST_CASE("collect_activations is deterministic and read-only") {
    auto model = trained_flags_model();
    Vocabulary vocab;
    CorpusSpec spec;
    spec.n_train = 6;
    spec.min_steps = 1;
    spec.max_steps = 2;
    spec.seed = 1000;
    spec.style = CorpusStyle::text;
    auto corpus = generate_corpus(spec, vocab);
    auto segmented = segment_corpus(corpus.train, model->config().steps, vocab);

    const std::string ckpt = "test_analysis_ckpt.bin";
    model->save(ckpt);
    std::uint64_t hash_before = file_hash(ckpt);

    auto r1 = collect_activations(*model, segmented);
    auto r2 = collect_activations(*model, segmented);
    REQUIRE(r1.size() == segmented.size() * static_cast<std::size_t>(model->config().steps));
    bool identical = true;
    for (std::size_t i = 0; i < r1.size(); ++i)
        identical = identical && (r1[i].values - r2[i].values).cwiseAbs().maxCoeff() == 0.0;
    CHECK(identical);

    model->save(ckpt);
    CHECK(file_hash(ckpt) == hash_before);  // parameters untouched
    std::remove(ckpt.c_str());
}

TEST_CASE("empty intervention is a bitwise no-op on outputs") {
    auto model = trained_flags_model();
    Vocabulary vocab;
    CorpusSpec spec;
    spec.n_train = 4;
    spec.min_steps = 1;
    spec.max_steps = 2;
    spec.seed = 1100;
    auto corpus = generate_corpus(spec, vocab).train;

    InterveneOptions io;
    io.max_tokens = 16;
    InterventionReport rep = intervene(*model, corpus, InterventionSpec{{}, 0.5}, io);
    CHECK(rep.identical_to_baseline);
    CHECK(rep.mean_length_delta_pct == 0.0);
    CHECK(rep.format_rate == rep.baseline_format_rate);
    CHECK(rep.accuracy == rep.baseline_accuracy);
}
