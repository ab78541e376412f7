#include "marcos/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "marcos/rng.hpp"

namespace marcos {

std::vector<ActivationRecord> collect_activations(const Model& model,
                                                  const std::vector<TrainingExample>& segmented,
                                                  const CollectOptions& opts) {
    require(model.config().use_randomness, ErrorKind::precondition,
            "activation collection needs the randomness pathway");
    const ModelConfig& cfg = model.config();
    std::vector<ActivationRecord> records(segmented.size() * static_cast<std::size_t>(cfg.steps));
    parallel_for(segmented.size(), opts.threads, [&](std::size_t i, int) {
        const TrainingExample& ex = segmented[i];
        MatR h = model.understand(ex.question_tokens);
        NeuronState state = model.init_neurons();
        for (int k = 0; k < cfg.steps; ++k) {
            GaussianParams post = model.encode_posterior(ex.step_tokens[static_cast<std::size_t>(k)]);
            RandomDraw draw = Model::sample_randomness(
                post, derive_seed(opts.seed, i, static_cast<std::uint64_t>(k)), !opts.sampled);
            state = model.think(state, h, draw);
            ActivationRecord& rec = records[i * static_cast<std::size_t>(cfg.steps) +
                                            static_cast<std::size_t>(k)];
            rec.example = static_cast<int>(i);
            rec.step = k;
            rec.style = ex.style;
            rec.values.resize(draw.value.size());
            for (Eigen::Index r = 0; r < draw.value.rows(); ++r)
                for (Eigen::Index c = 0; c < draw.value.cols(); ++c)
                    rec.values(r * draw.value.cols() + c) = draw.value(r, c);
        }
    });
    return records;
}

std::vector<long> activation_frequency(const std::vector<ActivationRecord>& records,
                                       Real threshold) {
    require(!records.empty(), ErrorKind::invalid_argument, "no activation records");
    std::vector<long> counts(static_cast<std::size_t>(records[0].values.size()), 0);
    for (const auto& rec : records) {
        require(static_cast<std::size_t>(rec.values.size()) == counts.size(),
                ErrorKind::invalid_argument, "inconsistent record width");
        for (Eigen::Index i = 0; i < rec.values.size(); ++i)
            if (std::abs(rec.values(i)) > threshold) ++counts[static_cast<std::size_t>(i)];
    }
    return counts;
}

namespace {

// Bron-Kerbosch with pivoting over an adjacency matrix; the graphs here hold
// at most a few dozen nodes.
void bron_kerbosch(const std::vector<std::vector<char>>& adj, std::vector<int>& r,
                   std::vector<int> p, std::vector<int> x,
                   std::vector<std::vector<int>>& out) {
    if (p.empty() && x.empty()) {
        out.push_back(r);
        return;
    }
    int pivot = -1;
    std::size_t best = 0;
    for (int v : p) {
        std::size_t deg = 0;
        for (int u : p)
            if (adj[static_cast<std::size_t>(v)][static_cast<std::size_t>(u)]) ++deg;
        if (pivot < 0 || deg > best) {
            pivot = v;
            best = deg;
        }
    }
    std::vector<int> candidates;
    for (int v : p)
        if (pivot < 0 || !adj[static_cast<std::size_t>(pivot)][static_cast<std::size_t>(v)])
            candidates.push_back(v);
    for (int v : candidates) {
        std::vector<int> np, nx;
        for (int u : p)
            if (adj[static_cast<std::size_t>(v)][static_cast<std::size_t>(u)]) np.push_back(u);
        for (int u : x)
            if (adj[static_cast<std::size_t>(v)][static_cast<std::size_t>(u)]) nx.push_back(u);
        r.push_back(v);
        bron_kerbosch(adj, r, np, nx, out);
        r.pop_back();
        p.erase(std::find(p.begin(), p.end(), v));
        x.push_back(v);
    }
}

}  // namespace

CorrelationGraph correlation_graph(const std::vector<ActivationRecord>& records,
                                   Real top_fraction, Real edge_threshold) {
    require(records.size() >= 2, ErrorKind::invalid_argument,
            "correlation needs at least two records");
    std::vector<long> counts = activation_frequency(records);
    const std::size_t n_dims = counts.size();
    const std::size_t n_rec = records.size();

    // Top fraction by activation count, ties broken by dimension index.
    std::size_t keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(top_fraction * static_cast<Real>(n_dims))));
    std::vector<int> idx(n_dims);
    for (std::size_t i = 0; i < n_dims; ++i) idx[i] = static_cast<int>(i);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return counts[static_cast<std::size_t>(a)] > counts[static_cast<std::size_t>(b)];
    });
    idx.resize(keep);
    std::sort(idx.begin(), idx.end());

    CorrelationGraph out;
    // Split off constant series: correlation is undefined for them.
    std::vector<int> live;
    for (int dim : idx) {
        Real mean = 0;
        for (const auto& rec : records) mean += rec.values(dim);
        mean /= static_cast<Real>(n_rec);
        Real var = 0;
        for (const auto& rec : records) var += (rec.values(dim) - mean) * (rec.values(dim) - mean);
        if (var == 0)
            out.excluded_constant.push_back(dim);
        else
            live.push_back(dim);
    }
    out.dims = live;

    const std::size_t m = live.size();
    out.corr = MatR::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
    MatR series(static_cast<Eigen::Index>(n_rec), static_cast<Eigen::Index>(m));
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < n_rec; ++i)
            series(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                records[i].values(live[j]);
    Eigen::RowVectorXd mean = series.colwise().mean();
    MatR centered = series.rowwise() - mean;
    Eigen::RowVectorXd norms = centered.colwise().norm();
    for (std::size_t a = 0; a < m; ++a) {
        out.corr(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(a)) = 1.0;
        for (std::size_t b = a + 1; b < m; ++b) {
            Real r = centered.col(static_cast<Eigen::Index>(a))
                         .dot(centered.col(static_cast<Eigen::Index>(b))) /
                     (norms(static_cast<Eigen::Index>(a)) * norms(static_cast<Eigen::Index>(b)));
            out.corr(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = r;
            out.corr(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) = r;
        }
    }

    std::vector<std::vector<char>> adj(m, std::vector<char>(m, 0));
    for (std::size_t a = 0; a < m; ++a) {
        for (std::size_t b = a + 1; b < m; ++b) {
            if (out.corr(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) >
                edge_threshold) {
                adj[a][b] = adj[b][a] = 1;
                out.edges.emplace_back(live[a], live[b]);
            }
        }
    }

    std::vector<int> r, p, x;
    for (std::size_t i = 0; i < m; ++i) p.push_back(static_cast<int>(i));
    std::vector<std::vector<int>> cliques_local;
    bron_kerbosch(adj, r, p, x, cliques_local);
    for (auto& cl : cliques_local) {
        if (cl.size() < 2) continue;  // singletons are not informative
        std::vector<int> named;
        for (int v : cl) named.push_back(live[static_cast<std::size_t>(v)]);
        std::sort(named.begin(), named.end());
        out.cliques.push_back(std::move(named));
    }
    std::sort(out.cliques.begin(), out.cliques.end(),
              [](const auto& a, const auto& b) { return a.size() > b.size(); });
    return out;
}

NumberRendering classify_rendering(const std::string& text) {
    auto digit = [](char c) { return c >= '0' && c <= '9'; };
    for (std::size_t i = 0; i + 2 < text.size(); ++i) {
        if (digit(text[i]) && text[i + 1] == '/' && digit(text[i + 2]))
            return NumberRendering::fraction;
    }
    for (std::size_t i = 0; i + 2 < text.size(); ++i) {
        if (digit(text[i]) && text[i + 1] == '.' && digit(text[i + 2]))
            return NumberRendering::decimal;
    }
    return NumberRendering::unknown;
}

namespace {

struct RunStats {
    std::vector<long> lengths;          // spoken token counts per item
    std::vector<bool> has_marker;
    std::vector<bool> correct;
    std::vector<std::vector<std::string>> spoken;
};

RunStats run_corpus(const Model& model, const std::vector<TrainingExample>& corpus,
                    const std::optional<InterventionSpec>& spec, const InterveneOptions& opts) {
    RunStats stats;
    stats.lengths.resize(corpus.size());
    stats.has_marker.resize(corpus.size());
    stats.correct.resize(corpus.size());
    stats.spoken.resize(corpus.size());
    parallel_for(corpus.size(), opts.threads, [&](std::size_t i, int) {
        SolveOptions so;
        so.mode = SampleMode::mean;
        so.speak = opts.speak;
        so.max_tokens = opts.max_tokens;
        so.intervention = spec;
        Solution sol = solve(model, corpus[i].question, so);
        long len = 0;
        for (const auto& s : sol.spoken)
            len += static_cast<long>(model.vocab().tokenize(s).size());
        stats.lengths[i] = len;
        stats.has_marker[i] =
            !sol.spoken.empty() && sol.spoken.back().find("####") != std::string::npos;
        stats.correct[i] = sol.answer.has_value() && *sol.answer == corpus[i].answer;
        stats.spoken[i] = sol.spoken;
    });
    return stats;
}

}  // namespace

InterventionReport intervene(const Model& model, const std::vector<TrainingExample>& corpus,
                             const InterventionSpec& spec, const InterveneOptions& opts) {
    require(!corpus.empty(), ErrorKind::invalid_argument, "empty corpus");
    InterventionReport rep;
    rep.n = static_cast<int>(corpus.size());

    RunStats base = run_corpus(model, corpus, std::nullopt, opts);
    std::optional<InterventionSpec> maybe;
    if (!spec.dims.empty()) maybe = spec;
    RunStats with = spec.dims.empty() ? base : run_corpus(model, corpus, maybe, opts);

    auto mean_of = [](const std::vector<long>& v) {
        long long acc = 0;
        for (long x : v) acc += x;
        return v.empty() ? 0.0 : static_cast<Real>(acc) / static_cast<Real>(v.size());
    };
    auto rate_of = [](const std::vector<bool>& v) {
        long acc = 0;
        for (bool x : v) acc += x ? 1 : 0;
        return v.empty() ? 0.0 : static_cast<Real>(acc) / static_cast<Real>(v.size());
    };

    rep.baseline_mean_length = mean_of(base.lengths);
    rep.baseline_format_rate = rate_of(base.has_marker);
    rep.baseline_accuracy = rate_of(base.correct);
    Real with_len = mean_of(with.lengths);
    rep.mean_length_delta_pct =
        rep.baseline_mean_length > 0
            ? 100.0 * (with_len - rep.baseline_mean_length) / rep.baseline_mean_length
            : 0.0;
    rep.format_rate = rate_of(with.has_marker);
    rep.accuracy = rate_of(with.correct);
    rep.identical_to_baseline = with.spoken == base.spoken;
    return rep;
}

Real histogram_mi(const std::vector<Real>& values, const std::vector<int>& labels, int bins) {
    require(values.size() == labels.size() && !values.empty(), ErrorKind::invalid_argument,
            "mismatched series");
    require(bins >= 2, ErrorKind::invalid_argument, "need at least two bins");
    Real lo = *std::min_element(values.begin(), values.end());
    Real hi = *std::max_element(values.begin(), values.end());
    if (hi <= lo) return 0.0;  // constant series carries no information
    int n_labels = 1 + *std::max_element(labels.begin(), labels.end());
    require(n_labels >= 1, ErrorKind::invalid_argument, "labels must be non-negative");

    std::vector<std::vector<Real>> joint(static_cast<std::size_t>(bins),
                                         std::vector<Real>(static_cast<std::size_t>(n_labels), 0));
    Real n = static_cast<Real>(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        int b = static_cast<int>((values[i] - lo) / (hi - lo) * bins);
        b = std::clamp(b, 0, bins - 1);
        joint[static_cast<std::size_t>(b)][static_cast<std::size_t>(labels[i])] += 1.0 / n;
    }
    std::vector<Real> pb(static_cast<std::size_t>(bins), 0), pl(static_cast<std::size_t>(n_labels), 0);
    for (int b = 0; b < bins; ++b)
        for (int l = 0; l < n_labels; ++l) {
            pb[static_cast<std::size_t>(b)] += joint[static_cast<std::size_t>(b)][static_cast<std::size_t>(l)];
            pl[static_cast<std::size_t>(l)] += joint[static_cast<std::size_t>(b)][static_cast<std::size_t>(l)];
        }
    Real mi = 0;
    for (int b = 0; b < bins; ++b)
        for (int l = 0; l < n_labels; ++l) {
            Real pxy = joint[static_cast<std::size_t>(b)][static_cast<std::size_t>(l)];
            if (pxy <= 0) continue;
            mi += pxy * std::log(pxy / (pb[static_cast<std::size_t>(b)] *
                                        pl[static_cast<std::size_t>(l)]));
        }
    return std::max<Real>(0, mi);
}

int StyleAttribution::top_dim(const std::string& factor) const {
    for (std::size_t f = 0; f < factors.size(); ++f) {
        if (factors[f] == factor) {
            Eigen::Index best = 0;
            mi.col(static_cast<Eigen::Index>(f)).maxCoeff(&best);
            return static_cast<int>(best);
        }
    }
    fail(ErrorKind::invalid_argument, "unknown style factor: " + factor);
}

StyleAttribution style_attribution(const std::vector<ActivationRecord>& records) {
    require(!records.empty(), ErrorKind::invalid_argument, "no records");
    require(records[0].style.name == "text", ErrorKind::precondition,
            "style attribution needs a text-style corpus with stored latents");
    StyleAttribution out;
    out.factors = {"verbose", "units", "fraction"};
    Eigen::Index dims = records[0].values.size();
    out.mi = MatR::Zero(dims, 3);

    std::vector<std::vector<int>> labels(3, std::vector<int>(records.size()));
    for (std::size_t i = 0; i < records.size(); ++i) {
        labels[0][i] = records[i].style.verbose ? 1 : 0;
        labels[1][i] = records[i].style.units ? 1 : 0;
        labels[2][i] = records[i].style.fraction ? 1 : 0;
    }
    std::vector<Real> series(records.size());
    for (Eigen::Index d = 0; d < dims; ++d) {
        for (std::size_t i = 0; i < records.size(); ++i) series[i] = records[i].values(d);
        for (int f = 0; f < 3; ++f)
            out.mi(d, f) = histogram_mi(series, labels[static_cast<std::size_t>(f)], out.bins);
    }
    return out;
}

}  // namespace marcos
