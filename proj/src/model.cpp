#include "marcos/model.hpp"

#include <algorithm>

#include <json.hpp>

#include "marcos/checkpoint.hpp"
#include "marcos/rng.hpp"

namespace marcos {

using nlohmann::json;

Model::Model(const ModelConfig& cfg) : cfg_(cfg), params_(cfg.init_seed) {
    ModelConfig checked = cfg_;
    if (checked.vocab == 0) checked.vocab = vocab_.size();
    cfg_ = checked;
    require(cfg_.vocab == vocab_.size(), ErrorKind::invalid_argument,
            "config vocab size does not match the fixed vocabulary");
    cfg_.validate();

    const Eigen::Index d = cfg_.d;
    const Eigen::Index mlp_hidden = d * cfg_.mlp_ratio;
    const int L = cfg_.layers, H = cfg_.heads;
    const Eigen::Index V = cfg_.vocab;

    understander_ = nn::SequenceTransformer<Real>::create(
        params_, "understander", V, d, cfg_.max_question_tokens, L, H, mlp_hidden,
        /*causal=*/false, /*cross=*/false);

    posterior_trunk_ = nn::SequenceTransformer<Real>::create(
        params_, "posterior.trunk", V, d, cfg_.max_step_tokens + 2, L, H, mlp_hidden,
        /*causal=*/false, /*cross=*/false);
    f1_ = nn::Linear<Real>::create(params_, "posterior.expand1", d, cfg_.resolved_f_hidden());
    f2_ = nn::Linear<Real>::create(params_, "posterior.expand2", cfg_.resolved_f_hidden(),
                                   2 * static_cast<Eigen::Index>(cfg_.r_dims()));

    for (int l = 0; l < L; ++l)
        thinker_blocks_.push_back(nn::Block<Real>::create(
            params_, "thinker.blocks." + std::to_string(l), d, H, mlp_hidden, /*with_cross=*/true));
    thinker_ln_f_ = nn::LayerNorm<Real>::create(params_, "thinker.ln_f", d);
    seg_deep_ = params_.add("thinker.seg_deep", 1, d, Init::normal);
    seg_shallow_ = params_.add("thinker.seg_shallow", 1, d, Init::normal);
    seg_r_ = params_.add("thinker.seg_r", 1, d, Init::normal);

    neurons0_deep_ = params_.add("neurons0.deep", cfg_.deep_neurons, d, Init::normal);
    neurons0_shallow_ = params_.add("neurons0.shallow", cfg_.shallow_neurons, d, Init::normal);

    speaker_ = nn::SequenceTransformer<Real>::create(
        params_, "speaker", V, d, cfg_.max_step_tokens + 2, L, H, mlp_hidden,
        /*causal=*/true, /*cross=*/true);
    speaker_head_ = nn::Linear<Real>::create(params_, "speaker.head", d, V);

    nar_queries_ = params_.add("nar_speaker.queries", kNarLength, d, Init::normal);
    for (int l = 0; l < L; ++l)
        nar_blocks_.push_back(nn::Block<Real>::create(
            params_, "nar_speaker.blocks." + std::to_string(l), d, H, mlp_hidden, /*with_cross=*/true));
    nar_ln_f_ = nn::LayerNorm<Real>::create(params_, "nar_speaker.ln_f", d);
    nar_head_ = nn::Linear<Real>::create(params_, "nar_speaker.head", d, V);

    g1_ = nn::Linear<Real>::create(params_, "prior.fc1", 3 * d, cfg_.resolved_g_hidden());
    g2_ = nn::Linear<Real>::create(params_, "prior.fc2", cfg_.resolved_g_hidden(),
                                   2 * static_cast<Eigen::Index>(cfg_.r_dims()));
    // Start the density heads near sigma ~= 0.14 so early reparameterized
    // draws stay small relative to the embedding scale.
    auto bias_logstd = [&](nn::Linear<Real>& lin) {
        Eigen::Index rd = cfg_.r_dims();
        lin.b->value.row(0).segment(rd, rd).setConstant(Real(-2));
    };
    bias_logstd(f2_);
    bias_logstd(g2_);
}

const std::vector<std::string>& Model::submodule_prefixes() {
    static const std::vector<std::string> prefixes = {
        "understander.", "thinker.", "speaker.", "posterior.", "prior.", "neurons0.", "nar_speaker."};
    return prefixes;
}

bool Model::param_in(const Param<Real>& p, const std::string& prefix) const {
    return p.name.rfind(prefix, 0) == 0;
}

// --- graph-level passes -----------------------------------------------------

Var<Real> Model::fw_understand(GraphCtx<Real>& g, const std::vector<int>& question_tokens,
                               Eigen::Index pad_to) const {
    require(!question_tokens.empty(), ErrorKind::invalid_argument, "understand: empty question");
    for (int id : question_tokens)
        require(id >= 0 && id < cfg_.vocab, ErrorKind::invalid_argument,
                "understand: token id out of vocabulary");
    std::vector<int> ids = question_tokens;
    Eigen::Index valid = -1;
    if (pad_to > static_cast<Eigen::Index>(ids.size())) {
        valid = static_cast<Eigen::Index>(ids.size());
        ids.resize(static_cast<std::size_t>(pad_to), Vocabulary::PAD);
    }
    Var<Real> h = understander_(g, ids, Var<Real>{}, valid);
    if (valid >= 0) h = ad::slice_rows(h, 0, valid);
    return h;
}

VarState Model::fw_init_neurons(GraphCtx<Real>& g) const {
    return VarState{g.use(neurons0_deep_), g.use(neurons0_shallow_), 0};
}

VarGaussian Model::split_gaussian(GraphCtx<Real>& g, Var<Real> packed) const {
    const Eigen::Index rd = cfg_.r_dims();
    Var<Real> mean = ad::reshape_row(ad::slice_cols(packed, 0, rd), cfg_.tau, cfg_.d);
    Var<Real> logstd = ad::reshape_row(ad::slice_cols(packed, rd, rd), cfg_.tau, cfg_.d);
    Var<Real> stddev = ad::cexp(ad::clamp(logstd, Real(-5), Real(2)));
    (void)g;
    return VarGaussian{mean, stddev};
}

VarGaussian Model::fw_prior(GraphCtx<Real>& g, const VarState& state, Var<Real> h) const {
    require(cfg_.use_randomness, ErrorKind::precondition, "prior disabled in this model variant");
    ad::Tape<Real>& t = g.tape;
    require(t.val(state.shallow).cols() == cfg_.d && t.val(h).cols() == cfg_.d,
            ErrorKind::invalid_argument, "prior: width mismatch");
    counters_.prior.fetch_add(1, std::memory_order_relaxed);
    Var<Real> pooled_deep = cfg_.deep_neurons > 0 ? ad::mean_rows(state.deep)
                                                  : t.constant(MatR::Zero(1, cfg_.d));
    Var<Real> pooled_shallow = ad::mean_rows(state.shallow);
    Var<Real> pooled_h = ad::mean_rows(h);
    Var<Real> in = ad::concat_cols<Real>({pooled_deep, pooled_shallow, pooled_h});
    Var<Real> packed = g2_(g, ad::gelu(g1_(g, in)));
    return split_gaussian(g, packed);
}

VarGaussian Model::fw_posterior(GraphCtx<Real>& g, const std::vector<int>& step_tokens) const {
    require(cfg_.use_randomness, ErrorKind::precondition, "posterior disabled in this model variant");
    require(!step_tokens.empty(), ErrorKind::invalid_argument, "posterior: empty step");
    counters_.posterior.fetch_add(1, std::memory_order_relaxed);
    Var<Real> enc = posterior_trunk_(g, step_tokens, Var<Real>{});
    Var<Real> pooled = ad::mean_rows(enc);
    Var<Real> packed = f2_(g, ad::gelu(f1_(g, pooled)));
    return split_gaussian(g, packed);
}

VarState Model::fw_think(GraphCtx<Real>& g, const VarState& state, Var<Real> h,
                         std::optional<Var<Real>> r) const {
    require(state.k < cfg_.steps, ErrorKind::precondition,
            "step-overflow: thinking step " + std::to_string(state.k) + " >= K");
    require(cfg_.use_randomness == r.has_value(), ErrorKind::invalid_argument,
            "randomness rows must be provided exactly when the variant uses them");
    counters_.thinker.fetch_add(1, std::memory_order_relaxed);

    std::vector<Var<Real>> rows;
    if (cfg_.deep_neurons > 0) rows.push_back(ad::add_rowvec(state.deep, g.use(seg_deep_)));
    rows.push_back(ad::add_rowvec(state.shallow, g.use(seg_shallow_)));
    if (r) rows.push_back(ad::add_rowvec(*r, g.use(seg_r_)));
    Var<Real> x = rows.size() == 1 ? rows[0] : ad::concat_rows(rows);
    for (const auto& b : thinker_blocks_) x = b(g, x, h);
    x = thinker_ln_f_(g, x);

    const Eigen::Index T = cfg_.deep_neurons, S = cfg_.shallow_neurons;
    VarState next;
    next.deep = T > 0 ? ad::slice_rows(x, 0, T) : g.tape.constant(MatR::Zero(0, cfg_.d));
    next.shallow = ad::slice_rows(x, T, S);
    next.k = state.k + 1;
    return next;
}

Var<Real> Model::fw_speak_logits(GraphCtx<Real>& g, const std::vector<int>& step_tokens,
                                 Var<Real> shallow) const {
    std::vector<int> input;
    input.reserve(step_tokens.size() + 1);
    input.push_back(Vocabulary::BOS);
    input.insert(input.end(), step_tokens.begin(), step_tokens.end());
    Var<Real> x = speaker_(g, input, shallow);
    return speaker_head_(g, x);
}

Var<Real> Model::fw_nar_logits(GraphCtx<Real>& g, Var<Real> shallow) const {
    std::vector<int> qpos(kNarLength);
    for (int i = 0; i < kNarLength; ++i) qpos[i] = i;
    Var<Real> x = ad::gather_rows(g.use(nar_queries_), qpos);
    for (const auto& b : nar_blocks_) x = b(g, x, shallow);
    x = nar_ln_f_(g, x);
    return nar_head_(g, x);
}

// --- contract-level operations ----------------------------------------------

MatR Model::understand(const std::vector<int>& question_tokens) const {
    ad::Tape<Real> tape;
    tape.recording = false;
    GraphCtx<Real> g{tape};
    return tape.val(fw_understand(g, question_tokens));
}

NeuronState Model::init_neurons() const {
    return NeuronState{neurons0_deep_->value, neurons0_shallow_->value, 0};
}

GaussianParams Model::predict_prior(const NeuronState& state, const MatR& h) const {
    ad::Tape<Real> tape;
    tape.recording = false;
    GraphCtx<Real> g{tape};
    VarState vs{tape.constant(state.deep), tape.constant(state.shallow), state.k};
    VarGaussian vg = fw_prior(g, vs, tape.constant(h));
    return GaussianParams{tape.val(vg.mean), tape.val(vg.stddev), GaussianParams::Source::prior};
}

GaussianParams Model::encode_posterior(const std::vector<int>& step_tokens) const {
    ad::Tape<Real> tape;
    tape.recording = false;
    GraphCtx<Real> g{tape};
    VarGaussian vg = fw_posterior(g, step_tokens);
    return GaussianParams{tape.val(vg.mean), tape.val(vg.stddev), GaussianParams::Source::posterior};
}

RandomDraw Model::sample_randomness(const GaussianParams& params, std::uint64_t seed,
                                    bool deterministic) {
    RandomDraw draw;
    draw.deterministic = deterministic;
    draw.noise = MatR::Zero(params.mean.rows(), params.mean.cols());
    if (!deterministic) {
        Rng rng(derive_seed(seed, 0x5a3c));
        for (Eigen::Index r = 0; r < draw.noise.rows(); ++r)
            for (Eigen::Index c = 0; c < draw.noise.cols(); ++c) draw.noise(r, c) = rng.gauss();
    }
    draw.value = params.mean + params.stddev.cwiseProduct(draw.noise);
    return draw;
}

NeuronState Model::think(const NeuronState& state, const MatR& h, const RandomDraw& r) const {
    ad::Tape<Real> tape;
    tape.recording = false;
    GraphCtx<Real> g{tape};
    VarState vs{tape.constant(state.deep), tape.constant(state.shallow), state.k};
    std::optional<Var<Real>> rv;
    if (cfg_.use_randomness) rv = tape.constant(r.value);
    VarState next = fw_think(g, vs, tape.constant(h), rv);
    return NeuronState{tape.val(next.deep), tape.val(next.shallow), next.k};
}

SpeakResult Model::speak_ar(const MatR& shallow, int max_tokens, bool greedy,
                            std::uint64_t sample_seed) const {
    require(max_tokens >= 1, ErrorKind::invalid_argument, "speak_ar: max_tokens must be >= 1");
    SpeakResult res;
    std::vector<int> generated;
    Rng rng(derive_seed(sample_seed, 0xa5a5));
    while (static_cast<int>(generated.size()) < max_tokens) {
        ad::Tape<Real> tape;
        tape.recording = false;
        GraphCtx<Real> g{tape};
        Var<Real> logits = fw_speak_logits(g, generated, tape.constant(shallow));
        counters_.speaker_ar.fetch_add(1, std::memory_order_relaxed);
        ++res.decoder_passes;
        const MatR& z = tape.val(logits);
        Eigen::Index last = z.rows() - 1;
        int next = 0;
        if (greedy) {
            z.row(last).maxCoeff(&next);
        } else {
            Eigen::Array<Real, 1, Eigen::Dynamic> p = (z.row(last).array() - z.row(last).maxCoeff()).exp();
            p /= p.sum();
            Real u = rng.uniform(), acc = 0;
            next = static_cast<int>(p.size()) - 1;
            for (Eigen::Index i = 0; i < p.size(); ++i) {
                acc += p(i);
                if (u < acc) {
                    next = static_cast<int>(i);
                    break;
                }
            }
        }
        if (next == Vocabulary::EOS) {
            res.tokens = generated;
            res.text = vocab_.detokenize(res.tokens);
            return res;
        }
        generated.push_back(next);
    }
    res.tokens = generated;
    res.text = vocab_.detokenize(res.tokens);
    res.truncated = true;
    return res;
}

SpeakResult Model::speak_nar(const MatR& shallow) const {
    ad::Tape<Real> tape;
    tape.recording = false;
    GraphCtx<Real> g{tape};
    Var<Real> logits = fw_nar_logits(g, tape.constant(shallow));
    counters_.speaker_nar.fetch_add(1, std::memory_order_relaxed);
    const MatR& z = tape.val(logits);
    SpeakResult res;
    res.tokens.reserve(kNarLength);
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        int id = 0;
        z.row(r).maxCoeff(&id);
        res.tokens.push_back(id);
    }
    // All 128 positions are emitted in the single pass above; everything from
    // the first EOS on is display padding.
    auto eos = std::find(res.tokens.begin(), res.tokens.end(), Vocabulary::EOS);
    std::vector<int> visible(res.tokens.begin(), eos);
    res.text = vocab_.detokenize(visible);
    res.decoder_passes = 1;
    return res;
}

// --- checkpoint --------------------------------------------------------------

namespace {

json config_to_json(const ModelConfig& c) {
    return json{{"d", c.d},
                {"deep_neurons", c.deep_neurons},
                {"shallow_neurons", c.shallow_neurons},
                {"tau", c.tau},
                {"steps", c.steps},
                {"layers", c.layers},
                {"heads", c.heads},
                {"vocab", c.vocab},
                {"max_step_tokens", c.max_step_tokens},
                {"max_question_tokens", c.max_question_tokens},
                {"mlp_ratio", c.mlp_ratio},
                {"g_hidden", c.g_hidden},
                {"f_hidden", c.f_hidden},
                {"use_randomness", c.use_randomness},
                {"init_seed", c.init_seed}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.d = j.at("d").get<int>();
    c.deep_neurons = j.at("deep_neurons").get<int>();
    c.shallow_neurons = j.at("shallow_neurons").get<int>();
    c.tau = j.at("tau").get<int>();
    c.steps = j.at("steps").get<int>();
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.vocab = j.at("vocab").get<int>();
    c.max_step_tokens = j.at("max_step_tokens").get<int>();
    c.max_question_tokens = j.at("max_question_tokens").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.g_hidden = j.at("g_hidden").get<int>();
    c.f_hidden = j.at("f_hidden").get<int>();
    c.use_randomness = j.at("use_randomness").get<bool>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    return c;
}

}  // namespace

void Model::save(const std::string& path, bool with_optimizer_state) const {
    json m;
    m["model_type"] = "marcos";
    m["config"] = config_to_json(cfg_);
    m["flags"] = {{"phase1_done", meta_.phase1_done},
                  {"phase2_done", meta_.phase2_done},
                  {"nar_done", meta_.nar_done},
                  {"phase_in_progress", meta_.phase_in_progress},
                  {"epochs_done", meta_.epochs_done},
                  {"opt_iterations", meta_.opt_iterations}};
    std::vector<std::pair<std::string, const MatR*>> tensors;
    for (const auto& p : params_) tensors.emplace_back(p.name, &p.value);
    if (with_optimizer_state) {
        for (const auto& p : params_) {
            if (p.adam_m.size() != 0) tensors.emplace_back("opt.m." + p.name, &p.adam_m);
            if (p.adam_v.size() != 0) tensors.emplace_back("opt.v." + p.name, &p.adam_v);
        }
    }
    write_tensor_file(path, m, tensors);
}

std::unique_ptr<Model> Model::load(const std::string& path, bool with_optimizer_state) {
    NamedTensors nt = read_tensor_file(path);
    require(nt.meta.at("model_type").get<std::string>() == "marcos", ErrorKind::parse,
            "checkpoint is not a marcos model: " + path);
    ModelConfig cfg = config_from_json(nt.meta.at("config"));
    auto model = std::make_unique<Model>(cfg);
    for (auto& p : model->params_) {
        const MatR* m = nt.find(p.name);
        require(m != nullptr, ErrorKind::parse, "checkpoint missing tensor: " + p.name);
        require(m->rows() == p.value.rows() && m->cols() == p.value.cols(), ErrorKind::parse,
                "checkpoint shape mismatch for " + p.name);
        p.value = *m;
        if (with_optimizer_state) {
            if (const MatR* om = nt.find("opt.m." + p.name)) p.adam_m = *om;
            if (const MatR* ov = nt.find("opt.v." + p.name)) p.adam_v = *ov;
        }
    }
    const json& flags = nt.meta.at("flags");
    model->meta_.phase1_done = flags.at("phase1_done").get<bool>();
    model->meta_.phase2_done = flags.at("phase2_done").get<bool>();
    model->meta_.nar_done = flags.at("nar_done").get<bool>();
    model->meta_.phase_in_progress = flags.at("phase_in_progress").get<int>();
    model->meta_.epochs_done = flags.at("epochs_done").get<int>();
    model->meta_.opt_iterations = flags.at("opt_iterations").get<int>();
    return model;
}

}  // namespace marcos
