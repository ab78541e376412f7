#pragma once

#include <limits>
#include <string>
#include <vector>

#include "marcos/params.hpp"

namespace marcos::nn {

using ad::Var;

// Additive attention mask. `causal` hides keys after the query position;
// `valid_keys >= 0` hides key positions at or beyond that index (padding).
struct AttnMask {
    bool causal = false;
    Eigen::Index valid_keys = -1;
};

template <typename S>
struct Linear {
    Param<S>* w = nullptr;  // in x out
    Param<S>* b = nullptr;  // 1 x out

    static Linear create(ParamStore<S>& ps, const std::string& name, Eigen::Index in, Eigen::Index out) {
        Linear l;
        l.w = ps.add(name + ".w", in, out, Init::normal);
        l.b = ps.add(name + ".b", 1, out, Init::zeros);
        return l;
    }

    Var<S> operator()(GraphCtx<S>& g, Var<S> x) const {
        return ad::add_rowvec(ad::matmul(x, g.use(w)), g.use(b));
    }
};

template <typename S>
struct LayerNorm {
    Param<S>* gain = nullptr;
    Param<S>* bias = nullptr;

    static LayerNorm create(ParamStore<S>& ps, const std::string& name, Eigen::Index d) {
        LayerNorm n;
        n.gain = ps.add(name + ".gain", 1, d, Init::ones);
        n.bias = ps.add(name + ".bias", 1, d, Init::zeros);
        return n;
    }

    Var<S> operator()(GraphCtx<S>& g, Var<S> x) const {
        return ad::layer_norm_rows(x, g.use(gain), g.use(bias));
    }
};

template <typename S>
struct MultiHeadAttention {
    Linear<S> wq, wk, wv, wo;
    int heads = 1;

    static MultiHeadAttention create(ParamStore<S>& ps, const std::string& name, Eigen::Index d, int heads) {
        require(d % heads == 0, ErrorKind::invalid_argument, "attention width must divide head count");
        MultiHeadAttention a;
        a.wq = Linear<S>::create(ps, name + ".wq", d, d);
        a.wk = Linear<S>::create(ps, name + ".wk", d, d);
        a.wv = Linear<S>::create(ps, name + ".wv", d, d);
        a.wo = Linear<S>::create(ps, name + ".wo", d, d);
        a.heads = heads;
        return a;
    }

    Var<S> operator()(GraphCtx<S>& g, Var<S> q_in, Var<S> kv_in, AttnMask mask = {}) const {
        ad::Tape<S>& t = *q_in.tape;
        Eigen::Index d = t.val(q_in).cols();
        Eigen::Index nq = t.val(q_in).rows();
        Eigen::Index nk = t.val(kv_in).rows();
        Eigen::Index dh = d / heads;
        Var<S> q = wq(g, q_in);
        Var<S> k = wk(g, kv_in);
        Var<S> v = wv(g, kv_in);

        Mat<S> add_mask;
        bool masked = mask.causal || mask.valid_keys >= 0;
        if (masked) {
            add_mask = Mat<S>::Zero(nq, nk);
            const S neg = S(-1e30);
            if (mask.causal)
                for (Eigen::Index r = 0; r < nq; ++r)
                    for (Eigen::Index c = r + 1; c < nk; ++c) add_mask(r, c) = neg;
            if (mask.valid_keys >= 0)
                for (Eigen::Index c = mask.valid_keys; c < nk; ++c) add_mask.col(c).setConstant(neg);
        }

        std::vector<Var<S>> head_outs;
        head_outs.reserve(static_cast<std::size_t>(heads));
        S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
        for (int h = 0; h < heads; ++h) {
            Var<S> qh = ad::slice_cols(q, h * dh, dh);
            Var<S> kh = ad::slice_cols(k, h * dh, dh);
            Var<S> vh = ad::slice_cols(v, h * dh, dh);
            Var<S> scores = ad::scale(ad::matmul_nt(qh, kh), inv_sqrt);
            if (masked) scores = ad::add(scores, t.constant(add_mask));
            Var<S> probs = ad::softmax_rows(scores);
            head_outs.push_back(ad::matmul(probs, vh));
        }
        Var<S> merged = heads == 1 ? head_outs[0] : ad::concat_cols(head_outs);
        return wo(g, merged);
    }
};

template <typename S>
struct Mlp {
    Linear<S> fc1, fc2;

    static Mlp create(ParamStore<S>& ps, const std::string& name, Eigen::Index d, Eigen::Index hidden) {
        Mlp m;
        m.fc1 = Linear<S>::create(ps, name + ".fc1", d, hidden);
        m.fc2 = Linear<S>::create(ps, name + ".fc2", hidden, d);
        return m;
    }

    Var<S> operator()(GraphCtx<S>& g, Var<S> x) const {
        return fc2(g, ad::gelu(fc1(g, x)));
    }
};

// Pre-norm residual block: self-attention, optional cross-attention, MLP.
template <typename S>
struct Block {
    LayerNorm<S> ln1;
    MultiHeadAttention<S> self_attn;
    bool has_cross = false;
    LayerNorm<S> ln2;
    MultiHeadAttention<S> cross_attn;
    LayerNorm<S> ln3;
    Mlp<S> mlp;

    static Block create(ParamStore<S>& ps, const std::string& name, Eigen::Index d, int heads,
                        Eigen::Index mlp_hidden, bool with_cross) {
        Block b;
        b.ln1 = LayerNorm<S>::create(ps, name + ".ln1", d);
        b.self_attn = MultiHeadAttention<S>::create(ps, name + ".self", d, heads);
        b.has_cross = with_cross;
        if (with_cross) {
            b.ln2 = LayerNorm<S>::create(ps, name + ".ln2", d);
            b.cross_attn = MultiHeadAttention<S>::create(ps, name + ".cross", d, heads);
        }
        b.ln3 = LayerNorm<S>::create(ps, name + ".ln3", d);
        b.mlp = Mlp<S>::create(ps, name + ".mlp", d, mlp_hidden);
        return b;
    }

    Var<S> operator()(GraphCtx<S>& g, Var<S> x, Var<S> memory, AttnMask self_mask = {}) const {
        Var<S> h = ln1(g, x);
        x = ad::add(x, self_attn(g, h, h, self_mask));
        if (has_cross) {
            x = ad::add(x, cross_attn(g, ln2(g, x), memory));
        }
        x = ad::add(x, mlp(g, ln3(g, x)));
        return x;
    }
};

// Token embedding + learned positions + block stack + final norm.
template <typename S>
struct SequenceTransformer {
    Param<S>* tok_emb = nullptr;  // V x d
    Param<S>* pos_emb = nullptr;  // max_len x d
    std::vector<Block<S>> blocks;
    LayerNorm<S> ln_f;
    bool causal = false;
    bool cross = false;

    static SequenceTransformer create(ParamStore<S>& ps, const std::string& name, Eigen::Index vocab,
                                      Eigen::Index d, Eigen::Index max_len, int layers, int heads,
                                      Eigen::Index mlp_hidden, bool causal, bool cross) {
        SequenceTransformer s;
        s.tok_emb = ps.add(name + ".tok_emb", vocab, d, Init::normal);
        s.pos_emb = ps.add(name + ".pos_emb", max_len, d, Init::normal);
        for (int l = 0; l < layers; ++l)
            s.blocks.push_back(Block<S>::create(ps, name + ".blocks." + std::to_string(l), d, heads,
                                                mlp_hidden, cross));
        s.ln_f = LayerNorm<S>::create(ps, name + ".ln_f", d);
        s.causal = causal;
        s.cross = cross;
        return s;
    }

    Eigen::Index max_len() const { return pos_emb->value.rows(); }

    // `valid` < n marks trailing positions as padding, hidden from attention.
    Var<S> operator()(GraphCtx<S>& g, const std::vector<int>& ids, Var<S> memory,
                      Eigen::Index valid = -1) const {
        require(!ids.empty(), ErrorKind::invalid_argument, "empty token sequence");
        require(static_cast<Eigen::Index>(ids.size()) <= max_len(), ErrorKind::invalid_argument,
                "sequence length " + std::to_string(ids.size()) + " exceeds position table");
        std::vector<int> pos(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) pos[i] = static_cast<int>(i);
        Var<S> x = ad::add(ad::gather_rows(g.use(tok_emb), ids), ad::gather_rows(g.use(pos_emb), pos));
        AttnMask mask;
        mask.causal = causal;
        mask.valid_keys = valid;
        for (const auto& b : blocks) x = b(g, x, memory, mask);
        return ln_f(g, x);
    }
};

}  // namespace marcos::nn
