#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "marcos/common.hpp"

namespace marcos::ad {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <typename S>
class Tape;

// Lightweight handle to a tape node.
template <typename S>
struct Var {
    Tape<S>* tape = nullptr;
    int idx = -1;

    bool valid() const { return tape != nullptr && idx >= 0; }
};

// Reverse-mode tape over dense matrices. Nodes are appended in topological
// order; backward() walks them in reverse. When `recording` is off, ops
// compute values only, which is the inference path.
//
// Gradients flow only into subgraphs that contain a trainable leaf, so a
// phase that freezes most parameters skips most of the backward work.
template <typename S>
class Tape {
public:
    struct Node {
        Mat<S> value;                   // owned value (unused for external leaves)
        const Mat<S>* external = nullptr;  // leaf values live outside the tape
        Mat<S> grad;
        std::function<void(Tape&)> backward;
        bool requires_grad = false;
        int param_id = -1;
    };

    bool recording = true;
    std::vector<Node> nodes;

    const Mat<S>& val(Var<S> v) const {
        const Node& n = nodes[static_cast<std::size_t>(v.idx)];
        return n.external ? *n.external : n.value;
    }

    bool needs_grad(Var<S> v) const { return nodes[static_cast<std::size_t>(v.idx)].requires_grad; }

    Var<S> constant(Mat<S> v) {
        nodes.push_back(Node{std::move(v), nullptr, {}, nullptr, false, -1});
        return Var<S>{this, static_cast<int>(nodes.size()) - 1};
    }

    Var<S> scalar(S v) {
        Mat<S> m(1, 1);
        m(0, 0) = v;
        return constant(std::move(m));
    }

    // Leaf over externally owned storage (a parameter). `trainable` controls
    // whether gradients propagate into it this pass.
    Var<S> leaf(const Mat<S>* value, bool trainable, int param_id) {
        nodes.push_back(Node{{}, value, {}, nullptr, trainable && recording, param_id});
        return Var<S>{this, static_cast<int>(nodes.size()) - 1};
    }

    Var<S> make(Mat<S> value, bool requires_grad, std::function<void(Tape&)> bw) {
        bool rg = requires_grad && recording;
        nodes.push_back(Node{std::move(value), nullptr, {}, rg ? std::move(bw) : nullptr, rg, -1});
        return Var<S>{this, static_cast<int>(nodes.size()) - 1};
    }

    // Accumulate into a node's gradient, allocating on first touch.
    void accum(int idx, const Mat<S>& g) {
        Node& n = nodes[static_cast<std::size_t>(idx)];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            n.grad += g;
        }
    }

    const Mat<S>& grad(Var<S> v) const {
        static const Mat<S> empty;
        const Mat<S>& g = nodes[static_cast<std::size_t>(v.idx)].grad;
        return g.size() == 0 ? empty : g;
    }

    // Seeds d(root)/d(root) = 1 and runs the reverse sweep. Root must be 1x1.
    void backward(Var<S> root) {
        require(recording, ErrorKind::precondition, "backward() on a non-recording tape");
        require(val(root).rows() == 1 && val(root).cols() == 1, ErrorKind::invalid_argument,
                "backward root must be a 1x1 scalar");
        Mat<S> one(1, 1);
        one(0, 0) = S(1);
        accum(root.idx, one);
        for (int i = root.idx; i >= 0; --i) {
            Node& n = nodes[static_cast<std::size_t>(i)];
            if (n.backward && n.grad.size() != 0) n.backward(*this);
        }
    }

    // Visit (param_id, grad) for every parameter leaf that received gradient.
    void for_each_param_grad(const std::function<void(int, const Mat<S>&)>& fn) const {
        for (const Node& n : nodes) {
            if (n.param_id >= 0 && n.grad.size() != 0) fn(n.param_id, n.grad);
        }
    }
};

// ---------------------------------------------------------------------------
// Primitive ops. Each returns a new node; backward closures capture indices,
// never iterators, so node-vector growth stays safe.
// ---------------------------------------------------------------------------

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
    Tape<S>& t = *a.tape;
    Mat<S> v = t.val(a) * t.val(b);
    bool rg = t.needs_grad(a) || t.needs_grad(b);
    int ia = a.idx, ib = b.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), rg, [ia, ib, self](Tape<S>& tp) {
        const Mat<S>& g = tp.nodes[self].grad;
        if (tp.nodes[ia].requires_grad) tp.accum(ia, g * tp.val(Var<S>{&tp, ib}).transpose());
        if (tp.nodes[ib].requires_grad) tp.accum(ib, tp.val(Var<S>{&tp, ia}).transpose() * g);
    });
}

// A * B^T without materializing the transpose in the graph.
template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
    Tape<S>& t = *a.tape;
    Mat<S> v = t.val(a) * t.val(b).transpose();
    bool rg = t.needs_grad(a) || t.needs_grad(b);
    int ia = a.idx, ib = b.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), rg, [ia, ib, self](Tape<S>& tp) {
        const Mat<S>& g = tp.nodes[self].grad;
        if (tp.nodes[ia].requires_grad) tp.accum(ia, g * tp.val(Var<S>{&tp, ib}));
        if (tp.nodes[ib].requires_grad) tp.accum(ib, g.transpose() * tp.val(Var<S>{&tp, ia}));
    });
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
    Tape<S>& t = *a.tape;
    require(t.val(a).rows() == t.val(b).rows() && t.val(a).cols() == t.val(b).cols(),
            ErrorKind::invalid_argument, "add: shape mismatch");
    Mat<S> v = t.val(a) + t.val(b);
    bool rg = t.needs_grad(a) || t.needs_grad(b);
    int ia = a.idx, ib = b.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), rg, [ia, ib, self](Tape<S>& tp) {
        const Mat<S>& g = tp.nodes[self].grad;
        tp.accum(ia, g);
        tp.accum(ib, g);
    });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
    Tape<S>& t = *a.tape;
    Mat<S> v = t.val(a) - t.val(b);
    bool rg = t.needs_grad(a) || t.needs_grad(b);
    int ia = a.idx, ib = b.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), rg, [ia, ib, self](Tape<S>& tp) {
        const Mat<S>& g = tp.nodes[self].grad;
        tp.accum(ia, g);
        if (tp.nodes[ib].requires_grad) tp.accum(ib, (-g).eval());
    });
}

template <typename S>
Var<S> hadamard(Var<S> a, Var<S> b) {
    Tape<S>& t = *a.tape;
    Mat<S> v = t.val(a).cwiseProduct(t.val(b));
    bool rg = t.needs_grad(a) || t.needs_grad(b);
    int ia = a.idx, ib = b.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), rg, [ia, ib, self](Tape<S>& tp) {
        const Mat<S>& g = tp.nodes[self].grad;
        if (tp.nodes[ia].requires_grad) tp.accum(ia, g.cwiseProduct(tp.val(Var<S>{&tp, ib})));
        if (tp.nodes[ib].requires_grad) tp.accum(ib, g.cwiseProduct(tp.val(Var<S>{&tp, ia})));
    });
}

template <typename S>
Var<S> cdiv(Var<S> a, Var<S> b) {
    Tape<S>& t = *a.tape;
    Mat<S> v = t.val(a).cwiseQuotient(t.val(b));
    bool rg = t.needs_grad(a) || t.needs_grad(b);
    int ia = a.idx, ib = b.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), rg, [ia, ib, self](Tape<S>& tp) {
        const Mat<S>& g = tp.nodes[self].grad;
        const Mat<S>& bv = tp.val(Var<S>{&tp, ib});
        if (tp.nodes[ia].requires_grad) tp.accum(ia, g.cwiseQuotient(bv));
        if (tp.nodes[ib].requires_grad) {
            const Mat<S>& av = tp.val(Var<S>{&tp, ia});
            tp.accum(ib, (-g.cwiseProduct(av).cwiseQuotient(bv.cwiseProduct(bv))).eval());
        }
    });
}

// Broadcast a 1 x c row over every row of a.
template <typename S>
Var<S> add_rowvec(Var<S> a, Var<S> row) {
    Tape<S>& t = *a.tape;
    require(t.val(row).rows() == 1 && t.val(row).cols() == t.val(a).cols(),
            ErrorKind::invalid_argument, "add_rowvec: shape mismatch");
    Mat<S> v = t.val(a).rowwise() + t.val(row).row(0);
    bool rg = t.needs_grad(a) || t.needs_grad(row);
    int ia = a.idx, ir = row.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), rg, [ia, ir, self](Tape<S>& tp) {
        const Mat<S>& g = tp.nodes[self].grad;
        tp.accum(ia, g);
        if (tp.nodes[ir].requires_grad) tp.accum(ir, g.colwise().sum());
    });
}

template <typename S>
Var<S> scale(Var<S> a, S s) {
    Tape<S>& t = *a.tape;
    Mat<S> v = t.val(a) * s;
    int ia = a.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), t.needs_grad(a), [ia, s, self](Tape<S>& tp) {
        tp.accum(ia, (tp.nodes[self].grad * s).eval());
    });
}

template <typename S>
Var<S> add_scalar(Var<S> a, S s) {
    Tape<S>& t = *a.tape;
    Mat<S> v = t.val(a).array() + s;
    int ia = a.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), t.needs_grad(a), [ia, self](Tape<S>& tp) {
        tp.accum(ia, tp.nodes[self].grad);
    });
}

template <typename S>
Var<S> cexp(Var<S> a) {
    Tape<S>& t = *a.tape;
    Mat<S> v = t.val(a).array().exp();
    int ia = a.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), t.needs_grad(a), [ia, self](Tape<S>& tp) {
        const typename Tape<S>::Node& n = tp.nodes[self];
        tp.accum(ia, n.grad.cwiseProduct(n.value));
    });
}

template <typename S>
Var<S> clog(Var<S> a) {
    Tape<S>& t = *a.tape;
    Mat<S> v = t.val(a).array().log();
    int ia = a.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), t.needs_grad(a), [ia, self](Tape<S>& tp) {
        tp.accum(ia, tp.nodes[self].grad.cwiseQuotient(tp.val(Var<S>{&tp, ia})));
    });
}

template <typename S>
Var<S> square(Var<S> a) {
    Tape<S>& t = *a.tape;
    Mat<S> v = t.val(a).array().square();
    int ia = a.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), t.needs_grad(a), [ia, self](Tape<S>& tp) {
        tp.accum(ia, (S(2) * tp.nodes[self].grad.cwiseProduct(tp.val(Var<S>{&tp, ia}))).eval());
    });
}

// Elementwise clamp. Saturated entries get zero gradient.
template <typename S>
Var<S> clamp(Var<S> a, S lo, S hi) {
    Tape<S>& t = *a.tape;
    Mat<S> v = t.val(a).array().min(hi).max(lo);
    int ia = a.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), t.needs_grad(a), [ia, lo, hi, self](Tape<S>& tp) {
        const Mat<S>& x = tp.val(Var<S>{&tp, ia});
        Mat<S> gate = ((x.array() > lo) && (x.array() < hi)).template cast<S>();
        tp.accum(ia, tp.nodes[self].grad.cwiseProduct(gate));
    });
}

// Exact GELU: x * Phi(x).
template <typename S>
Var<S> gelu(Var<S> a) {
    Tape<S>& t = *a.tape;
    const S inv_sqrt2 = S(0.70710678118654752440084436210485);
    Mat<S> v = t.val(a).unaryExpr([inv_sqrt2](S x) {
        return S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2));
    });
    int ia = a.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), t.needs_grad(a), [ia, inv_sqrt2, self](Tape<S>& tp) {
        const S inv_sqrt2pi = S(0.39894228040143267793994605993438);
        const Mat<S>& x = tp.val(Var<S>{&tp, ia});
        Mat<S> d = x.unaryExpr([inv_sqrt2, inv_sqrt2pi](S xv) {
            S phi = S(0.5) * (S(1) + std::erf(xv * inv_sqrt2));
            S pdf = inv_sqrt2pi * std::exp(S(-0.5) * xv * xv);
            return phi + xv * pdf;
        });
        tp.accum(ia, tp.nodes[self].grad.cwiseProduct(d));
    });
}

// Row-wise softmax; an optional additive mask (same shape) is applied first.
template <typename S>
Var<S> softmax_rows(Var<S> a) {
    Tape<S>& t = *a.tape;
    const Mat<S>& x = t.val(a);
    Mat<S> v(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        S m = x.row(r).maxCoeff();
        Eigen::Array<S, 1, Eigen::Dynamic> e = (x.row(r).array() - m).exp();
        v.row(r) = e / e.sum();
    }
    int ia = a.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), t.needs_grad(a), [ia, self](Tape<S>& tp) {
        const typename Tape<S>::Node& n = tp.nodes[self];
        const Mat<S>& p = n.value;
        const Mat<S>& g = n.grad;
        Mat<S> gx(p.rows(), p.cols());
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
            S dot = g.row(r).cwiseProduct(p.row(r)).sum();
            gx.row(r) = p.row(r).array() * (g.row(r).array() - dot);
        }
        tp.accum(ia, gx);
    });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
    require(!parts.empty(), ErrorKind::invalid_argument, "concat_rows: empty");
    Tape<S>& t = *parts[0].tape;
    Eigen::Index rows = 0, cols = t.val(parts[0]).cols();
    for (const auto& p : parts) rows += t.val(p).rows();
    Mat<S> v(rows, cols);
    Eigen::Index at = 0;
    bool rg = false;
    std::vector<std::pair<int, Eigen::Index>> spans;
    for (const auto& p : parts) {
        const Mat<S>& pv = t.val(p);
        v.middleRows(at, pv.rows()) = pv;
        spans.emplace_back(p.idx, pv.rows());
        at += pv.rows();
        rg = rg || t.needs_grad(p);
    }
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), rg, [spans, self](Tape<S>& tp) {
        const Mat<S>& g = tp.nodes[self].grad;
        Eigen::Index r0 = 0;
        for (const auto& [idx, n] : spans) {
            if (tp.nodes[idx].requires_grad) tp.accum(idx, g.middleRows(r0, n));
            r0 += n;
        }
    });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
    require(!parts.empty(), ErrorKind::invalid_argument, "concat_cols: empty");
    Tape<S>& t = *parts[0].tape;
    Eigen::Index cols = 0, rows = t.val(parts[0]).rows();
    for (const auto& p : parts) cols += t.val(p).cols();
    Mat<S> v(rows, cols);
    Eigen::Index at = 0;
    bool rg = false;
    std::vector<std::pair<int, Eigen::Index>> spans;
    for (const auto& p : parts) {
        const Mat<S>& pv = t.val(p);
        v.middleCols(at, pv.cols()) = pv;
        spans.emplace_back(p.idx, pv.cols());
        at += pv.cols();
        rg = rg || t.needs_grad(p);
    }
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), rg, [spans, self](Tape<S>& tp) {
        const Mat<S>& g = tp.nodes[self].grad;
        Eigen::Index c0 = 0;
        for (const auto& [idx, n] : spans) {
            if (tp.nodes[idx].requires_grad) tp.accum(idx, g.middleCols(c0, n));
            c0 += n;
        }
    });
}

template <typename S>
Var<S> slice_rows(Var<S> a, Eigen::Index r0, Eigen::Index n) {
    Tape<S>& t = *a.tape;
    Mat<S> v = t.val(a).middleRows(r0, n);
    int ia = a.idx;
    Eigen::Index rows = t.val(a).rows(), cols = t.val(a).cols();
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), t.needs_grad(a), [ia, r0, n, rows, cols, self](Tape<S>& tp) {
        Mat<S> g = Mat<S>::Zero(rows, cols);
        g.middleRows(r0, n) = tp.nodes[self].grad;
        tp.accum(ia, g);
    });
}

template <typename S>
Var<S> slice_cols(Var<S> a, Eigen::Index c0, Eigen::Index n) {
    Tape<S>& t = *a.tape;
    Mat<S> v = t.val(a).middleCols(c0, n);
    int ia = a.idx;
    Eigen::Index rows = t.val(a).rows(), cols = t.val(a).cols();
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), t.needs_grad(a), [ia, c0, n, rows, cols, self](Tape<S>& tp) {
        Mat<S> g = Mat<S>::Zero(rows, cols);
        g.middleCols(c0, n) = tp.nodes[self].grad;
        tp.accum(ia, g);
    });
}

// Mean over rows -> 1 x cols.
template <typename S>
Var<S> mean_rows(Var<S> a) {
    Tape<S>& t = *a.tape;
    Eigen::Index rows = t.val(a).rows();
    Mat<S> v = t.val(a).colwise().mean();
    int ia = a.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), t.needs_grad(a), [ia, rows, self](Tape<S>& tp) {
        const Mat<S>& g = tp.nodes[self].grad;
        Mat<S> gx = (Mat<S>::Ones(rows, 1) * g) / S(rows);
        tp.accum(ia, gx);
    });
}

template <typename S>
Var<S> sum_all(Var<S> a) {
    Tape<S>& t = *a.tape;
    Mat<S> v(1, 1);
    v(0, 0) = t.val(a).sum();
    int ia = a.idx;
    Eigen::Index rows = t.val(a).rows(), cols = t.val(a).cols();
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), t.needs_grad(a), [ia, rows, cols, self](Tape<S>& tp) {
        S g = tp.nodes[self].grad(0, 0);
        tp.accum(ia, Mat<S>::Constant(rows, cols, g));
    });
}

// Mean of absolute values -> 1 x 1. Subgradient at zero is zero.
template <typename S>
Var<S> mean_abs(Var<S> a) {
    Tape<S>& t = *a.tape;
    Mat<S> v(1, 1);
    v(0, 0) = t.val(a).cwiseAbs().mean();
    int ia = a.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), t.needs_grad(a), [ia, self](Tape<S>& tp) {
        const Mat<S>& x = tp.val(Var<S>{&tp, ia});
        S g = tp.nodes[self].grad(0, 0) / S(x.size());
        Mat<S> sgn = x.unaryExpr([](S e) { return e > S(0) ? S(1) : (e < S(0) ? S(-1) : S(0)); });
        tp.accum(ia, (sgn * g).eval());
    });
}

// Row-major reshape of a 1 x (r*c) row into r x c (and its inverse path).
template <typename S>
Var<S> reshape_row(Var<S> a, Eigen::Index r, Eigen::Index c) {
    Tape<S>& t = *a.tape;
    const Mat<S>& x = t.val(a);
    require(x.rows() == 1 && x.cols() == r * c, ErrorKind::invalid_argument, "reshape_row: size mismatch");
    Mat<S> v(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) v(i, j) = x(0, i * c + j);
    int ia = a.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), t.needs_grad(a), [ia, r, c, self](Tape<S>& tp) {
        const Mat<S>& g = tp.nodes[self].grad;
        Mat<S> gx(1, r * c);
        for (Eigen::Index i = 0; i < r; ++i)
            for (Eigen::Index j = 0; j < c; ++j) gx(0, i * c + j) = g(i, j);
        tp.accum(ia, gx);
    });
}

// Embedding lookup: selects rows of `table` by id. Backward scatter-adds.
template <typename S>
Var<S> gather_rows(Var<S> table, std::vector<int> ids) {
    Tape<S>& t = *table.tape;
    const Mat<S>& tab = t.val(table);
    Mat<S> v(static_cast<Eigen::Index>(ids.size()), tab.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        require(ids[i] >= 0 && ids[i] < tab.rows(), ErrorKind::invalid_argument, "gather_rows: id out of range");
        v.row(static_cast<Eigen::Index>(i)) = tab.row(ids[i]);
    }
    int it = table.idx;
    Eigen::Index rows = tab.rows(), cols = tab.cols();
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), t.needs_grad(table), [it, ids = std::move(ids), rows, cols, self](Tape<S>& tp) {
        const Mat<S>& g = tp.nodes[self].grad;
        Mat<S> gt = Mat<S>::Zero(rows, cols);
        for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
        tp.accum(it, gt);
    });
}

// Sum of per-row cross entropies between logits and integer targets,
// computed through a max-shifted log-softmax.
template <typename S>
Var<S> cross_entropy_rows(Var<S> logits, std::vector<int> targets) {
    Tape<S>& t = *logits.tape;
    const Mat<S>& z = t.val(logits);
    require(static_cast<Eigen::Index>(targets.size()) == z.rows(), ErrorKind::invalid_argument,
            "cross_entropy_rows: one target per row required");
    Mat<S> v(1, 1);
    S total = S(0);
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        S m = z.row(r).maxCoeff();
        S lse = std::log((z.row(r).array() - m).exp().sum()) + m;
        total += lse - z(r, targets[static_cast<std::size_t>(r)]);
    }
    v(0, 0) = total;
    int il = logits.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), t.needs_grad(logits), [il, targets = std::move(targets), self](Tape<S>& tp) {
        const Mat<S>& z = tp.val(Var<S>{&tp, il});
        S g = tp.nodes[self].grad(0, 0);
        Mat<S> gz(z.rows(), z.cols());
        for (Eigen::Index r = 0; r < z.rows(); ++r) {
            S m = z.row(r).maxCoeff();
            Eigen::Array<S, 1, Eigen::Dynamic> e = (z.row(r).array() - m).exp();
            gz.row(r) = (e / e.sum()).matrix() * g;
            gz(r, targets[static_cast<std::size_t>(r)]) -= g;
        }
        tp.accum(il, gz);
    });
}

// y = gain .* (x - mean) / sqrt(var + eps) + bias, per row.
template <typename S>
Var<S> layer_norm_rows(Var<S> x, Var<S> gain, Var<S> bias, S eps = S(1e-5)) {
    Tape<S>& t = *x.tape;
    const Mat<S>& xv = t.val(x);
    Eigen::Index rows = xv.rows(), cols = xv.cols();
    Mat<S> xhat(rows, cols);
    Eigen::Array<S, Eigen::Dynamic, 1> inv_std(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
        S mean = xv.row(r).mean();
        S var = (xv.row(r).array() - mean).square().mean();
        S is = S(1) / std::sqrt(var + eps);
        inv_std(r) = is;
        xhat.row(r) = (xv.row(r).array() - mean) * is;
    }
    Mat<S> v(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        v.row(r) = xhat.row(r).array() * t.val(gain).row(0).array() + t.val(bias).row(0).array();
    bool rg = t.needs_grad(x) || t.needs_grad(gain) || t.needs_grad(bias);
    int ix = x.idx, ig = gain.idx, ib = bias.idx;
    auto self = static_cast<int>(t.nodes.size());
    return t.make(std::move(v), rg,
                  [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std), self](Tape<S>& tp) {
        const Mat<S>& g = tp.nodes[self].grad;
        const Mat<S>& gainv = tp.val(Var<S>{&tp, ig});
        if (tp.nodes[ig].requires_grad) tp.accum(ig, (g.cwiseProduct(xhat)).colwise().sum());
        if (tp.nodes[ib].requires_grad) tp.accum(ib, g.colwise().sum());
        if (tp.nodes[ix].requires_grad) {
            Eigen::Index rows = g.rows(), cols = g.cols();
            Mat<S> gx(rows, cols);
            for (Eigen::Index r = 0; r < rows; ++r) {
                Eigen::Array<S, 1, Eigen::Dynamic> dxh = g.row(r).array() * gainv.row(0).array();
                S m1 = dxh.mean();
                S m2 = (dxh * xhat.row(r).array()).mean();
                gx.row(r) = ((dxh - m1 - xhat.row(r).array() * m2) * inv_std(r)).matrix();
            }
            tp.accum(ix, gx);
        }
    });
}

}  // namespace marcos::ad
