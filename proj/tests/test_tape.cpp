#include <doctest.h>

#include "marcos/nn.hpp"
#include "marcos/rng.hpp"

using namespace marcos;
using ad::Tape;
using ad::Var;

namespace {

Mat<double> random_mat(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Mat<double> m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
        for (Eigen::Index i = 0; i < r; ++i) m(i, j) = rng.gauss() * scale;
    return m;
}

// Central finite differences of a scalar-valued graph against every entry of
// one leaf. `build` must construct the full graph from the leaf values.
using Builder = std::function<Var<double>(Tape<double>&, const std::vector<const Mat<double>*>&)>;

void check_gradients(std::vector<Mat<double>> inputs, const Builder& build, double tol = 1e-7,
                     double eps = 1e-6) {
    std::vector<const Mat<double>*> ptrs;
    for (auto& m : inputs) ptrs.push_back(&m);

    Tape<double> tape;
    Var<double> root = build(tape, ptrs);
    tape.backward(root);

    for (std::size_t leaf = 0; leaf < inputs.size(); ++leaf) {
        // Leaves are created first, in order, by the builders below.
        Var<double> lv{&tape, static_cast<int>(leaf)};
        Mat<double> analytic = tape.grad(lv);
        if (analytic.size() == 0) analytic = Mat<double>::Zero(inputs[leaf].rows(), inputs[leaf].cols());
        for (Eigen::Index r = 0; r < inputs[leaf].rows(); ++r) {
            for (Eigen::Index c = 0; c < inputs[leaf].cols(); ++c) {
                double saved = inputs[leaf](r, c);
                inputs[leaf](r, c) = saved + eps;
                Tape<double> tp;
                tp.recording = false;
                double up = tp.val(build(tp, ptrs))(0, 0);
                inputs[leaf](r, c) = saved - eps;
                Tape<double> tm;
                tm.recording = false;
                double dn = tm.val(build(tm, ptrs))(0, 0);
                inputs[leaf](r, c) = saved;
                double numeric = (up - dn) / (2 * eps);
                double denom = std::max({std::abs(analytic(r, c)), std::abs(numeric), 1.0});
                CAPTURE(leaf);
                CAPTURE(r);
                CAPTURE(c);
                CHECK(std::abs(analytic(r, c) - numeric) / denom < tol);
            }
        }
    }
}

// Sum of squares reduces any matrix to a well-conditioned scalar.
Var<double> squash(Tape<double>& t, Var<double> x) { return ad::sum_all(ad::square(x)); }

std::vector<Var<double>> make_leaves(Tape<double>& t, const std::vector<const Mat<double>*>& in) {
    std::vector<Var<double>> vs;
    for (std::size_t i = 0; i < in.size(); ++i) vs.push_back(t.leaf(in[i], true, static_cast<int>(i)));
    return vs;
}

}  // namespace

TEST_CASE("matmul gradients") {
    check_gradients({random_mat(3, 4, 1), random_mat(4, 2, 2)},
                    [](Tape<double>& t, const auto& in) {
                        auto v = make_leaves(t, in);
                        return squash(t, ad::matmul(v[0], v[1]));
                    });
}

TEST_CASE("matmul_nt gradients") {
    check_gradients({random_mat(3, 4, 3), random_mat(5, 4, 4)},
                    [](Tape<double>& t, const auto& in) {
                        auto v = make_leaves(t, in);
                        return squash(t, ad::matmul_nt(v[0], v[1]));
                    });
}

TEST_CASE("elementwise op gradients") {
    check_gradients({random_mat(3, 3, 5), random_mat(3, 3, 6)},
                    [](Tape<double>& t, const auto& in) {
                        auto v = make_leaves(t, in);
                        auto x = ad::hadamard(ad::add(v[0], v[1]), ad::sub(v[0], v[1]));
                        x = ad::add_scalar(ad::scale(x, 0.7), 0.3);
                        return squash(t, x);
                    });
}

TEST_CASE("cdiv and log/exp gradients") {
    Mat<double> denom = random_mat(2, 3, 7).array().abs() + 1.0;
    check_gradients({random_mat(2, 3, 8), denom},
                    [](Tape<double>& t, const auto& in) {
                        auto v = make_leaves(t, in);
                        auto x = ad::cdiv(v[0], v[1]);
                        x = ad::add(x, ad::clog(ad::cexp(ad::scale(v[1], 0.2))));
                        return squash(t, x);
                    });
}

TEST_CASE("softmax gradients") {
    check_gradients({random_mat(4, 6, 9)},
                    [](Tape<double>& t, const auto& in) {
                        auto v = make_leaves(t, in);
                        return squash(t, ad::softmax_rows(v[0]));
                    });
}

TEST_CASE("gelu gradients") {
    check_gradients({random_mat(3, 5, 10)},
                    [](Tape<double>& t, const auto& in) {
                        auto v = make_leaves(t, in);
                        return squash(t, ad::gelu(v[0]));
                    });
}

TEST_CASE("clamp passes gradient only inside the bounds") {
    Mat<double> x(1, 3);
    x << -2.0, 0.5, 3.0;  // below, inside, above with bounds [-1, 2]
    Tape<double> t;
    Var<double> v = t.leaf(&x, true, 0);
    Var<double> c = ad::clamp(v, -1.0, 2.0);
    t.backward(ad::sum_all(c));
    Mat<double> g = t.grad(v);
    CHECK(g(0, 0) == 0.0);
    CHECK(g(0, 1) == 1.0);
    CHECK(g(0, 2) == 0.0);
    CHECK(t.val(c)(0, 0) == -1.0);
    CHECK(t.val(c)(0, 2) == 2.0);
}

TEST_CASE("concat/slice/mean/reshape gradients") {
    check_gradients({random_mat(3, 4, 11), random_mat(2, 4, 12)},
                    [](Tape<double>& t, const auto& in) {
                        auto v = make_leaves(t, in);
                        auto cat = ad::concat_rows<double>({v[0], v[1]});
                        auto s = ad::slice_rows(cat, 1, 3);
                        auto m = ad::mean_rows(s);
                        auto r = ad::reshape_row(m, 2, 2);
                        return squash(t, ad::concat_cols<double>({r, ad::slice_cols(s, 0, 2)}));
                    });
}

TEST_CASE("mean_abs gradients away from zero") {
    Mat<double> x = random_mat(3, 3, 13).array() + 2.0;  // keep entries away from 0
    check_gradients({x},
                    [](Tape<double>& t, const auto& in) {
                        auto v = make_leaves(t, in);
                        return ad::mean_abs(v[0]);
                    });
}

TEST_CASE("gather_rows scatter-adds into the table") {
    check_gradients({random_mat(5, 3, 14)},
                    [](Tape<double>& t, const auto& in) {
                        auto v = make_leaves(t, in);
                        return squash(t, ad::gather_rows(v[0], {1, 3, 1, 0}));
                    });
}

TEST_CASE("cross_entropy_rows matches finite differences") {
    check_gradients({random_mat(4, 7, 15)},
                    [](Tape<double>& t, const auto& in) {
                        auto v = make_leaves(t, in);
                        return ad::cross_entropy_rows(v[0], {2, 0, 6, 3});
                    },
                    1e-6);
}

TEST_CASE("layer_norm gradients") {
    check_gradients({random_mat(3, 6, 16), random_mat(1, 6, 17, 0.3).array().abs() + 0.5,
                     random_mat(1, 6, 18, 0.2)},
                    [](Tape<double>& t, const auto& in) {
                        auto v = make_leaves(t, in);
                        return squash(t, ad::layer_norm_rows(v[0], v[1], v[2]));
                    },
                    1e-6);
}

TEST_CASE("attention block end-to-end gradients") {
    // One full pre-norm block with cross attention, checked against finite
    // differences through every parameter.
    ParamStore<double> ps(42);
    auto block = nn::Block<double>::create(ps, "blk", 8, 2, 16, /*with_cross=*/true);
    Mat<double> x = random_mat(3, 8, 19, 0.7);
    Mat<double> mem = random_mat(4, 8, 20, 0.7);

    std::vector<char> all_on(ps.size(), 1);
    auto loss_value = [&]() {
        ad::Tape<double> t;
        t.recording = false;
        GraphCtx<double> g{t};
        Var<double> out = block(g, t.constant(x), t.constant(mem), nn::AttnMask{true, -1});
        return t.val(ad::sum_all(ad::square(out)))(0, 0);
    };

    ad::Tape<double> t;
    GraphCtx<double> g{t, &all_on};
    Var<double> out = block(g, t.constant(x), t.constant(mem), nn::AttnMask{true, -1});
    t.backward(ad::sum_all(ad::square(out)));
    std::vector<Mat<double>> grads(ps.size());
    t.for_each_param_grad([&](int id, const Mat<double>& gm) {
        if (grads[static_cast<std::size_t>(id)].size() == 0)
            grads[static_cast<std::size_t>(id)] = gm;
        else
            grads[static_cast<std::size_t>(id)] += gm;
    });

    Rng pick(77);
    int checked = 0;
    for (auto& p : ps) {
        if (p.value.size() == 0) continue;
        for (int probe = 0; probe < 2; ++probe) {
            Eigen::Index r = static_cast<Eigen::Index>(pick.below(static_cast<std::uint64_t>(p.value.rows())));
            Eigen::Index c = static_cast<Eigen::Index>(pick.below(static_cast<std::uint64_t>(p.value.cols())));
            double eps = 1e-6;
            double saved = p.value(r, c);
            p.value(r, c) = saved + eps;
            double up = loss_value();
            p.value(r, c) = saved - eps;
            double dn = loss_value();
            p.value(r, c) = saved;
            double numeric = (up - dn) / (2 * eps);
            double analytic = grads[static_cast<std::size_t>(p.id)].size() == 0
                                  ? 0.0
                                  : grads[static_cast<std::size_t>(p.id)](r, c);
            double denom = std::max({std::abs(analytic), std::abs(numeric), 1.0});
            CAPTURE(p.name);
            CHECK(std::abs(analytic - numeric) / denom < 1e-6);
            ++checked;
        }
    }
    CHECK(checked >= 30);
}

TEST_CASE("key padding mask hides padded keys") {
    ParamStore<double> ps(7);
    auto attn = nn::MultiHeadAttention<double>::create(ps, "attn", 8, 2);
    Mat<double> x = random_mat(3, 8, 21);
    Mat<double> x_padded(5, 8);
    x_padded.topRows(3) = x;
    x_padded.bottomRows(2) = random_mat(2, 8, 22);  // garbage rows that must not leak

    ad::Tape<double> t;
    t.recording = false;
    GraphCtx<double> g{t};
    Var<double> plain = attn(g, t.constant(x), t.constant(x), {});
    nn::AttnMask mask;
    mask.valid_keys = 3;
    Var<double> masked = attn(g, t.constant(x_padded), t.constant(x_padded), mask);
    Mat<double> diff = t.val(plain) - t.val(masked).topRows(3);
    CHECK(diff.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("frozen leaves receive no gradient and prune the sweep") {
    Mat<double> a = random_mat(2, 2, 23);
    Mat<double> b = random_mat(2, 2, 24);
    Tape<double> t;
    Var<double> va = t.leaf(&a, true, 0);
    Var<double> vb = t.leaf(&b, false, 1);
    Var<double> loss = ad::sum_all(ad::square(ad::matmul(va, vb)));
    t.backward(loss);
    CHECK(t.grad(va).size() != 0);
    CHECK(t.grad(vb).size() == 0);
}
