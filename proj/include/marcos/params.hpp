#pragma once

#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "marcos/rng.hpp"
#include "marcos/tape.hpp"

namespace marcos {

template <typename S>
using Mat = ad::Mat<S>;

enum class Init { zeros, ones, normal };

template <typename S>
struct Param {
    std::string name;
    Mat<S> value;
    Mat<S> grad;  // filled by the optimizer path, not by the tape directly
    Mat<S> adam_m, adam_v;
    int id = -1;

    void zero_grad() {
        if (grad.rows() != value.rows() || grad.cols() != value.cols())
            grad = Mat<S>::Zero(value.rows(), value.cols());
        else
            grad.setZero();
    }
};

// Named parameter registry. Initialization is seeded per name, so values do
// not depend on registration order, and iteration order is stable for
// serialization and optimizer updates.
template <typename S>
class ParamStore {
public:
    explicit ParamStore(std::uint64_t init_seed = 0) : init_seed_(init_seed) {}

    Param<S>* add(const std::string& name, Eigen::Index rows, Eigen::Index cols, Init init,
                  S scale = S(0.02)) {
        require(by_name_.find(name) == by_name_.end(), ErrorKind::invalid_argument,
                "duplicate parameter name: " + name);
        params_.emplace_back();
        Param<S>& p = params_.back();
        p.name = name;
        p.id = static_cast<int>(params_.size()) - 1;
        p.value.resize(rows, cols);
        switch (init) {
            case Init::zeros: p.value.setZero(); break;
            case Init::ones: p.value.setOnes(); break;
            case Init::normal: {
                Rng rng(derive_seed(init_seed_, fnv1a(name)));
                for (Eigen::Index c = 0; c < cols; ++c)
                    for (Eigen::Index r = 0; r < rows; ++r) p.value(r, c) = S(rng.gauss()) * scale;
                break;
            }
        }
        by_name_.emplace(name, p.id);
        return &p;
    }

    Param<S>* find(const std::string& name) {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : &params_[static_cast<std::size_t>(it->second)];
    }

    Param<S>& at(int id) { return params_[static_cast<std::size_t>(id)]; }
    const Param<S>& at(int id) const { return params_[static_cast<std::size_t>(id)]; }
    std::size_t size() const { return params_.size(); }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
        return n;
    }

    std::uint64_t value_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& p : params_) {
            h = fnv1a(p.name.data(), p.name.size(), h);
            h = fnv1a(p.value.data(), static_cast<std::size_t>(p.value.size()) * sizeof(S), h);
        }
        return h;
    }

private:
    std::uint64_t init_seed_;
    std::deque<Param<S>> params_;  // deque: stable addresses across add()
    std::unordered_map<std::string, int> by_name_;
};

// Per-graph context: the tape plus the trainability mask for this pass.
// Leaves are cached so a parameter used at several steps maps to one node.
template <typename S>
struct GraphCtx {
    ad::Tape<S>& tape;
    const std::vector<char>* trainable = nullptr;  // indexed by param id; null = frozen

    explicit GraphCtx(ad::Tape<S>& t, const std::vector<char>* mask = nullptr)
        : tape(t), trainable(mask) {}

    ad::Var<S> use(Param<S>* p) {
        auto it = leaf_cache_.find(p->id);
        if (it != leaf_cache_.end()) return it->second;
        bool tr = trainable != nullptr && static_cast<std::size_t>(p->id) < trainable->size() &&
                  (*trainable)[static_cast<std::size_t>(p->id)] != 0;
        ad::Var<S> v = tape.leaf(&p->value, tr, p->id);
        leaf_cache_.emplace(p->id, v);
        return v;
    }

private:
    std::unordered_map<int, ad::Var<S>> leaf_cache_;
};

}  // namespace marcos
