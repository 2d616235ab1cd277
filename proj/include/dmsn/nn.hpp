#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dmsn/param_store.hpp"
#include "dmsn/tensor.hpp"

namespace dmsn {

enum class Activation { relu, sigmoid, none };

inline T apply_activation(const T& x, Activation a) {
    switch (a) {
        case Activation::relu: return relu(x);
        case Activation::sigmoid: return sigmoid(x);
        case Activation::none: return x;
    }
    return x;
}

// affine layer y = x W + b over batched rows
struct Linear {
    Parameter* w = nullptr;  // [in x out]
    Parameter* b = nullptr;  // [out], optional

    static Linear create(ParamStore& store, const std::string& name, int in, int out, Rng& rng, bool bias = true) {
        Linear l;
        l.w = &store.add_xavier(name + ".w", in, out, rng);
        if (bias) l.b = &store.add_zeros(name + ".b", {out});
        return l;
    }

    int in_dim() const { return w->shape[0]; }
    int out_dim() const { return w->shape[1]; }

    T operator()(Tape& tape, const T& x) const {
        T y = matmul(x, leaf(tape, *w));
        if (b != nullptr) y = add_rowvec(y, leaf(tape, *b));
        return y;
    }
};

// Stack of affine layers with a hidden activation; the final activation is
// whatever the caller asks for.
struct Mlp {
    std::vector<Linear> layers;
    Activation hidden_act = Activation::relu;
    Activation final_act = Activation::none;

    static Mlp create(ParamStore& store, const std::string& name, const std::vector<int>& dims, Rng& rng,
                      Activation hidden = Activation::relu, Activation final = Activation::none) {
        if (dims.size() < 2) throw DimensionError("mlp: need at least input and output dims");
        Mlp m;
        m.hidden_act = hidden;
        m.final_act = final;
        for (size_t i = 0; i + 1 < dims.size(); ++i) {
            m.layers.push_back(Linear::create(store, name + ".l" + std::to_string(i), dims[i], dims[i + 1], rng));
        }
        return m;
    }

    int in_dim() const { return layers.front().in_dim(); }
    int out_dim() const { return layers.back().out_dim(); }

    T operator()(Tape& tape, const T& x) const {
        if (cols(x) != in_dim()) {
            throw DimensionError("mlp: input cols " + std::to_string(cols(x)) + " != " + std::to_string(in_dim()));
        }
        T h = x;
        for (size_t i = 0; i < layers.size(); ++i) {
            h = layers[i](tape, h);
            h = apply_activation(h, i + 1 < layers.size() ? hidden_act : final_act);
        }
        return h;
    }
};

inline T mlp_forward(Tape& tape, const T& x, const Mlp& mlp) { return mlp(tape, x); }

// softmax over a single vector (1 x n)
inline T softmax(const T& x) {
    if (rows(x) != 1) throw DimensionError("softmax: expected a vector");
    return softmax_rows(x);
}

// Grouped scaled dot-product attention: each of the B queries attends over
// its own n keys/values. out = softmax(q K^T / sqrt d) V per group.
inline T scaled_dot_attention_grouped(const T& q, const T& k, const T& v, int n) {
    if (n <= 0) throw EmptySequenceError("attention over zero keys");
    const int d = cols(q);
    T scores = scale(group_dot(q, k, n), 1.0 / std::sqrt(static_cast<double>(d)));
    T weights = softmax_rows(scores);
    return group_weighted_sum(weights, v);
}

// single query vector q[1 x d] over K,V [n x d]
inline T scaled_dot_attention(const T& q, const T& k, const T& v) {
    if (rows(q) != 1) throw DimensionError("scaled_dot_attention: q must be a vector");
    if (rows(k) == 0) throw EmptySequenceError("attention over zero keys");
    if (cols(q) != cols(k)) throw DimensionError("scaled_dot_attention: q/K dim mismatch");
    detail::check_same_shape(k, v, "scaled_dot_attention K/V");
    return scaled_dot_attention_grouped(q, k, v, rows(k));
}

// Multi-head attention with one query per sample and n kv tokens per sample.
// Projections are bias-free; model dim must divide evenly across heads.
struct MultiHeadAttention {
    Parameter* wq = nullptr;
    Parameter* wk = nullptr;
    Parameter* wv = nullptr;
    Parameter* wo = nullptr;
    int heads = 1;

    static MultiHeadAttention create(ParamStore& store, const std::string& name, int dim, int heads, Rng& rng) {
        if (heads < 1 || dim % heads != 0) {
            throw ConfigError("attention dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
        }
        MultiHeadAttention m;
        m.heads = heads;
        m.wq = &store.add_xavier(name + ".wq", dim, dim, rng);
        m.wk = &store.add_xavier(name + ".wk", dim, dim, rng);
        m.wv = &store.add_xavier(name + ".wv", dim, dim, rng);
        m.wo = &store.add_xavier(name + ".wo", dim, dim, rng);
        return m;
    }

    // q: [B x dim], kv: [(B*n) x dim]
    T operator()(Tape& tape, const T& q, const T& kv, int n) const {
        const int dim = wq->shape[0];
        if (cols(q) != dim || cols(kv) != dim) throw DimensionError("multi_head_attention: dim mismatch");
        if (n <= 0) throw EmptySequenceError("multi_head_attention over zero tokens");
        const int hd = dim / heads;
        T qp = matmul(q, leaf(tape, *wq));
        T kp = matmul(kv, leaf(tape, *wk));
        T vp = matmul(kv, leaf(tape, *wv));
        std::vector<T> head_outs;
        head_outs.reserve(heads);
        for (int h = 0; h < heads; ++h) {
            T qh = slice_cols(qp, h * hd, (h + 1) * hd);
            T kh = slice_cols(kp, h * hd, (h + 1) * hd);
            T vh = slice_cols(vp, h * hd, (h + 1) * hd);
            head_outs.push_back(scaled_dot_attention_grouped(qh, kh, vh, n));
        }
        T cat = head_outs.size() == 1 ? head_outs[0] : concat_cols(head_outs);
        return matmul(cat, leaf(tape, *wo));
    }
};

// cosine similarity of two vectors; zero-norm inputs yield 0 and set the
// degenerate flag instead of producing NaN
inline T cosine_sim(const T& a, const T& b, bool* degenerate = nullptr) {
    if (rows(a) != 1 || rows(b) != 1) throw DimensionError("cosine_sim: expected vectors");
    T c = rowwise_cosine(a, b);
    if (degenerate != nullptr) {
        double na = 0.0, nb = 0.0;
        for (double v : values(a)) na += v * v;
        for (double v : values(b)) nb += v * v;
        *degenerate = (na == 0.0 || nb == 0.0);
    }
    return c;
}

}  // namespace dmsn
