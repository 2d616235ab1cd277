#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dmsn/nn.hpp"

namespace dmsn {

struct FdafConfig {
    int d_id_embed = 16;  // target ID embedding width driving the gate
    int d_e = 128;
    int n_tokens = 4;     // gated auxiliary blocks: im, te, sh, syn (subset under ablations)
    int heads = 8;
};

// Prediction head shared by every configuration: a learned projection of the
// concatenated target embeddings plus a sigmoid MLP over
// [features, user profile, projected target].
struct PredictHead {
    Linear target_proj;  // d_target_cat -> d_e
    Mlp net;             // [d_feat + d_user + d_e -> hidden -> 1] + sigmoid

    static PredictHead create(ParamStore& store, const std::string& name, int d_feat, int d_user, int d_target_cat,
                              int d_e, int hidden, Rng& rng) {
        PredictHead h;
        h.target_proj = Linear::create(store, name + ".target_proj", d_target_cat, d_e, rng);
        h.net = Mlp::create(store, name + ".net", {d_feat + d_user + d_e, hidden, 1}, rng, Activation::relu,
                            Activation::sigmoid);
        return h;
    }

    T operator()(Tape& tape, const T& features, const T& user_embed, const T& target_cat) const {
        T tproj = target_proj(tape, target_cat);
        return net(tape, concat_cols({features, user_embed, tproj}));
    }
};

inline T predict_head(Tape& tape, const PredictHead& head, const T& features, const T& user_embed, const T& target_cat) {
    return head(tape, features, user_embed, target_cat);
}

// Feature dynamic adaptive fusion: target-conditioned gates over the
// auxiliary features, a rank-one CrossNet over their concatenation, and
// non-intrusive multi-head attention that weights the primary ID feature.
struct Fdaf {
    FdafConfig cfg;
    Linear gate;                   // d_id_embed -> n_tokens * d_e, sigmoid
    Parameter* cross_w = nullptr;  // [D]
    Parameter* cross_b = nullptr;  // [D]
    MultiHeadAttention att;

    std::optional<double> gate_override;  // test/ablation hook: force gate outputs

    static Fdaf create(ParamStore& store, const std::string& name, const FdafConfig& cfg, Rng& rng) {
        Fdaf f;
        f.cfg = cfg;
        const int D = cfg.n_tokens * cfg.d_e;
        f.gate = Linear::create(store, name + ".gate", cfg.d_id_embed, D, rng);
        f.cross_w = &store.add_gaussian(name + ".cross.w", {D}, 1.0 / std::sqrt(static_cast<double>(D)), rng);
        f.cross_b = &store.add_zeros(name + ".cross.b", {D});
        f.att = MultiHeadAttention::create(store, name + ".att", cfg.d_e, cfg.heads, rng);
        return f;
    }

    T gate_weights(Tape& tape, const T& target_id_embed) const {
        const int D = cfg.n_tokens * cfg.d_e;
        if (gate_override.has_value()) {
            const int B = rows(target_id_embed);
            return constant(tape, B, D, std::vector<double>(static_cast<size_t>(B) * D, *gate_override));
        }
        return sigmoid(gate(tape, target_id_embed));
    }

    // blocks are the auxiliary features in gate order; returns the gated
    // concatenation E' = [w_1 * b_1, ..., w_k * b_k]
    T modality_gate(Tape& tape, const T& target_id_embed, const std::vector<T>& blocks) const {
        if (static_cast<int>(blocks.size()) != cfg.n_tokens) {
            throw DimensionError("modality_gate: expected " + std::to_string(cfg.n_tokens) + " blocks, got " + std::to_string(blocks.size()));
        }
        for (const T& b : blocks) {
            if (cols(b) != cfg.d_e) throw DimensionError("modality_gate: block width != d_e");
        }
        T cat = concat_cols(blocks);
        return mul(gate_weights(tape, target_id_embed), cat);
    }

    // E_c = E'(E'.w_c) + b_c + E'. The printed outer-product form
    // E'E'^T w_c equals E' scaled by the scalar E'.w_c, so this runs in O(D).
    T cross_net(Tape& tape, const T& e_prime) const {
        const int D = cfg.n_tokens * cfg.d_e;
        if (cols(e_prime) != D) throw DimensionError("cross_net: input width " + std::to_string(cols(e_prime)) + " != " + std::to_string(D));
        T wcol = reshape(leaf(tape, *cross_w), D, 1);
        T s = matmul(e_prime, wcol);  // [B x 1]
        T rank_one = row_scale(e_prime, s);
        return add(add_rowvec(rank_one, reshape(leaf(tape, *cross_b), 1, D)), e_prime);
    }

    // splits E_c into n_tokens tokens of width d_e, attends with the primary
    // ID feature as the query, and adds the residual so zeroed auxiliaries
    // leave the primary feature untouched
    T noninvasive_fuse(Tape& tape, const T& e_id, const T& e_c) const {
        const int D = cols(e_c);
        if (D % cfg.d_e != 0) throw ConfigError("noninvasive_fuse: auxiliary width not divisible into d_e tokens");
        const int n_tok = D / cfg.d_e;
        const int B = rows(e_c);
        T tokens = reshape(e_c, B * n_tok, cfg.d_e);
        T fused = att(tape, e_id, tokens, n_tok);
        return add(fused, e_id);
    }
};

}  // namespace dmsn
