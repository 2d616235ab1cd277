#pragma once

#include <optional>
#include <string>
#include <utility>

#include "dmsn/features.hpp"
#include "dmsn/nn.hpp"

namespace dmsn {

// The ID-modality expert: DIN-style target attention over the behavior
// sequence, sum pooling, then a perceptron to d_e. This is also the backbone
// every ablated configuration keeps.
struct IdDinExpert {
    TargetAttention att;
    Mlp tower;

    static IdDinExpert create(ParamStore& store, const std::string& name, int d_id, int att_hidden, int hidden, int d_e,
                              Rng& rng) {
        IdDinExpert e;
        e.att = TargetAttention::create(store, name + ".att", d_id, att_hidden, rng);
        e.tower = Mlp::create(store, name + ".tower", {d_id, hidden, d_e}, rng);
        return e;
    }

    // returns (pooled pre-perceptron feature, expert output)
    std::pair<T, T> forward(Tape& tape, const T& id_seq, const T& target_id, int n) const {
        if (n < 1) throw EmptySequenceError("id_expert: empty behavior sequence");
        T pooled = att.pooled(tape, id_seq, target_id, n);
        return {pooled, tower(tape, pooled)};
    }
};

inline std::pair<T, T> id_expert(Tape& tape, const IdDinExpert& e, const T& id_seq, const T& target_id, int n) {
    return e.forward(tape, id_seq, target_id, n);
}

struct MfeConfig {
    int d_id = 16;
    int d_im = 512;
    int d_te = 512;
    int d_e = 128;
    int hidden = 128;
};

struct MfeOutput {
    T e_expert_im, e_expert_te, e_expert_id;
    T e_share_im, e_share_te, e_share_id;
    T e_expert_sh;
    T e_fused_im, e_fused_te, e_fused_id;
    T e_a_id;  // attention-pooled ID feature fed to the shared expert
};

inline T average3(const T& a, const T& b, const T& c) { return scale(add(add(a, b), c), 1.0 / 3.0); }

// w * e_expert + (1 - w) * e_sh, elementwise convex combination
inline T gate_fuse(const T& e_expert, const T& e_sh, const T& w) {
    T one_minus = add_scalar(scale(w, -1.0), 1.0);
    return add(mul(w, e_expert), mul(one_minus, e_sh));
}

// Sum of ordered-pair cosines between experts minus the same sum between
// shares; 6 ordered pairs per side. Returns the batch mean. The attainable
// range is [-9, 9] (each side's sum lies in [-3, 6] by Gram positivity).
inline T decoupling_loss(const T& ex_id, const T& ex_im, const T& ex_te, const T& sh_id, const T& sh_im, const T& sh_te) {
    T expert_part = add(add(rowwise_cosine(ex_id, ex_im), rowwise_cosine(ex_id, ex_te)), rowwise_cosine(ex_im, ex_te));
    T share_part = add(add(rowwise_cosine(sh_id, sh_im), rowwise_cosine(sh_id, sh_te)), rowwise_cosine(sh_im, sh_te));
    return mean_all(scale(sub(expert_part, share_part), 2.0));
}

// Multi-modal feature enhancement: per-modality experts (the ID expert is
// the DIN backbone, owned outside), shared experts averaged into a common
// feature, and sigmoid gates fusing each expert with the common feature.
struct Mfe {
    MfeConfig cfg;
    Mlp expert_im, expert_te;
    Mlp share_im, share_te, share_id;
    Linear gate_im, gate_te, gate_id;

    // test/ablation hook: when set, every gate outputs this constant weight
    std::optional<double> gate_override;

    static Mfe create(ParamStore& store, const std::string& name, const MfeConfig& cfg, Rng& rng) {
        Mfe m;
        m.cfg = cfg;
        m.expert_im = Mlp::create(store, name + ".expert.im", {cfg.d_im, cfg.hidden, cfg.d_e}, rng);
        m.expert_te = Mlp::create(store, name + ".expert.te", {cfg.d_te, cfg.hidden, cfg.d_e}, rng);
        m.share_im = Mlp::create(store, name + ".share.im", {cfg.d_im, cfg.hidden, cfg.d_e}, rng);
        m.share_te = Mlp::create(store, name + ".share.te", {cfg.d_te, cfg.hidden, cfg.d_e}, rng);
        m.share_id = Mlp::create(store, name + ".share.id", {cfg.d_id, cfg.hidden, cfg.d_e}, rng);
        m.gate_im = Linear::create(store, name + ".gate.im", cfg.d_e, cfg.d_e, rng);
        m.gate_te = Linear::create(store, name + ".gate.te", cfg.d_e, cfg.d_e, rng);
        m.gate_id = Linear::create(store, name + ".gate.id", cfg.d_e, cfg.d_e, rng);
        return m;
    }

    T expert_forward(Tape& tape, const T& e_a, Modality m) const {
        switch (m) {
            case Modality::im: return expert_im(tape, e_a);
            case Modality::te: return expert_te(tape, e_a);
            case Modality::id: throw ContractError("expert_forward: ID modality goes through id_expert");
        }
        throw ContractError("expert_forward: bad modality");
    }

    T gate_weights(Tape& tape, const Linear& gate, const T& e_expert) const {
        if (gate_override.has_value()) {
            const int B = rows(e_expert);
            return constant(tape, B, cfg.d_e, std::vector<double>(static_cast<size_t>(B) * cfg.d_e, *gate_override));
        }
        return sigmoid(gate(tape, e_expert));
    }

    // e_a_im/e_a_te are the pooled modality features; pooled_id and
    // e_expert_id come from the ID backbone
    MfeOutput forward(Tape& tape, const T& e_a_im, const T& e_a_te, const T& pooled_id, const T& e_expert_id) const {
        MfeOutput out;
        out.e_expert_im = expert_im(tape, e_a_im);
        out.e_expert_te = expert_te(tape, e_a_te);
        out.e_expert_id = e_expert_id;
        out.e_a_id = pooled_id;

        out.e_share_im = share_im(tape, e_a_im);
        out.e_share_te = share_te(tape, e_a_te);
        out.e_share_id = share_id(tape, pooled_id);
        out.e_expert_sh = average3(out.e_share_im, out.e_share_te, out.e_share_id);

        out.e_fused_im = gate_fuse(out.e_expert_im, out.e_expert_sh, gate_weights(tape, gate_im, out.e_expert_im));
        out.e_fused_te = gate_fuse(out.e_expert_te, out.e_expert_sh, gate_weights(tape, gate_te, out.e_expert_te));
        out.e_fused_id = gate_fuse(out.e_expert_id, out.e_expert_sh, gate_weights(tape, gate_id, out.e_expert_id));
        return out;
    }

    T decouple(Tape&, const MfeOutput& o) const {
        return decoupling_loss(o.e_expert_id, o.e_expert_im, o.e_expert_te, o.e_share_id, o.e_share_im, o.e_share_te);
    }
};

// shared-expert outputs for the three modalities plus their mean
inline std::array<T, 4> shared_forward(Tape& tape, const Mfe& mfe, const T& e_a_im, const T& e_a_te, const T& e_a_id) {
    T sh_im = mfe.share_im(tape, e_a_im);
    T sh_te = mfe.share_te(tape, e_a_te);
    T sh_id = mfe.share_id(tape, e_a_id);
    return {sh_im, sh_te, sh_id, average3(sh_im, sh_te, sh_id)};
}

}  // namespace dmsn
