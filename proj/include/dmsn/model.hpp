#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dmsn/diffusion.hpp"
#include "dmsn/fdaf.hpp"
#include "dmsn/metrics.hpp"
#include "dmsn/mfe.hpp"
#include "dmsn/optim.hpp"

namespace dmsn {

struct AblationFlags {
    bool no_mfe = false;
    bool no_src = false;
    bool no_fdaf = false;
};

struct ModelConfig {
    int n_items = 0;
    int d_id = 16;
    int d_im = 512;
    int d_te = 512;
    int d_e = 128;
    int hidden = 128;
    int att_hidden = 128;
    int heads = 8;
    int src_T = 50;
    double alpha_start = 0.999;
    double alpha_end = 0.98;
    double weight_init = 0.5;  // alpha_{m,n} init
    double w1 = 0.01;
    double w2 = 0.01;
    AblationFlags ablation;
    bool syn_corrected_margin = false;
    double syn_margin = 0.0;
    std::array<int, 2> profile_cardinalities = {3, 10};
};

// One training/eval batch; all sequences share the same length n.
struct Batch {
    int B = 0;
    int n = 0;
    std::vector<int> id_seq;            // B*n item keys
    std::vector<double> im_seq;         // (B*n) x d_im
    std::vector<double> te_seq;         // (B*n) x d_te
    std::vector<int> target_ids;        // B
    std::vector<double> target_im;      // B x d_im
    std::vector<double> target_te;      // B x d_te
    std::vector<int> profile0;          // B
    std::vector<int> profile1;          // B
    std::vector<double> labels;         // B
    std::vector<uint64_t> noise_seeds;  // B, drives the SRC noise
};

// The Diff-MSIN network: DIN backbone over the ID sequence, MFE expert/gate
// fusion, SRC diffusion-based synergy capture, FDAF non-intrusive fusion,
// and the prediction head. Ablation flags drop whole modules; what remains
// composes exactly like the full model.
class DiffMsinModel {
public:
    DiffMsinModel(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
        if (cfg_.n_items <= 0) throw ConfigError("model needs a positive item count");
        Rng rng(Rng::mix(seed, 0xD1FF));

        const double embed_sigma = 1.0 / std::sqrt(static_cast<double>(cfg_.d_id));
        item_embed_ = &store_.add_gaussian("embed.item", {cfg_.n_items, cfg_.d_id}, embed_sigma, rng);
        profile_embed_[0] = &store_.add_gaussian("embed.profile.0", {cfg_.profile_cardinalities[0], cfg_.d_id}, embed_sigma, rng);
        profile_embed_[1] = &store_.add_gaussian("embed.profile.1", {cfg_.profile_cardinalities[1], cfg_.d_id}, embed_sigma, rng);

        backbone_ = IdDinExpert::create(store_, "backbone", cfg_.d_id, cfg_.att_hidden, cfg_.hidden, cfg_.d_e, rng);

        const int d_user = 2 * cfg_.d_id;
        const int d_target_cat = cfg_.d_id + cfg_.d_im + cfg_.d_te;
        head_ = PredictHead::create(store_, "head", head_feature_width(), d_user, d_target_cat, cfg_.d_e, cfg_.hidden, rng);

        if (multimodal()) {
            att_im_ = TargetAttention::create(store_, "att.im", cfg_.d_im, cfg_.att_hidden, rng);
            att_te_ = TargetAttention::create(store_, "att.te", cfg_.d_te, cfg_.att_hidden, rng);
            if (!cfg_.ablation.no_mfe) {
                MfeConfig mc;
                mc.d_id = cfg_.d_id;
                mc.d_im = cfg_.d_im;
                mc.d_te = cfg_.d_te;
                mc.d_e = cfg_.d_e;
                mc.hidden = cfg_.hidden;
                mfe_ = Mfe::create(store_, "mfe", mc, rng);
            } else {
                // dimension adapters standing in for the experts
                proj_im_ = Mlp::create(store_, "proj.im", {cfg_.d_im, cfg_.hidden, cfg_.d_e}, rng);
                proj_te_ = Mlp::create(store_, "proj.te", {cfg_.d_te, cfg_.hidden, cfg_.d_e}, rng);
            }
        }
        if (!cfg_.ablation.no_src) {
            sched_ = build_schedule(cfg_.src_T, cfg_.alpha_start, cfg_.alpha_end);
            src_w_ = FusionWeights::create(store_, "src.w", cfg_.weight_init);
            syn_ = SynergyHead::create(store_, "src.syn", cfg_.d_e, cfg_.hidden, d_target_cat, rng);
        }
        if (!cfg_.ablation.no_fdaf) {
            FdafConfig fc;
            fc.d_id_embed = cfg_.d_id;
            fc.d_e = cfg_.d_e;
            fc.n_tokens = 2 + (cfg_.ablation.no_mfe ? 0 : 1) + (cfg_.ablation.no_src ? 0 : 1);
            fc.heads = cfg_.heads;
            fdaf_ = Fdaf::create(store_, "fdaf", fc, rng);
        }
    }

    DiffMsinModel(DiffMsinModel&&) = default;
    DiffMsinModel& operator=(DiffMsinModel&&) = default;

    struct ForwardOut {
        T y_out;
        T l_y, l_con, l_syn, total;
    };

    ForwardOut forward(Tape& tape, const Batch& b) const {
        check_batch(b);
        const int B = b.B, n = b.n;
        T item_table = leaf(tape, *item_embed_);
        T id_seq_e = gather_rows(item_table, b.id_seq);
        T target_id_e = gather_rows(item_table, b.target_ids);
        T user_e = concat_cols({gather_rows(leaf(tape, *profile_embed_[0]), b.profile0),
                                gather_rows(leaf(tape, *profile_embed_[1]), b.profile1)});
        T t_im = constant(tape, B, cfg_.d_im, b.target_im);
        T t_te = constant(tape, B, cfg_.d_te, b.target_te);
        T target_cat = concat_cols({target_id_e, t_im, t_te});

        auto [pooled_id, e_id_backbone] = backbone_.forward(tape, id_seq_e, target_id_e, n);

        T zero_scalar = constant(tape, 1, 1, {0.0});
        T l_con = zero_scalar;
        T l_syn = zero_scalar;
        T e_expert_im{}, e_expert_te{}, e_sh{};
        T e_id = e_id_backbone;

        if (multimodal()) {
            T im_seq = constant(tape, B * n, cfg_.d_im, b.im_seq);
            T te_seq = constant(tape, B * n, cfg_.d_te, b.te_seq);
            T e_a_im = att_im_->pooled(tape, im_seq, t_im, n);
            T e_a_te = att_te_->pooled(tape, te_seq, t_te, n);
            if (mfe_.has_value()) {
                MfeOutput mo = mfe_->forward(tape, e_a_im, e_a_te, pooled_id, e_id_backbone);
                e_expert_im = mo.e_expert_im;
                e_expert_te = mo.e_expert_te;
                e_sh = mo.e_expert_sh;
                e_id = mo.e_fused_id;
                l_con = mfe_->decouple(tape, mo);
            } else {
                e_expert_im = (*proj_im_)(tape, e_a_im);
                e_expert_te = (*proj_te_)(tape, e_a_te);
            }
        }

        T e_syn{};
        if (src_w_.has_value()) {
            NoiseSource noise;
            noise.sample_seeds = b.noise_seeds;
            noise.d = cfg_.d_e;
            auto h0 = std::array<T, kNumModalities>{e_id_backbone, e_expert_im, e_expert_te};
            auto hhat = run_mssfi(tape, h0, sched_, *src_w_, noise);
            e_syn = syn_->synergy_fuse(tape, hhat[1], hhat[2], hhat[0]);
            T t_syn = syn_->target_proj(tape, target_cat);
            l_syn = synergy_loss(tape, e_syn, t_syn, b.labels, cfg_.syn_corrected_margin, cfg_.syn_margin);
        }

        T y_out{};
        if (fdaf_.has_value()) {
            std::vector<T> blocks = {e_expert_im, e_expert_te};
            if (mfe_.has_value()) blocks.push_back(e_sh);
            if (src_w_.has_value()) blocks.push_back(e_syn);
            T e_prime = fdaf_->modality_gate(tape, target_id_e, blocks);
            T e_c = fdaf_->cross_net(tape, e_prime);
            T e_att = fdaf_->noninvasive_fuse(tape, e_id, e_c);
            y_out = head_(tape, e_att, user_e, target_cat);
        } else {
            std::vector<T> feats = {e_id};
            if (multimodal()) {
                feats.push_back(e_expert_im);
                feats.push_back(e_expert_te);
            }
            if (mfe_.has_value()) feats.push_back(e_sh);
            if (src_w_.has_value()) feats.push_back(e_syn);
            y_out = head_(tape, feats.size() == 1 ? feats[0] : concat_cols(feats), user_e, target_cat);
        }

        ForwardOut out;
        out.y_out = y_out;
        out.l_y = bce_mean(y_out, b.labels);
        out.l_con = l_con;
        out.l_syn = l_syn;
        out.total = total_loss(out.l_y, l_con, l_syn, cfg_.w1, cfg_.w2);
        return out;
    }

    std::vector<double> predict(const Batch& b) const {
        Tape tape(false);
        return values(forward(tape, b).y_out);
    }

    double loss_value(const Batch& b) const {
        Tape tape(false);
        return item(forward(tape, b).total);
    }

    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const ModelConfig& config() const { return cfg_; }

    bool multimodal() const {
        const auto& a = cfg_.ablation;
        return !(a.no_mfe && a.no_src && a.no_fdaf);
    }

    // test/ablation hooks
    Mfe* mfe() { return mfe_.has_value() ? &*mfe_ : nullptr; }
    Fdaf* fdaf() { return fdaf_.has_value() ? &*fdaf_ : nullptr; }
    const IdDinExpert& backbone() const { return backbone_; }
    const PredictHead& head() const { return head_; }

private:
    int head_feature_width() const {
        if (!cfg_.ablation.no_fdaf) return cfg_.d_e;  // E_att only
        int w = cfg_.d_e;                             // E_id
        if (multimodal()) w += 2 * cfg_.d_e;          // im/te experts
        if (!cfg_.ablation.no_mfe) w += cfg_.d_e;     // shared feature
        if (!cfg_.ablation.no_src) w += cfg_.d_e;     // synergy feature
        return w;
    }

    void check_batch(const Batch& b) const {
        if (b.B <= 0 || b.n <= 0) throw DimensionError("empty batch");
        const size_t Bn = static_cast<size_t>(b.B) * b.n;
        if (b.id_seq.size() != Bn || b.labels.size() != static_cast<size_t>(b.B) ||
            b.noise_seeds.size() != static_cast<size_t>(b.B) || b.target_ids.size() != static_cast<size_t>(b.B)) {
            throw DimensionError("batch field sizes disagree");
        }
        if (multimodal() && (b.im_seq.size() != Bn * cfg_.d_im || b.te_seq.size() != Bn * cfg_.d_te)) {
            throw DimensionError("batch modality sequences disagree with dims");
        }
    }

    ModelConfig cfg_;
    ParamStore store_;
    Parameter* item_embed_ = nullptr;
    Parameter* profile_embed_[2] = {nullptr, nullptr};
    IdDinExpert backbone_;
    PredictHead head_;
    std::optional<TargetAttention> att_im_, att_te_;
    std::optional<Mfe> mfe_;
    std::optional<Mlp> proj_im_, proj_te_;
    NoiseSchedule sched_;
    std::optional<FusionWeights> src_w_;
    std::optional<SynergyHead> syn_;
    std::optional<Fdaf> fdaf_;
};

// copies every parameter whose name exists in both stores (used to line up
// shared components across differently-configured models)
inline size_t copy_shared_params(const ParamStore& from, ParamStore& to) {
    size_t copied = 0;
    for (const auto& [name, p] : from) {
        if (!to.has(name)) continue;
        Parameter& dst = to.at(name);
        if (dst.shape != p.shape) throw ContractError("shape mismatch copying " + name);
        dst.value = p.value;
        ++copied;
    }
    return copied;
}

}  // namespace dmsn
