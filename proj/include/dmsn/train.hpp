#pragma once

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dmsn/data.hpp"
#include "dmsn/model.hpp"
#include "dmsn/optim.hpp"

namespace dmsn {

struct TrainConfig {
    double lr = 1e-3;  // searched grid in the reference setup: {1e-5, 1e-4, 1e-3}
    int batch_size = 1024;
    int d_id = 16;
    int d_im = 512;
    int d_te = 512;
    int d_e = 128;
    int hidden = 128;
    int att_hidden = 128;
    int heads = 8;
    double w1 = 0.01;
    double w2 = 0.01;
    int src_T = 50;
    double alpha_start = 0.999;
    double alpha_end = 0.98;
    double weight_init = 0.5;
    int patience = 10;  // stop after this many epochs without AUC improvement
    int max_epochs = 50;
    uint64_t seed = 1;
    std::string optimizer = "adam";
    AblationFlags ablation;
    bool syn_corrected_margin = false;
    double syn_margin = 0.0;
};

struct EpochMetrics {
    int epoch = 0;
    double auc = 0.0;
    double l_y = 0.0;
    double l_con = 0.0;
    double l_syn = 0.0;
    double seconds = 0.0;
};

struct TrainResult {
    std::vector<EpochMetrics> history;
    double best_auc = 0.0;
    int best_epoch = -1;
    int epochs_run = 0;
};

inline int eval_workers() {
    if (const char* env = std::getenv("DMSN_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}

// builds a model batch from dataset sample indices (equal sequence lengths)
inline Batch make_batch(const Dataset& ds, const std::vector<int>& idx, size_t begin, size_t end, uint64_t noise_salt,
                        uint64_t seed) {
    Batch b;
    b.B = static_cast<int>(end - begin);
    b.n = static_cast<int>(ds.samples[idx[begin]].seq.size());
    const int d_im = ds.embeddings.d_im;
    const int d_te = ds.embeddings.d_te;
    b.id_seq.reserve(static_cast<size_t>(b.B) * b.n);
    b.im_seq.reserve(static_cast<size_t>(b.B) * b.n * d_im);
    b.te_seq.reserve(static_cast<size_t>(b.B) * b.n * d_te);
    for (size_t k = begin; k < end; ++k) {
        const Interaction& s = ds.samples[idx[k]];
        if (static_cast<int>(s.seq.size()) != b.n) throw ContractError("batch mixes sequence lengths");
        for (int item : s.seq) {
            b.id_seq.push_back(item);
            const double* im = ds.embeddings.im_row(item);
            const double* te = ds.embeddings.te_row(item);
            b.im_seq.insert(b.im_seq.end(), im, im + d_im);
            b.te_seq.insert(b.te_seq.end(), te, te + d_te);
        }
        b.target_ids.push_back(s.target);
        const double* tim = ds.embeddings.im_row(s.target);
        const double* tte = ds.embeddings.te_row(s.target);
        b.target_im.insert(b.target_im.end(), tim, tim + d_im);
        b.target_te.insert(b.target_te.end(), tte, tte + d_te);
        b.profile0.push_back(s.profile[0]);
        b.profile1.push_back(s.profile[1]);
        b.labels.push_back(static_cast<double>(s.y));
        b.noise_seeds.push_back(Rng::mix(seed, noise_salt, static_cast<uint64_t>(idx[k])));
    }
    return b;
}

// groups sample indices by sequence length so batches need no padding
inline std::map<int, std::vector<int>> group_by_length(const Dataset& ds, const std::vector<int>& idx) {
    std::map<int, std::vector<int>> groups;
    for (int i : idx) groups[static_cast<int>(ds.samples[i].seq.size())].push_back(i);
    return groups;
}

class Trainer {
public:
    Trainer(TrainConfig cfg, const Dataset& ds) : cfg_(std::move(cfg)), ds_(ds) {
        if (ds_.train_idx.empty() || ds_.test_idx.empty()) throw ConfigError("dataset has no split; run split first");
        if (static_cast<int>(ds_.train_idx.size()) < cfg_.batch_size) {
            throw ConfigError("training set (" + std::to_string(ds_.train_idx.size()) + ") smaller than one batch (" + std::to_string(cfg_.batch_size) + ")");
        }
        ModelConfig mc;
        mc.n_items = static_cast<int>(ds_.embeddings.size());
        mc.d_id = cfg_.d_id;
        mc.d_im = ds_.embeddings.d_im;
        mc.d_te = ds_.embeddings.d_te;
        mc.d_e = cfg_.d_e;
        mc.hidden = cfg_.hidden;
        mc.att_hidden = cfg_.att_hidden;
        mc.heads = cfg_.heads;
        mc.src_T = cfg_.src_T;
        mc.alpha_start = cfg_.alpha_start;
        mc.alpha_end = cfg_.alpha_end;
        mc.weight_init = cfg_.weight_init;
        mc.w1 = cfg_.w1;
        mc.w2 = cfg_.w2;
        mc.ablation = cfg_.ablation;
        mc.syn_corrected_margin = cfg_.syn_corrected_margin;
        mc.syn_margin = cfg_.syn_margin;
        model_ = std::make_unique<DiffMsinModel>(mc, cfg_.seed);
    }

    DiffMsinModel& model() { return *model_; }

    // scores a sample set; sharded across DMSN_THREADS workers, merged by
    // sample order so the result is independent of threading
    std::vector<double> score(const std::vector<int>& idx) const {
        std::vector<double> scores(idx.size(), 0.0);
        const int workers = std::min<int>(eval_workers(), std::max<size_t>(idx.size() / 64, 1));
        auto run_shard = [&](size_t lo, size_t hi) {
            auto groups = group_by_length(ds_, std::vector<int>(idx.begin() + lo, idx.begin() + hi));
            // position lookup within the full score vector
            std::map<int, size_t> pos;
            for (size_t i = lo; i < hi; ++i) pos[idx[i]] = i;
            for (const auto& [len, members] : groups) {
                for (size_t b0 = 0; b0 < members.size(); b0 += cfg_.batch_size) {
                    const size_t b1 = std::min(members.size(), b0 + static_cast<size_t>(cfg_.batch_size));
                    Batch batch = make_batch(ds_, members, b0, b1, kEvalNoiseSalt, cfg_.seed);
                    auto out = model_->predict(batch);
                    for (size_t k = b0; k < b1; ++k) scores[pos[members[k]]] = out[k - b0];
                }
            }
        };
        if (workers <= 1) {
            run_shard(0, idx.size());
        } else {
            std::vector<std::thread> pool;
            const size_t chunk = (idx.size() + workers - 1) / workers;
            for (int w = 0; w < workers; ++w) {
                const size_t lo = std::min(idx.size(), w * chunk);
                const size_t hi = std::min(idx.size(), lo + chunk);
                if (lo < hi) pool.emplace_back(run_shard, lo, hi);
            }
            for (auto& t : pool) t.join();
        }
        return scores;
    }

    double evaluate(const std::vector<int>& idx) const {
        auto scores = score(idx);
        std::vector<int> labels;
        labels.reserve(idx.size());
        for (int i : idx) labels.push_back(ds_.samples[i].y);
        return evaluate_auc(scores, labels);
    }

    TrainResult run(const std::string& metrics_path = "", const std::string& checkpoint_path = "") {
        Optimizer opt(optimizer_from_string(cfg_.optimizer), cfg_.lr);
        std::ofstream metrics;
        if (!metrics_path.empty()) {
            metrics.open(metrics_path);
            if (!metrics) throw IngestionError("cannot write metrics to " + metrics_path);
        }

        TrainResult result;
        ParamStore::Snapshot best_snapshot;
        int stall = 0;
        for (int epoch = 1; epoch <= cfg_.max_epochs; ++epoch) {
            const auto t0 = std::chrono::steady_clock::now();
            auto groups = group_by_length(ds_, ds_.train_idx);
            Rng shuffle_rng(Rng::mix(cfg_.seed, static_cast<uint64_t>(epoch), 0xBEEF));
            double sum_ly = 0.0, sum_lcon = 0.0, sum_lsyn = 0.0;
            size_t batches = 0;
            for (auto& [len, members] : groups) {
                // Fisher-Yates with the deterministic rng
                for (size_t i = members.size(); i > 1; --i) {
                    std::swap(members[i - 1], members[shuffle_rng.uniform_int(0, static_cast<int>(i) - 1)]);
                }
                for (size_t b0 = 0; b0 < members.size(); b0 += cfg_.batch_size) {
                    const size_t b1 = std::min(members.size(), b0 + static_cast<size_t>(cfg_.batch_size));
                    Batch batch = make_batch(ds_, members, b0, b1, static_cast<uint64_t>(epoch), cfg_.seed);
                    Tape tape;
                    auto out = model_->forward(tape, batch);
                    model_->params().zero_grad();
                    tape.backward(out.total);
                    opt.step(model_->params());
                    sum_ly += item(out.l_y);
                    sum_lcon += item(out.l_con);
                    sum_lsyn += item(out.l_syn);
                    ++batches;
                }
            }
            const double auc = evaluate(ds_.test_idx);
            const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

            EpochMetrics em;
            em.epoch = epoch;
            em.auc = auc;
            em.l_y = sum_ly / static_cast<double>(batches);
            em.l_con = sum_lcon / static_cast<double>(batches);
            em.l_syn = sum_lsyn / static_cast<double>(batches);
            em.seconds = seconds;
            result.history.push_back(em);
            result.epochs_run = epoch;
            if (metrics.is_open()) {
                metrics << nlohmann::json{{"epoch", em.epoch}, {"auc", em.auc},        {"l_y", em.l_y},
                                          {"l_con", em.l_con}, {"l_syn", em.l_syn},    {"seconds", em.seconds}}
                        << "\n"
                        << std::flush;
            }

            if (auc > result.best_auc || result.best_epoch < 0) {
                result.best_auc = auc;
                result.best_epoch = epoch;
                best_snapshot = model_->params().snapshot();
                stall = 0;
            } else {
                ++stall;
            }
            if (stall >= cfg_.patience) break;
        }
        if (!best_snapshot.empty()) model_->params().restore(best_snapshot);
        if (!checkpoint_path.empty()) model_->params().save(checkpoint_path);
        return result;
    }

    static constexpr uint64_t kEvalNoiseSalt = 0xE7A1;

private:
    TrainConfig cfg_;
    const Dataset& ds_;
    std::unique_ptr<DiffMsinModel> model_;
};

// convenience wrapper matching the operation signature
inline TrainResult train(const TrainConfig& cfg, const Dataset& ds, const std::string& metrics_path = "",
                         const std::string& checkpoint_path = "") {
    Trainer trainer(cfg, ds);
    return trainer.run(metrics_path, checkpoint_path);
}

}  // namespace dmsn
