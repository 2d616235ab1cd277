#pragma once

#include <cmath>
#include <iostream>
#include <string>
#include <vector>

#include "dmsn/train.hpp"

namespace dmsn {

// Benchmark recipes: a data spec plus a training configuration small enough
// to run a full ablation sweep on one desktop core.
struct BenchPreset {
    SyntheticSpec data;
    TrainConfig train;
};

inline BenchPreset bench_preset(const std::string& name) {
    BenchPreset p;
    p.data = preset_spec(name);
    TrainConfig& t = p.train;
    t.lr = 2e-3;
    t.batch_size = 256;
    t.d_id = 16;
    t.d_e = 32;
    t.hidden = 32;
    t.att_hidden = 32;
    t.heads = 4;
    t.w1 = 0.01;
    t.w2 = 0.05;
    t.src_T = 12;  // the sweet spot reported for the step count
    t.max_epochs = 8;
    t.patience = 8;
    return p;
}

struct AblationRow {
    std::string name;
    AblationFlags flags;
    std::vector<double> aucs;  // per seed
    double mean = 0.0;
};

struct SeedStats {
    std::vector<double> values;
    double mean = 0.0;
    double stddev = 0.0;
};

inline SeedStats seed_stats(const std::vector<double>& v) {
    SeedStats s;
    s.values = v;
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - s.mean) * (x - s.mean);
    s.stddev = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
    return s;
}

inline const std::vector<std::pair<std::string, AblationFlags>>& ablation_table_rows() {
    static const std::vector<std::pair<std::string, AblationFlags>> rows = {
        {"full", {}},
        {"no_fdaf", {false, false, true}},
        {"no_src", {false, true, false}},
        {"no_mfe_src_fdaf", {true, true, true}},
    };
    return rows;
}

struct AblationBenchResult {
    std::vector<AblationRow> rows;
    std::vector<double> bayes_aucs;  // per seed, closed-form upper bound
    double bayes_mean = 0.0;
    bool bayes_upper_bounds_all = true;
};

// Trains the four ablation configurations over the given seeds. Each seed
// regenerates the dataset and reinitializes the model.
inline AblationBenchResult run_ablation_bench(const BenchPreset& preset, const std::vector<uint64_t>& seeds,
                                              std::ostream* log = nullptr) {
    AblationBenchResult result;
    for (const auto& [name, flags] : ablation_table_rows()) {
        AblationRow row;
        row.name = name;
        row.flags = flags;
        result.rows.push_back(row);
    }
    for (uint64_t seed : seeds) {
        SyntheticSpec data_spec = preset.data;
        data_spec.seed = seed;
        Dataset ds = generate(data_spec);
        split(ds);
        const double bayes = oracle_auc(ds, ds.test_idx, OracleKind::bayes);
        result.bayes_aucs.push_back(bayes);
        if (log) *log << "seed " << seed << " bayes upper bound " << bayes << "\n";
        for (auto& row : result.rows) {
            TrainConfig cfg = preset.train;
            cfg.seed = seed;
            cfg.ablation = row.flags;
            TrainResult tr = train(cfg, ds);
            row.aucs.push_back(tr.best_auc);
            if (tr.best_auc >= bayes) result.bayes_upper_bounds_all = false;
            if (log) {
                *log << "  " << row.name << " auc " << tr.best_auc << " (epochs " << tr.epochs_run << ")\n";
            }
        }
    }
    for (auto& row : result.rows) row.mean = seed_stats(row.aucs).mean;
    result.bayes_mean = seed_stats(result.bayes_aucs).mean;
    return result;
}

struct TSensitivityRow {
    int steps = 0;
    std::vector<double> aucs;
    double mean = 0.0;
    double stddev = 0.0;
};

// Full model at several diffusion step counts over the given seeds.
inline std::vector<TSensitivityRow> run_t_sensitivity(const BenchPreset& preset, const std::vector<int>& step_counts,
                                                      const std::vector<uint64_t>& seeds, std::ostream* log = nullptr) {
    std::vector<TSensitivityRow> rows;
    for (int steps : step_counts) {
        TSensitivityRow row;
        row.steps = steps;
        for (uint64_t seed : seeds) {
            SyntheticSpec data_spec = preset.data;
            data_spec.seed = seed;
            Dataset ds = generate(data_spec);
            split(ds);
            TrainConfig cfg = preset.train;
            cfg.seed = seed;
            cfg.src_T = steps;
            TrainResult tr = train(cfg, ds);
            row.aucs.push_back(tr.best_auc);
            if (log) *log << "T=" << steps << " seed " << seed << " auc " << tr.best_auc << "\n";
        }
        SeedStats st = seed_stats(row.aucs);
        row.mean = st.mean;
        row.stddev = st.stddev;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace dmsn
