#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "dmsn/errors.hpp"
#include "dmsn/tensor.hpp"

namespace dmsn {

inline T bce_loss(const T& y_out, const std::vector<double>& y) { return bce_mean(y_out, y); }

// L = L_y + w1 L_con + w2 L_syn
inline T total_loss(const T& l_y, const T& l_con, const T& l_syn, double w1, double w2) {
    return add(l_y, axpby(w1, l_con, w2, l_syn));
}

// Rank-based (Mann-Whitney) AUC with tie-averaged ranks.
inline double evaluate_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw DimensionError("auc: scores/labels size mismatch");
    const size_t n = scores.size();
    size_t n_pos = 0;
    for (int y : labels) n_pos += (y > 0) ? 1 : 0;
    const size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) throw UndefinedAucError("evaluation set has a single class");

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    double pos_rank_sum = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based average rank of the tie block
        for (size_t k = i; k < j; ++k) {
            if (labels[order[k]] > 0) pos_rank_sum += avg_rank;
        }
        i = j;
    }
    const double u = pos_rank_sum - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

enum class RelaImprMode { plain_relative, above_random };

inline RelaImprMode rela_impr_mode_from_string(const std::string& s) {
    if (s == "plain_relative") return RelaImprMode::plain_relative;
    if (s == "above_random") return RelaImprMode::above_random;
    throw ConfigError("unknown RelaImpr mode: " + s);
}

// Relative AUC improvement over a base model, in percent. plain_relative
// reproduces the published tables; above_random is the cited variant.
inline double rela_impr(double auc_model, double auc_base, RelaImprMode mode) {
    if (mode == RelaImprMode::plain_relative) {
        if (auc_base == 0.0) throw ContractError("rela_impr: zero base AUC");
        return (auc_model - auc_base) / auc_base * 100.0;
    }
    if (auc_base <= 0.5) throw ContractError("rela_impr above_random requires base AUC > 0.5");
    return ((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0;
}

}  // namespace dmsn
