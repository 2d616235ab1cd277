#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "dmsn/nn.hpp"
#include "dmsn/param_store.hpp"
#include "dmsn/tensor.hpp"

namespace dmsn {

enum class Modality { id, im, te };

inline const char* modality_name(Modality m) {
    switch (m) {
        case Modality::id: return "id";
        case Modality::im: return "im";
        case Modality::te: return "te";
    }
    return "?";
}

constexpr std::array<Modality, 3> kAllModalities = {Modality::id, Modality::im, Modality::te};

// one behavior sequence in a single modality, rows are item embeddings
struct EmbeddingSequence {
    Modality modality = Modality::id;
    int n = 0;
    int d = 0;
    std::vector<double> data;  // row-major n x d
};

struct TargetItem {
    int64_t raw_id = 0;
    std::vector<double> id_embed;
    std::vector<double> im_embed;
    std::vector<double> te_embed;
};

enum class AttentionScore {
    din_mlp,  // 2-layer perceptron on [item, target, item*target]
    dot,      // plain dot product; positively homogeneous in the target
};

// Target-conditioned attention pooling. Scores each sequence row against the
// target and softmax-normalizes over the sequence. Batched form works on B
// groups of n rows each.
struct TargetAttention {
    AttentionScore mode = AttentionScore::din_mlp;
    Mlp score_net;  // [3d -> hidden -> 1], used in din_mlp mode

    static TargetAttention create(ParamStore& store, const std::string& name, int d, int hidden, Rng& rng,
                                  AttentionScore mode = AttentionScore::din_mlp) {
        TargetAttention t;
        t.mode = mode;
        if (mode == AttentionScore::din_mlp) {
            t.score_net = Mlp::create(store, name + ".score", {3 * d, hidden, 1}, rng, Activation::relu, Activation::none);
        }
        return t;
    }

    // seq: [(B*n) x d], target: [B x d] -> weights [B x n]
    T weights(Tape& tape, const T& seq, const T& target, int n) const {
        if (n < 1) throw EmptySequenceError("attention over empty sequence");
        if (cols(seq) != cols(target)) {
            throw DimensionError("target_attention: seq dim " + std::to_string(cols(seq)) + " vs target " + std::to_string(cols(target)));
        }
        const int B = rows(target);
        if (rows(seq) != B * n) throw DimensionError("target_attention: seq rows != B*n");
        T scores{};
        if (mode == AttentionScore::dot) {
            scores = group_dot(target, seq, n);
        } else {
            T rep = repeat_rows(target, n);
            T x = concat_cols({seq, rep, mul(seq, rep)});
            scores = reshape(score_net(tape, x), B, n);
        }
        return softmax_rows(scores);
    }

    // pooled feature per group: sum_i a_i * seq_i
    T pooled(Tape& tape, const T& seq, const T& target, int n) const {
        return group_weighted_sum(weights(tape, seq, target, n), seq);
    }
};

// weighted sequence for a single sample: each row scaled by its attention weight
inline T target_attention(Tape& tape, const TargetAttention& att, const T& seq, const T& target) {
    T w = att.weights(tape, seq, target, rows(seq));
    return row_scale(seq, reshape(w, rows(seq), 1));
}

// column sums of a weighted sequence -> [1 x d]
inline T sum_pool(Tape& tape, const T& weighted) {
    const int n = rows(weighted);
    if (n < 1) throw DimensionError("sum_pool: empty input");
    T ones = constant(tape, 1, n, std::vector<double>(n, 1.0));
    return group_weighted_sum(ones, weighted);
}

// ---- embedding sources ----

// Precomputed per-item im/te embedding table loaded from a JSON-lines
// manifest. First line declares dims, each following line is one item.
struct EmbeddingTable {
    int d_im = 0;
    int d_te = 0;
    std::unordered_map<int64_t, size_t> index;
    std::vector<double> im;  // packed rows
    std::vector<double> te;

    size_t size() const { return index.size(); }
    bool has(int64_t item) const { return index.count(item) != 0; }

    const double* im_row(int64_t item) const { return &im[row_of(item) * d_im]; }
    const double* te_row(int64_t item) const { return &te[row_of(item) * d_te]; }

    size_t row_of(int64_t item) const {
        auto it = index.find(item);
        if (it == index.end()) throw IngestionError("item " + std::to_string(item) + " missing from embedding table");
        return it->second;
    }
};

inline EmbeddingTable load_precomputed(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IngestionError("cannot open embedding manifest: " + path);
    std::string line;
    if (!std::getline(f, line)) throw IngestionError("embedding manifest has no header: " + path);
    nlohmann::json header = nlohmann::json::parse(line);
    EmbeddingTable table;
    table.d_im = header.at("d_im").get<int>();
    table.d_te = header.at("d_te").get<int>();
    if (table.d_im <= 0 || table.d_te <= 0) throw IngestionError("bad dims in embedding manifest header");
    size_t row = 0;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        const int64_t item = j.at("item").get<int64_t>();
        const auto& im = j.at("im");
        const auto& te = j.at("te");
        if (static_cast<int>(im.size()) != table.d_im || static_cast<int>(te.size()) != table.d_te) {
            throw IngestionError("embedding row for item " + std::to_string(item) + " has dims " + std::to_string(im.size()) + "/" + std::to_string(te.size()) + ", manifest declares " + std::to_string(table.d_im) + "/" + std::to_string(table.d_te));
        }
        if (table.index.count(item)) throw IngestionError("duplicate item " + std::to_string(item) + " in embedding manifest");
        table.index.emplace(item, row++);
        for (const auto& v : im) table.im.push_back(v.get<double>());
        for (const auto& v : te) table.te.push_back(v.get<double>());
    }
    if (table.index.empty()) {
        std::cerr << "warning: embedding manifest " << path << " has no items\n";
    }
    return table;
}

inline void save_embedding_table(const EmbeddingTable& table, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IngestionError("cannot write embedding manifest: " + path);
    f << nlohmann::json{{"d_im", table.d_im}, {"d_te", table.d_te}} << "\n";
    // stable item order for reproducible files
    std::vector<int64_t> items;
    items.reserve(table.index.size());
    for (const auto& [item, row] : table.index) items.push_back(item);
    std::sort(items.begin(), items.end());
    for (int64_t item : items) {
        const size_t row = table.index.at(item);
        nlohmann::json j;
        j["item"] = item;
        j["im"] = std::vector<double>(table.im.begin() + row * table.d_im, table.im.begin() + (row + 1) * table.d_im);
        j["te"] = std::vector<double>(table.te.begin() + row * table.d_te, table.te.begin() + (row + 1) * table.d_te);
        f << j << "\n";
    }
}

// Abstract source of frozen im/te item embeddings: either a synthetic
// generator or a precomputed table loaded from disk.
class EncoderProvider {
public:
    virtual ~EncoderProvider() = default;
    virtual int d_im() const = 0;
    virtual int d_te() const = 0;
    virtual void embed(int64_t item, std::vector<double>& im_out, std::vector<double>& te_out) const = 0;
};

class PrecomputedProvider final : public EncoderProvider {
public:
    explicit PrecomputedProvider(EmbeddingTable table) : table_(std::move(table)) {}

    int d_im() const override { return table_.d_im; }
    int d_te() const override { return table_.d_te; }

    void embed(int64_t item, std::vector<double>& im_out, std::vector<double>& te_out) const override {
        const double* im = table_.im_row(item);
        const double* te = table_.te_row(item);
        im_out.assign(im, im + table_.d_im);
        te_out.assign(te, te + table_.d_te);
    }

    const EmbeddingTable& table() const { return table_; }

private:
    EmbeddingTable table_;
};

}  // namespace dmsn
