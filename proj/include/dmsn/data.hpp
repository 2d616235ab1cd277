#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "dmsn/errors.hpp"
#include "dmsn/features.hpp"
#include "dmsn/metrics.hpp"
#include "dmsn/rng.hpp"

namespace dmsn {

// Synthetic multi-modal CTR generator. Items carry binary latent factors:
// common factors visible in both embeddings, plus image- and text-specific
// factors. Click logits are user-weighted sums of those factors plus a
// synergy term that fires only when paired image and text factors co-occur
// on the item, weighted by a per-user synergy affinity. The synergy signal
// is therefore invisible to any single modality and only recoverable by
// matching cross-modal structure between history and target.
struct SyntheticSpec {
    int n_users = 2000;
    int n_items = 5000;
    int seq_len = 8;     // history length per labeled impression, within [5, 50]
    int n_labeled = 3;   // labeled positives per user
    int d_im = 512;
    int d_te = 512;
    int d_id = 16;
    int k_common = 2;
    int k_im_specific = 6;
    int k_te_specific = 6;
    int k_synergy = 4;
    double beta = 4.0;         // synergy strength
    double label_noise = 0.0;  // logit noise stddev, in [0, 1)
    double scale_common = 0.6;
    double scale_im = 0.8;
    double scale_te = 0.8;
    double click_bias = -5.0;  // base click propensity; clicks are rare events
    double embed_noise = 0.1;
    uint64_t seed = 1;
};

constexpr std::array<int, 2> kProfileCardinalities = {3, 10};  // gender, age bucket

struct ItemLatent {
    std::vector<uint8_t> common;
    std::vector<uint8_t> im_spec;
    std::vector<uint8_t> te_spec;
};

struct UserLatent {
    std::vector<double> w_common;
    std::vector<double> w_im;
    std::vector<double> w_te;
    std::vector<double> w_syn;  // per synergy pair
    std::array<int, 2> profile{};
    std::vector<int> clicked;  // time-ordered click stream
};

struct Interaction {
    int user = 0;
    std::array<int, 2> profile{};
    std::vector<int> seq;
    int target = 0;
    int y = 0;
};

struct Dataset {
    SyntheticSpec spec;
    EmbeddingTable embeddings;
    std::vector<Interaction> samples;
    std::vector<int> train_idx;
    std::vector<int> test_idx;
    int excluded_users = 0;

    // latent ground truth, present only for in-memory generated data
    bool has_latents = false;
    std::vector<ItemLatent> items;
    std::vector<UserLatent> users;
};

inline void validate_spec(const SyntheticSpec& s) {
    if (s.n_users <= 0 || s.n_items <= 0 || s.n_labeled <= 0) throw ConfigError("spec counts must be positive");
    if (s.seq_len < 5 || s.seq_len > 50) throw ConfigError("seq_len must lie in [5, 50]");
    if (s.label_noise < 0.0 || s.label_noise >= 1.0) throw ConfigError("label_noise must lie in [0, 1)");
    if (s.beta < 0.0) throw ConfigError("synergy strength must be >= 0");
    if (s.k_common < 0 || s.k_im_specific < 0 || s.k_te_specific < 0 || s.k_synergy < 0) {
        throw ConfigError("factor counts must be >= 0");
    }
    if (s.k_synergy > std::min(s.k_im_specific, s.k_te_specific)) {
        throw ConfigError("k_synergy exceeds the specific factor counts");
    }
    if (s.k_im_specific + s.k_common > s.d_im || s.k_te_specific + s.k_common > s.d_te) {
        throw ConfigError("factor blocks do not fit into the embedding dims");
    }
    const long need = static_cast<long>(s.seq_len) + s.n_labeled;
    if (need >= s.n_items) throw ConfigError("stream length exceeds the item pool");
}

namespace detail {

inline double click_logit(const SyntheticSpec& spec, const UserLatent& u, const ItemLatent& it) {
    double s = 0.0;
    for (int k = 0; k < spec.k_common; ++k) s += u.w_common[k] * (it.common[k] ? 1.0 : -1.0);
    for (int k = 0; k < spec.k_im_specific; ++k) s += u.w_im[k] * (it.im_spec[k] ? 1.0 : -1.0);
    for (int k = 0; k < spec.k_te_specific; ++k) s += u.w_te[k] * (it.te_spec[k] ? 1.0 : -1.0);
    for (int p = 0; p < spec.k_synergy; ++p) {
        if (it.im_spec[p] && it.te_spec[p]) s += spec.beta * u.w_syn[p];
    }
    return s;
}

inline void write_factor_blocks(std::vector<double>& embed, int d, int block, const std::vector<uint8_t>& spec_bits,
                                const std::vector<uint8_t>& common_bits, double noise_sigma, Rng& rng) {
    embed.assign(static_cast<size_t>(d), 0.0);
    int off = 0;
    for (uint8_t bit : spec_bits) {
        const double v = bit ? 1.0 : -1.0;
        for (int j = 0; j < block; ++j) embed[off + j] = v;
        off += block;
    }
    for (uint8_t bit : common_bits) {
        const double v = bit ? 1.0 : -1.0;
        for (int j = 0; j < block; ++j) embed[off + j] = v;
        off += block;
    }
    for (int j = 0; j < d; ++j) embed[j] += noise_sigma * rng.gaussian();
}

}  // namespace detail

// Builds items, users and the per-user click streams, then materializes the
// labeled impressions (positives). Fully deterministic under spec.seed.
inline Dataset generate(const SyntheticSpec& spec) {
    validate_spec(spec);
    Dataset ds;
    ds.spec = spec;
    ds.has_latents = true;

    // items and their embeddings
    Rng item_rng(Rng::mix(spec.seed, 1));
    ds.items.resize(spec.n_items);
    ds.embeddings.d_im = spec.d_im;
    ds.embeddings.d_te = spec.d_te;
    const int block_im = spec.d_im / (spec.k_im_specific + spec.k_common);
    const int block_te = spec.d_te / (spec.k_te_specific + spec.k_common);
    std::vector<double> buf;
    for (int i = 0; i < spec.n_items; ++i) {
        ItemLatent& it = ds.items[i];
        it.common.resize(spec.k_common);
        it.im_spec.resize(spec.k_im_specific);
        it.te_spec.resize(spec.k_te_specific);
        for (auto& b : it.common) b = item_rng.uniform() < 0.5 ? 1 : 0;
        for (auto& b : it.im_spec) b = item_rng.uniform() < 0.5 ? 1 : 0;
        for (auto& b : it.te_spec) b = item_rng.uniform() < 0.5 ? 1 : 0;

        ds.embeddings.index.emplace(i, static_cast<size_t>(i));
        detail::write_factor_blocks(buf, spec.d_im, block_im, it.im_spec, it.common, spec.embed_noise, item_rng);
        ds.embeddings.im.insert(ds.embeddings.im.end(), buf.begin(), buf.end());
        detail::write_factor_blocks(buf, spec.d_te, block_te, it.te_spec, it.common, spec.embed_noise, item_rng);
        ds.embeddings.te.insert(ds.embeddings.te.end(), buf.begin(), buf.end());
    }

    // users, their preference weights and click streams
    Rng user_rng(Rng::mix(spec.seed, 2));
    ds.users.resize(spec.n_users);
    const int stream_len = spec.seq_len + spec.n_labeled;
    for (int u = 0; u < spec.n_users; ++u) {
        UserLatent& ul = ds.users[u];
        ul.w_common.resize(spec.k_common);
        ul.w_im.resize(spec.k_im_specific);
        ul.w_te.resize(spec.k_te_specific);
        ul.w_syn.resize(spec.k_synergy);
        for (auto& w : ul.w_common) w = spec.scale_common * user_rng.gaussian();
        for (auto& w : ul.w_im) w = spec.scale_im * user_rng.gaussian();
        for (auto& w : ul.w_te) w = spec.scale_te * user_rng.gaussian();
        for (auto& w : ul.w_syn) w = user_rng.gaussian();
        ul.profile[0] = user_rng.uniform_int(0, kProfileCardinalities[0] - 1);
        ul.profile[1] = user_rng.uniform_int(0, kProfileCardinalities[1] - 1);

        // acceptance-sample the click stream: clicked items are biased
        // toward the user's true preferences
        Rng stream_rng(Rng::mix(spec.seed, 3, static_cast<uint64_t>(u)));
        std::unordered_set<int> seen;
        ul.clicked.reserve(stream_len);
        while (static_cast<int>(ul.clicked.size()) < stream_len) {
            int candidate = -1;
            for (int attempt = 0; attempt < 64; ++attempt) {
                const int item = stream_rng.uniform_int(0, spec.n_items - 1);
                if (seen.count(item)) continue;
                double logit = spec.click_bias + detail::click_logit(spec, ul, ds.items[item]);
                if (spec.label_noise > 0.0) logit += spec.label_noise * stream_rng.gaussian();
                const double p = 1.0 / (1.0 + std::exp(-logit));
                candidate = item;
                if (stream_rng.uniform() < p) break;
                candidate = -1;
            }
            if (candidate < 0) {
                // nothing accepted after many tries; take any unseen item
                do {
                    candidate = stream_rng.uniform_int(0, spec.n_items - 1);
                } while (seen.count(candidate));
            }
            seen.insert(candidate);
            ul.clicked.push_back(candidate);
        }

        // labeled impressions: the last n_labeled clicks, each with the
        // preceding seq_len items as history
        for (int j = 0; j < spec.n_labeled; ++j) {
            const int pos = spec.seq_len + j;
            Interaction s;
            s.user = u;
            s.profile = ul.profile;
            s.seq.assign(ul.clicked.begin() + (pos - spec.seq_len), ul.clicked.begin() + pos);
            s.target = ul.clicked[pos];
            s.y = 1;
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

// Per-user leave-last-out split with one sampled negative per positive.
// Users with a single labeled interaction are excluded (and counted).
inline void split(Dataset& ds) {
    ds.train_idx.clear();
    ds.test_idx.clear();
    ds.excluded_users = 0;

    // group sample indices by user, preserving time order
    std::vector<std::vector<int>> by_user;
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        const int u = ds.samples[i].user;
        if (u >= static_cast<int>(by_user.size())) by_user.resize(u + 1);
        by_user[u].push_back(static_cast<int>(i));
    }

    const int n_items = static_cast<int>(ds.embeddings.size());
    std::vector<Interaction> negatives;
    std::vector<int> neg_assign_train;  // 1 = train, 0 = test
    for (size_t u = 0; u < by_user.size(); ++u) {
        auto& idx = by_user[u];
        if (idx.empty()) continue;
        if (idx.size() < 2) {
            ++ds.excluded_users;
            continue;
        }
        std::unordered_set<int> positives;
        if (ds.has_latents && u < ds.users.size()) {
            positives.insert(ds.users[u].clicked.begin(), ds.users[u].clicked.end());
        } else {
            for (int i : idx) {
                positives.insert(ds.samples[i].target);
                positives.insert(ds.samples[i].seq.begin(), ds.samples[i].seq.end());
            }
        }
        Rng neg_rng(Rng::mix(ds.spec.seed, 4, static_cast<uint64_t>(u)));
        for (size_t j = 0; j < idx.size(); ++j) {
            const bool is_test = (j + 1 == idx.size());
            (is_test ? ds.test_idx : ds.train_idx).push_back(idx[j]);

            // a matching negative with the same history
            Interaction neg = ds.samples[idx[j]];
            neg.y = 0;
            do {
                neg.target = neg_rng.uniform_int(0, n_items - 1);
            } while (positives.count(neg.target));
            negatives.push_back(std::move(neg));
            neg_assign_train.push_back(is_test ? 0 : 1);
        }
    }
    for (size_t k = 0; k < negatives.size(); ++k) {
        const int idx = static_cast<int>(ds.samples.size());
        ds.samples.push_back(std::move(negatives[k]));
        (neg_assign_train[k] ? ds.train_idx : ds.test_idx).push_back(idx);
    }
}

// ---- closed-form scorers over the latent ground truth ----

enum class OracleKind {
    bayes,     // full generative logit
    additive,  // no-interaction form: synergy term dropped
    im_only,   // sees only image-visible factors, expectation over the rest
    te_only,
};

inline double oracle_score(const Dataset& ds, const Interaction& s, OracleKind kind) {
    if (!ds.has_latents) throw ContractError("oracle scoring needs latent ground truth");
    const UserLatent& u = ds.users[s.user];
    const ItemLatent& it = ds.items[s.target];
    const SyntheticSpec& spec = ds.spec;
    double score = 0.0;
    switch (kind) {
        case OracleKind::bayes:
            return detail::click_logit(spec, u, it);
        case OracleKind::additive:
            for (int k = 0; k < spec.k_common; ++k) score += u.w_common[k] * (it.common[k] ? 1.0 : -1.0);
            for (int k = 0; k < spec.k_im_specific; ++k) score += u.w_im[k] * (it.im_spec[k] ? 1.0 : -1.0);
            for (int k = 0; k < spec.k_te_specific; ++k) score += u.w_te[k] * (it.te_spec[k] ? 1.0 : -1.0);
            return score;
        case OracleKind::im_only:
            for (int k = 0; k < spec.k_common; ++k) score += u.w_common[k] * (it.common[k] ? 1.0 : -1.0);
            for (int k = 0; k < spec.k_im_specific; ++k) score += u.w_im[k] * (it.im_spec[k] ? 1.0 : -1.0);
            // expectation over the unseen text factor: P(te = 1) = 1/2
            for (int p = 0; p < spec.k_synergy; ++p)
                if (it.im_spec[p]) score += 0.5 * spec.beta * u.w_syn[p];
            return score;
        case OracleKind::te_only:
            for (int k = 0; k < spec.k_common; ++k) score += u.w_common[k] * (it.common[k] ? 1.0 : -1.0);
            for (int k = 0; k < spec.k_te_specific; ++k) score += u.w_te[k] * (it.te_spec[k] ? 1.0 : -1.0);
            for (int p = 0; p < spec.k_synergy; ++p)
                if (it.te_spec[p]) score += 0.5 * spec.beta * u.w_syn[p];
            return score;
    }
    throw ContractError("bad oracle kind");
}

inline double oracle_auc(const Dataset& ds, const std::vector<int>& idx, OracleKind kind) {
    std::vector<double> scores;
    std::vector<int> labels;
    scores.reserve(idx.size());
    labels.reserve(idx.size());
    for (int i : idx) {
        scores.push_back(oracle_score(ds, ds.samples[i], kind));
        labels.push_back(ds.samples[i].y);
    }
    return evaluate_auc(scores, labels);
}

// ---- dataset files ----

inline uint64_t fnv1a64_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IngestionError("cannot open for checksum: " + path);
    uint64_t h = 1469598103934665603ULL;
    char buf[65536];
    while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
        for (std::streamsize i = 0; i < f.gcount(); ++i) {
            h ^= static_cast<uint8_t>(buf[i]);
            h *= 1099511628211ULL;
        }
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    std::ostringstream o;
    o << std::hex << v;
    return o.str();
}

inline nlohmann::json spec_to_json(const SyntheticSpec& s) {
    return {{"n_users", s.n_users},       {"n_items", s.n_items},
            {"seq_len", s.seq_len},       {"n_labeled", s.n_labeled},
            {"d_im", s.d_im},             {"d_te", s.d_te},
            {"d_id", s.d_id},             {"k_common", s.k_common},
            {"k_im_specific", s.k_im_specific}, {"k_te_specific", s.k_te_specific},
            {"k_synergy", s.k_synergy},   {"beta", s.beta},
            {"label_noise", s.label_noise}, {"scale_common", s.scale_common},
            {"scale_im", s.scale_im},     {"scale_te", s.scale_te},
            {"click_bias", s.click_bias},
            {"embed_noise", s.embed_noise}, {"seed", s.seed}};
}

inline SyntheticSpec spec_from_json(const nlohmann::json& j) {
    SyntheticSpec s;
    s.n_users = j.at("n_users").get<int>();
    s.n_items = j.at("n_items").get<int>();
    s.seq_len = j.at("seq_len").get<int>();
    s.n_labeled = j.at("n_labeled").get<int>();
    s.d_im = j.at("d_im").get<int>();
    s.d_te = j.at("d_te").get<int>();
    s.d_id = j.at("d_id").get<int>();
    s.k_common = j.at("k_common").get<int>();
    s.k_im_specific = j.at("k_im_specific").get<int>();
    s.k_te_specific = j.at("k_te_specific").get<int>();
    s.k_synergy = j.at("k_synergy").get<int>();
    s.beta = j.at("beta").get<double>();
    s.label_noise = j.at("label_noise").get<double>();
    s.scale_common = j.at("scale_common").get<double>();
    s.scale_im = j.at("scale_im").get<double>();
    s.scale_te = j.at("scale_te").get<double>();
    s.click_bias = j.at("click_bias").get<double>();
    s.embed_noise = j.at("embed_noise").get<double>();
    s.seed = j.at("seed").get<uint64_t>();
    return s;
}

// Writes embeddings.jsonl, interactions.jsonl, split.json and manifest.json
// under out_dir. Returns the manifest path.
inline std::string save_dataset(const Dataset& ds, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const std::string emb_path = (fs::path(out_dir) / "embeddings.jsonl").string();
    const std::string int_path = (fs::path(out_dir) / "interactions.jsonl").string();
    const std::string split_path = (fs::path(out_dir) / "split.json").string();
    const std::string manifest_path = (fs::path(out_dir) / "manifest.json").string();

    save_embedding_table(ds.embeddings, emb_path);
    {
        std::ofstream f(int_path);
        if (!f) throw IngestionError("cannot write " + int_path);
        for (const auto& s : ds.samples) {
            nlohmann::json j;
            j["user"] = s.user;
            j["profile"] = std::vector<int>(s.profile.begin(), s.profile.end());
            j["seq"] = s.seq;
            j["target"] = s.target;
            j["y"] = s.y;
            f << j << "\n";
        }
    }
    {
        std::ofstream f(split_path);
        if (!f) throw IngestionError("cannot write " + split_path);
        f << nlohmann::json{{"train", ds.train_idx}, {"test", ds.test_idx}, {"excluded_users", ds.excluded_users}} << "\n";
    }
    {
        nlohmann::json manifest;
        manifest["embeddings"] = "embeddings.jsonl";
        manifest["interactions"] = "interactions.jsonl";
        manifest["split"] = "split.json";
        manifest["spec"] = spec_to_json(ds.spec);
        manifest["checksum"] = {{"embeddings", hex64(fnv1a64_file(emb_path))},
                                {"interactions", hex64(fnv1a64_file(int_path))},
                                {"split", hex64(fnv1a64_file(split_path))}};
        std::ofstream f(manifest_path);
        if (!f) throw IngestionError("cannot write " + manifest_path);
        f << manifest.dump(2) << "\n";
    }
    return manifest_path;
}

inline Dataset load_dataset(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    std::ifstream mf(manifest_path);
    if (!mf) throw IngestionError("cannot open manifest: " + manifest_path);
    nlohmann::json manifest = nlohmann::json::parse(mf);
    const fs::path dir = fs::path(manifest_path).parent_path();

    Dataset ds;
    ds.spec = spec_from_json(manifest.at("spec"));

    const std::string emb_path = (dir / manifest.at("embeddings").get<std::string>()).string();
    const std::string int_path = (dir / manifest.at("interactions").get<std::string>()).string();
    const std::string split_path = (dir / manifest.at("split").get<std::string>()).string();
    const auto& sums = manifest.at("checksum");
    for (const auto& [key, path] : {std::pair{std::string("embeddings"), emb_path},
                                    std::pair{std::string("interactions"), int_path},
                                    std::pair{std::string("split"), split_path}}) {
        const std::string want = sums.at(key).get<std::string>();
        const std::string got = hex64(fnv1a64_file(path));
        if (want != got) throw IngestionError("checksum mismatch for " + key + " (" + got + " != " + want + ")");
    }

    ds.embeddings = load_precomputed(emb_path);
    {
        std::ifstream f(int_path);
        std::string line;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            nlohmann::json j = nlohmann::json::parse(line);
            Interaction s;
            s.user = j.at("user").get<int>();
            auto prof = j.at("profile").get<std::vector<int>>();
            if (prof.size() != 2) throw IngestionError("interaction profile must have 2 fields");
            s.profile = {prof[0], prof[1]};
            s.seq = j.at("seq").get<std::vector<int>>();
            s.target = j.at("target").get<int>();
            s.y = j.at("y").get<int>();
            ds.samples.push_back(std::move(s));
        }
    }
    {
        std::ifstream f(split_path);
        nlohmann::json j = nlohmann::json::parse(f);
        ds.train_idx = j.at("train").get<std::vector<int>>();
        ds.test_idx = j.at("test").get<std::vector<int>>();
        ds.excluded_users = j.at("excluded_users").get<int>();
    }
    for (int i : ds.train_idx) {
        if (i < 0 || i >= static_cast<int>(ds.samples.size())) throw IngestionError("split index out of range");
    }
    return ds;
}

// named presets for the benchmark runs
inline SyntheticSpec preset_spec(const std::string& name) {
    SyntheticSpec s;
    if (name == "synergy-small") {
        s.n_users = 2000;
        s.n_items = 5000;
        s.seq_len = 8;
        s.n_labeled = 3;
        s.d_im = 48;
        s.d_te = 48;
        s.d_id = 16;
        s.k_common = 2;
        s.k_im_specific = 6;
        s.k_te_specific = 6;
        s.k_synergy = 4;
        s.beta = 4.0;
        s.label_noise = 0.0;
        return s;
    }
    if (name == "synergy-med") {
        s = preset_spec("synergy-small");
        s.n_users = 20000;
        s.n_items = 20000;
        return s;
    }
    throw ConfigError("unknown preset: " + name);
}

}  // namespace dmsn
