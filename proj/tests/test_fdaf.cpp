#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dmsn/fdaf.hpp"
#include "dmsn/gradcheck.hpp"

using namespace dmsn;

namespace {

std::vector<double> random_vec(size_t n, Rng& rng, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * rng.gaussian();
    return v;
}

FdafConfig tiny_config() {
    FdafConfig cfg;
    cfg.d_id_embed = 3;
    cfg.d_e = 4;
    cfg.n_tokens = 4;
    cfg.heads = 2;
    return cfg;
}

PredictHead tiny_head(ParamStore& ps, Rng& rng) {
    // d_feat=4, d_user=2, d_target_cat=6, d_e=4, hidden=5
    return PredictHead::create(ps, "head", 4, 2, 6, 4, 5, rng);
}

void set_identity(Parameter& p) {
    const int n = p.shape[0];
    std::fill(p.value.begin(), p.value.end(), 0.0);
    for (int i = 0; i < n; ++i) p.value[static_cast<size_t>(i) * n + i] = 1.0;
}

}  // namespace

TEST_CASE("modality gate boundaries") {
    ParamStore ps;
    Rng rng(1);
    Fdaf fdaf = Fdaf::create(ps, "fdaf", tiny_config(), rng);
    Rng data_rng(2);
    Tape tape;
    T tid = constant(tape, 1, 3, random_vec(3, data_rng));
    std::vector<T> blocks;
    std::vector<double> flat;
    for (int k = 0; k < 4; ++k) {
        auto v = random_vec(4, data_rng);
        flat.insert(flat.end(), v.begin(), v.end());
        blocks.push_back(constant(tape, 1, 4, v));
    }

    fdaf.gate_override = 1.0;
    CHECK(values(fdaf.modality_gate(tape, tid, blocks)) == flat);

    fdaf.gate_override = 0.0;
    for (double v : values(fdaf.modality_gate(tape, tid, blocks))) CHECK(v == 0.0);
}

TEST_CASE("modality gate blocks match the elementwise product oracle") {
    ParamStore ps;
    Rng rng(3);
    Fdaf fdaf = Fdaf::create(ps, "fdaf", tiny_config(), rng);
    Rng data_rng(4);
    auto tid = random_vec(3, data_rng);
    Tape tape;
    std::vector<T> blocks;
    std::vector<double> flat;
    for (int k = 0; k < 4; ++k) {
        auto v = random_vec(4, data_rng);
        flat.insert(flat.end(), v.begin(), v.end());
        blocks.push_back(constant(tape, 1, 4, v));
    }
    auto got = values(fdaf.modality_gate(tape, constant(tape, 1, 3, tid), blocks));

    // oracle: sigmoid(tid . W + b) elementwise against the concatenation
    const auto& w = ps.at("fdaf.gate.w");
    const auto& b = ps.at("fdaf.gate.b");
    for (int j = 0; j < 16; ++j) {
        double s = b.value[j];
        for (int i = 0; i < 3; ++i) s += tid[i] * w.value[static_cast<size_t>(i) * 16 + j];
        const double gate = 1.0 / (1.0 + std::exp(-s));
        CHECK(got[j] == Catch::Approx(gate * flat[j]).margin(1e-12));
        CHECK(gate > 0.0);
        CHECK(gate < 1.0);
    }
}

TEST_CASE("cross net fixed cases") {
    FdafConfig cfg = tiny_config();
    cfg.n_tokens = 1;
    cfg.d_e = 2;  // D = 2
    ParamStore ps;
    Rng rng(5);
    Fdaf fdaf = Fdaf::create(ps, "fdaf", cfg, rng);
    Tape tape;

    // E'=[1,0], w_c=[1,1], b_c=0 -> E'(E'.w_c) + E' = [1,0]*1 + [1,0] = [2,0]
    fdaf.cross_w->value = {1.0, 1.0};
    std::fill(fdaf.cross_b->value.begin(), fdaf.cross_b->value.end(), 0.0);
    CHECK(values(fdaf.cross_net(tape, constant(tape, 1, 2, {1, 0}))) == std::vector<double>{2, 0});

    // w_c = 0, b_c = 0: residual identity
    fdaf.cross_w->value = {0.0, 0.0};
    CHECK(values(fdaf.cross_net(tape, constant(tape, 1, 2, {0.3, -0.7}))) == std::vector<double>{0.3, -0.7});

    // E' = 0: output is b_c
    fdaf.cross_b->value = {1.5, -2.5};
    CHECK(values(fdaf.cross_net(tape, constant(tape, 1, 2, {0, 0}))) == std::vector<double>{1.5, -2.5});
}

TEST_CASE("cross net rank-one identity matches the O(D^2) evaluation") {
    ParamStore ps;
    Rng rng(6);
    Fdaf fdaf = Fdaf::create(ps, "fdaf", tiny_config(), rng);
    const int D = 16;
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng data_rng(seed + 10);
        auto e = random_vec(D, data_rng);
        Tape tape;
        auto got = values(fdaf.cross_net(tape, constant(tape, 1, D, e)));

        // O(D^2) oracle: explicit outer product times w_c
        std::vector<double> outer(D, 0.0);
        for (int i = 0; i < D; ++i)
            for (int j = 0; j < D; ++j) outer[i] += e[i] * e[j] * fdaf.cross_w->value[j];
        for (int i = 0; i < D; ++i) {
            const double want = outer[i] + fdaf.cross_b->value[i] + e[i];
            CHECK(got[i] == Catch::Approx(want).margin(1e-10));
        }
    }
}

TEST_CASE("noninvasive fuse with identical value tokens adds the common value") {
    FdafConfig cfg = tiny_config();
    cfg.heads = 2;
    ParamStore ps;
    Rng rng(7);
    Fdaf fdaf = Fdaf::create(ps, "fdaf", cfg, rng);
    set_identity(*fdaf.att.wv);
    set_identity(*fdaf.att.wo);

    Rng data_rng(8);
    auto v = random_vec(4, data_rng);
    std::vector<double> ec;
    for (int k = 0; k < 4; ++k) ec.insert(ec.end(), v.begin(), v.end());
    auto e_id = random_vec(4, data_rng);

    Tape tape;
    auto out = values(fdaf.noninvasive_fuse(tape, constant(tape, 1, 4, e_id), constant(tape, 1, 16, ec)));
    for (int j = 0; j < 4; ++j) CHECK(out[j] == Catch::Approx(v[j] + e_id[j]).margin(1e-12));
}

TEST_CASE("noninvasive fuse with zero value projection is a pure residual") {
    ParamStore ps;
    Rng rng(9);
    Fdaf fdaf = Fdaf::create(ps, "fdaf", tiny_config(), rng);
    std::fill(fdaf.att.wv->value.begin(), fdaf.att.wv->value.end(), 0.0);
    Rng data_rng(10);
    auto e_id = random_vec(4, data_rng);
    Tape tape;
    auto out = values(fdaf.noninvasive_fuse(tape, constant(tape, 1, 4, e_id), constant(tape, 1, 16, random_vec(16, data_rng))));
    CHECK(out == e_id);
}

TEST_CASE("noninvasive fuse with 8 heads matches the per-head decomposition oracle") {
    FdafConfig cfg = tiny_config();
    cfg.d_e = 8;
    cfg.heads = 8;
    ParamStore ps;
    Rng rng(11);
    Fdaf fdaf = Fdaf::create(ps, "fdaf", cfg, rng);
    Rng data_rng(12);
    const int dim = 8, n = 4;
    auto e_id = random_vec(dim, data_rng);
    auto ec = random_vec(static_cast<size_t>(n) * dim, data_rng);

    Tape tape;
    auto got = values(fdaf.noninvasive_fuse(tape, constant(tape, 1, dim, e_id), constant(tape, 1, n * dim, ec)));

    auto project = [&](const std::vector<double>& x, int m, const std::vector<double>& w) {
        std::vector<double> y(static_cast<size_t>(m) * dim, 0.0);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < dim; ++j) {
                double s = 0.0;
                for (int t = 0; t < dim; ++t) s += x[i * dim + t] * w[t * dim + j];
                y[i * dim + j] = s;
            }
        return y;
    };
    auto qp = project(e_id, 1, fdaf.att.wq->value);
    auto kp = project(ec, n, fdaf.att.wk->value);
    auto vp = project(ec, n, fdaf.att.wv->value);
    const int hd = dim / cfg.heads;  // = 1
    std::vector<double> cat(dim);
    for (int h = 0; h < cfg.heads; ++h) {
        std::vector<double> scores(n);
        double mx = -1e300;
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (int j = 0; j < hd; ++j) s += qp[h * hd + j] * kp[i * dim + h * hd + j];
            scores[i] = s / std::sqrt(static_cast<double>(hd));
            mx = std::max(mx, scores[i]);
        }
        double z = 0.0;
        for (auto& s : scores) {
            s = std::exp(s - mx);
            z += s;
        }
        for (int j = 0; j < hd; ++j) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i) acc += scores[i] / z * vp[i * dim + h * hd + j];
            cat[h * hd + j] = acc;
        }
    }
    auto head_out = project(cat, 1, fdaf.att.wo->value);
    for (int j = 0; j < dim; ++j) CHECK(got[j] == Catch::Approx(head_out[j] + e_id[j]).margin(1e-10));
}

TEST_CASE("predict head zero weights give one half") {
    ParamStore ps;
    Rng rng(13);
    PredictHead head = tiny_head(ps, rng);
    for (auto* p : {&ps.at("head.net.l0.w"), &ps.at("head.net.l1.w"), &ps.at("head.target_proj.w")}) {
        std::fill(p->value.begin(), p->value.end(), 0.0);
    }
    Rng data_rng(14);
    Tape tape;
    T y = predict_head(tape, head, constant(tape, 1, 4, random_vec(4, data_rng)),
                       constant(tape, 1, 2, random_vec(2, data_rng)), constant(tape, 1, 6, random_vec(6, data_rng)));
    CHECK(item(y) == 0.5);
}

TEST_CASE("predict head matches hand evaluation and stays in (0,1)") {
    ParamStore ps;
    Rng rng(15);
    PredictHead head = tiny_head(ps, rng);
    Rng data_rng(16);
    auto e_att = random_vec(4, data_rng);
    auto user = random_vec(2, data_rng);
    auto tcat = random_vec(6, data_rng);
    Tape tape;
    T y = predict_head(tape, head, constant(tape, 1, 4, e_att), constant(tape, 1, 2, user), constant(tape, 1, 6, tcat));

    // oracle: target projection, concat, affine-relu-affine, sigmoid
    const auto& pw = ps.at("head.target_proj.w");
    const auto& pb = ps.at("head.target_proj.b");
    std::vector<double> x(e_att);
    x.insert(x.end(), user.begin(), user.end());
    for (int j = 0; j < 4; ++j) {
        double s = pb.value[j];
        for (int i = 0; i < 6; ++i) s += tcat[i] * pw.value[static_cast<size_t>(i) * 4 + j];
        x.push_back(s);
    }
    const auto& w0 = ps.at("head.net.l0.w");
    const auto& b0 = ps.at("head.net.l0.b");
    const auto& w1 = ps.at("head.net.l1.w");
    const auto& b1 = ps.at("head.net.l1.b");
    double out = b1.value[0];
    for (int k = 0; k < 5; ++k) {
        double s = b0.value[k];
        for (size_t i = 0; i < x.size(); ++i) s += x[i] * w0.value[i * 5 + k];
        out += std::max(0.0, s) * w1.value[k];
    }
    CHECK(item(y) == Catch::Approx(1.0 / (1.0 + std::exp(-out))).margin(1e-12));

    for (uint64_t seed = 0; seed < 1000; ++seed) {
        Rng r(seed);
        Tape t2;
        T p = predict_head(t2, head, constant(t2, 1, 4, random_vec(4, r, 3.0)), constant(t2, 1, 2, random_vec(2, r, 3.0)),
                           constant(t2, 1, 6, random_vec(6, r, 3.0)));
        CHECK(item(p) > 0.0);
        CHECK(item(p) < 1.0);
    }
}

TEST_CASE("gates at zero with zero value projection reduce FDAF to the head on E_id") {
    ParamStore ps;
    Rng rng(17);
    Fdaf fdaf = Fdaf::create(ps, "fdaf", tiny_config(), rng);
    PredictHead head = tiny_head(ps, rng);
    fdaf.gate_override = 0.0;
    std::fill(fdaf.att.wv->value.begin(), fdaf.att.wv->value.end(), 0.0);

    Rng data_rng(18);
    for (int rep = 0; rep < 20; ++rep) {
        auto e_id = random_vec(4, data_rng);
        auto tid = random_vec(3, data_rng);
        auto user = random_vec(2, data_rng);
        auto tcat = random_vec(6, data_rng);
        Tape tape;
        std::vector<T> blocks;
        for (int k = 0; k < 4; ++k) blocks.push_back(constant(tape, 1, 4, random_vec(4, data_rng)));
        T e_prime = fdaf.modality_gate(tape, constant(tape, 1, 3, tid), blocks);
        T e_c = fdaf.cross_net(tape, e_prime);
        T e_att = fdaf.noninvasive_fuse(tape, constant(tape, 1, 4, e_id), e_c);
        T y_full = predict_head(tape, head, e_att, constant(tape, 1, 2, user), constant(tape, 1, 6, tcat));
        T y_direct = predict_head(tape, head, constant(tape, 1, 4, e_id), constant(tape, 1, 2, user),
                                  constant(tape, 1, 6, tcat));
        CHECK(item(y_full) == item(y_direct));  // bit-identical
    }
}

TEST_CASE("fdaf end-to-end gradients match finite differences") {
    ParamStore ps;
    Rng rng(19);
    Fdaf fdaf = Fdaf::create(ps, "fdaf", tiny_config(), rng);
    PredictHead head = tiny_head(ps, rng);
    Parameter& e_id = ps.add("in.e_id", {2, 4});
    e_id.value = random_vec(8, rng);
    Parameter& tid = ps.add("in.tid", {2, 3});
    tid.value = random_vec(6, rng);
    Parameter& aux = ps.add("in.aux", {2, 16});
    aux.value = random_vec(32, rng);
    const auto user = random_vec(4, rng);
    const auto tcat = random_vec(12, rng);
    const std::vector<double> labels = {1.0, 0.0};

    auto build = [&](Tape& tape) {
        std::vector<T> blocks;
        T aux_leaf = leaf(tape, aux);
        for (int k = 0; k < 4; ++k) blocks.push_back(slice_cols(aux_leaf, k * 4, (k + 1) * 4));
        T e_prime = fdaf.modality_gate(tape, leaf(tape, tid), blocks);
        T e_c = fdaf.cross_net(tape, e_prime);
        T e_att = fdaf.noninvasive_fuse(tape, leaf(tape, e_id), e_c);
        T y = predict_head(tape, head, e_att, constant(tape, 2, 2, user), constant(tape, 2, 6, tcat));
        return bce_mean(y, labels);
    };
    auto backward = [&]() {
        Tape tape;
        T loss = build(tape);
        tape.backward(loss);
    };
    auto forward = [&]() {
        Tape tape(false);
        return item(build(tape));
    };
    auto report = check_gradients(ps, backward, forward);
    INFO("worst " << report.worst_group << " rel " << report.worst_rel);
    CHECK(report.ok);
}
