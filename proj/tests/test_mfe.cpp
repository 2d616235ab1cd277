#include <catch2/catch_amalgamated.hpp>

#include <vector>

#include "dmsn/gradcheck.hpp"
#include "dmsn/mfe.hpp"

using namespace dmsn;

namespace {

std::vector<double> random_vec(size_t n, Rng& rng, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * rng.gaussian();
    return v;
}

MfeConfig tiny_config() {
    MfeConfig cfg;
    cfg.d_id = 3;
    cfg.d_im = 4;
    cfg.d_te = 4;
    cfg.d_e = 5;
    cfg.hidden = 6;
    return cfg;
}

IdDinExpert tiny_backbone(ParamStore& ps, Rng& rng) {
    return IdDinExpert::create(ps, "backbone", 3, 4, 6, 5, rng);
}

// plain-double two-layer relu perceptron oracle
std::vector<double> mlp2_oracle(const ParamStore& ps, const std::string& name, const std::vector<double>& x) {
    const auto& w0 = ps.at(name + ".l0.w");
    const auto& b0 = ps.at(name + ".l0.b");
    const auto& w1 = ps.at(name + ".l1.w");
    const auto& b1 = ps.at(name + ".l1.b");
    const int in = w0.shape[0], h = w0.shape[1], out = w1.shape[1];
    std::vector<double> hid(h);
    for (int k = 0; k < h; ++k) {
        double s = b0.value[k];
        for (int j = 0; j < in; ++j) s += x[j] * w0.value[static_cast<size_t>(j) * h + k];
        hid[k] = std::max(0.0, s);
    }
    std::vector<double> y(out);
    for (int k = 0; k < out; ++k) {
        double s = b1.value[k];
        for (int j = 0; j < h; ++j) s += hid[j] * w1.value[static_cast<size_t>(j) * out + k];
        y[k] = s;
    }
    return y;
}

}  // namespace

TEST_CASE("expert forward zero input with zero biases gives zero") {
    ParamStore ps;
    Rng rng(1);
    Mfe mfe = Mfe::create(ps, "mfe", tiny_config(), rng);  // biases init to zero
    Tape tape;
    T zero = constant(tape, 1, 4, {0, 0, 0, 0});
    for (double v : values(mfe.expert_forward(tape, zero, Modality::im))) CHECK(v == 0.0);
    for (double v : values(mfe.expert_forward(tape, zero, Modality::te))) CHECK(v == 0.0);
}

TEST_CASE("identity-initialized single layer passes input through") {
    ParamStore ps;
    Rng rng(2);
    Mlp single = Mlp::create(ps, "single", {4, 4}, rng, Activation::relu, Activation::none);
    auto& w = ps.at("single.l0.w");
    std::fill(w.value.begin(), w.value.end(), 0.0);
    for (int i = 0; i < 4; ++i) w.value[static_cast<size_t>(i) * 4 + i] = 1.0;
    Tape tape;
    T x = constant(tape, 1, 4, {0.5, -2.0, 3.25, 0.0});
    CHECK(values(single(tape, x)) == std::vector<double>{0.5, -2.0, 3.25, 0.0});
}

TEST_CASE("expert forward matches hand affine-relu-affine evaluation") {
    ParamStore ps;
    Rng rng(3);
    Mfe mfe = Mfe::create(ps, "mfe", tiny_config(), rng);
    Rng data_rng(7);
    auto x = random_vec(4, data_rng);
    Tape tape;
    auto got = values(mfe.expert_forward(tape, constant(tape, 1, 4, x), Modality::im));
    auto want = mlp2_oracle(ps, "mfe.expert.im", x);
    for (size_t i = 0; i < want.size(); ++i) CHECK(got[i] == Catch::Approx(want[i]).margin(1e-12));
}

TEST_CASE("expert forward rejects the ID modality") {
    ParamStore ps;
    Rng rng(4);
    Mfe mfe = Mfe::create(ps, "mfe", tiny_config(), rng);
    Tape tape;
    T x = constant(tape, 1, 3, {1, 2, 3});
    CHECK_THROWS_AS(mfe.expert_forward(tape, x, Modality::id), ContractError);
}

TEST_CASE("id expert with one item identical to target applies the tower to the item") {
    ParamStore ps;
    Rng rng(5);
    IdDinExpert backbone = tiny_backbone(ps, rng);
    Rng data_rng(8);
    auto item = random_vec(3, data_rng);
    Tape tape;
    T seq = constant(tape, 1, 3, item);
    auto [pooled, expert] = id_expert(tape, backbone, seq, seq, 1);
    for (int j = 0; j < 3; ++j) CHECK(values(pooled)[j] == item[j]);  // weight is exactly 1
    auto want = mlp2_oracle(ps, "backbone.tower", item);
    for (size_t j = 0; j < want.size(); ++j) CHECK(values(expert)[j] == Catch::Approx(want[j]).margin(1e-12));
}

TEST_CASE("id expert pooling with two identical items matches the manual pooling oracle") {
    ParamStore ps;
    Rng rng(6);
    IdDinExpert backbone = tiny_backbone(ps, rng);
    Rng data_rng(9);
    auto item = random_vec(3, data_rng);
    auto target = random_vec(3, data_rng);
    std::vector<double> two(item);
    two.insert(two.end(), item.begin(), item.end());
    Tape tape;
    T tgt = constant(tape, 1, 3, target);
    auto [pooled1, e1] = id_expert(tape, backbone, constant(tape, 1, 3, item), tgt, 1);
    auto [pooled2, e2] = id_expert(tape, backbone, constant(tape, 2, 3, two), tgt, 2);
    // identical rows split the softmax mass 1/2 each, so the normalized pool
    // equals the single-row pool
    for (int j = 0; j < 3; ++j) CHECK(values(pooled2)[j] == Catch::Approx(values(pooled1)[j]).margin(1e-12));
    // and the weighted-rows-then-sum path agrees with the direct pool
    T weighted = target_attention(tape, backbone.att, constant(tape, 2, 3, two), tgt);
    auto rowsum = values(sum_pool(tape, weighted));
    for (int j = 0; j < 3; ++j) CHECK(rowsum[j] == Catch::Approx(values(pooled2)[j]).margin(1e-12));
    (void)e1;
    (void)e2;
}

TEST_CASE("id expert is permutation invariant") {
    ParamStore ps;
    Rng rng(7);
    IdDinExpert backbone = tiny_backbone(ps, rng);
    Rng data_rng(10);
    auto seq = random_vec(9, data_rng);
    std::vector<double> perm = {seq[6], seq[7], seq[8], seq[0], seq[1], seq[2], seq[3], seq[4], seq[5]};
    auto target = random_vec(3, data_rng);
    Tape tape;
    T tgt = constant(tape, 1, 3, target);
    auto [p1, e1] = id_expert(tape, backbone, constant(tape, 3, 3, seq), tgt, 3);
    auto [p2, e2] = id_expert(tape, backbone, constant(tape, 3, 3, perm), tgt, 3);
    for (size_t j = 0; j < values(e1).size(); ++j) CHECK(values(e1)[j] == Catch::Approx(values(e2)[j]).margin(1e-12));
    (void)p1;
    (void)p2;
}

TEST_CASE("id expert rejects an empty sequence") {
    ParamStore ps;
    Rng rng(8);
    IdDinExpert backbone = tiny_backbone(ps, rng);
    Tape tape;
    T empty = constant(tape, 0, 3, {});
    T tgt = constant(tape, 1, 3, {1, 2, 3});
    CHECK_THROWS_AS(id_expert(tape, backbone, empty, tgt, 0), EmptySequenceError);
}

TEST_CASE("shared forward returns the arithmetic mean of the three shares") {
    ParamStore ps;
    Rng rng(9);
    Mfe mfe = Mfe::create(ps, "mfe", tiny_config(), rng);
    Rng data_rng(11);
    auto im = random_vec(4, data_rng);
    auto te = random_vec(4, data_rng);
    auto id = random_vec(3, data_rng);
    Tape tape;
    auto [sh_im, sh_te, sh_id, mean] =
        shared_forward(tape, mfe, constant(tape, 1, 4, im), constant(tape, 1, 4, te), constant(tape, 1, 3, id));
    for (int j = 0; j < 5; ++j) {
        const double want = (values(sh_im)[j] + values(sh_te)[j] + values(sh_id)[j]) / 3.0;
        CHECK(values(mean)[j] == Catch::Approx(want).margin(1e-12));
    }
}

TEST_CASE("average of identical vectors is the vector; v, -v, 0 cancel") {
    Tape tape;
    T v = constant(tape, 1, 3, {1.5, -2.0, 0.5});
    auto same = values(average3(v, v, v));
    for (int j = 0; j < 3; ++j) CHECK(same[j] == Catch::Approx(values(v)[j]).margin(1e-15));

    T nv = scale(v, -1.0);
    T z = constant(tape, 1, 3, {0, 0, 0});
    for (double x : values(average3(v, nv, z))) CHECK(x == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("gate fuse boundaries and midpoint") {
    Rng rng(12);
    Tape tape;
    auto e = random_vec(4, rng);
    auto s = random_vec(4, rng);
    T expert = constant(tape, 1, 4, e);
    T share = constant(tape, 1, 4, s);
    T ones = constant(tape, 1, 4, {1, 1, 1, 1});
    T zeros_w = constant(tape, 1, 4, {0, 0, 0, 0});
    T half = constant(tape, 1, 4, {0.5, 0.5, 0.5, 0.5});

    CHECK(values(gate_fuse(expert, share, ones)) == e);
    CHECK(values(gate_fuse(expert, share, zeros_w)) == s);
    auto mid = values(gate_fuse(expert, share, half));
    for (int j = 0; j < 4; ++j) CHECK(mid[j] == Catch::Approx(0.5 * (e[j] + s[j])).margin(1e-15));
}

TEST_CASE("fused output lies between expert and shared feature elementwise") {
    ParamStore ps;
    Rng rng(13);
    IdDinExpert backbone = tiny_backbone(ps, rng);
    Mfe mfe = Mfe::create(ps, "mfe", tiny_config(), rng);
    for (uint64_t seed = 0; seed < 6; ++seed) {
        Rng data_rng(seed + 20);
        Tape tape;
        T im = constant(tape, 2, 4, random_vec(8, data_rng));
        T te = constant(tape, 2, 4, random_vec(8, data_rng));
        T idseq = constant(tape, 6, 3, random_vec(18, data_rng));
        T tid = constant(tape, 2, 3, random_vec(6, data_rng));
        auto [pooled_id, e_id] = id_expert(tape, backbone, idseq, tid, 3);
        MfeOutput out = mfe.forward(tape, im, te, pooled_id, e_id);
        for (auto [fused, expert] : {std::pair{out.e_fused_im, out.e_expert_im},
                                     std::pair{out.e_fused_te, out.e_expert_te},
                                     std::pair{out.e_fused_id, out.e_expert_id}}) {
            for (size_t j = 0; j < values(fused).size(); ++j) {
                const double lo = std::min(values(expert)[j], values(out.e_expert_sh)[j]);
                const double hi = std::max(values(expert)[j], values(out.e_expert_sh)[j]);
                CHECK(values(fused)[j] >= lo - 1e-12);
                CHECK(values(fused)[j] <= hi + 1e-12);
            }
        }
    }
}

TEST_CASE("decoupling loss on orthogonal experts and identical shares is -6") {
    Tape tape;
    T e1 = constant(tape, 1, 3, {1, 0, 0});
    T e2 = constant(tape, 1, 3, {0, 1, 0});
    T e3 = constant(tape, 1, 3, {0, 0, 1});
    T s = constant(tape, 1, 3, {0.3, -0.4, 0.8});
    T loss = decoupling_loss(e1, e2, e3, s, s, s);
    CHECK(item(loss) == Catch::Approx(-6.0).margin(1e-12));
}

TEST_CASE("decoupling loss with all six vectors identical is 0") {
    Tape tape;
    T v = constant(tape, 1, 4, {0.5, 1.5, -2.0, 0.25});
    CHECK(item(decoupling_loss(v, v, v, v, v, v)) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("decoupling loss matches pairwise cosine recomputation and is symmetric") {
    auto cos_oracle = [](const std::vector<double>& a, const std::vector<double>& b) {
        double dot = 0, na = 0, nb = 0;
        for (size_t i = 0; i < a.size(); ++i) {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        return dot / (std::sqrt(na) * std::sqrt(nb));
    };
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed + 40);
        std::vector<std::vector<double>> ex(3), sh(3);
        for (int i = 0; i < 3; ++i) {
            ex[i] = random_vec(4, rng);
            sh[i] = random_vec(4, rng);
        }
        Tape tape;
        auto mk = [&](const std::vector<double>& v) { return constant(tape, 1, 4, v); };
        double want = 0.0;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                if (i != j) want += cos_oracle(ex[i], ex[j]) - cos_oracle(sh[i], sh[j]);
        T loss = decoupling_loss(mk(ex[0]), mk(ex[1]), mk(ex[2]), mk(sh[0]), mk(sh[1]), mk(sh[2]));
        CHECK(item(loss) == Catch::Approx(want).margin(1e-10));
        // attainable range: each ordered-pair cosine sum over 3 vectors lies
        // in [-3, 6] (Gram positivity bounds the low side), so the
        // difference lives in [-9, 9]
        CHECK(item(loss) >= -9.0 - 1e-12);
        CHECK(item(loss) <= 9.0 + 1e-12);

        // permuting the modalities leaves the loss unchanged
        T perm = decoupling_loss(mk(ex[2]), mk(ex[0]), mk(ex[1]), mk(sh[2]), mk(sh[0]), mk(sh[1]));
        CHECK(item(perm) == Catch::Approx(item(loss)).margin(1e-12));
    }
}

TEST_CASE("decoupling loss gradient matches finite differences") {
    Rng rng(55);
    ParamStore ps;
    Parameter* ex[3];
    Parameter* sh[3];
    for (int i = 0; i < 3; ++i) {
        ex[i] = &ps.add("ex" + std::to_string(i), {1, 4});
        ex[i]->value = random_vec(4, rng);
        sh[i] = &ps.add("sh" + std::to_string(i), {1, 4});
        sh[i]->value = random_vec(4, rng);
    }
    auto build = [&](Tape& tape) {
        return decoupling_loss(leaf(tape, *ex[0]), leaf(tape, *ex[1]), leaf(tape, *ex[2]), leaf(tape, *sh[0]),
                               leaf(tape, *sh[1]), leaf(tape, *sh[2]));
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

TEST_CASE("zero-norm expert contributes zero to the decoupling loss") {
    Tape tape;
    T z = constant(tape, 1, 3, {0, 0, 0});
    T a = constant(tape, 1, 3, {1, 0, 0});
    T b = constant(tape, 1, 3, {0, 1, 0});
    // expert side: only cos(a,b)=0 pairs with the zero vector contribute 0
    T loss = decoupling_loss(z, a, b, z, z, z);
    CHECK(item(loss) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("with shared path ablated the fused output equals the expert output") {
    ParamStore ps;
    Rng rng(14);
    IdDinExpert backbone = tiny_backbone(ps, rng);
    Mfe mfe = Mfe::create(ps, "mfe", tiny_config(), rng);
    mfe.gate_override = 1.0;
    Rng data_rng(15);
    Tape tape;
    T im = constant(tape, 1, 4, random_vec(4, data_rng));
    T te = constant(tape, 1, 4, random_vec(4, data_rng));
    T idseq = constant(tape, 2, 3, random_vec(6, data_rng));
    T tid = constant(tape, 1, 3, random_vec(3, data_rng));
    auto [pooled_id, e_id] = id_expert(tape, backbone, idseq, tid, 2);
    MfeOutput out = mfe.forward(tape, im, te, pooled_id, e_id);
    CHECK(values(out.e_fused_im) == values(out.e_expert_im));
    CHECK(values(out.e_fused_te) == values(out.e_expert_te));
    CHECK(values(out.e_fused_id) == values(out.e_expert_id));
}
