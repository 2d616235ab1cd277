#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include "dmsn/train.hpp"

using namespace dmsn;

namespace {

SyntheticSpec tiny_data_spec(uint64_t seed = 3) {
    SyntheticSpec s = preset_spec("synergy-small");
    s.n_users = 150;
    s.n_items = 400;
    s.d_im = 16;
    s.d_te = 16;
    s.seq_len = 5;
    s.seed = seed;
    return s;
}

TrainConfig tiny_train_config() {
    TrainConfig cfg;
    cfg.lr = 3e-3;
    cfg.batch_size = 64;
    cfg.d_id = 4;
    cfg.d_e = 8;
    cfg.hidden = 8;
    cfg.att_hidden = 8;
    cfg.heads = 2;
    cfg.src_T = 3;
    cfg.max_epochs = 3;
    cfg.patience = 10;
    cfg.seed = 21;
    return cfg;
}

}  // namespace

TEST_CASE("patience zero runs exactly one epoch") {
    Dataset ds = generate(tiny_data_spec());
    split(ds);
    TrainConfig cfg = tiny_train_config();
    cfg.patience = 0;
    cfg.max_epochs = 50;
    TrainResult res = train(cfg, ds);
    CHECK(res.epochs_run == 1);
    CHECK(res.history.size() == 1);
}

TEST_CASE("training twice with the same seed gives bit-identical loss curves") {
    Dataset ds = generate(tiny_data_spec());
    split(ds);
    TrainConfig cfg = tiny_train_config();
    auto run = [&]() {
        TrainResult r = train(cfg, ds);
        std::vector<double> flat;
        for (const auto& em : r.history) {
            flat.push_back(em.auc);
            flat.push_back(em.l_y);
            flat.push_back(em.l_con);
            flat.push_back(em.l_syn);
        }
        return flat;
    };
    CHECK(run() == run());
}

TEST_CASE("one optimizer step with zero learning rate leaves metrics unchanged") {
    Dataset ds = generate(tiny_data_spec());
    split(ds);
    TrainConfig cfg = tiny_train_config();
    Trainer trainer(cfg, ds);
    const double before = trainer.evaluate(ds.test_idx);

    Batch batch = make_batch(ds, ds.train_idx, 0, 32, 1, cfg.seed);
    Tape tape;
    auto out = trainer.model().forward(tape, batch);
    trainer.model().params().zero_grad();
    tape.backward(out.total);
    Optimizer opt(OptimizerKind::adam, 0.0);
    opt.step(trainer.model().params());

    CHECK(trainer.evaluate(ds.test_idx) == before);
}

TEST_CASE("training rejects datasets smaller than one batch") {
    Dataset ds = generate(tiny_data_spec());
    split(ds);
    TrainConfig cfg = tiny_train_config();
    cfg.batch_size = 100000;
    CHECK_THROWS_AS(Trainer(cfg, ds), ConfigError);
}

TEST_CASE("metrics jsonl and checkpoint are written") {
    Dataset ds = generate(tiny_data_spec());
    split(ds);
    TrainConfig cfg = tiny_train_config();
    cfg.max_epochs = 2;
    TrainResult res = train(cfg, ds, "train_metrics.jsonl", "train_ckpt.bin");
    CHECK(res.epochs_run == 2);

    std::ifstream f("train_metrics.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        for (const char* key : {"epoch", "auc", "l_y", "l_con", "l_syn", "seconds"}) CHECK(j.contains(key));
        ++lines;
    }
    CHECK(lines == 2);

    ParamStore loaded;
    loaded.load("train_ckpt.bin");
    CHECK(loaded.count() > 0);
    std::remove("train_metrics.jsonl");
    std::remove("train_ckpt.bin");
}

TEST_CASE("best checkpoint is restored after early stopping") {
    Dataset ds = generate(tiny_data_spec(5));
    split(ds);
    TrainConfig cfg = tiny_train_config();
    cfg.max_epochs = 4;
    cfg.patience = 1;
    Trainer trainer(cfg, ds);
    TrainResult res = trainer.run();
    // the retained parameters evaluate to the best recorded AUC
    CHECK(trainer.evaluate(ds.test_idx) == Catch::Approx(res.best_auc).margin(1e-15));
    CHECK(res.best_epoch >= 1);
    CHECK(res.best_epoch <= res.epochs_run);
}

TEST_CASE("a short run learns better than chance on the planted data") {
    Dataset ds = generate(tiny_data_spec(9));
    split(ds);
    TrainConfig cfg = tiny_train_config();
    cfg.max_epochs = 6;
    TrainResult res = train(cfg, ds);
    INFO("best auc " << res.best_auc);
    CHECK(res.best_auc > 0.55);
}

TEST_CASE("sharded evaluation matches single-threaded evaluation") {
    Dataset ds = generate(tiny_data_spec(11));
    split(ds);
    TrainConfig cfg = tiny_train_config();
    Trainer trainer(cfg, ds);
#ifdef _WIN32
    (void)trainer;
#else
    const double single = trainer.evaluate(ds.test_idx);
    setenv("DMSN_THREADS", "3", 1);
    const double sharded = trainer.evaluate(ds.test_idx);
    unsetenv("DMSN_THREADS");
    CHECK(sharded == single);  // per-sample noise seeding makes sharding exact
#endif
}
