#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "cseg/data.hpp"
#include "cseg/trainer.hpp"
#include "support/oracles.hpp"

using namespace cseg;
namespace fs = std::filesystem;

namespace {

struct MiniWorld {
  std::vector<Sample> corpus;
  SplitTable splits;
};

MiniWorld mini_world(int count = 16, int size = 32) {
  GenConfig cfg;
  cfg.size = size;
  cfg.seed = 77;
  cfg.hole_prob = 0.4;
  cfg.fuzz_px = 2.0;
  MiniWorld w;
  std::vector<std::string> ids;
  for (int i = 0; i < count; ++i) {
    Sample s = generate_one(cfg, i).sample;
    ids.push_back(s.id);
    w.corpus.push_back(std::move(s));
  }
  w.splits = make_splits(ids, 4, 1.0, 5);
  return w;
}

TrainConfig mini_cfg(const std::string& out, int epochs = 2) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 4;
  cfg.schedule = LrSchedule{1e-3, 0.1, 40};
  cfg.seed = 3;
  cfg.eval_every = 2;
  cfg.net.input_size = 32;
  cfg.net.base_channels = 4;
  cfg.out_dir = out;
  return cfg;
}

std::string tmpdir(const std::string& leaf) {
  const std::string d = (fs::temp_directory_path() / leaf).string();
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("complementary training runs, logs and checkpoints") {
  MiniWorld w = mini_world();
  const std::string out = tmpdir("cseg_train_a");
  TrainResult res = train(w.corpus, w.splits, mini_cfg(out));
  REQUIRE(res.log.size() == 2);
  CHECK(res.log[0].total.has_value());
  CHECK(res.log[0].fore.has_value());
  CHECK(res.log[0].back.has_value());
  CHECK(res.log[0].mutual.has_value());
  CHECK(res.log[1].val_di_fg.has_value());
  CHECK(res.log[1].val_di_fused.has_value());
  CHECK(fs::exists(res.checkpoint_path));
  const std::string log = oracle::slurp(res.log_path);
  CHECK(log.rfind("epoch,lr,L_fore,L_back,L_mutual,L_total,val_DI_fg,val_DI_fused\n", 0) == 0);

  SUBCASE("identical configs reproduce the log and checkpoint bitwise") {
    const std::string out2 = tmpdir("cseg_train_b");
    TrainResult res2 = train(w.corpus, w.splits, mini_cfg(out2));
    CHECK(oracle::slurp(res.log_path) == oracle::slurp(res2.log_path));
    CHECK(oracle::slurp(res.checkpoint_path) == oracle::slurp(res2.checkpoint_path));
    fs::remove_all(out2);
  }

  SUBCASE("checkpoint round-trips to a bitwise-identical forward pass") {
    TrainConfig cfg = mini_cfg(out);
    auto live = ComplementaryNet<float>::build(cfg.net, 555);
    Adam<float> adam(live.params());
    const std::string path = (fs::path(out) / "roundtrip.cseg").string();
    save_checkpoint(path, make_checkpoint(live, adam, cfg, 0));
    LoadedCheckpoint loaded = load_net_checkpoint(path);

    Rng rng(123);
    Tensor<float> x = Tensor<float>::randu(Shape{2, 3, 32, 32}, rng, 0.0, 1.0);
    auto a = live.fg.forward(nullptr, x);
    auto b = loaded.net.fg.forward(nullptr, x);
    CHECK(std::memcmp(a.prob.data(), b.prob.data(), 4 * std::size_t(a.prob.numel())) == 0);
    auto abg = live.bg.forward(nullptr, x);
    auto bbg = loaded.net.bg.forward(nullptr, x);
    CHECK(std::memcmp(abg.prob.data(), bbg.prob.data(), 4 * std::size_t(abg.prob.numel())) == 0);
  }
  fs::remove_all(out);
}

TEST_CASE("resume reproduces the uninterrupted run exactly") {
  MiniWorld w = mini_world();
  const std::string full_dir = tmpdir("cseg_resume_full");
  TrainResult full = train(w.corpus, w.splits, mini_cfg(full_dir, 4));

  const std::string half_dir = tmpdir("cseg_resume_half");
  TrainResult half = train(w.corpus, w.splits, mini_cfg(half_dir, 2));
  const std::string resumed_dir = tmpdir("cseg_resume_tail");
  TrainConfig tail_cfg = mini_cfg(resumed_dir, 4);
  TrainResult tail = train(w.corpus, w.splits, tail_cfg, half.checkpoint_path);

  REQUIRE(tail.log.size() == 2);  // epochs 2 and 3 only
  CHECK(tail.log[0].epoch == 2);
  CHECK(tail.log[0].total.value() == doctest::Approx(full.log[2].total.value()).epsilon(1e-12));
  CHECK(tail.log[1].total.value() == doctest::Approx(full.log[3].total.value()).epsilon(1e-12));
  CHECK(oracle::slurp(full.checkpoint_path) == oracle::slurp(tail.checkpoint_path));

  fs::remove_all(full_dir);
  fs::remove_all(half_dir);
  fs::remove_all(resumed_dir);
}

TEST_CASE("fg_only mode never touches the background network") {
  MiniWorld w = mini_world();
  const std::string out = tmpdir("cseg_train_fgonly");
  TrainConfig cfg = mini_cfg(out);
  cfg.mode = TrainMode::fg_only;
  TrainResult res = train(w.corpus, w.splits, cfg);

  const std::string log = oracle::slurp(res.log_path);
  CHECK(log.rfind("epoch,lr,L_fore,L_total,val_DI_fg\n", 0) == 0);
  CHECK(log.find("L_back") == std::string::npos);
  CHECK(log.find("L_mutual") == std::string::npos);

  // the stored bg parameters equal a freshly built bg network bitwise
  LoadedCheckpoint loaded = load_net_checkpoint(res.checkpoint_path);
  auto fresh = ComplementaryNet<float>::build(cfg.net, cfg.seed);
  auto stored = loaded.net.bg.params();
  auto init = fresh.bg.params();
  REQUIRE(stored.size() == init.size());
  for (std::size_t i = 0; i < stored.size(); ++i)
    CHECK(std::memcmp(stored[i].second.data(), init[i].second.data(),
                      4 * std::size_t(init[i].second.numel())) == 0);
  fs::remove_all(out);
}

TEST_CASE("semi-supervised batches route unlabeled samples through the mutual term") {
  MiniWorld w = mini_world();
  const std::string out = tmpdir("cseg_train_semi");
  TrainConfig cfg = mini_cfg(out);
  cfg.labeled_fraction = 0.25;  // 3 labeled of 12 training samples
  TrainResult res = train(w.corpus, w.splits, cfg);
  CHECK(res.log[0].mutual.has_value());
  CHECK(res.log[0].fore.has_value());
  CHECK(fs::exists(res.checkpoint_path));
  fs::remove_all(out);
}

TEST_CASE("training loss decreases on a longer mini run") {
  MiniWorld w = mini_world(24);
  const std::string out = tmpdir("cseg_train_decrease");
  TrainConfig cfg = mini_cfg(out, 8);
  TrainResult res = train(w.corpus, w.splits, cfg);
  CHECK(res.log.back().total.value() < res.log.front().total.value());
  fs::remove_all(out);
}

TEST_CASE("evaluate is deterministic and writes both fusion column sets") {
  MiniWorld w = mini_world();
  const std::string out = tmpdir("cseg_train_eval");
  TrainResult res = train(w.corpus, w.splits, mini_cfg(out));
  LoadedCheckpoint loaded = load_net_checkpoint(res.checkpoint_path);

  std::map<std::string, const Sample*> by_id;
  for (const auto& s : w.corpus) by_id[s.id] = &s;
  std::vector<const Sample*> val;
  for (const auto& id : w.splits.val_ids(0)) val.push_back(by_id.at(id));

  auto rows1 = evaluate(loaded.net, val, 0, true);
  auto rows2 = evaluate(loaded.net, val, 0, true);
  REQUIRE(rows1.size() == val.size());
  for (std::size_t i = 0; i < rows1.size(); ++i) {
    CHECK(rows1[i].id == val[i]->id);
    CHECK(rows1[i].fused.di == rows2[i].fused.di);
    CHECK(rows1[i].fg.di == rows2[i].fg.di);
  }

  const std::string csv = (fs::path(out) / "metrics.csv").string();
  write_metrics_csv(csv, rows1, true);
  const std::string text = oracle::slurp(csv);
  CHECK(text.rfind("id,fold,AC_fused,DI_fused,JA_fused,SE_fused,AC_fg,DI_fg,JA_fg,SE_fg\n", 0) == 0);
  CHECK(text.find("\nmean,0,") != std::string::npos);

  SUBCASE("perfect predictions score one across the board") {
    std::vector<EvalRow> perfect;
    for (const Sample* s : val) {
      EvalRow r;
      r.id = s->id;
      r.fold = 0;
      r.fused = scores(confusion(s->mask, s->mask));
      r.fg = r.fused;
      perfect.push_back(r);
    }
    for (const auto& r : perfect) {
      CHECK(r.fused.di == 1.0);
      CHECK(r.fg.ja == 1.0);
    }
  }
  fs::remove_all(out);
}

TEST_CASE("training rejects an empty labeled pool") {
  MiniWorld w = mini_world();
  for (auto& r : w.splits.rows) r.labeled = false;
  const std::string out = tmpdir("cseg_train_nolabel");
  CHECK_THROWS_AS((void)train(w.corpus, w.splits, mini_cfg(out)), config_error);
  fs::remove_all(out);
}

}  // TEST_SUITE
