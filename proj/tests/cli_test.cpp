#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "cseg/data.hpp"
#include "cseg/trainer.hpp"
#include "support/oracles.hpp"

// Exercises the installed binary end to end; the binary path arrives via the
// CSEG_BIN environment variable (set by ctest).

namespace fs = std::filesystem;

namespace {

std::string cseg_bin() {
  const char* p = std::getenv("CSEG_BIN");
  REQUIRE_MESSAGE(p != nullptr, "CSEG_BIN must point at the cseg binary");
  return p;
}

struct RunResult {
  int exit_code = -1;
  std::string output;
};

RunResult run_cli(const std::string& args) {
  const std::string out_file =
      (fs::temp_directory_path() / "cseg_cli_out.txt").string();
  const std::string cmd = cseg_bin() + " " + args + " > " + out_file + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = oracle::slurp(out_file);
  return r;
}

std::string tmpdir(const std::string& leaf) {
  const std::string d = (fs::temp_directory_path() / leaf).string();
  fs::remove_all(d);
  return d;
}

bool trees_equal(const fs::path& a, const fs::path& b) {
  std::vector<std::string> rel_a, rel_b;
  for (auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) rel_a.push_back(fs::relative(e.path(), a).string());
  for (auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) rel_b.push_back(fs::relative(e.path(), b).string());
  std::sort(rel_a.begin(), rel_a.end());
  std::sort(rel_b.begin(), rel_b.end());
  if (rel_a != rel_b) return false;
  for (const auto& rel : rel_a)
    if (oracle::slurp((a / rel).string()) != oracle::slurp((b / rel).string())) return false;
  return true;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("gen-data is deterministic and validates its flags") {
  const std::string d1 = tmpdir("cseg_cli_gen1");
  const std::string d2 = tmpdir("cseg_cli_gen2");
  const std::string flags = "--count 6 --size 48 --seed 42 --hole-prob 1.0 --fuzz 2 --hairs 1";
  RunResult r1 = run_cli("gen-data --out " + d1 + " " + flags);
  CHECK(r1.exit_code == 0);
  CHECK(r1.output.find("config: seed=42") != std::string::npos);
  RunResult r2 = run_cli("gen-data --out " + d2 + " " + flags);
  CHECK(r2.exit_code == 0);
  CHECK(trees_equal(d1, d2));

  SUBCASE("the CLI corpus matches the library generator byte for byte") {
    cseg::GenConfig cfg;
    cfg.size = 48;
    cfg.seed = 42;
    cfg.hole_prob = 1.0;
    cfg.fuzz_px = 2.0;
    cfg.hair_count = 1;
    for (int i = 0; i < 6; ++i) {
      cseg::GenSample g = cseg::generate_one(cfg, i);
      double hole_area = 0;
      for (std::int64_t j = 0; j < g.hole_mask.numel(); ++j) hole_area += g.hole_mask.data()[j];
      CHECK(hole_area >= 9);  // --hole-prob 1.0: every sample carries a hole
      const std::string tmp = (fs::temp_directory_path() / "cseg_cli_oneoff.ppm").string();
      cseg::write_ppm(tmp, g.sample.image);
      CHECK(oracle::slurp(tmp) ==
            oracle::slurp(d1 + "/images/" + g.sample.id + ".ppm"));
      fs::remove(tmp);
    }
  }

  SUBCASE("size not divisible by 16 is a validation error") {
    RunResult r = run_cli("gen-data --out " + tmpdir("cseg_cli_gen3") + " --count 4 --size 100");
    CHECK(r.exit_code == 1);
  }
  SUBCASE("unknown flags are rejected") {
    RunResult r = run_cli("gen-data --out " + tmpdir("cseg_cli_gen4") + " --frobnicate 1");
    CHECK(r.exit_code == 1);
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("gradcheck subcommand routes and reports") {
  RunResult all_ok = run_cli("gradcheck --op adaptive_dilated_conv");
  CHECK(all_ok.exit_code == 0);
  CHECK(all_ok.output.find("rate_map") != std::string::npos);

  RunResult strict = run_cli("gradcheck --op conv2d --tol 1e-12");
  CHECK(strict.exit_code == 2);
  CHECK(strict.output.find("FAIL") != std::string::npos);

  RunResult unknown = run_cli("gradcheck --op not_an_op");
  CHECK(unknown.exit_code == 1);
}

TEST_CASE("train, eval and rate-map work end to end") {
  const std::string data = tmpdir("cseg_cli_data");
  REQUIRE(run_cli("gen-data --out " + data + " --count 8 --size 32 --seed 9 --hole-prob 0.5 --fuzz 2")
              .exit_code == 0);

  const std::string run1 = tmpdir("cseg_cli_run1");
  const std::string train_flags =
      " --epochs 2 --batch 4 --channels 4 --seed 3 --eval-every 2 --lr 1e-3";
  RunResult t1 = run_cli("train --data " + data + " --out " + run1 + train_flags);
  CHECK(t1.exit_code == 0);
  CHECK(fs::exists(run1 + "/ckpt_final.cseg"));
  CHECK(fs::exists(run1 + "/train_log.csv"));

  SUBCASE("two identical runs produce identical log CSVs") {
    const std::string run2 = tmpdir("cseg_cli_run2");
    RunResult t2 = run_cli("train --data " + data + " --out " + run2 + train_flags);
    CHECK(t2.exit_code == 0);
    CHECK(oracle::slurp(run1 + "/train_log.csv") == oracle::slurp(run2 + "/train_log.csv"));
    CHECK(oracle::slurp(run1 + "/ckpt_final.cseg") == oracle::slurp(run2 + "/ckpt_final.cseg"));
    fs::remove_all(run2);
  }

  SUBCASE("eval writes the two-fusion metrics CSV") {
    const std::string csv = (fs::path(run1) / "metrics.csv").string();
    RunResult ev = run_cli("eval --data " + data + " --ckpt " + run1 + "/ckpt_final.cseg --out " + csv);
    CHECK(ev.exit_code == 0);
    const std::string text = oracle::slurp(csv);
    CHECK(text.rfind("id,fold,AC_fused,DI_fused,", 0) == 0);
    CHECK(text.find("mean,0,") != std::string::npos);
  }

  SUBCASE("rate-map exports one PGM per KAM with near-one raw rates at init") {
    // an untrained checkpoint: fresh build saved without any training steps
    const std::string fresh_dir = tmpdir("cseg_cli_fresh");
    fs::create_directories(fresh_dir);
    cseg::TrainConfig cfg;
    cfg.net.input_size = 32;
    cfg.net.base_channels = 4;
    auto net = cseg::ComplementaryNet<float>::build(cfg.net, 21);
    cseg::Adam<float> adam(net.params());
    const std::string fresh_ckpt = fresh_dir + "/fresh.cseg";
    cseg::save_checkpoint(fresh_ckpt, cseg::make_checkpoint(net, adam, cfg, 0));

    const std::string image = data + "/images/00000.ppm";
    RunResult rm = run_cli("rate-map --ckpt " + fresh_ckpt + " --image " + image +
                           " --out-prefix " + fresh_dir + "/rm");
    CHECK(rm.exit_code == 0);
    for (int k = 1; k <= 3; ++k) CHECK(fs::exists(fresh_dir + "/rm_kam" + std::to_string(k) + ".pgm"));

    // parse "raw min=... max=..." lines; an untrained rate layer sits near 1
    std::istringstream ss(rm.output);
    std::string line;
    int maps = 0;
    while (std::getline(ss, line)) {
      const auto mi = line.find("raw min=");
      if (mi == std::string::npos) continue;
      ++maps;
      double lo = 0, hi = 0;
      REQUIRE(std::sscanf(line.c_str() + mi, "raw min=%lf max=%lf", &lo, &hi) == 2);
      CHECK(lo > 0.8);
      CHECK(hi < 1.2);
    }
    CHECK(maps == 3);

    SUBCASE("deterministic per checkpoint and image") {
      RunResult rm2 = run_cli("rate-map --ckpt " + fresh_ckpt + " --image " + image +
                              " --out-prefix " + fresh_dir + "/rm2");
      CHECK(rm2.exit_code == 0);
      for (int k = 1; k <= 3; ++k)
        CHECK(oracle::slurp(fresh_dir + "/rm_kam" + std::to_string(k) + ".pgm") ==
              oracle::slurp(fresh_dir + "/rm2_kam" + std::to_string(k) + ".pgm"));
    }
    fs::remove_all(fresh_dir);
  }

  SUBCASE("missing corpus is a runtime error") {
    RunResult r = run_cli("train --data /nonexistent/corpus --out " + tmpdir("cseg_cli_runx"));
    CHECK(r.exit_code == 2);
  }
  fs::remove_all(data);
  fs::remove_all(run1);
}

}  // TEST_SUITE
