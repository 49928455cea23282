// cseg: synthetic-corpus generation, complementary-network training and
// evaluation, gradient checking, and rate-map export.
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cseg/data.hpp"
#include "cseg/gradcheck_suite.hpp"
#include "cseg/netpbm.hpp"
#include "cseg/network.hpp"
#include "cseg/trainer.hpp"

namespace {

namespace fs = std::filesystem;

void print_kv(const std::string& k, const std::string& v) {
  std::printf("config: %s=%s\n", k.c_str(), v.c_str());
}
void print_kv(const std::string& k, double v) {
  std::printf("config: %s=%g\n", k.c_str(), v);
}
void print_kv(const std::string& k, std::int64_t v) {
  std::printf("config: %s=%lld\n", k.c_str(), (long long)v);
}

struct ScheduleSpec {
  double drop_factor = 0.1;
  int drop_every = 40;
};

ScheduleSpec parse_schedule(const std::string& s) {
  // step:<epochs>:<factor>, e.g. step:40:0.1
  ScheduleSpec spec;
  if (s.rfind("step:", 0) != 0) throw cseg::config_error("schedule must be step:<epochs>:<factor>");
  const auto rest = s.substr(5);
  const auto colon = rest.find(':');
  if (colon == std::string::npos) throw cseg::config_error("schedule must be step:<epochs>:<factor>");
  try {
    spec.drop_every = std::stoi(rest.substr(0, colon));
    spec.drop_factor = std::stod(rest.substr(colon + 1));
  } catch (const std::exception&) {
    throw cseg::config_error("cannot parse schedule '" + s + "'");
  }
  if (spec.drop_every < 1 || spec.drop_factor <= 0)
    throw cseg::config_error("schedule needs epochs >= 1 and factor > 0");
  return spec;
}

int cmd_gen_data(const std::string& out, int count, int size, std::uint64_t seed,
                 double hole_prob, double fuzz, int hairs, double labeled_fraction,
                 int folds, double noise) {
  cseg::GenConfig cfg;
  cfg.size = size;
  cfg.seed = seed;
  cfg.hole_prob = hole_prob;
  cfg.fuzz_px = fuzz;
  cfg.hair_count = hairs;
  cfg.noise_std = noise;
  cfg.validate();
  if (count < folds) throw cseg::config_error("count must be >= folds");

  print_kv("out", out);
  print_kv("count", std::int64_t(count));
  print_kv("size", std::int64_t(size));
  print_kv("seed", std::int64_t(seed));
  print_kv("hole-prob", hole_prob);
  print_kv("fuzz", fuzz);
  print_kv("hairs", std::int64_t(hairs));
  print_kv("noise", noise);
  print_kv("labeled-fraction", labeled_fraction);
  print_kv("folds", std::int64_t(folds));

  std::vector<cseg::Sample> samples;
  std::vector<std::string> ids;
  for (int i = 0; i < count; ++i) {
    cseg::GenSample g = cseg::generate_one(cfg, i);
    ids.push_back(g.sample.id);
    samples.push_back(std::move(g.sample));
  }
  cseg::write_corpus(out, samples);
  cseg::SplitTable table = cseg::make_splits(ids, folds, labeled_fraction, seed);
  cseg::write_splits((fs::path(out) / "splits.csv").string(), table);
  std::printf("wrote %d samples to %s\n", count, out.c_str());
  return 0;
}

int cmd_train(const std::string& data, const std::string& mode, double labeled_fraction,
              int epochs, int batch, double lr, const std::string& schedule, int fold,
              const std::string& out, std::uint64_t seed, int channels, int eval_every,
              const std::string& jaccard, const std::string& resume, int batch_labeled) {
  cseg::TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = batch;
  cfg.batch_labeled = batch_labeled;
  ScheduleSpec spec = parse_schedule(schedule);
  cfg.schedule = cseg::LrSchedule{lr, spec.drop_factor, spec.drop_every};
  if (mode == "complementary")
    cfg.mode = cseg::TrainMode::complementary;
  else if (mode == "fg_only")
    cfg.mode = cseg::TrainMode::fg_only;
  else
    throw cseg::config_error("mode must be complementary or fg_only");
  cfg.labeled_fraction = labeled_fraction;
  cfg.seed = seed;
  cfg.eval_every = eval_every;
  cfg.fold = fold;
  if (jaccard == "image")
    cfg.jaccard = cseg::JaccardMode::image;
  else if (jaccard == "per-pixel")
    cfg.jaccard = cseg::JaccardMode::per_pixel;
  else
    throw cseg::config_error("jaccard must be image or per-pixel");
  cfg.out_dir = out;

  std::vector<cseg::Sample> corpus = cseg::read_corpus(data);
  if (corpus.empty()) throw cseg::config_error("empty corpus at " + data);
  cseg::SplitTable table = cseg::read_splits((fs::path(data) / "splits.csv").string());
  cfg.net.input_size = int(corpus.front().image.shape().h);
  cfg.net.base_channels = channels;
  cfg.validate();

  print_kv("data", data);
  print_kv("mode", mode);
  print_kv("labeled-fraction", labeled_fraction);
  print_kv("epochs", std::int64_t(epochs));
  print_kv("batch", std::int64_t(batch));
  print_kv("batch-labeled", std::int64_t(batch_labeled));
  print_kv("lr", lr);
  print_kv("schedule", schedule);
  print_kv("fold", std::int64_t(fold));
  print_kv("seed", std::int64_t(seed));
  print_kv("channels", std::int64_t(channels));
  print_kv("eval-every", std::int64_t(eval_every));
  print_kv("jaccard", jaccard);
  print_kv("input-size", std::int64_t(cfg.net.input_size));
  print_kv("out", out);
  if (!resume.empty()) print_kv("resume", resume);

  cseg::TrainResult res = cseg::train(corpus, table, cfg, resume);
  std::printf("final val DI (fg) = %.4f\n", res.final_val_di_fg);
  if (cfg.mode == cseg::TrainMode::complementary)
    std::printf("final val DI (fused) = %.4f\n", res.final_val_di_fused);
  std::printf("checkpoint: %s\nlog: %s\n", res.checkpoint_path.c_str(), res.log_path.c_str());
  return 0;
}

int cmd_eval(const std::string& data, const std::string& ckpt, int fold_flag,
             const std::string& out) {
  print_kv("data", data);
  print_kv("ckpt", ckpt);
  print_kv("out", out);

  cseg::LoadedCheckpoint loaded = cseg::load_net_checkpoint(ckpt);
  const int fold = fold_flag >= 0 ? fold_flag : loaded.fold;
  print_kv("fold", std::int64_t(fold));

  std::vector<cseg::Sample> corpus = cseg::read_corpus(data);
  cseg::SplitTable table = cseg::read_splits((fs::path(data) / "splits.csv").string());
  std::map<std::string, const cseg::Sample*> by_id;
  for (const auto& s : corpus) by_id[s.id] = &s;
  std::vector<const cseg::Sample*> val;
  for (const auto& id : table.val_ids(fold)) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw cseg::io_error("split id '" + id + "' missing from corpus");
    val.push_back(it->second);
  }
  if (val.empty()) throw cseg::config_error("no validation samples for fold " + std::to_string(fold));

  const bool fused = loaded.mode == cseg::TrainMode::complementary;
  std::vector<cseg::EvalRow> rows = cseg::evaluate(loaded.net, val, fold, fused);
  cseg::write_metrics_csv(out, rows, fused);

  double di_fg = 0, di_fused = 0;
  for (const auto& r : rows) {
    di_fg += r.fg.di;
    di_fused += r.fused.di;
  }
  std::printf("images: %zu\n", rows.size());
  std::printf("mean DI (fg): %.4f\n", di_fg / double(rows.size()));
  if (fused) std::printf("mean DI (fused): %.4f\n", di_fused / double(rows.size()));
  std::printf("metrics: %s\n", out.c_str());
  return 0;
}

int cmd_gradcheck(const std::string& op, double eps, double tol, std::uint64_t seed) {
  print_kv("op", op);
  print_kv("eps", eps);
  print_kv("tol", tol);
  print_kv("seed", std::int64_t(seed));

  std::vector<std::string> ops;
  if (op == "all") {
    ops = cseg::gradcheck_op_names();
  } else {
    ops = {op};
  }
  const auto t0 = std::chrono::steady_clock::now();
  int failures = 0;
  for (const auto& name : ops) {
    for (const auto& c : cseg::run_gradcheck_op(name, eps, tol, seed)) {
      std::printf("%-24s wrt %-12s %s\n", c.op.c_str(), c.wrt.c_str(), c.report.str().c_str());
      if (!c.report.pass) ++failures;
    }
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("gradcheck: %s (%d failure%s, %.1fs)\n", failures == 0 ? "PASS" : "FAIL",
              failures, failures == 1 ? "" : "s", secs);
  return failures == 0 ? 0 : 2;
}

int cmd_rate_map(const std::string& ckpt, const std::string& image,
                 const std::string& out_prefix, const std::string& which_net) {
  print_kv("ckpt", ckpt);
  print_kv("image", image);
  print_kv("out-prefix", out_prefix);
  print_kv("net", which_net);

  cseg::LoadedCheckpoint loaded = cseg::load_net_checkpoint(ckpt);
  cseg::Tensor<float> img = cseg::read_ppm(image);
  cseg::Shape s = img.shape();
  if (s.h != loaded.net_cfg.input_size || s.w != loaded.net_cfg.input_size)
    throw cseg::config_error("image is " + std::to_string(s.w) + "x" + std::to_string(s.h) +
                             " but the checkpoint expects " +
                             std::to_string(loaded.net_cfg.input_size) + " square");

  const cseg::SegNet<float>& net = which_net == "bg" ? loaded.net.bg : loaded.net.fg;
  auto out = net.forward(nullptr, img);
  for (std::size_t i = 0; i < out.rate_maps.size(); ++i) {
    const cseg::Tensor<float>& r = out.rate_maps[i];
    float lo = r.data()[0], hi = r.data()[0];
    for (std::int64_t j = 0; j < r.numel(); ++j) {
      lo = std::min(lo, r.data()[j]);
      hi = std::max(hi, r.data()[j]);
    }
    const std::string path = out_prefix + "_kam" + std::to_string(i + 1) + ".pgm";
    cseg::write_pgm_gray(path, r, lo, hi);
    std::printf("kam%zu: %s  raw min=%.6f max=%.6f (%lldx%lld)\n", i + 1, path.c_str(),
                double(lo), double(hi), (long long)r.shape().w, (long long)r.shape().h);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  cseg::tune_allocator();
  CLI::App app{"complementary foreground/background lesion segmentation"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic lesion corpus");
  std::string gen_out = "data";
  int gen_count = 200, gen_size = 192, gen_hairs = 0, gen_folds = 4;
  std::uint64_t gen_seed = 42;
  double gen_hole = 0.5, gen_fuzz = 6.0, gen_labeled = 1.0, gen_noise = 0.02;
  gen->add_option("--out", gen_out, "output directory")->capture_default_str();
  gen->add_option("--count", gen_count, "number of samples")->capture_default_str();
  gen->add_option("--size", gen_size, "image size (multiple of 16)")->capture_default_str();
  gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
  gen->add_option("--hole-prob", gen_hole, "probability of a low-contrast hole")
      ->capture_default_str();
  gen->add_option("--fuzz", gen_fuzz, "boundary fuzz width in pixels")->capture_default_str();
  gen->add_option("--hairs", gen_hairs, "hair artifacts per image")->capture_default_str();
  gen->add_option("--noise", gen_noise, "Gaussian pixel noise std")->capture_default_str();
  gen->add_option("--labeled-fraction", gen_labeled,
                  "fraction of each fold's training set marked labeled")
      ->capture_default_str();
  gen->add_option("--folds", gen_folds, "cross-validation folds")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "train on a generated corpus");
  std::string tr_data = "data", tr_mode = "complementary", tr_schedule = "step:40:0.1";
  std::string tr_out = "run", tr_jaccard = "image", tr_resume;
  double tr_lf = -1.0, tr_lr = 1e-3;
  int tr_epochs = 30, tr_batch = 4, tr_fold = 0, tr_channels = 8, tr_eval_every = 5;
  int tr_batch_labeled = 2;
  std::uint64_t tr_seed = 1;
  tr->add_option("--data", tr_data, "corpus directory")->capture_default_str();
  tr->add_option("--mode", tr_mode, "complementary | fg_only")->capture_default_str();
  tr->add_option("--labeled-fraction", tr_lf,
                 "override the manifest's labeled flags (first ceil(f*N) of each "
                 "fold's training rows); negative keeps the manifest")
      ->capture_default_str();
  tr->add_option("--epochs", tr_epochs, "training epochs")->capture_default_str();
  tr->add_option("--batch", tr_batch, "mini-batch size")->capture_default_str();
  tr->add_option("--batch-labeled", tr_batch_labeled,
                 "labeled slots per batch in semi-supervised mode")
      ->capture_default_str();
  tr->add_option("--lr", tr_lr, "base learning rate")->capture_default_str();
  tr->add_option("--schedule", tr_schedule, "step:<epochs>:<factor>")->capture_default_str();
  tr->add_option("--fold", tr_fold, "validation fold")->capture_default_str();
  tr->add_option("--seed", tr_seed, "training seed")->capture_default_str();
  tr->add_option("--channels", tr_channels, "base channel count")->capture_default_str();
  tr->add_option("--eval-every", tr_eval_every, "epochs between validations")
      ->capture_default_str();
  tr->add_option("--jaccard", tr_jaccard, "image | per-pixel")->capture_default_str();
  tr->add_option("--resume", tr_resume, "checkpoint to resume from")->capture_default_str();
  tr->add_option("--out", tr_out, "output directory")->capture_default_str();

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a validation fold");
  std::string ev_data = "data", ev_ckpt, ev_out = "metrics.csv";
  int ev_fold = -1;
  ev->add_option("--data", ev_data, "corpus directory")->capture_default_str();
  ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--fold", ev_fold, "fold (default: the checkpoint's fold)")
      ->capture_default_str();
  ev->add_option("--out", ev_out, "metrics CSV path")->capture_default_str();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference checks for every operator");
  std::string gc_op = "all";
  double gc_eps = 1e-3, gc_tol = 1e-4;
  std::uint64_t gc_seed = 7;
  gc->add_option("--op", gc_op, "operator name or 'all'")->capture_default_str();
  gc->add_option("--eps", gc_eps, "central-difference step")->capture_default_str();
  gc->add_option("--tol", gc_tol, "max relative error")->capture_default_str();
  gc->add_option("--seed", gc_seed, "input seed")->capture_default_str();

  // rate-map
  auto* rm = app.add_subcommand("rate-map", "export each KAM's learned rate map as PGM");
  std::string rm_ckpt, rm_image, rm_prefix = "rate", rm_net = "fg";
  rm->add_option("--ckpt", rm_ckpt, "checkpoint path")->required();
  rm->add_option("--image", rm_image, "input PPM image")->required();
  rm->add_option("--out-prefix", rm_prefix, "output file prefix")->capture_default_str();
  rm->add_option("--net", rm_net, "fg | bg")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;  // bad flags are validation errors
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_out, gen_count, gen_size, gen_seed, gen_hole, gen_fuzz,
                          gen_hairs, gen_labeled, gen_folds, gen_noise);
    if (tr->parsed())
      return cmd_train(tr_data, tr_mode, tr_lf, tr_epochs, tr_batch, tr_lr, tr_schedule,
                       tr_fold, tr_out, tr_seed, tr_channels, tr_eval_every, tr_jaccard,
                       tr_resume, tr_batch_labeled);
    if (ev->parsed()) return cmd_eval(ev_data, ev_ckpt, ev_fold, ev_out);
    if (gc->parsed()) return cmd_gradcheck(gc_op, gc_eps, gc_tol, gc_seed);
    if (rm->parsed()) return cmd_rate_map(rm_ckpt, rm_image, rm_prefix, rm_net);
  } catch (const cseg::config_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
