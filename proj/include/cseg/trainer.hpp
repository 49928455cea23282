#pragma once

/// Joint training of the complementary pair.
///
/// Every epoch shuffles the fold's training ids (seeded per epoch, so a
/// resumed run continues the exact stream), assembles batches (in
/// semi-supervised mode each batch draws a fixed number of labeled samples
/// and fills the rest with unlabeled ones, padding from whichever pool still
/// has items), forwards both networks, applies the semi-supervised total
/// loss, and performs one Adam step over the union of both networks'
/// parameters. fg_only mode trains the foreground network alone on labeled
/// data; the background network stays untouched bitwise.
///
/// Log CSV columns (complementary): epoch, lr, L_fore, L_back, L_mutual,
/// L_total, val_DI_fg, val_DI_fused. fg_only omits the L_back, L_mutual and
/// val_DI_fused columns. Validation columns are filled on evaluation epochs
/// (every eval_every, plus the last) and left empty otherwise.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cseg/checkpoint.hpp"
#include "cseg/data.hpp"
#include "cseg/losses.hpp"
#include "cseg/metrics.hpp"
#include "cseg/network.hpp"
#include "cseg/optim.hpp"

namespace cseg {

enum class TrainMode { complementary, fg_only };

struct TrainConfig {
  int epochs = 30;
  int batch_size = 4;
  int batch_labeled = 2;  // labeled slots per semi-supervised batch
  LrSchedule schedule{1e-3, 0.1, 40};
  TrainMode mode = TrainMode::complementary;
  double labeled_fraction = -1.0;  // < 0: keep the manifest's labeled column
  std::uint64_t seed = 1;
  int eval_every = 5;
  int fold = 0;
  JaccardMode jaccard = JaccardMode::image;
  SegNetConfig net;
  std::string out_dir = "run";

  void validate() const {
    if (epochs < 1) throw config_error("epochs must be >= 1");
    if (batch_size < 1) throw config_error("batch size must be >= 1");
    if (batch_labeled < 0 || batch_labeled > batch_size)
      throw config_error("labeled slots per batch must be in [0, batch]");
    if (eval_every < 1) throw config_error("eval-every must be >= 1");
    if (fold < 0) throw config_error("fold must be >= 0");
    net.validate();
  }
};

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  std::optional<double> fore, back, mutual, total;
  std::optional<double> val_di_fg, val_di_fused;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::string checkpoint_path;
  std::string log_path;
  double final_val_di_fg = 0;
  double final_val_di_fused = 0;  // NaN-free: equals fg value in fg_only mode
};

/// What the training loop sees: unlabeled items expose no mask at all.
struct TrainItem {
  const Sample* sample = nullptr;
  bool labeled = false;

  const Tensor<float>& image() const { return sample->image; }
  const Tensor<float>* mask() const { return labeled ? &sample->mask : nullptr; }
};

namespace detail {

inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

template <class T>
Tensor<T> stack_images(const std::vector<const Sample*>& batch) {
  Shape s0 = batch.front()->image.shape();
  Tensor<T> out = Tensor<T>::zeros(Shape{std::int64_t(batch.size()), s0.c, s0.h, s0.w});
  const std::int64_t per = s0.c * s0.h * s0.w;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const float* src = batch[i]->image.data();
    T* dst = out.data() + std::int64_t(i) * per;
    for (std::int64_t j = 0; j < per; ++j) dst[j] = T(src[j]);
  }
  return out;
}

template <class T>
Tensor<T> stack_item_images(const std::vector<TrainItem>& batch) {
  Shape s0 = batch.front().image().shape();
  Tensor<T> out = Tensor<T>::zeros(Shape{std::int64_t(batch.size()), s0.c, s0.h, s0.w});
  const std::int64_t per = s0.c * s0.h * s0.w;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const float* src = batch[i].image().data();
    T* dst = out.data() + std::int64_t(i) * per;
    for (std::int64_t j = 0; j < per; ++j) dst[j] = T(src[j]);
  }
  return out;
}

template <class T>
Tensor<T> stack_masks(const std::vector<TrainItem>& batch,
                      const std::vector<std::int64_t>& labeled_idx) {
  Shape s0 = batch.front().image().shape();
  Tensor<T> out =
      Tensor<T>::zeros(Shape{std::int64_t(labeled_idx.size()), 1, s0.h, s0.w});
  const std::int64_t per = s0.h * s0.w;
  for (std::size_t i = 0; i < labeled_idx.size(); ++i) {
    const Tensor<float>* m = batch[std::size_t(labeled_idx[i])].mask();
    require(m != nullptr, "stack_masks: unlabeled item has no mask");
    T* dst = out.data() + std::int64_t(i) * per;
    for (std::int64_t j = 0; j < per; ++j) dst[j] = T(m->data()[j]);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Checkpoint assembly
// ---------------------------------------------------------------------------

inline Checkpoint make_checkpoint(const ComplementaryNet<float>& net, const Adam<float>& adam,
                                  const TrainConfig& cfg, int next_epoch) {
  Checkpoint ckpt;
  ckpt.emplace("config",
               CkptTensor::meta({double(net.fg.config().input_size),
                                 double(net.fg.config().base_channels),
                                 double(net.fg.config().depth),
                                 double(net.fg.config().num_classes),
                                 cfg.mode == TrainMode::fg_only ? 1.0 : 0.0,
                                 double(cfg.fold)}));
  ckpt.emplace("trainer.meta",
               CkptTensor::meta({double(next_epoch), double(adam.step_count()),
                                 double(std::uint32_t(cfg.seed & 0xffffffffull)),
                                 double(std::uint32_t(cfg.seed >> 32)),
                                 cfg.schedule.base_lr, double(cfg.schedule.drop_every),
                                 cfg.schedule.drop_factor, double(cfg.batch_size),
                                 double(cfg.batch_labeled), double(cfg.eval_every),
                                 cfg.jaccard == JaccardMode::per_pixel ? 1.0 : 0.0,
                                 cfg.labeled_fraction}));
  for (const auto& [name, t] : net.params()) ckpt.emplace(name, CkptTensor::from(t));
  for (const auto& [name, t] : adam.first_moments())
    ckpt.emplace("adam.m." + name, CkptTensor::from(t));
  for (const auto& [name, t] : adam.second_moments())
    ckpt.emplace("adam.v." + name, CkptTensor::from(t));
  return ckpt;
}

struct LoadedCheckpoint {
  ComplementaryNet<float> net;
  SegNetConfig net_cfg;
  TrainMode mode = TrainMode::complementary;
  int fold = 0;
  Checkpoint raw;  // for optimizer/meta recovery on resume
};

inline LoadedCheckpoint load_net_checkpoint(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  auto cfg_it = ckpt.find("config");
  if (cfg_it == ckpt.end() || cfg_it->second.dtype != 1 || cfg_it->second.f64.size() < 6)
    throw io_error("checkpoint has no config record: " + path);
  const auto& c = cfg_it->second.f64;
  LoadedCheckpoint out;
  out.net_cfg.input_size = int(c[0]);
  out.net_cfg.base_channels = int(c[1]);
  out.net_cfg.depth = int(c[2]);
  out.net_cfg.num_classes = int(c[3]);
  out.mode = c[4] == 1.0 ? TrainMode::fg_only : TrainMode::complementary;
  out.fold = int(c[5]);
  out.net = ComplementaryNet<float>::build(out.net_cfg, 0);
  for (auto& [name, t] : out.net.params()) {
    auto it = ckpt.find(name);
    if (it == ckpt.end()) throw io_error("checkpoint missing tensor '" + name + "'");
    load_into(it->second, t, name);
  }
  out.raw = std::move(ckpt);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalRow {
  std::string id;
  int fold = 0;
  MetricScores fused;
  MetricScores fg;
};

/// Per-image metrics over the given samples, for both fusion modes
/// (fg_only-mode checkpoints report only the fg column set).
inline std::vector<EvalRow> evaluate(const ComplementaryNet<float>& net,
                                     const std::vector<const Sample*>& samples, int fold,
                                     bool fused_available, int batch_size = 4) {
  std::vector<EvalRow> rows;
  rows.reserve(samples.size());
  for (std::size_t pos = 0; pos < samples.size(); pos += std::size_t(batch_size)) {
    std::vector<const Sample*> batch(
        samples.begin() + std::ptrdiff_t(pos),
        samples.begin() + std::ptrdiff_t(std::min(samples.size(), pos + std::size_t(batch_size))));
    Tensor<float> images = detail::stack_images<float>(batch);
    Tensor<float> fg_mask = predict(net, images, Fusion::fg_only);
    Tensor<float> fused_mask =
        fused_available ? predict(net, images, Fusion::fused) : Tensor<float>();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      EvalRow row;
      row.id = batch[i]->id;
      row.fold = fold;
      Shape ms = batch[i]->mask.shape();
      Tensor<float> pred_fg = Tensor<float>::zeros(ms);
      std::copy_n(fg_mask.data() + std::int64_t(i) * ms.h * ms.w, ms.h * ms.w,
                  pred_fg.data());
      row.fg = scores(confusion(pred_fg, batch[i]->mask));
      if (fused_available) {
        Tensor<float> pred_fused = Tensor<float>::zeros(ms);
        std::copy_n(fused_mask.data() + std::int64_t(i) * ms.h * ms.w, ms.h * ms.w,
                    pred_fused.data());
        row.fused = scores(confusion(pred_fused, batch[i]->mask));
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

/// Columns: id,fold,AC,DI,JA,SE for a single fusion mode; two-mode reports
/// add the fused columns first. One summary row (mean over images) per fold.
inline void write_metrics_csv(const std::string& path, const std::vector<EvalRow>& rows,
                              bool fused_available) {
  std::ofstream os(path);
  if (!os) throw io_error("cannot open for writing: " + path);
  if (fused_available)
    os << "id,fold,AC_fused,DI_fused,JA_fused,SE_fused,AC_fg,DI_fg,JA_fg,SE_fg\n";
  else
    os << "id,fold,AC,DI,JA,SE\n";
  auto emit = [&os](const MetricScores& m) {
    os << ',' << detail::fmt_g(m.ac) << ',' << detail::fmt_g(m.di) << ','
       << detail::fmt_g(m.ja) << ',' << detail::fmt_g(m.se);
  };
  std::map<int, std::vector<const EvalRow*>> by_fold;
  for (const auto& r : rows) by_fold[r.fold].push_back(&r);
  for (const auto& [fold, frows] : by_fold) {
    MetricScores sum_fused, sum_fg;
    for (const EvalRow* r : frows) {
      os << r->id << ',' << r->fold;
      if (fused_available) emit(r->fused);
      emit(r->fg);
      os << '\n';
      sum_fused.ac += r->fused.ac; sum_fused.di += r->fused.di;
      sum_fused.ja += r->fused.ja; sum_fused.se += r->fused.se;
      sum_fg.ac += r->fg.ac; sum_fg.di += r->fg.di;
      sum_fg.ja += r->fg.ja; sum_fg.se += r->fg.se;
    }
    const double n = double(frows.size());
    os << "mean," << fold;
    if (fused_available) {
      MetricScores m{sum_fused.ac / n, sum_fused.di / n, sum_fused.ja / n, sum_fused.se / n};
      emit(m);
    }
    MetricScores m{sum_fg.ac / n, sum_fg.di / n, sum_fg.ja / n, sum_fg.se / n};
    emit(m);
    os << '\n';
  }
  if (!os) throw io_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

inline TrainResult train(const std::vector<Sample>& corpus, const SplitTable& splits,
                         TrainConfig cfg, const std::string& resume_path = "") {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  std::map<std::string, const Sample*> by_id;
  for (const auto& s : corpus) by_id[s.id] = &s;

  SplitTable table = splits;
  if (cfg.labeled_fraction > 0) apply_labeled_fraction(table, cfg.labeled_fraction);
  if (cfg.fold >= table.folds)
    throw config_error("fold " + std::to_string(cfg.fold) + " out of range (" +
                       std::to_string(table.folds) + " folds)");

  std::vector<TrainItem> train_pool;
  for (const auto& [id, labeled] : table.train_ids(cfg.fold)) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw io_error("split id '" + id + "' not in corpus");
    train_pool.push_back(TrainItem{it->second, labeled});
  }
  std::vector<const Sample*> val_pool;
  for (const auto& id : table.val_ids(cfg.fold)) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw io_error("split id '" + id + "' not in corpus");
    val_pool.push_back(it->second);
  }
  std::vector<std::size_t> labeled_ids, unlabeled_ids;
  for (std::size_t i = 0; i < train_pool.size(); ++i)
    (train_pool[i].labeled ? labeled_ids : unlabeled_ids).push_back(i);
  if (labeled_ids.empty()) throw config_error("training pool has no labeled samples");

  const bool comp = cfg.mode == TrainMode::complementary;
  ComplementaryNet<float> net = ComplementaryNet<float>::build(cfg.net, cfg.seed);
  std::vector<std::pair<std::string, Tensor<float>>> opt_params;
  if (comp) {
    opt_params = net.params();
  } else {
    for (auto& [k, v] : net.fg.params()) opt_params.emplace_back("fg." + k, v);
  }
  Adam<float> adam(opt_params);

  int start_epoch = 0;
  if (!resume_path.empty()) {
    LoadedCheckpoint loaded = load_net_checkpoint(resume_path);
    for (auto& [name, t] : net.params()) {
      auto it = loaded.raw.find(name);
      if (it == loaded.raw.end()) throw io_error("resume: missing tensor '" + name + "'");
      load_into(it->second, t, name);
    }
    for (auto& [name, t] : adam.first_moments()) {
      auto it = loaded.raw.find("adam.m." + name);
      if (it == loaded.raw.end()) throw io_error("resume: missing optimizer state for " + name);
      load_into(it->second, t, name);
    }
    for (auto& [name, t] : adam.second_moments()) {
      auto it = loaded.raw.find("adam.v." + name);
      if (it == loaded.raw.end()) throw io_error("resume: missing optimizer state for " + name);
      load_into(it->second, t, name);
    }
    const auto& meta = loaded.raw.at("trainer.meta").f64;
    start_epoch = int(meta[0]);
    adam.set_step_count(std::int64_t(meta[1]));
  }

  TrainResult result;
  result.log_path = (fs::path(cfg.out_dir) / "train_log.csv").string();
  std::ofstream log_os(result.log_path);
  if (!log_os) throw io_error("cannot open for writing: " + result.log_path);
  auto cell = [](const std::optional<double>& v) { return v ? detail::fmt_g(*v) : std::string(); };
  if (comp)
    log_os << "epoch,lr,L_fore,L_back,L_mutual,L_total,val_DI_fg,val_DI_fused\n";
  else
    log_os << "epoch,lr,L_fore,L_total,val_DI_fg\n";
  auto append_log_row = [&](const EpochLog& l) {
    if (comp)
      log_os << l.epoch << ',' << detail::fmt_g(l.lr) << ',' << cell(l.fore) << ','
             << cell(l.back) << ',' << cell(l.mutual) << ',' << cell(l.total) << ','
             << cell(l.val_di_fg) << ',' << cell(l.val_di_fused) << '\n';
    else
      log_os << l.epoch << ',' << detail::fmt_g(l.lr) << ',' << cell(l.fore) << ','
             << cell(l.total) << ',' << cell(l.val_di_fg) << '\n';
    log_os.flush();
    if (!log_os) throw io_error("write failed: " + result.log_path);
  };

  auto eval_now = [&](EpochLog& log) {
    std::vector<EvalRow> rows = evaluate(net, val_pool, cfg.fold, comp, cfg.batch_size);
    double di_fg = 0, di_fused = 0;
    for (const auto& r : rows) {
      di_fg += r.fg.di;
      di_fused += r.fused.di;
    }
    di_fg /= double(rows.size());
    di_fused /= double(rows.size());
    log.val_di_fg = di_fg;
    result.final_val_di_fg = di_fg;
    if (comp) {
      log.val_di_fused = di_fused;
      result.final_val_di_fused = di_fused;
    } else {
      result.final_val_di_fused = di_fg;
    }
  };

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.schedule.at(epoch);
    Rng erng(Rng::derive(cfg.seed, 0x700000 + std::uint64_t(epoch)));
    std::vector<std::size_t> lab = labeled_ids, unl = unlabeled_ids;
    shuffle(lab.begin(), lab.end(), erng);
    shuffle(unl.begin(), unl.end(), erng);
    if (!comp) unl.clear();  // fg_only trains on labeled data alone

    double sum_fore = 0, sum_back = 0, sum_mutual = 0, sum_total = 0;
    std::int64_t n_fore = 0, n_batches = 0;

    std::size_t li = 0, ui = 0;
    while (li < lab.size() || ui < unl.size()) {
      std::vector<TrainItem> batch;
      std::vector<std::int64_t> labeled_idx;
      const int want_lab = comp ? cfg.batch_labeled : cfg.batch_size;
      for (int k = 0; k < want_lab && li < lab.size() && int(batch.size()) < cfg.batch_size; ++k) {
        labeled_idx.push_back(std::int64_t(batch.size()));
        batch.push_back(train_pool[lab[li++]]);
      }
      while (int(batch.size()) < cfg.batch_size && ui < unl.size())
        batch.push_back(train_pool[unl[ui++]]);
      while (int(batch.size()) < cfg.batch_size && li < lab.size()) {
        labeled_idx.push_back(std::int64_t(batch.size()));
        batch.push_back(train_pool[lab[li++]]);
      }
      if (batch.empty()) break;

      try {
        Tensor<float> images = detail::stack_item_images<float>(batch);
        Graph<float> g;
        auto fg_out = net.fg.forward(&g, images);
        Tensor<float> p_f = slice_channels(&g, fg_out.prob, 1, 2);
        Tensor<float> loss;
        std::optional<double> v_fore, v_back, v_mutual;
        if (comp) {
          auto bg_out = net.bg.forward(&g, images);
          Tensor<float> p_b = slice_channels(&g, bg_out.prob, 1, 2);
          Tensor<float> y = labeled_idx.empty() ? Tensor<float>()
                                                : detail::stack_masks<float>(batch, labeled_idx);
          TotalLoss<float> tl = total_loss(&g, p_f, p_b, y, labeled_idx, cfg.jaccard);
          loss = tl.total;
          if (tl.fore.defined()) v_fore = double(tl.fore.data()[0]);
          if (tl.back.defined()) v_back = double(tl.back.data()[0]);
          v_mutual = double(tl.mutual.data()[0]);
        } else {
          require(!labeled_idx.empty(), "fg_only batch without labeled samples");
          Tensor<float> y = detail::stack_masks<float>(batch, labeled_idx);
          Tensor<float> p_lab = slice_batch(&g, p_f, labeled_idx);
          loss = foreground_loss(&g, p_lab, y, cfg.jaccard);
          v_fore = double(loss.data()[0]);
        }
        g.backward(loss);
        adam.step(lr);
        adam.zero_grad();

        sum_total += double(loss.data()[0]);
        ++n_batches;
        if (v_fore) {
          sum_fore += *v_fore;
          ++n_fore;
        }
        if (v_back) sum_back += *v_back;
        if (v_mutual) sum_mutual += *v_mutual;
      } catch (const numeric_error& e) {
        std::string ids;
        for (const auto& item : batch) ids += (ids.empty() ? "" : " ") + item.sample->id;
        throw numeric_error(std::string(e.what()) + " [epoch " + std::to_string(epoch) +
                            ", batch ids: " + ids + "]");
      }
    }

    EpochLog log;
    log.epoch = epoch;
    log.lr = lr;
    if (n_batches > 0) log.total = sum_total / double(n_batches);
    if (n_fore > 0) log.fore = sum_fore / double(n_fore);
    if (comp && n_batches > 0) {
      if (n_fore > 0) log.back = sum_back / double(n_fore);
      log.mutual = sum_mutual / double(n_batches);
    }
    const bool last = epoch + 1 == cfg.epochs;
    if ((epoch + 1) % cfg.eval_every == 0 || last) eval_now(log);
    result.log.push_back(log);
    append_log_row(log);

    if ((epoch + 1) % cfg.eval_every == 0 || last) {
      Checkpoint ckpt = make_checkpoint(net, adam, cfg, epoch + 1);
      save_checkpoint((fs::path(cfg.out_dir) / "ckpt_latest.cseg").string(), ckpt);
    }
  }

  result.checkpoint_path = (fs::path(cfg.out_dir) / "ckpt_final.cseg").string();
  save_checkpoint(result.checkpoint_path, make_checkpoint(net, adam, cfg, cfg.epochs));
  return result;
}

}  // namespace cseg
