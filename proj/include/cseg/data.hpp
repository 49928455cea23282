#pragma once

/// Synthetic lesion corpus.
///
/// Each sample is a smooth random blob (a low-frequency radial perturbation
/// of a rotated ellipse) rendered as a dark lesion on lighter skin. Two
/// failure modes are manufactured deliberately: with some probability an
/// interior region is recolored toward skin tone while the mask is left
/// untouched (a low-contrast hole trap), and the lesion boundary can be
/// alpha-blended over a configurable fuzz width (a shrink trap). Optional
/// thin dark arcs imitate hairs. Generation is deterministic per
/// (seed, index).
///
/// On disk: dir/images/%05d.ppm, dir/masks/%05d.pgm, dir/splits.csv with
/// header id,fold,role,labeled. Split rows are written in shuffled order so
/// the per-fold "first ceil(fraction * train_count) rows are labeled" rule
/// can be re-derived for any fraction.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cseg/netpbm.hpp"
#include "cseg/rng.hpp"
#include "cseg/tensor.hpp"

namespace cseg {

struct Sample {
  std::string id;
  Tensor<float> image;  // (1, 3, H, W), values in [0, 1]
  Tensor<float> mask;   // (1, 1, H, W), strictly binary
};

struct GenConfig {
  int size = 192;
  std::uint64_t seed = 42;
  int lesion_count_min = 1;
  int lesion_count_max = 1;
  double area_frac_min = 0.04;  // configured lesion-size range (mask fraction)
  double area_frac_max = 0.22;
  double hole_prob = 0.0;
  double hole_contrast = 0.15;  // 0 = hole invisible, 1 = full lesion color
  double fuzz_px = 0.0;         // boundary alpha-blend width in pixels
  int hair_count = 0;
  double noise_std = 0.02;
  std::array<double, 3> skin_lo{0.70, 0.52, 0.42};
  std::array<double, 3> skin_hi{0.86, 0.70, 0.60};
  std::array<double, 3> lesion_lo{0.22, 0.12, 0.08};
  std::array<double, 3> lesion_hi{0.46, 0.32, 0.24};

  void validate() const {
    if (size < 32 || size % 16 != 0)
      throw config_error("size must be a multiple of 16 and >= 32, got " + std::to_string(size));
    if (hole_prob < 0 || hole_prob > 1) throw config_error("hole-prob must be in [0,1]");
    if (hole_contrast < 0 || hole_contrast > 1) throw config_error("hole-contrast must be in [0,1]");
    if (fuzz_px < 0 || fuzz_px >= double(size) / 4.0)
      throw config_error("fuzz width must be in [0, size/4)");
    if (hair_count < 0) throw config_error("hairs must be >= 0");
    if (noise_std < 0 || noise_std > 0.2) throw config_error("noise std must be in [0, 0.2]");
    if (lesion_count_min < 1 || lesion_count_max < lesion_count_min)
      throw config_error("bad lesion count range");
    if (area_frac_min < 0.01 || area_frac_max <= area_frac_min || area_frac_max > 0.5)
      throw config_error("lesion area range must satisfy 0.01 <= min < max <= 0.5");
  }
};

struct GenSample {
  Sample sample;
  Tensor<float> hole_mask;  // (1, 1, H, W); nonzero only strictly inside the mask
};

namespace detail {

struct Blob {
  double cx, cy, r, aspect, rot;
  std::array<double, 4> amp, phase;

  // signed distance to the blob boundary in (approximate) pixels; >= 0 inside
  double dist_px(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double co = std::cos(rot), si = std::sin(rot);
    const double u = (dx * co + dy * si) / (r * std::sqrt(aspect));
    const double v = (-dx * si + dy * co) / (r / std::sqrt(aspect));
    const double rr = std::sqrt(u * u + v * v);
    const double phi = std::atan2(v, u);
    double rho = 1.0;
    for (int k = 0; k < 4; ++k) rho += amp[std::size_t(k)] * std::cos(double(k + 1) * phi + phase[std::size_t(k)]);
    if (rho < 0.35) rho = 0.35;
    return (rho - rr) * r;
  }
};

}  // namespace detail

/// Deterministic per (cfg.seed, index). Degenerate draws (mask below 1% of
/// the image, or a requested hole that ends up empty) retry with the next
/// attempt sub-seed.
inline GenSample generate_one(const GenConfig& cfg, std::int64_t index) {
  cfg.validate();
  const int S = cfg.size;
  const double S2 = double(S) * double(S);

  for (int attempt = 0; attempt < 32; ++attempt) {
    Rng rng(Rng::derive(Rng::derive(cfg.seed, std::uint64_t(index)), std::uint64_t(attempt)));

    const int count = cfg.lesion_count_min +
                      int(rng.below(std::uint64_t(cfg.lesion_count_max - cfg.lesion_count_min + 1)));
    // target comfortably inside the configured range; the radial
    // perturbation moves the realized area a few percent
    const double area_target =
        rng.uniform(cfg.area_frac_min * 1.08, cfg.area_frac_max * 0.90) * S2;

    std::vector<detail::Blob> blobs;
    double mean_rho_sq = 1.0;
    for (int b = 0; b < count; ++b) {
      detail::Blob blob;
      blob.cx = rng.uniform(0.34, 0.66) * S;
      blob.cy = rng.uniform(0.34, 0.66) * S;
      blob.aspect = rng.uniform(0.75, 1.30);
      blob.rot = rng.uniform(0.0, 3.141592653589793);
      double sq = 1.0;
      for (int k = 0; k < 4; ++k) {
        blob.amp[std::size_t(k)] = rng.uniform(-0.25, 0.25) / double(k + 1);
        blob.phase[std::size_t(k)] = rng.uniform(0.0, 6.283185307179586);
        sq += 0.5 * blob.amp[std::size_t(k)] * blob.amp[std::size_t(k)];
      }
      mean_rho_sq = sq;
      blob.r = std::sqrt(area_target / double(count) / (3.141592653589793 * mean_rho_sq));
      blobs.push_back(blob);
    }

    std::array<double, 3> skin, lesion;
    for (int c = 0; c < 3; ++c) {
      skin[std::size_t(c)] = rng.uniform(cfg.skin_lo[std::size_t(c)], cfg.skin_hi[std::size_t(c)]);
      lesion[std::size_t(c)] = rng.uniform(cfg.lesion_lo[std::size_t(c)], cfg.lesion_hi[std::size_t(c)]);
    }

    const bool want_hole = rng.bernoulli(cfg.hole_prob);
    double hole_cx = 0, hole_cy = 0, hole_r = 0;
    if (want_hole) {
      const auto& b0 = blobs[0];
      const double psi = rng.uniform(0.0, 6.283185307179586);
      const double dist = rng.uniform(0.0, 0.35) * b0.r;
      hole_cx = b0.cx + dist * std::cos(psi);
      hole_cy = b0.cy + dist * std::sin(psi);
      hole_r = rng.uniform(0.18, 0.38) * b0.r;
    }

    GenSample out;
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "%05lld", (long long)index);
    out.sample.id = idbuf;
    out.sample.image = Tensor<float>::zeros(Shape{1, 3, S, S});
    out.sample.mask = Tensor<float>::zeros(Shape{1, 1, S, S});
    out.hole_mask = Tensor<float>::zeros(Shape{1, 1, S, S});

    std::int64_t area = 0, hole_area = 0;
    for (int y = 0; y < S; ++y) {
      for (int x = 0; x < S; ++x) {
        double d = -1e30;
        for (const auto& b : blobs) d = std::max(d, b.dist_px(double(x), double(y)));
        const bool inside = d >= 0.0;
        if (inside) {
          out.sample.mask.at(0, 0, y, x) = 1.f;
          ++area;
        }
        double alpha = inside ? 1.0 : 0.0;
        if (cfg.fuzz_px > 0) {
          alpha = 0.5 + d / cfg.fuzz_px;
          alpha = alpha < 0 ? 0 : (alpha > 1 ? 1 : alpha);
        }
        double col[3];
        for (int c = 0; c < 3; ++c)
          col[c] = skin[std::size_t(c)] + (lesion[std::size_t(c)] - skin[std::size_t(c)]) * alpha;
        if (want_hole && d >= 2.0) {  // hole regions stay strictly inside the mask
          const double hd = hole_r - std::hypot(double(x) - hole_cx, double(y) - hole_cy);
          double ha = 0.5 + hd / 1.5;
          ha = ha < 0 ? 0 : (ha > 1 ? 1 : ha);
          if (ha > 0) {
            for (int c = 0; c < 3; ++c) {
              const double target = skin[std::size_t(c)] +
                                    cfg.hole_contrast * (lesion[std::size_t(c)] - skin[std::size_t(c)]);
              col[c] += (target - col[c]) * ha;
            }
            if (ha > 0.5) {
              out.hole_mask.at(0, 0, y, x) = 1.f;
              ++hole_area;
            }
          }
        }
        for (int c = 0; c < 3; ++c) out.sample.image.at(0, c, y, x) = float(col[c]);
      }
    }

    if (double(area) < 0.01 * S2) continue;           // degenerate blob
    if (want_hole && hole_area < 9) continue;         // hole requested but invisible

    // hairs: dark thin quadratic arcs stamped over the rendered image
    for (int hcount = 0; hcount < cfg.hair_count; ++hcount) {
      double p0x = rng.uniform(0.05, 0.95) * S, p0y = rng.uniform(0.0, 0.15) * S;
      double p2x = rng.uniform(0.05, 0.95) * S, p2y = rng.uniform(0.85, 1.0) * S;
      if (rng.bernoulli(0.5)) {
        std::swap(p0x, p0y);
        std::swap(p2x, p2y);
      }
      const double p1x = rng.uniform(0.15, 0.85) * S, p1y = rng.uniform(0.15, 0.85) * S;
      const double shade = rng.uniform(0.03, 0.16);
      const double thick = rng.bernoulli(0.3) ? 1.4 : 0.9;
      const int steps = 3 * S;
      for (int t = 0; t <= steps; ++t) {
        const double u = double(t) / double(steps);
        const double px = (1 - u) * (1 - u) * p0x + 2 * (1 - u) * u * p1x + u * u * p2x;
        const double py = (1 - u) * (1 - u) * p0y + 2 * (1 - u) * u * p1y + u * u * p2y;
        const int x0 = int(std::floor(px - thick)), x1 = int(std::ceil(px + thick));
        const int y0 = int(std::floor(py - thick)), y1 = int(std::ceil(py + thick));
        for (int y = std::max(0, y0); y <= std::min(S - 1, y1); ++y)
          for (int x = std::max(0, x0); x <= std::min(S - 1, x1); ++x) {
            double cover = thick - std::hypot(double(x) - px, double(y) - py) + 0.5;
            cover = cover < 0 ? 0 : (cover > 1 ? 1 : cover);
            if (cover <= 0) continue;
            for (int c = 0; c < 3; ++c) {
              float& v = out.sample.image.at(0, c, y, x);
              v = float(v + (shade - v) * 0.85 * cover);
            }
          }
      }
    }

    if (cfg.noise_std > 0) {
      float* img = out.sample.image.data();
      const std::int64_t n = out.sample.image.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        double v = double(img[i]) + rng.normal() * cfg.noise_std;
        img[i] = float(v < 0 ? 0 : (v > 1 ? 1 : v));
      }
    }
    return out;
  }
  throw error("generate_one: no valid sample after 32 attempts (seed " +
              std::to_string(cfg.seed) + ", index " + std::to_string(index) + ")");
}

inline std::vector<GenSample> generate(const GenConfig& cfg, int count) {
  std::vector<GenSample> out;
  out.reserve(std::size_t(count));
  for (int i = 0; i < count; ++i) out.push_back(generate_one(cfg, i));
  return out;
}

// ---------------------------------------------------------------------------
// Corpus I/O
// ---------------------------------------------------------------------------

inline void write_corpus(const std::string& dir, const std::vector<Sample>& samples) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  for (const auto& s : samples) {
    write_ppm((fs::path(dir) / "images" / (s.id + ".ppm")).string(), s.image);
    write_pgm_mask((fs::path(dir) / "masks" / (s.id + ".pgm")).string(), s.mask);
  }
}

inline std::vector<Sample> read_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path images = fs::path(dir) / "images";
  if (!fs::is_directory(images)) throw io_error("no images/ directory under " + dir);
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(images))
    if (e.path().extension() == ".ppm") ids.push_back(e.path().stem().string());
  std::sort(ids.begin(), ids.end());
  std::vector<Sample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    Sample s;
    s.id = id;
    s.image = read_ppm((images / (id + ".ppm")).string());
    s.mask = read_pgm_mask((fs::path(dir) / "masks" / (id + ".pgm")).string());
    Shape si = s.image.shape(), sm = s.mask.shape();
    if (si.h != sm.h || si.w != sm.w)
      throw io_error("image/mask size mismatch for id " + id);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitRow {
  std::string id;
  int fold = 0;       // the fold this row belongs to
  bool val = false;   // role: val or train within that fold
  bool labeled = true;
};

struct SplitTable {
  int folds = 4;
  std::vector<SplitRow> rows;  // grouped by fold, shuffled id order within

  std::vector<std::string> val_ids(int fold) const {
    std::vector<std::string> out;
    for (const auto& r : rows)
      if (r.fold == fold && r.val) out.push_back(r.id);
    return out;
  }
  /// Train ids of a fold in manifest order, with their labeled flags.
  std::vector<std::pair<std::string, bool>> train_ids(int fold) const {
    std::vector<std::pair<std::string, bool>> out;
    for (const auto& r : rows)
      if (r.fold == fold && !r.val) out.emplace_back(r.id, r.labeled);
    return out;
  }
};

/// Deterministic shuffled split. Validation fold of the id at shuffled
/// position p is p mod folds. Within each fold's training set the first
/// ceil(labeled_fraction * train_count) rows (in shuffled order) are labeled.
inline SplitTable make_splits(std::vector<std::string> ids, int folds,
                              double labeled_fraction, std::uint64_t seed) {
  if (folds < 2) throw config_error("folds must be >= 2");
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0))
    throw config_error("labeled fraction must be in (0, 1]");
  if (std::int64_t(ids.size()) < folds) throw config_error("fewer ids than folds");
  Rng rng(Rng::derive(seed, 0x5eed));
  shuffle(ids.begin(), ids.end(), rng);
  std::vector<int> fold_of(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) fold_of[i] = int(i % std::size_t(folds));

  SplitTable table;
  table.folds = folds;
  for (int f = 0; f < folds; ++f) {
    std::int64_t train_count = 0;
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (fold_of[i] != f) ++train_count;
    const std::int64_t labeled_count =
        std::int64_t(std::ceil(labeled_fraction * double(train_count)));
    if (labeled_count == 0) throw config_error("labeled fraction yields zero labeled samples");
    std::int64_t seen_train = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      SplitRow r;
      r.id = ids[i];
      r.fold = f;
      r.val = fold_of[i] == f;
      r.labeled = r.val ? true : (seen_train < labeled_count);
      if (!r.val) ++seen_train;
      table.rows.push_back(std::move(r));
    }
  }
  return table;
}

/// Re-derives the labeled flags of every fold's training rows for a new
/// fraction, using the manifest row order (the original shuffle order).
inline void apply_labeled_fraction(SplitTable& table, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw config_error("labeled fraction must be in (0, 1]");
  for (int f = 0; f < table.folds; ++f) {
    std::int64_t train_count = 0;
    for (const auto& r : table.rows)
      if (r.fold == f && !r.val) ++train_count;
    const std::int64_t labeled_count = std::int64_t(std::ceil(fraction * double(train_count)));
    if (labeled_count == 0) throw config_error("labeled fraction yields zero labeled samples");
    std::int64_t seen = 0;
    for (auto& r : table.rows) {
      if (r.fold != f || r.val) continue;
      r.labeled = seen < labeled_count;
      ++seen;
    }
  }
}

inline void write_splits(const std::string& path, const SplitTable& table) {
  std::ofstream os(path);
  if (!os) throw io_error("cannot open for writing: " + path);
  os << "id,fold,role,labeled\n";
  for (const auto& r : table.rows)
    os << r.id << ',' << r.fold << ',' << (r.val ? "val" : "train") << ','
       << (r.labeled ? 1 : 0) << '\n';
  if (!os) throw io_error("write failed: " + path);
}

inline SplitTable read_splits(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw io_error("cannot open: " + path);
  std::string line;
  if (!std::getline(is, line) || line != "id,fold,role,labeled")
    throw io_error("bad splits header in " + path);
  SplitTable table;
  table.folds = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, fold, role, labeled;
    if (!std::getline(ss, id, ',') || !std::getline(ss, fold, ',') ||
        !std::getline(ss, role, ',') || !std::getline(ss, labeled))
      throw io_error("bad splits row: " + line);
    SplitRow r;
    r.id = id;
    r.fold = std::stoi(fold);
    if (role != "val" && role != "train") throw io_error("bad role in splits row: " + line);
    r.val = role == "val";
    r.labeled = labeled == "1";
    table.folds = std::max(table.folds, r.fold + 1);
    table.rows.push_back(std::move(r));
  }
  if (table.rows.empty()) throw io_error("empty splits file: " + path);
  return table;
}

}  // namespace cseg
