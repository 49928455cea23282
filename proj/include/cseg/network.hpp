#pragma once

/// Segmentation network assembly.
///
/// One SegNet: 3x3 stem at full resolution, four downsampling AAC blocks
/// (channels C0 -> 16*C0, spatial H -> H/16), three knowledge-aggregation
/// modules consuming the skip connections at H/8, H/4 and H/2, one upsampling
/// AAC block back to H, and a 1x1 per-pixel classifier with a two-way
/// softmax. The complementary pair holds a foreground net (melanoma-positive)
/// and a background net (background-positive) with disjoint parameters.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cseg/ops.hpp"
#include "cseg/tensor.hpp"

namespace cseg {

struct SegNetConfig {
  int input_size = 192;   // H = W, divisible by 16
  int in_channels = 3;
  int base_channels = 16; // C0
  int depth = 4;          // downsampling stages; the decoder schedule requires 4
  int num_classes = 2;

  void validate() const {
    if (input_size <= 0 || input_size % 16 != 0)
      throw config_error("input size must be a positive multiple of 16, got " +
                         std::to_string(input_size));
    if (base_channels < 4)
      throw config_error("base_channels must be >= 4");
    if (depth != 4) throw config_error("depth must be 4");
    if (num_classes != 2) throw config_error("num_classes must be 2");
    if (in_channels != 3) throw config_error("in_channels must be 3");
  }
};

template <class T>
class SegNet {
 public:
  SegNet() = default;

  SegNet(const SegNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    const std::int64_t c0 = cfg.base_channels;
    stem_ = ConvKernel<T>::he(c0, cfg.in_channels, 3, 3, rng);
    std::int64_t c = c0;
    for (int i = 0; i < 4; ++i) {
      down_[i] = DownBlock<T>::init(c, rng);
      c *= 2;  // 16*c0 after the last stage
    }
    for (int i = 0; i < 3; ++i) {
      kam_[i] = KamParams<T>::init(c, rng);
      c /= 2;
    }
    up_ = UpBlock<T>::init(c, rng);  // c == 2*c0 here
    head_ = ConvKernel<T>::he(cfg.num_classes, c0, 1, 1, rng);
  }

  struct Out {
    Tensor<T> prob;                    // (N, 2, H, W), softmax over channels
    std::vector<Tensor<T>> rate_maps;  // one per KAM: H/8, H/4, H/2
  };

  Out forward(Graph<T>* g, const Tensor<T>& images) const {
    Shape s = images.shape();
    require(s.c == cfg_.in_channels && s.h == cfg_.input_size && s.w == cfg_.input_size,
            "forward: expected (N," + std::to_string(cfg_.in_channels) + "," +
                std::to_string(cfg_.input_size) + "," + std::to_string(cfg_.input_size) +
                ") input, got " + s.str());
    Out out;
    Tensor<T> x = relu(g, conv2d(g, images, stem_));
    Tensor<T> skips[4];
    for (int i = 0; i < 4; ++i) {
      x = down_aac_block(g, x, down_[i]);
      skips[i] = x;
    }
    // decoder: x1 = deep features, x0 = skip from the matching encoder stage
    for (int i = 0; i < 3; ++i) {
      KamResult<T> k = kam_forward(g, skips[2 - i], x, kam_[i]);
      x = k.out;
      out.rate_maps.push_back(k.rate_map);
    }
    x = up_aac_block(g, x, up_);
    out.prob = softmax_channels(g, conv2d(g, x, head_));
    return out;
  }

  /// Parameters in a fixed order; names are stable and used for checkpoints
  /// and optimizer state.
  std::vector<std::pair<std::string, Tensor<T>>> params() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    auto kernel = [&](const std::string& base, const ConvKernel<T>& k) {
      out.emplace_back(base + ".w", k.w);
      out.emplace_back(base + ".b", k.b);
    };
    kernel("stem", stem_);
    for (int i = 0; i < 4; ++i) {
      std::string base = "down" + std::to_string(i + 1);
      kernel(base + ".conv", down_[i].conv);
      kernel(base + ".aac", down_[i].aac.kernel);
      out.emplace_back(base + ".aac.gamma", down_[i].aac.gamma);
    }
    for (int i = 0; i < 3; ++i) {
      std::string base = "kam" + std::to_string(i + 1);
      kernel(base + ".proj", kam_[i].proj);
      kernel(base + ".rate", kam_[i].rate);
      kernel(base + ".adapt", kam_[i].adapt);
      kernel(base + ".fuse", kam_[i].fuse);
    }
    kernel("up.conv", up_.conv);
    kernel("up.aac", up_.aac.kernel);
    out.emplace_back("up.aac.gamma", up_.aac.gamma);
    kernel("head", head_);
    return out;
  }

  /// Closed-form parameter count for a config; asserted against params() in
  /// the tests.
  static std::int64_t param_count(const SegNetConfig& cfg) {
    const std::int64_t c0 = cfg.base_channels;
    std::int64_t total = 3 * c0 * 9 + c0;  // stem
    std::int64_t c = c0;
    for (int i = 0; i < 4; ++i) {
      const std::int64_t co = c * 2;
      total += c * co * 9 + co;        // down conv
      total += co * co * 9 + co + 3;   // aac kernel + bias + gamma
      c = co;
    }
    for (int i = 0; i < 3; ++i) {
      const std::int64_t half = c / 2;
      total += c * half + half;        // proj 1x1
      total += half * 9 + 1;           // rate 3x3 -> 1
      total += half * half * 9 + half; // adapt 3x3
      total += c * half + half;        // fuse 1x1 (c/2 + c/2 inputs)
      c = half;
    }
    total += c * (c / 2) * 9 + c / 2;            // up conv
    total += (c / 2) * (c / 2) * 9 + c / 2 + 3;  // up aac
    total += c0 * cfg.num_classes + cfg.num_classes;  // head
    return total;
  }

  const SegNetConfig& config() const { return cfg_; }

 private:
  SegNetConfig cfg_;
  ConvKernel<T> stem_;
  DownBlock<T> down_[4];
  KamParams<T> kam_[3];
  UpBlock<T> up_;
  ConvKernel<T> head_;
};

enum class Fusion { fg_only, fused };

/// Melanoma score of the fused prediction: (p_f + (1 - p_b)) / 2.
template <class T>
T fused_score(T p_f, T p_b) {
  return (p_f + (T(1) - p_b)) / T(2);
}

/// Decision rule shared by both fusion modes: scores >= 0.5 are positive.
template <class T>
T threshold_mask(T score) {
  return score >= T(0.5) ? T(1) : T(0);
}

/// Paired foreground and background networks; parameters are disjoint and
/// independently initialized from sub-seeds of the build seed.
template <class T>
struct ComplementaryNet {
  SegNet<T> fg;
  SegNet<T> bg;

  static ComplementaryNet build(const SegNetConfig& cfg, std::uint64_t seed) {
    ComplementaryNet n;
    n.fg = SegNet<T>(cfg, Rng::derive(seed, 1));
    n.bg = SegNet<T>(cfg, Rng::derive(seed, 2));
    return n;
  }

  std::vector<std::pair<std::string, Tensor<T>>> params() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (auto& [k, v] : fg.params()) out.emplace_back("fg." + k, v);
    for (auto& [k, v] : bg.params()) out.emplace_back("bg." + k, v);
    return out;
  }
};

/// Melanoma score per pixel: fused = (p_f + (1 - p_b)) / 2, fg_only = p_f.
/// Threshold >= 0.5 maps to 1 (ties count as positive).
template <class T>
Tensor<T> predict(const ComplementaryNet<T>& net, const Tensor<T>& images, Fusion fusion) {
  auto fg_out = net.fg.forward(nullptr, images);
  Shape s = fg_out.prob.shape();
  Tensor<T> mask = Tensor<T>::zeros(Shape{s.n, 1, s.h, s.w});
  const std::int64_t plane = s.h * s.w;
  if (fusion == Fusion::fg_only) {
    for (std::int64_t b = 0; b < s.n; ++b) {
      const T* pf = fg_out.prob.data() + (b * 2 + 1) * plane;
      T* m = mask.data() + b * plane;
      for (std::int64_t i = 0; i < plane; ++i) m[i] = threshold_mask(pf[i]);
    }
    return mask;
  }
  auto bg_out = net.bg.forward(nullptr, images);
  for (std::int64_t b = 0; b < s.n; ++b) {
    const T* pf = fg_out.prob.data() + (b * 2 + 1) * plane;
    const T* pb = bg_out.prob.data() + (b * 2 + 1) * plane;
    T* m = mask.data() + b * plane;
    for (std::int64_t i = 0; i < plane; ++i) m[i] = threshold_mask(fused_score(pf[i], pb[i]));
  }
  return mask;
}

}  // namespace cseg
