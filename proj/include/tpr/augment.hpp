#pragma once

#include <algorithm>
#include <utility>
#include <vector>

#include "tpr/rng.hpp"
#include "tpr/tensor.hpp"

namespace tpr {

struct AugmentConfig {
  /// Random-shift padding in pixels.
  int pad = 1;
  /// Intensity jitter scale.
  double jitter_scale = 0.05;
};

namespace detail {

inline void check_images(const Shape& s, const char* op) {
  if (s.size() < 3) throw ShapeError(std::string(op) + ": expected [..., C, H, W], got " + shape_str(s));
}

}  // namespace detail

/// Shifts every image (the trailing [C, H, W] block) by its own offset
/// (dy, dx) in [0, 2 * pad]^2 after replicate-padding by `pad`.
template <typename S>
Tensor<S> shift_images(const Tensor<S>& x, int pad, const std::vector<std::pair<int, int>>& offsets) {
  detail::check_images(x.shape(), "random_shift");
  const Index c = x.dim(-3), h = x.dim(-2), w = x.dim(-1);
  const Index images = x.numel() / (c * h * w);
  if (pad < 0 || pad >= std::min(h, w)) throw ShapeError("random_shift: pad must lie in [0, min(H, W))");
  if (Index(offsets.size()) != images) throw ShapeError("random_shift: one offset per image required");
  Tensor<S> out(x.shape());
  for (Index i = 0; i < images; ++i) {
    const auto [dy, dx] = offsets[std::size_t(i)];
    for (Index ch = 0; ch < c; ++ch) {
      const S* src = x.data() + (i * c + ch) * h * w;
      S* dst = out.data() + (i * c + ch) * h * w;
      for (Index y = 0; y < h; ++y) {
        const Index sy = std::clamp<Index>(y + dy - pad, 0, h - 1);
        for (Index xx = 0; xx < w; ++xx) dst[y * w + xx] = src[sy * w + std::clamp<Index>(xx + dx - pad, 0, w - 1)];
      }
    }
  }
  return out;
}

template <typename S>
Tensor<S> random_shift(const Tensor<S>& x, int pad, Rng& rng) {
  detail::check_images(x.shape(), "random_shift");
  const Index images = x.numel() / (x.dim(-3) * x.dim(-2) * x.dim(-1));
  if (pad < 0 || pad >= std::min(x.dim(-2), x.dim(-1))) throw ShapeError("random_shift: pad must lie in [0, min(H, W))");
  std::vector<std::pair<int, int>> offsets(static_cast<std::size_t>(images));
  for (auto& o : offsets) {
    o.first = int(rng.uniform_index(std::uint64_t(2 * pad + 1)));
    o.second = int(rng.uniform_index(std::uint64_t(2 * pad + 1)));
  }
  return shift_images(x, pad, offsets);
}

/// Multiplies each image by (1 + scale * r), r ~ N(0, 1) clipped to [-2, 2].
template <typename S>
Tensor<S> scale_images(const Tensor<S>& x, const std::vector<double>& factors) {
  detail::check_images(x.shape(), "intensity_jitter");
  const Index block = x.dim(-3) * x.dim(-2) * x.dim(-1);
  if (Index(factors.size()) * block != x.numel()) throw ShapeError("intensity_jitter: one factor per image required");
  Tensor<S> out(x.shape());
  for (Index i = 0; i < x.numel(); ++i) out[i] = S(x[i] * factors[std::size_t(i / block)]);
  return out;
}

template <typename S>
Tensor<S> intensity_jitter(const Tensor<S>& x, double scale, Rng& rng) {
  if (scale < 0.0) throw ConfigError("intensity_jitter: scale must be >= 0");
  detail::check_images(x.shape(), "intensity_jitter");
  const Index images = x.numel() / (x.dim(-3) * x.dim(-2) * x.dim(-1));
  std::vector<double> factors(static_cast<std::size_t>(images));
  for (double& f : factors) f = 1.0 + scale * std::clamp(rng.normal(), -2.0, 2.0);
  return scale_images(x, factors);
}

template <typename S>
struct AugmentedViews {
  Tensor<S> view1;
  Tensor<S> view2;
};

template <typename S>
Tensor<S> augment(const Tensor<S>& x, const AugmentConfig& cfg, Rng& rng) {
  return intensity_jitter(random_shift(x, cfg.pad, rng), cfg.jitter_scale, rng);
}

/// Two views of the same batch from independent draw streams.
template <typename S>
AugmentedViews<S> make_views(const Tensor<S>& observations, const AugmentConfig& cfg, Rng& stream1, Rng& stream2) {
  return {augment(observations, cfg, stream1), augment(observations, cfg, stream2)};
}

}  // namespace tpr
