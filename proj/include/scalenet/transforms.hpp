#pragma once

#include <cstdint>
#include <vector>

#include "scalenet/image.hpp"

namespace scalenet {

// Quarter-turn label: the image is rotated counterclockwise by 90 * y degrees.
using RotationLabel = int;
inline constexpr int kNumRotations = 4;

/// Rotates counterclockwise by 90*y degrees using only transpose and flips.
/// Odd labels swap height and width.
ImageTensor rotate_quarter(const ImageTensor& img, RotationLabel y);

/// Bilinear downscale to floor(alpha*H) x floor(alpha*W).
///
/// Output pixel (i, j) samples the source at (i / alpha, j / alpha), i.e. the
/// top-left corners of the two grids coincide. With alpha = 0.5 every output
/// pixel lands exactly on an even source coordinate and is copied unchanged.
ImageTensor resize(const ImageTensor& img, double alpha);

ImageSet resize_all(const ImageSet& images, double alpha);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct Standardized {
  ImageSet images;
  ChannelStats stats;
};

/// Per-channel zero-mean / unit-std over the whole collection (population
/// std). Returns the statistics so held-out splits can reuse them.
Standardized standardize(const ImageSet& dataset);

/// Applies previously computed statistics.
ImageSet apply_standardization(const ImageSet& dataset, const ChannelStats& stats);

/// BT.601 luminance replicated into all three channels.
ImageTensor to_pseudo_grayscale(const ImageTensor& img);

/// Single-channel luminance image (identity copy for C == 1).
ImageTensor luminance(const ImageTensor& img);

struct HarrisParams {
  double window_sigma = 1.0;
  double k = 0.04;
  double rel_threshold = 0.01;

  void validate() const;
};

class CornerMask {
 public:
  CornerMask(int height, int width, HarrisParams params);

  int height() const { return height_; }
  int width() const { return width_; }
  const HarrisParams& params() const { return params_; }

  bool at(int r, int c) const { return mask_[index(r, c)] != 0; }
  void set(int r, int c, bool v) { mask_[index(r, c)] = v ? 1 : 0; }
  std::size_t count() const;

  friend bool operator==(const CornerMask& a, const CornerMask& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.mask_ == b.mask_;
  }

 private:
  std::size_t index(int r, int c) const {
    return static_cast<std::size_t>(r) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(c);
  }

  int height_;
  int width_;
  HarrisParams params_;
  std::vector<std::uint8_t> mask_;
};

/// Harris response R = det(M) - k trace(M)^2 per pixel, where M is the
/// Gaussian-windowed structure tensor of central-difference gradients with
/// replicated borders. Three-channel inputs are reduced to luminance first.
std::vector<double> harris_response(const ImageTensor& img, const HarrisParams& params);

/// Pixels whose response exceeds rel_threshold * max(R). No non-maximum
/// suppression. A constant image yields an empty mask.
CornerMask harris_corners(const ImageTensor& img, const HarrisParams& params = {});

/// Sets masked pixels to 255 in every channel; others are left untouched.
ImageTensor remove_corners(const ImageTensor& img, const CornerMask& mask);

/// Corner-removed copy using freshly detected corners.
ImageTensor harris_whiten(const ImageTensor& img, const HarrisParams& params = {});

struct HybridResult {
  ImageSet images;
  std::vector<bool> modified;
};

/// Replaces each image by its corner-whitened version with probability
/// mix_prob, independently and deterministically under seed.
HybridResult make_hybrid(const ImageSet& dataset, double mix_prob, std::uint64_t seed,
                         const HarrisParams& params = {});

}  // namespace scalenet
