#include "scalenet/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "scalenet/error.hpp"

namespace scalenet {
namespace {

ImageTensor transpose(const ImageTensor& img) {
  ImageTensor out(img.width(), img.height(), img.channels(), img.value_range());
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c)
      for (int ch = 0; ch < img.channels(); ++ch) out.at(c, r, ch) = img.at(r, c, ch);
  return out;
}

// Upside-down: row r becomes row H-1-r.
ImageTensor vflip(const ImageTensor& img) {
  ImageTensor out(img.height(), img.width(), img.channels(), img.value_range());
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c)
      for (int ch = 0; ch < img.channels(); ++ch)
        out.at(img.height() - 1 - r, c, ch) = img.at(r, c, ch);
  return out;
}

// Mirror: column c becomes column W-1-c.
ImageTensor hflip(const ImageTensor& img) {
  ImageTensor out(img.height(), img.width(), img.channels(), img.value_range());
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c)
      for (int ch = 0; ch < img.channels(); ++ch)
        out.at(r, img.width() - 1 - c, ch) = img.at(r, c, ch);
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = w;
    sum += w;
  }
  for (double& w : k) w /= sum;
  return k;
}

// Separable filter with replicated borders: rows first, then columns.
std::vector<double> smooth(const std::vector<double>& src, int h, int w,
                           const std::vector<double>& kernel) {
  const int radius = static_cast<int>(kernel.size() / 2);
  std::vector<double> tmp(src.size()), out(src.size());
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int cc = std::clamp(c + i, 0, w - 1);
        acc += kernel[static_cast<std::size_t>(i + radius)] * src[static_cast<std::size_t>(r * w + cc)];
      }
      tmp[static_cast<std::size_t>(r * w + c)] = acc;
    }
  }
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int rr = std::clamp(r + i, 0, h - 1);
        acc += kernel[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(rr * w + c)];
      }
      out[static_cast<std::size_t>(r * w + c)] = acc;
    }
  }
  return out;
}

}  // namespace

ImageTensor rotate_quarter(const ImageTensor& img, RotationLabel y) {
  if (y < 0 || y >= kNumRotations) {
    throw ArgumentError("rotation label y must be in {0,1,2,3}, got " + std::to_string(y));
  }
  img.validate();
  switch (y) {
    case 1:
      return vflip(transpose(img));
    case 2:
      return hflip(vflip(img));
    case 3:
      return transpose(vflip(img));
    default:
      return img;
  }
}

ImageTensor resize(const ImageTensor& img, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw ArgumentError("resize alpha must lie in (0, 1], got " + std::to_string(alpha));
  }
  img.validate();
  if (alpha == 1.0) return img;

  const int out_h = static_cast<int>(std::floor(alpha * img.height()));
  const int out_w = static_cast<int>(std::floor(alpha * img.width()));
  if (out_h < 2 || out_w < 2) {
    throw DegenerateSizeError("resize by " + std::to_string(alpha) + " of " +
                              std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                              " gives " + std::to_string(out_h) + "x" + std::to_string(out_w));
  }

  ImageTensor out(out_h, out_w, img.channels(), img.value_range());
  for (int i = 0; i < out_h; ++i) {
    const double sy = std::min(i / alpha, static_cast<double>(img.height() - 1));
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, img.height() - 1);
    const double fy = sy - y0;
    for (int j = 0; j < out_w; ++j) {
      const double sx = std::min(j / alpha, static_cast<double>(img.width() - 1));
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, img.width() - 1);
      const double fx = sx - x0;
      for (int ch = 0; ch < img.channels(); ++ch) {
        const double top = (1.0 - fx) * img.at(y0, x0, ch) + fx * img.at(y0, x1, ch);
        const double bottom = (1.0 - fx) * img.at(y1, x0, ch) + fx * img.at(y1, x1, ch);
        out.at(i, j, ch) = (1.0 - fy) * top + fy * bottom;
      }
    }
  }
  return out;
}

ImageSet resize_all(const ImageSet& images, double alpha) {
  ImageSet out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(resize(img, alpha));
  return out;
}

Standardized standardize(const ImageSet& dataset) {
  if (dataset.empty()) throw ArgumentError("standardize needs a non-empty dataset");
  const int channels = dataset.front().channels();
  std::vector<double> sum(static_cast<std::size_t>(channels), 0.0);
  std::size_t count = 0;
  for (const auto& img : dataset) {
    if (img.channels() != channels) throw ShapeError("standardize: mixed channel counts");
    if (img.value_range() != ValueRange::raw_0_255)
      throw ArgumentError("standardize expects raw_0_255 images");
    const auto d = img.data();
    for (std::size_t i = 0; i < d.size(); ++i) sum[i % static_cast<std::size_t>(channels)] += d[i];
    count += img.pixel_count();
  }
  ChannelStats stats;
  stats.mean.resize(sum.size());
  for (std::size_t c = 0; c < sum.size(); ++c) stats.mean[c] = sum[c] / static_cast<double>(count);

  std::vector<double> sq(sum.size(), 0.0);
  for (const auto& img : dataset) {
    const auto d = img.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto c = i % static_cast<std::size_t>(channels);
      const double diff = d[i] - stats.mean[c];
      sq[c] += diff * diff;
    }
  }
  stats.stddev.resize(sum.size());
  for (std::size_t c = 0; c < sum.size(); ++c) {
    stats.stddev[c] = std::sqrt(sq[c] / static_cast<double>(count));
    if (!(stats.stddev[c] > 1e-12)) {
      throw StatsError("channel " + std::to_string(c) + " has zero variance");
    }
  }
  return {apply_standardization(dataset, stats), stats};
}

ImageSet apply_standardization(const ImageSet& dataset, const ChannelStats& stats) {
  ImageSet out;
  out.reserve(dataset.size());
  for (const auto& img : dataset) {
    if (static_cast<std::size_t>(img.channels()) != stats.mean.size())
      throw ShapeError("standardization stats do not match the image channel count");
    ImageTensor o = img;
    auto d = o.data();
    const auto channels = static_cast<std::size_t>(img.channels());
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto c = i % channels;
      d[i] = (d[i] - stats.mean[c]) / stats.stddev[c];
    }
    o.set_value_range(ValueRange::standardized);
    out.push_back(std::move(o));
  }
  return out;
}

ImageTensor to_pseudo_grayscale(const ImageTensor& img) {
  if (img.channels() != 3) {
    throw ArgumentError("pseudo-grayscale needs a 3-channel image, got " +
                        std::to_string(img.channels()));
  }
  ImageTensor out(img.height(), img.width(), 3, img.value_range());
  for (int r = 0; r < img.height(); ++r) {
    for (int c = 0; c < img.width(); ++c) {
      const double g = 0.299 * img.at(r, c, 0) + 0.587 * img.at(r, c, 1) + 0.114 * img.at(r, c, 2);
      out.at(r, c, 0) = g;
      out.at(r, c, 1) = g;
      out.at(r, c, 2) = g;
    }
  }
  return out;
}

ImageTensor luminance(const ImageTensor& img) {
  if (img.channels() == 1) return img;
  if (img.channels() != 3) throw ArgumentError("luminance needs 1 or 3 channels");
  ImageTensor out(img.height(), img.width(), 1, img.value_range());
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c)
      out.at(r, c, 0) = 0.299 * img.at(r, c, 0) + 0.587 * img.at(r, c, 1) + 0.114 * img.at(r, c, 2);
  return out;
}

void HarrisParams::validate() const {
  if (!(window_sigma > 0.0)) throw ArgumentError("Harris window_sigma must be positive");
  if (!(k >= 0.01 && k <= 0.1)) throw ArgumentError("Harris k must lie in [0.01, 0.1]");
  if (!(rel_threshold > 0.0 && rel_threshold < 1.0))
    throw ArgumentError("Harris rel_threshold must lie in (0, 1)");
}

CornerMask::CornerMask(int height, int width, HarrisParams params)
    : height_(height),
      width_(width),
      params_(params),
      mask_(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), 0) {}

std::size_t CornerMask::count() const {
  return static_cast<std::size_t>(std::count(mask_.begin(), mask_.end(), std::uint8_t{1}));
}

std::vector<double> harris_response(const ImageTensor& img, const HarrisParams& params) {
  params.validate();
  img.validate();
  const ImageTensor gray = luminance(img);
  const int h = gray.height();
  const int w = gray.width();
  const auto n = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  std::vector<double> ixx(n), iyy(n), ixy(n);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const double gx = 0.5 * (gray.at(r, std::min(c + 1, w - 1), 0) - gray.at(r, std::max(c - 1, 0), 0));
      const double gy = 0.5 * (gray.at(std::min(r + 1, h - 1), c, 0) - gray.at(std::max(r - 1, 0), c, 0));
      const auto i = static_cast<std::size_t>(r * w + c);
      ixx[i] = gx * gx;
      iyy[i] = gy * gy;
      ixy[i] = gx * gy;
    }
  }
  const auto kernel = gaussian_kernel(params.window_sigma);
  const auto sxx = smooth(ixx, h, w, kernel);
  const auto syy = smooth(iyy, h, w, kernel);
  const auto sxy = smooth(ixy, h, w, kernel);
  std::vector<double> response(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double det = sxx[i] * syy[i] - sxy[i] * sxy[i];
    const double trace = sxx[i] + syy[i];
    response[i] = det - params.k * trace * trace;
  }
  return response;
}

CornerMask harris_corners(const ImageTensor& img, const HarrisParams& params) {
  const auto response = harris_response(img, params);
  CornerMask mask(img.height(), img.width(), params);
  const double peak = *std::max_element(response.begin(), response.end());
  if (!(peak > 0.0)) return mask;
  const double threshold = params.rel_threshold * peak;
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c)
      if (response[static_cast<std::size_t>(r * img.width() + c)] > threshold) mask.set(r, c, true);
  return mask;
}

ImageTensor remove_corners(const ImageTensor& img, const CornerMask& mask) {
  if (mask.height() != img.height() || mask.width() != img.width()) {
    throw ArgumentError("corner mask " + std::to_string(mask.height()) + "x" +
                        std::to_string(mask.width()) + " does not match image " +
                        std::to_string(img.height()) + "x" + std::to_string(img.width()));
  }
  ImageTensor out = img;
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c)
      if (mask.at(r, c))
        for (int ch = 0; ch < img.channels(); ++ch) out.at(r, c, ch) = 255.0;
  return out;
}

ImageTensor harris_whiten(const ImageTensor& img, const HarrisParams& params) {
  return remove_corners(img, harris_corners(img, params));
}

HybridResult make_hybrid(const ImageSet& dataset, double mix_prob, std::uint64_t seed,
                         const HarrisParams& params) {
  if (dataset.empty()) throw ArgumentError("make_hybrid needs a non-empty dataset");
  if (!(mix_prob >= 0.0 && mix_prob <= 1.0))
    throw ArgumentError("mix_prob must lie in [0, 1], got " + std::to_string(mix_prob));
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(mix_prob);
  HybridResult result;
  result.images.reserve(dataset.size());
  result.modified.reserve(dataset.size());
  for (const auto& img : dataset) {
    const bool flip = coin(rng);
    result.modified.push_back(flip);
    result.images.push_back(flip ? harris_whiten(img, params) : img);
  }
  return result;
}

}  // namespace scalenet
