#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace scalenet {

enum class ValueRange { raw_0_255, standardized };

// H x W x C image stored row-major with interleaved channels.
// Values are doubles so raw-range arithmetic stays exact well below 1e-6.
class ImageTensor {
 public:
  ImageTensor() = default;
  ImageTensor(int height, int width, int channels,
              ValueRange range = ValueRange::raw_0_255);
  ImageTensor(int height, int width, int channels, std::vector<double> data,
              ValueRange range = ValueRange::raw_0_255);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  std::size_t pixel_count() const {
    return static_cast<std::size_t>(height_) * static_cast<std::size_t>(width_);
  }
  ValueRange value_range() const { return range_; }
  void set_value_range(ValueRange r) { range_ = r; }

  double& at(int r, int c, int ch) { return data_[index(r, c, ch)]; }
  double at(int r, int c, int ch) const { return data_[index(r, c, ch)]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool same_shape(const ImageTensor& other) const {
    return height_ == other.height_ && width_ == other.width_ &&
           channels_ == other.channels_;
  }

  // Throws ArgumentError unless H,W >= 2, C in {1,3} and all values finite.
  void validate() const;

  friend bool operator==(const ImageTensor& a, const ImageTensor& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  std::size_t index(int r, int c, int ch) const {
    return (static_cast<std::size_t>(r) * static_cast<std::size_t>(width_) +
            static_cast<std::size_t>(c)) *
               static_cast<std::size_t>(channels_) +
           static_cast<std::size_t>(ch);
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
  ValueRange range_ = ValueRange::raw_0_255;
};

using ImageSet = std::vector<ImageTensor>;

// Image collection with integer class labels. `labels` may be empty for
// unlabeled pretext data.
struct LabeledImages {
  ImageSet images;
  std::vector<int> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return images.size(); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
};

}  // namespace scalenet
