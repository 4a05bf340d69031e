#include "scalenet/image.hpp"

#include <cmath>
#include <string>

#include "scalenet/error.hpp"

namespace scalenet {

ImageTensor::ImageTensor(int height, int width, int channels, ValueRange range)
    : height_(height),
      width_(width),
      channels_(channels),
      data_(static_cast<std::size_t>(height > 0 ? height : 0) *
                static_cast<std::size_t>(width > 0 ? width : 0) *
                static_cast<std::size_t>(channels > 0 ? channels : 0),
            0.0),
      range_(range) {}

ImageTensor::ImageTensor(int height, int width, int channels, std::vector<double> data,
                         ValueRange range)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)), range_(range) {
  const auto expected = static_cast<std::size_t>(height) * static_cast<std::size_t>(width) *
                        static_cast<std::size_t>(channels);
  if (height < 0 || width < 0 || channels < 0 || data_.size() != expected) {
    throw ShapeError("image buffer holds " + std::to_string(data_.size()) + " values, shape " +
                     std::to_string(height) + "x" + std::to_string(width) + "x" +
                     std::to_string(channels) + " needs " + std::to_string(expected));
  }
}

void ImageTensor::validate() const {
  if (height_ < 2 || width_ < 2) {
    throw ArgumentError("image must be at least 2x2, got " + std::to_string(height_) + "x" +
                        std::to_string(width_));
  }
  if (channels_ != 1 && channels_ != 3) {
    throw ArgumentError("image must have 1 or 3 channels, got " + std::to_string(channels_));
  }
  for (double v : data_) {
    if (!std::isfinite(v)) throw ArgumentError("image contains a non-finite value");
  }
}

}  // namespace scalenet
