#include "scalenet/tensor_bridge.hpp"

#include "scalenet/error.hpp"
#include "scalenet/transforms.hpp"

namespace scalenet {

torch::Tensor images_to_tensor(const ImageSet& images, torch::Dtype dtype) {
  if (images.empty()) throw ArgumentError("cannot stack an empty image set");
  const auto& first = images.front();
  const int h = first.height(), w = first.width(), c = first.channels();
  auto out = torch::empty({static_cast<std::int64_t>(images.size()), c, h, w}, torch::kFloat64);
  auto acc = out.accessor<double, 4>();
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& img = images[n];
    if (!img.same_shape(first)) throw ShapeError("cannot stack images of different shapes");
    const auto i = static_cast<std::int64_t>(n);
    for (int r = 0; r < h; ++r)
      for (int col = 0; col < w; ++col)
        for (int ch = 0; ch < c; ++ch) acc[i][ch][r][col] = img.at(r, col, ch);
  }
  return dtype == torch::kFloat64 ? out : out.to(dtype);
}

torch::Tensor image_to_tensor(const ImageTensor& img, torch::Dtype dtype) {
  return images_to_tensor(ImageSet{img}, dtype)[0];
}

ImageTensor tensor_to_image(const torch::Tensor& chw, ValueRange range) {
  if (chw.dim() != 3) throw ShapeError("tensor_to_image expects (C, H, W)");
  auto t = chw.detach().to(torch::kFloat64).contiguous();
  const int c = static_cast<int>(t.size(0)), h = static_cast<int>(t.size(1)), w = static_cast<int>(t.size(2));
  ImageTensor img(h, w, c, range);
  auto acc = t.accessor<double, 3>();
  for (int r = 0; r < h; ++r)
    for (int col = 0; col < w; ++col)
      for (int ch = 0; ch < c; ++ch) img.at(r, col, ch) = acc[ch][r][col];
  return img;
}

torch::Tensor rotate_quarter_batch(const torch::Tensor& nchw, int y) {
  switch (y) {
    case 0:
      return nchw;
    case 1:
      return nchw.transpose(2, 3).flip({2});
    case 2:
      return nchw.flip({2}).flip({3});
    case 3:
      return nchw.flip({2}).transpose(2, 3);
    default:
      throw ArgumentError("rotation label y must be in {0,1,2,3}, got " + std::to_string(y));
  }
}

torch::Tensor labels_to_tensor(const std::vector<int>& labels) {
  auto t = torch::empty({static_cast<std::int64_t>(labels.size())}, torch::kInt64);
  auto acc = t.accessor<std::int64_t, 1>();
  for (std::size_t i = 0; i < labels.size(); ++i) acc[static_cast<std::int64_t>(i)] = labels[i];
  return t;
}

}  // namespace scalenet
