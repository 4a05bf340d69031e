#pragma once

#include <torch/torch.h>

#include "scalenet/image.hpp"

namespace scalenet {

// Stacks equally shaped images into an (N, C, H, W) tensor.
torch::Tensor images_to_tensor(const ImageSet& images, torch::Dtype dtype = torch::kFloat32);
torch::Tensor image_to_tensor(const ImageTensor& img, torch::Dtype dtype = torch::kFloat32);

// Inverse of image_to_tensor for a single (C, H, W) tensor.
ImageTensor tensor_to_image(const torch::Tensor& chw, ValueRange range = ValueRange::standardized);

// Quarter-turn rotation of an NCHW batch, composed from the same
// transpose / flip sequence as rotate_quarter.
torch::Tensor rotate_quarter_batch(const torch::Tensor& nchw, int y);

torch::Tensor labels_to_tensor(const std::vector<int>& labels);

}  // namespace scalenet
