#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace scalenet {

enum class Arch { resnet50_style, alexnet_style, small_convnet };

std::string to_string(Arch arch);
Arch arch_from_string(const std::string& name);

// Dense float32 array with value semantics. Checkpoints hold these rather
// than tensors so that a checkpoint is an immutable, shareable value.
struct WeightArray {
  std::vector<std::int64_t> shape;
  std::vector<float> values;

  std::int64_t numel() const;
  friend bool operator==(const WeightArray&, const WeightArray&) = default;
};

using WeightMap = std::map<std::string, WeightArray>;

enum class HeadKind { linear, projection };

struct CheckpointMeta {
  Arch arch = Arch::small_convnet;
  int width = 0;  // base channel width the trunk was built with
  int head_out = 4;
  HeadKind head_kind = HeadKind::linear;
  double alpha = 1.0;
  int epochs_trained = 0;
  std::uint64_t seed = 0;
  std::string schedule_digest;

  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct ModelCheckpoint {
  WeightMap conv_weights;
  WeightMap head_weights;
  CheckpointMeta meta;

  // Throws ArgumentError when meta.alpha is outside (0, 1].
  void validate() const;

  friend bool operator==(const ModelCheckpoint&, const ModelCheckpoint&) = default;
};

// Archive layout (POSIX ustar): member `manifest` holds UTF-8 JSON with the
// meta fields and an ordered layer table {name, group, shape, dtype, offset};
// member `weights.bin` holds the little-endian float32 payloads back to back
// in manifest order. Writes go to a temporary sibling and are renamed into
// place.
void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

// Bytes of both archive members, exposed for tooling and tests.
struct CheckpointArchive {
  std::string manifest;
  std::string weights;
};
CheckpointArchive encode_checkpoint(const ModelCheckpoint& ckpt);
ModelCheckpoint decode_checkpoint(const CheckpointArchive& archive);

}  // namespace scalenet
