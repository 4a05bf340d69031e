#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "scalenet/image.hpp"

namespace scalenet {

enum class DatasetKind { cifar10_archive, image_folder };

std::string to_string(DatasetKind kind);
DatasetKind dataset_kind_from_string(const std::string& s);

struct DatasetSpec {
  DatasetKind kind = DatasetKind::cifar10_archive;
  std::filesystem::path path;
  // image_folder only: decoded images are resized to side x side. Without it
  // every image must already share one size.
  std::optional<int> image_side;
};

struct Dataset {
  LabeledImages train;
  LabeledImages test;  // empty when the source has no held-out split
  // SHA-256 over image bytes, labels and class names of both splits.
  std::string digest;
};

/// cifar10_archive: directory holding data_batch_1..5 and test_batch as
/// pickled batches (optionally batches.meta and SHA256SUMS, which is
/// verified when present).
/// image_folder: `path/<class>/*` or `path/train/<class>/*` plus
/// `path/test/<class>/*`; classes are numbered by sorted directory name.
/// Any unreadable, truncated or malformed file aborts the whole ingestion.
Dataset ingest_dataset(const DatasetSpec& spec);

std::string dataset_digest(const LabeledImages& train, const LabeledImages& test);

// Unpickled CIFAR batch: rows of 3072 bytes (1024 R, 1024 G, 1024 B).
struct CifarBatch {
  std::vector<std::uint8_t> data;
  std::vector<int> labels;
};

CifarBatch parse_cifar_batch(const std::string& bytes, const std::string& file_name);
std::vector<std::string> parse_cifar_meta(const std::string& bytes, const std::string& file_name);

// Protocol-2 pickle in the layout of the published CIFAR-10 python batches.
std::string encode_cifar_batch(const CifarBatch& batch, const std::string& batch_label);
std::string encode_cifar_meta(const std::vector<std::string>& label_names);

ImageTensor cifar_row_to_image(const std::uint8_t* row);

struct SynthOptions {
  int train_per_class = 5000;
  int test_per_class = 1000;
  std::uint64_t seed = 0;
};

inline const std::vector<std::string>& cifar10_class_names() {
  static const std::vector<std::string> names{"airplane", "automobile", "bird",  "cat",  "deer",
                                              "dog",      "frog",       "horse", "ship", "truck"};
  return names;
}

/// Procedurally rendered 32x32 scenes, one object class per CIFAR-10 label:
/// outdoor views with sky and ground, textured close-ups and studio shots.
/// Deterministic in seed; label order is interleaved.
LabeledImages synthesize_cifar_like(int per_class, std::uint64_t seed);

/// Writes a synthetic dataset as a CIFAR-10 python-batch directory
/// (5 train batches, test_batch, batches.meta, SHA256SUMS).
void write_synthetic_cifar(const std::filesystem::path& dir, const SynthOptions& options);

}  // namespace scalenet
