#include "scalenet/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "scalenet/error.hpp"
#include "scalenet/util.hpp"

namespace scalenet {
namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::size_t kBlock = 512;
constexpr const char* kFormat = "scalenet-checkpoint";
constexpr int kVersion = 1;

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap32(v);
  return v;
}

void write_octal(char* field, std::size_t width, std::uint64_t value) {
  // width-1 octal digits followed by NUL.
  std::string digits(width - 1, '0');
  for (std::size_t i = width - 1; i-- > 0 && value;) {
    digits[i] = static_cast<char>('0' + (value & 7u));
    value >>= 3;
  }
  std::memcpy(field, digits.data(), width - 1);
  field[width - 1] = '\0';
}

std::uint64_t read_octal(const char* field, std::size_t width) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < width && field[i] != '\0' && field[i] != ' '; ++i) {
    if (field[i] < '0' || field[i] > '7') throw IntegrityError("checkpoint archive: bad octal field");
    v = (v << 3) | static_cast<std::uint64_t>(field[i] - '0');
  }
  return v;
}

std::array<char, kBlock> tar_header(const std::string& name, std::uint64_t size) {
  std::array<char, kBlock> h{};
  std::memcpy(h.data(), name.data(), std::min<std::size_t>(name.size(), 99));
  write_octal(h.data() + 100, 8, 0644);
  write_octal(h.data() + 108, 8, 0);
  write_octal(h.data() + 116, 8, 0);
  write_octal(h.data() + 124, 12, size);
  write_octal(h.data() + 136, 12, 0);
  h[156] = '0';
  std::memcpy(h.data() + 257, "ustar", 6);
  std::memcpy(h.data() + 263, "00", 2);
  std::memset(h.data() + 148, ' ', 8);
  unsigned sum = 0;
  for (char c : h) sum += static_cast<unsigned char>(c);
  write_octal(h.data() + 148, 7, sum);
  h[155] = ' ';
  return h;
}

void append_member(std::string& out, const std::string& name, const std::string& payload) {
  const auto header = tar_header(name, payload.size());
  out.append(header.data(), header.size());
  out.append(payload);
  out.append((kBlock - payload.size() % kBlock) % kBlock, '\0');
}

std::string tar_pack(const CheckpointArchive& a) {
  std::string out;
  append_member(out, "manifest", a.manifest);
  append_member(out, "weights.bin", a.weights);
  out.append(2 * kBlock, '\0');
  return out;
}

CheckpointArchive tar_unpack(const std::string& bytes) {
  CheckpointArchive a;
  bool have_manifest = false, have_weights = false;
  std::size_t pos = 0;
  while (pos + kBlock <= bytes.size()) {
    const char* h = bytes.data() + pos;
    if (std::all_of(h, h + kBlock, [](char c) { return c == '\0'; })) break;
    unsigned sum = 0;
    for (std::size_t i = 0; i < kBlock; ++i)
      sum += (i >= 148 && i < 156) ? static_cast<unsigned>(' ') : static_cast<unsigned char>(h[i]);
    if (sum != read_octal(h + 148, 8)) throw IntegrityError("checkpoint archive: header checksum mismatch");
    const std::string name(h, strnlen(h, 100));
    const auto size = read_octal(h + 124, 12);
    pos += kBlock;
    if (pos + size > bytes.size()) throw IntegrityError("checkpoint archive: member '" + name + "' is truncated");
    std::string payload = bytes.substr(pos, size);
    pos += size + (kBlock - size % kBlock) % kBlock;
    if (name == "manifest") {
      a.manifest = std::move(payload);
      have_manifest = true;
    } else if (name == "weights.bin") {
      a.weights = std::move(payload);
      have_weights = true;
    }
  }
  if (!have_manifest || !have_weights)
    throw IntegrityError("checkpoint archive must contain 'manifest' and 'weights.bin'");
  return a;
}

std::string head_kind_name(HeadKind k) { return k == HeadKind::linear ? "linear" : "projection"; }

HeadKind head_kind_from(const std::string& s) {
  if (s == "linear") return HeadKind::linear;
  if (s == "projection") return HeadKind::projection;
  throw IntegrityError("unknown head kind '" + s + "'");
}

}  // namespace

std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::resnet50_style:
      return "resnet50_style";
    case Arch::alexnet_style:
      return "alexnet_style";
    case Arch::small_convnet:
      return "small_convnet";
  }
  return "unknown";
}

Arch arch_from_string(const std::string& name) {
  if (name == "resnet50_style") return Arch::resnet50_style;
  if (name == "alexnet_style") return Arch::alexnet_style;
  if (name == "small_convnet") return Arch::small_convnet;
  throw ArgumentError("unknown arch '" + name + "'");
}

std::int64_t WeightArray::numel() const {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void ModelCheckpoint::validate() const {
  if (!(meta.alpha > 0.0 && meta.alpha <= 1.0))
    throw ArgumentError("checkpoint alpha must lie in (0, 1], got " + std::to_string(meta.alpha));
}

CheckpointArchive encode_checkpoint(const ModelCheckpoint& ckpt) {
  ckpt.validate();
  ordered_json manifest;
  manifest["format"] = kFormat;
  manifest["version"] = kVersion;
  manifest["meta"] = {{"arch", to_string(ckpt.meta.arch)},
                      {"width", ckpt.meta.width},
                      {"head_out", ckpt.meta.head_out},
                      {"head_kind", head_kind_name(ckpt.meta.head_kind)},
                      {"alpha", ckpt.meta.alpha},
                      {"epochs_trained", ckpt.meta.epochs_trained},
                      {"seed", ckpt.meta.seed},
                      {"schedule_digest", ckpt.meta.schedule_digest}};
  auto layers = ordered_json::array();
  std::string weights;
  auto emit = [&](const std::string& group, const WeightMap& map) {
    for (const auto& [name, w] : map) {
      if (static_cast<std::int64_t>(w.values.size()) != w.numel())
        throw ShapeError("weight array '" + name + "' disagrees with its shape");
      layers.push_back({{"name", name},
                        {"group", group},
                        {"shape", w.shape},
                        {"dtype", "float32_le"},
                        {"offset", weights.size()}});
      for (float f : w.values) {
        const std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(f));
        weights.append(reinterpret_cast<const char*>(&bits), sizeof(bits));
      }
    }
  };
  emit("conv", ckpt.conv_weights);
  emit("head", ckpt.head_weights);
  manifest["layers"] = std::move(layers);
  return {manifest.dump(2), std::move(weights)};
}

ModelCheckpoint decode_checkpoint(const CheckpointArchive& archive) {
  ordered_json manifest;
  try {
    manifest = ordered_json::parse(archive.manifest);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  try {
    if (manifest.at("format").get<std::string>() != kFormat)
      throw IntegrityError("not a scalenet checkpoint manifest");
    ModelCheckpoint ckpt;
    const auto& m = manifest.at("meta");
    ckpt.meta.arch = arch_from_string(m.at("arch").get<std::string>());
    ckpt.meta.width = m.at("width").get<int>();
    ckpt.meta.head_out = m.at("head_out").get<int>();
    ckpt.meta.head_kind = head_kind_from(m.at("head_kind").get<std::string>());
    ckpt.meta.alpha = m.at("alpha").get<double>();
    ckpt.meta.epochs_trained = m.at("epochs_trained").get<int>();
    ckpt.meta.seed = m.at("seed").get<std::uint64_t>();
    ckpt.meta.schedule_digest = m.at("schedule_digest").get<std::string>();
    for (const auto& layer : manifest.at("layers")) {
      WeightArray w;
      w.shape = layer.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = layer.at("offset").get<std::size_t>();
      const auto n = static_cast<std::size_t>(w.numel());
      const auto name = layer.at("name").get<std::string>();
      if (layer.at("dtype").get<std::string>() != "float32_le")
        throw IntegrityError("layer '" + name + "' has unsupported dtype");
      if (offset + n * 4 > archive.weights.size())
        throw IntegrityError("layer '" + name + "' runs past the end of weights.bin");
      w.values.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, archive.weights.data() + offset + 4 * i, 4);
        w.values[i] = std::bit_cast<float>(to_le(bits));
      }
      const auto group = layer.at("group").get<std::string>();
      auto& target = group == "conv" ? ckpt.conv_weights : ckpt.head_weights;
      if (group != "conv" && group != "head") throw IntegrityError("layer '" + name + "' has unknown group");
      if (!target.emplace(name, std::move(w)).second)
        throw IntegrityError("layer '" + name + "' appears more than once");
    }
    ckpt.validate();
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("checkpoint manifest is malformed: ") + e.what());
  }
}

void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, tar_pack(encode_checkpoint(ckpt)));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(tar_unpack(read_file(path)));
}

}  // namespace scalenet
