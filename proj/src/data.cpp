#include "scalenet/data.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <map>
#include <memory>
#include <random>
#include <sstream>

#include "scalenet/error.hpp"
#include "scalenet/util.hpp"

namespace scalenet {
namespace fs = std::filesystem;

namespace {

constexpr int kCifarSide = 32;
constexpr std::size_t kCifarRow = 3 * kCifarSide * kCifarSide;
constexpr int kCifarTrainBatches = 5;

// ---------------------------------------------------------------------------
// Restricted unpickler: enough of the protocol to read numpy uint8 arrays,
// lists of ints and string/bytes dictionaries. Anything else is rejected.

struct PyObj;
using PyRef = std::shared_ptr<PyObj>;

struct PyObj {
  enum class Kind { none, boolean, integer, floating, bytes, text, list, tuple, dict, global, ndarray, dtype };
  Kind kind = Kind::none;
  std::int64_t i = 0;
  double f = 0.0;
  std::string s;  // bytes/text payload, global "module.name", dtype name
  std::vector<PyRef> items;
  std::vector<std::pair<PyRef, PyRef>> entries;
  // ndarray
  std::vector<std::int64_t> shape;
  std::string dtype;
  bool built = false;
};

PyRef make(PyObj::Kind kind) {
  auto o = std::make_shared<PyObj>();
  o->kind = kind;
  return o;
}

class Unpickler {
 public:
  Unpickler(const std::string& bytes, std::string file) : buf_(bytes), file_(std::move(file)) {}

  PyRef load() {
    while (true) {
      const auto op = static_cast<unsigned char>(next(1)[0]);
      switch (op) {
        case 0x80: next(1); break;  // PROTO
        case 0x95: next(8); break;  // FRAME
        case '.': return pop();
        case '(': marks_.push_back(stack_.size()); break;
        case '}': stack_.push_back(make(PyObj::Kind::dict)); break;
        case ']': stack_.push_back(make(PyObj::Kind::list)); break;
        case ')': stack_.push_back(make(PyObj::Kind::tuple)); break;
        case 'N': stack_.push_back(make(PyObj::Kind::none)); break;
        case 0x88:
        case 0x89: {
          auto b = make(PyObj::Kind::boolean);
          b->i = op == 0x88;
          stack_.push_back(b);
          break;
        }
        case 'K': push_int(static_cast<unsigned char>(next(1)[0])); break;
        case 'M': push_int(le_uint(next(2))); break;
        case 'J': push_int(static_cast<std::int32_t>(le_uint(next(4)))); break;
        case 0x8a: {  // LONG1
          const auto n = static_cast<unsigned char>(next(1)[0]);
          if (n > 8) fail("integer too large");
          const auto raw = next(n);
          std::int64_t v = 0;
          for (std::size_t k = 0; k < n; ++k) v |= static_cast<std::int64_t>(static_cast<unsigned char>(raw[k])) << (8 * k);
          if (n > 0 && n < 8 && (static_cast<unsigned char>(raw[n - 1]) & 0x80)) v -= std::int64_t{1} << (8 * n);
          push_int(v);
          break;
        }
        case 'G': {
          auto raw = next(8);
          std::uint64_t bits = 0;
          for (int k = 0; k < 8; ++k) bits = (bits << 8) | static_cast<unsigned char>(raw[static_cast<std::size_t>(k)]);
          auto o = make(PyObj::Kind::floating);
          std::memcpy(&o->f, &bits, sizeof bits);
          stack_.push_back(o);
          break;
        }
        case 'U': push_str(PyObj::Kind::bytes, next(static_cast<unsigned char>(next(1)[0]))); break;
        case 'T': push_str(PyObj::Kind::bytes, next(le_uint(next(4)))); break;
        case 'C': push_str(PyObj::Kind::bytes, next(static_cast<unsigned char>(next(1)[0]))); break;
        case 'B': push_str(PyObj::Kind::bytes, next(le_uint(next(4)))); break;
        case 0x8c: push_str(PyObj::Kind::text, next(static_cast<unsigned char>(next(1)[0]))); break;
        case 'X': push_str(PyObj::Kind::text, next(le_uint(next(4)))); break;
        case 'q': memo_[static_cast<unsigned char>(next(1)[0])] = top(); break;
        case 'r': memo_[le_uint(next(4))] = top(); break;
        case 0x94: memo_[memo_.size()] = top(); break;
        case 'h': push_memo(static_cast<unsigned char>(next(1)[0])); break;
        case 'j': push_memo(le_uint(next(4))); break;
        case 't': {
          auto t = make(PyObj::Kind::tuple);
          t->items = pop_mark();
          stack_.push_back(t);
          break;
        }
        case 0x85:
        case 0x86:
        case 0x87: {
          const std::size_t n = op - 0x84u;
          if (stack_.size() < n) fail("stack underflow");
          auto t = make(PyObj::Kind::tuple);
          t->items.assign(stack_.end() - static_cast<std::ptrdiff_t>(n), stack_.end());
          stack_.resize(stack_.size() - n);
          stack_.push_back(t);
          break;
        }
        case 'a': {
          auto v = pop();
          expect(top(), PyObj::Kind::list)->items.push_back(v);
          break;
        }
        case 'e': {
          auto vals = pop_mark();
          auto& list = expect(top(), PyObj::Kind::list)->items;
          list.insert(list.end(), vals.begin(), vals.end());
          break;
        }
        case 's': {
          auto v = pop();
          auto k = pop();
          expect(top(), PyObj::Kind::dict)->entries.emplace_back(k, v);
          break;
        }
        case 'u': {
          auto vals = pop_mark();
          if (vals.size() % 2) fail("odd SETITEMS");
          auto d = expect(top(), PyObj::Kind::dict);
          for (std::size_t k = 0; k < vals.size(); k += 2) d->entries.emplace_back(vals[k], vals[k + 1]);
          break;
        }
        case 'c': {
          auto module = read_line();
          auto name = read_line();
          push_global(module + "." + name);
          break;
        }
        case 0x93: {
          auto name = pop();
          auto module = pop();
          push_global(module->s + "." + name->s);
          break;
        }
        case 'R': {
          auto args = expect(pop(), PyObj::Kind::tuple);
          auto fn = expect(pop(), PyObj::Kind::global);
          stack_.push_back(reduce(fn->s, args->items));
          break;
        }
        case 'b': {
          auto state = pop();
          build(top(), state);
          break;
        }
        default: {
          std::ostringstream msg;
          msg << "unsupported pickle opcode 0x" << std::hex << static_cast<int>(op);
          fail(msg.str());
        }
      }
    }
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw IngestionError(file_ + ": " + what + " at byte " + std::to_string(pos_));
  }

  std::string_view next(std::size_t n) {
    if (n > buf_.size() - pos_) fail("truncated");
    std::string_view v(buf_.data() + pos_, n);
    pos_ += n;
    return v;
  }

  static std::size_t le_uint(std::string_view raw) {
    std::size_t v = 0;
    for (std::size_t k = raw.size(); k-- > 0;) v = (v << 8) | static_cast<unsigned char>(raw[k]);
    return v;
  }

  std::string read_line() {
    const auto end = buf_.find('\n', pos_);
    if (end == std::string::npos) fail("truncated");
    std::string line = buf_.substr(pos_, end - pos_);
    pos_ = end + 1;
    return line;
  }

  void push_int(std::int64_t v) {
    auto o = make(PyObj::Kind::integer);
    o->i = v;
    stack_.push_back(o);
  }
  void push_str(PyObj::Kind kind, std::string_view v) {
    auto o = make(kind);
    o->s = std::string(v);
    stack_.push_back(o);
  }
  void push_global(const std::string& name) {
    auto o = make(PyObj::Kind::global);
    o->s = name;
    stack_.push_back(o);
  }
  void push_memo(std::size_t key) {
    auto it = memo_.find(key);
    if (it == memo_.end()) fail("unknown memo key");
    stack_.push_back(it->second);
  }

  PyRef pop() {
    if (stack_.empty() || (!marks_.empty() && marks_.back() == stack_.size())) fail("stack underflow");
    auto v = stack_.back();
    stack_.pop_back();
    return v;
  }
  PyRef top() {
    if (stack_.empty()) fail("stack underflow");
    return stack_.back();
  }
  std::vector<PyRef> pop_mark() {
    if (marks_.empty()) fail("missing mark");
    const auto at = marks_.back();
    marks_.pop_back();
    std::vector<PyRef> out(stack_.begin() + static_cast<std::ptrdiff_t>(at), stack_.end());
    stack_.resize(at);
    return out;
  }
  PyRef expect(const PyRef& o, PyObj::Kind kind) {
    if (o->kind != kind) fail("unexpected object type");
    return o;
  }

  // UTF-8 text whose code points are all < 256 back to raw bytes.
  std::string latin1_bytes(const std::string& utf8) {
    std::string out;
    for (std::size_t k = 0; k < utf8.size(); ++k) {
      const auto c = static_cast<unsigned char>(utf8[k]);
      if (c < 0x80) {
        out.push_back(static_cast<char>(c));
      } else if ((c & 0xE0) == 0xC0 && k + 1 < utf8.size()) {
        const unsigned cp = ((c & 0x1Fu) << 6) | (static_cast<unsigned char>(utf8[++k]) & 0x3Fu);
        if (cp > 0xFF) fail("non latin-1 code point");
        out.push_back(static_cast<char>(cp));
      } else {
        fail("non latin-1 code point");
      }
    }
    return out;
  }

  PyRef reduce(const std::string& fn, const std::vector<PyRef>& args) {
    if (fn == "numpy.core.multiarray._reconstruct" || fn == "numpy._core.multiarray._reconstruct") {
      return make(PyObj::Kind::ndarray);
    }
    if (fn == "numpy.dtype") {
      if (args.empty() || (args[0]->kind != PyObj::Kind::text && args[0]->kind != PyObj::Kind::bytes))
        fail("malformed dtype");
      auto d = make(PyObj::Kind::dtype);
      d->s = args[0]->s;
      return d;
    }
    if (fn == "_codecs.encode") {
      if (args.size() != 2 || args[0]->kind != PyObj::Kind::text) fail("malformed bytes encoding");
      auto b = make(PyObj::Kind::bytes);
      b->s = latin1_bytes(args[0]->s);
      return b;
    }
    fail("refusing to call " + fn);
  }

  void build(const PyRef& obj, const PyRef& state) {
    if (obj->kind == PyObj::Kind::dtype) return;  // byte order is irrelevant for single-byte types
    if (obj->kind != PyObj::Kind::ndarray || state->kind != PyObj::Kind::tuple || state->items.size() != 5)
      fail("unsupported object state");
    const auto& st = state->items;
    if (st[1]->kind != PyObj::Kind::tuple || st[2]->kind != PyObj::Kind::dtype) fail("malformed ndarray state");
    for (const auto& d : st[1]->items) {
      if (d->kind != PyObj::Kind::integer || d->i < 0) fail("malformed ndarray shape");
      obj->shape.push_back(d->i);
    }
    obj->dtype = st[2]->s;
    if (st[3]->kind == PyObj::Kind::boolean && st[3]->i) fail("fortran-ordered arrays are not supported");
    if (st[4]->kind != PyObj::Kind::bytes) fail("ndarray payload is not raw bytes");
    obj->s = st[4]->s;
    obj->built = true;
  }

  const std::string& buf_;
  std::string file_;
  std::size_t pos_ = 0;
  std::vector<PyRef> stack_;
  std::vector<std::size_t> marks_;
  std::map<std::size_t, PyRef> memo_;
};

PyRef dict_get(const PyRef& dict, const std::string& key) {
  for (const auto& [k, v] : dict->entries)
    if ((k->kind == PyObj::Kind::bytes || k->kind == PyObj::Kind::text) && k->s == key) return v;
  return nullptr;
}

// ---------------------------------------------------------------------------
// Protocol-2 writer.

void put_u32(std::string& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
}

void put_int(std::string& out, std::int64_t v) {
  if (v >= 0 && v < 256) {
    out.push_back('K');
    out.push_back(static_cast<char>(v));
  } else if (v >= 0 && v < 65536) {
    out.push_back('M');
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>(v >> 8));
  } else {
    out.push_back('J');
    put_u32(out, static_cast<std::uint32_t>(static_cast<std::int32_t>(v)));
  }
}

void put_bytes(std::string& out, std::string_view s) {
  if (s.size() < 256) {
    out.push_back('U');
    out.push_back(static_cast<char>(s.size()));
  } else {
    out.push_back('T');
    put_u32(out, static_cast<std::uint32_t>(s.size()));
  }
  out.append(s);
}

std::string pickle_header() { return std::string("\x80\x02}(", 4); }

// ---------------------------------------------------------------------------

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  static const std::array<std::string, 7> known{".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff"};
  return std::find(known.begin(), known.end(), ext) != known.end();
}

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (directories ? e.is_directory() : e.is_regular_file()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

LabeledImages ingest_folder_split(const fs::path& root, const std::vector<std::string>& class_names,
                                  const std::optional<int>& side) {
  LabeledImages out;
  out.class_names = class_names;
  int ref_h = -1, ref_w = -1;
  for (std::size_t label = 0; label < class_names.size(); ++label) {
    const auto dir = root / class_names[label];
    if (!fs::is_directory(dir)) throw IngestionError(dir.string() + ": class folder missing");
    std::size_t count = 0;
    for (const auto& file : sorted_entries(dir, false)) {
      if (!is_image_file(file)) continue;
      cv::Mat bgr = cv::imread(file.string(), cv::IMREAD_COLOR);
      if (bgr.empty()) throw IngestionError(file.string() + ": cannot decode image");
      if (side) cv::resize(bgr, bgr, cv::Size(*side, *side), 0, 0, cv::INTER_AREA);
      if (ref_h < 0) {
        ref_h = bgr.rows;
        ref_w = bgr.cols;
      } else if (bgr.rows != ref_h || bgr.cols != ref_w) {
        throw IngestionError(file.string() + ": size " + std::to_string(bgr.cols) + "x" + std::to_string(bgr.rows) +
                             " differs from " + std::to_string(ref_w) + "x" + std::to_string(ref_h));
      }
      ImageTensor img(bgr.rows, bgr.cols, 3);
      for (int r = 0; r < bgr.rows; ++r) {
        const auto* px = bgr.ptr<cv::Vec3b>(r);
        for (int c = 0; c < bgr.cols; ++c)
          for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = px[c][2 - ch];
      }
      out.images.push_back(std::move(img));
      out.labels.push_back(static_cast<int>(label));
      ++count;
    }
    if (count == 0) throw IngestionError(dir.string() + ": class folder holds no images");
  }
  return out;
}

std::vector<std::string> class_dirs(const fs::path& root) {
  std::vector<std::string> names;
  for (const auto& d : sorted_entries(root, true)) names.push_back(d.filename().string());
  if (names.empty()) throw IngestionError(root.string() + ": no class folders");
  return names;
}

Dataset ingest_image_folder(const DatasetSpec& spec) {
  Dataset ds;
  const auto train_dir = spec.path / "train";
  const auto test_dir = spec.path / "test";
  if (fs::is_directory(train_dir)) {
    const auto names = class_dirs(train_dir);
    ds.train = ingest_folder_split(train_dir, names, spec.image_side);
    if (fs::is_directory(test_dir)) {
      if (class_dirs(test_dir) != names) throw IngestionError(test_dir.string() + ": classes differ from train");
      ds.test = ingest_folder_split(test_dir, names, spec.image_side);
      if (!ds.test.images.empty() && !ds.train.images.front().same_shape(ds.test.images.front()))
        throw IngestionError(test_dir.string() + ": image size differs from train");
    }
  } else {
    ds.train = ingest_folder_split(spec.path, class_dirs(spec.path), spec.image_side);
    ds.test.class_names = ds.train.class_names;
  }
  return ds;
}

void verify_checksums(const fs::path& dir) {
  const auto sums = dir / "SHA256SUMS";
  if (!fs::exists(sums)) return;
  std::istringstream in(read_file(sums));
  std::string digest, name;
  while (in >> digest >> name) {
    const auto file = dir / name;
    if (!fs::exists(file)) throw IngestionError(file.string() + ": listed in SHA256SUMS but missing");
    if (sha256_hex(read_file(file)) != digest) throw IngestionError(file.string() + ": checksum mismatch");
  }
}

void append_batch(LabeledImages& split, const fs::path& file) {
  if (!fs::exists(file)) throw IngestionError(file.string() + ": missing");
  const auto batch = parse_cifar_batch(read_file(file), file.string());
  for (std::size_t k = 0; k < batch.labels.size(); ++k) {
    split.images.push_back(cifar_row_to_image(batch.data.data() + k * kCifarRow));
    split.labels.push_back(batch.labels[k]);
  }
}

Dataset ingest_cifar(const DatasetSpec& spec) {
  if (!fs::is_directory(spec.path)) throw IngestionError(spec.path.string() + ": not a directory");
  verify_checksums(spec.path);
  Dataset ds;
  auto names = cifar10_class_names();
  const auto meta = spec.path / "batches.meta";
  if (fs::exists(meta)) names = parse_cifar_meta(read_file(meta), meta.string());
  ds.train.class_names = names;
  ds.test.class_names = names;
  for (int b = 1; b <= kCifarTrainBatches; ++b) append_batch(ds.train, spec.path / ("data_batch_" + std::to_string(b)));
  append_batch(ds.test, spec.path / "test_batch");
  for (const auto* split : {&ds.train, &ds.test})
    for (int y : split->labels)
      if (y >= static_cast<int>(names.size()))
        throw IngestionError(spec.path.string() + ": label " + std::to_string(y) + " has no class name");
  return ds;
}

// ---------------------------------------------------------------------------
// Procedural scenes.

struct Rgb {
  double r = 0, g = 0, b = 0;
};

Rgb scaled(Rgb c, double k) { return {c.r * k, c.g * k, c.b * k}; }

struct Prim {
  enum class Kind { ellipse, polygon } kind = Kind::polygon;
  double cu = 0, cv = 0, ru = 0, rv = 0, angle = 0;
  std::vector<std::array<double, 2>> pts;
  Rgb color;
};

Prim ellipse(double cu, double cv, double ru, double rv, Rgb color, double angle = 0.0) {
  Prim p;
  p.kind = Prim::Kind::ellipse;
  p.cu = cu;
  p.cv = cv;
  p.ru = ru;
  p.rv = rv;
  p.angle = angle;
  p.color = color;
  return p;
}

Prim poly(std::vector<std::array<double, 2>> pts, Rgb color) {
  Prim p;
  p.pts = std::move(pts);
  p.color = color;
  return p;
}

Prim box(double u0, double v0, double u1, double v1, Rgb color) {
  return poly({{u0, v0}, {u1, v0}, {u1, v1}, {u0, v1}}, color);
}

Prim segment(double u0, double v0, double u1, double v1, double half_width, Rgb color) {
  const double du = u1 - u0, dv = v1 - v0;
  const double len = std::hypot(du, dv);
  const double nu = -dv / len * half_width, nv = du / len * half_width;
  return poly({{u0 + nu, v0 + nv}, {u1 + nu, v1 + nv}, {u1 - nu, v1 - nv}, {u0 - nu, v0 - nv}}, color);
}

bool inside(const Prim& p, double u, double v) {
  if (p.kind == Prim::Kind::ellipse) {
    const double cs = std::cos(p.angle), sn = std::sin(p.angle);
    const double du = u - p.cu, dv = v - p.cv;
    const double a = (du * cs + dv * sn) / p.ru, b = (-du * sn + dv * cs) / p.rv;
    return a * a + b * b <= 1.0;
  }
  bool in = false;
  for (std::size_t i = 0, j = p.pts.size() - 1; i < p.pts.size(); j = i++) {
    const auto& a = p.pts[i];
    const auto& b = p.pts[j];
    if ((a[1] > v) != (b[1] > v) && u < (b[0] - a[0]) * (v - a[1]) / (b[1] - a[1]) + a[0]) in = !in;
  }
  return in;
}

void extent(const Prim& p, double& u0, double& v0, double& u1, double& v1) {
  if (p.kind == Prim::Kind::ellipse) {
    const double r = std::max(p.ru, p.rv);
    u0 = p.cu - r, u1 = p.cu + r, v0 = p.cv - r, v1 = p.cv + r;
    return;
  }
  u0 = v0 = 1e9;
  u1 = v1 = -1e9;
  for (const auto& q : p.pts) {
    u0 = std::min(u0, q[0]), u1 = std::max(u1, q[0]);
    v0 = std::min(v0, q[1]), v1 = std::max(v1, q[1]);
  }
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform(double a, double b) { return std::uniform_real_distribution<double>(a, b)(gen_); }
  double normal(double sd) { return std::normal_distribution<double>(0.0, sd)(gen_); }
  bool chance(double p) { return uniform(0.0, 1.0) < p; }
  int pick(int n) { return std::uniform_int_distribution<int>(0, n - 1)(gen_); }
  Rgb jitter(Rgb c, double amount) {
    return {c.r + uniform(-amount, amount), c.g + uniform(-amount, amount), c.b + uniform(-amount, amount)};
  }
  template <class T>
  const T& pick_from(const std::vector<T>& v) {
    return v[static_cast<std::size_t>(pick(static_cast<int>(v.size())))];
  }

 private:
  std::mt19937_64 gen_;
};

constexpr int kSuper = 3;
constexpr int kCanvas = kCifarSide * kSuper;

struct Canvas {
  std::vector<Rgb> px = std::vector<Rgb>(static_cast<std::size_t>(kCanvas * kCanvas));
  Rgb& at(int y, int x) { return px[static_cast<std::size_t>(y * kCanvas + x)]; }
};

// Placement of object coordinates (u forward, v up, in image widths) on the
// unit canvas.
struct Placement {
  double cx = 0.5, base_y = 0.7, scale = 1.0, mirror = 1.0;
  // Direction the light comes from, in image coordinates (x right, y up).
  double light_x = 0.0, light_y = 1.0;
};

void draw(Canvas& canvas, const std::vector<Prim>& prims, const Placement& at) {
  for (const auto& p : prims) {
    double u0, v0, u1, v1;
    extent(p, u0, v0, u1, v1);
    const double xa = at.cx + at.mirror * u0 * at.scale, xb = at.cx + at.mirror * u1 * at.scale;
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(xa, xb) * kCanvas)));
    const int x1 = std::min(kCanvas - 1, static_cast<int>(std::ceil(std::max(xa, xb) * kCanvas)));
    const int y0 = std::max(0, static_cast<int>(std::floor((at.base_y - v1 * at.scale) * kCanvas)));
    const int y1 = std::min(kCanvas - 1, static_cast<int>(std::ceil((at.base_y - v0 * at.scale) * kCanvas)));
    const double uc = 0.5 * (u0 + u1), vc = 0.5 * (v0 + v1);
    const double hu = std::max(0.5 * (u1 - u0), 1e-9), hv = std::max(0.5 * (v1 - v0), 1e-9);
    for (int y = y0; y <= y1; ++y) {
      const double v = (at.base_y - (y + 0.5) / kCanvas) / at.scale;
      for (int x = x0; x <= x1; ++x) {
        const double u = ((x + 0.5) / kCanvas - at.cx) / (at.mirror * at.scale);
        if (!inside(p, u, v)) continue;
        // Parts facing the light are brighter.
        const double t = at.mirror * (u - uc) / hu * at.light_x + (v - vc) / hv * at.light_y;
        canvas.at(y, x) = scaled(p.color, 1.0 + 0.15 * std::clamp(t, -1.0, 1.0));
      }
    }
  }
}

// Smooth random field in [-1, 1] on a 9x9 lattice.
struct ValueNoise {
  std::array<double, 81> grid{};
  explicit ValueNoise(Rng& rng) {
    for (auto& g : grid) g = rng.uniform(-1.0, 1.0);
  }
  double at(double x, double y) const {
    const double gx = std::clamp(x, 0.0, 1.0) * 8.0, gy = std::clamp(y, 0.0, 1.0) * 8.0;
    const int ix = std::min(7, static_cast<int>(gx)), iy = std::min(7, static_cast<int>(gy));
    const double fx = gx - ix, fy = gy - iy;
    auto g = [&](int a, int b) { return grid[static_cast<std::size_t>(b * 9 + a)]; };
    return (1 - fy) * ((1 - fx) * g(ix, iy) + fx * g(ix + 1, iy)) + fy * ((1 - fx) * g(ix, iy + 1) + fx * g(ix + 1, iy + 1));
  }
};

void paint_background(Canvas& canvas, Rng& rng, double horizon, bool water) {
  static const std::vector<Rgb> skies{{105, 155, 225}, {165, 185, 205}, {225, 165, 115}, {135, 135, 145}, {80, 120, 200}};
  static const std::vector<Rgb> grounds{{70, 120, 50}, {120, 95, 60}, {105, 105, 100}, {185, 165, 115}, {90, 140, 70}};
  const Rgb sky = rng.jitter(rng.pick_from(skies), 20);
  const Rgb ground = water ? rng.jitter({45, 85, 150}, 20) : rng.jitter(rng.pick_from(grounds), 20);
  ValueNoise texture(rng);
  const double ripple_phase = rng.uniform(0, 6.283), ripple_freq = rng.uniform(40, 70);
  for (int y = 0; y < kCanvas; ++y) {
    const double fy = (y + 0.5) / kCanvas;
    for (int x = 0; x < kCanvas; ++x) {
      const double fx = (x + 0.5) / kCanvas;
      if (fy < horizon) {
        canvas.at(y, x) = scaled(sky, 0.75 + 0.35 * fy / horizon);
      } else {
        const double depth = (fy - horizon) / (1.0 - horizon);
        double k = 1.05 - 0.3 * depth + 0.12 * texture.at(fx, fy);
        if (water) k += 0.06 * std::sin(ripple_freq * fy + ripple_phase + 3.0 * texture.at(fx, fy));
        canvas.at(y, x) = scaled(ground, k);
      }
    }
  }
  const int clouds = rng.chance(0.5) ? 1 + rng.pick(3) : 0;
  const Rgb cloud = rng.jitter({235, 235, 240}, 10);
  for (int c = 0; c < clouds; ++c) {
    Placement at{rng.uniform(0.05, 0.95), rng.uniform(0.05, horizon - 0.1), 1.0, 1.0};
    const double w = rng.uniform(0.08, 0.18);
    draw(canvas, {ellipse(0, 0, w, w * 0.35, cloud), ellipse(w * 0.3, w * 0.2, w * 0.5, w * 0.3, cloud)}, at);
  }
}

// Horizon-free textured backdrop for close-ups and studio shots.
void paint_backdrop(Canvas& canvas, Rng& rng) {
  const Rgb base{rng.uniform(30, 220), rng.uniform(30, 220), rng.uniform(30, 220)};
  const Rgb second = rng.jitter(base, 60);
  ValueNoise coarse(rng), fine(rng), mix(rng);
  const double fine_freq = rng.uniform(2.0, 4.0);
  for (int y = 0; y < kCanvas; ++y) {
    const double fy = (y + 0.5) / kCanvas;
    for (int x = 0; x < kCanvas; ++x) {
      const double fx = (x + 0.5) / kCanvas;
      const double m = 0.5 + 0.5 * mix.at(fx, fy);
      const Rgb c{base.r * (1 - m) + second.r * m, base.g * (1 - m) + second.g * m, base.b * (1 - m) + second.b * m};
      const double k = 1.0 + 0.15 * coarse.at(fx, fy) +
                       0.1 * fine.at(std::fmod(fx * fine_freq, 1.0), std::fmod(fy * fine_freq, 1.0));
      canvas.at(y, x) = scaled(c, k);
    }
  }
}

void object_extent(const std::vector<Prim>& prims, double& v0, double& v1) {
  v0 = 1e9;
  v1 = -1e9;
  for (const auto& p : prims) {
    double a, b, c, d;
    extent(p, a, b, c, d);
    v0 = std::min(v0, b);
    v1 = std::max(v1, d);
  }
}

Rgb pick_color(Rng& rng, const std::vector<Rgb>& palette, double amount = 22) {
  return rng.jitter(rng.pick_from(palette), amount);
}

std::vector<Prim> airplane(Rng& rng) {
  const Rgb body = pick_color(rng, {{205, 205, 210}, {235, 235, 235}, {170, 175, 185}, {200, 60, 50}});
  const Rgb wing = scaled(body, 0.8);
  const Rgb trim = pick_color(rng, {{40, 60, 140}, {180, 40, 40}, {60, 60, 60}});
  const double len = rng.uniform(0.26, 0.32);
  return {poly({{-len + 0.05, 0.02}, {-len, 0.02}, {-len - 0.03, 0.16}, {-len + 0.03, 0.16}}, trim),
          ellipse(0, 0, len, 0.05, body),
          poly({{0.07, -0.01}, {-0.04, -0.01}, {-0.15, -0.1}, {-0.08, -0.1}}, wing),
          ellipse(len * 0.7, 0.02, 0.04, 0.02, {60, 80, 110}),
          poly({{-len + 0.06, 0.0}, {-len - 0.01, 0.0}, {-len - 0.04, -0.04}, {-len + 0.02, -0.04}}, wing)};
}

std::vector<Prim> automobile(Rng& rng) {
  const Rgb body = pick_color(rng, {{200, 30, 35}, {35, 70, 190}, {230, 200, 40}, {235, 235, 235}, {30, 30, 35}});
  const Rgb glass{110, 150, 180};
  const double h = rng.uniform(0.09, 0.12);
  return {box(-0.23, 0.04, 0.23, 0.04 + h, body),
          poly({{-0.13, 0.04 + h}, {0.1, 0.04 + h}, {0.05, 0.13 + h}, {-0.09, 0.13 + h}}, body),
          poly({{-0.11, 0.05 + h}, {0.08, 0.05 + h}, {0.04, 0.115 + h}, {-0.08, 0.115 + h}}, glass),
          ellipse(-0.14, 0.045, 0.05, 0.05, {20, 20, 20}),
          ellipse(0.14, 0.045, 0.05, 0.05, {20, 20, 20}),
          ellipse(-0.14, 0.045, 0.02, 0.02, {150, 150, 150}),
          ellipse(0.14, 0.045, 0.02, 0.02, {150, 150, 150}),
          ellipse(0.22, 0.06 + h * 0.6, 0.015, 0.012, {250, 240, 180})};
}

std::vector<Prim> bird(Rng& rng, bool perched) {
  const Rgb body = pick_color(rng, {{110, 75, 45}, {40, 40, 45}, {60, 90, 170}, {180, 60, 40}, {200, 190, 170}});
  const double lift = perched ? 0.08 : 0.0;
  std::vector<Prim> out;
  if (perched) {
    out.push_back(segment(-0.01, lift - 0.02, -0.02, 0.0, 0.008, {200, 140, 40}));
    out.push_back(segment(0.02, lift - 0.02, 0.03, 0.0, 0.008, {200, 140, 40}));
  }
  out.push_back(poly({{-0.07, lift}, {-0.16, lift + 0.03}, {-0.15, lift - 0.03}}, scaled(body, 0.8)));
  out.push_back(ellipse(0, lift, 0.09, 0.05, body, 0.2));
  out.push_back(ellipse(0.08, lift + 0.05, 0.04, 0.037, body));
  out.push_back(poly({{0.11, lift + 0.065}, {0.11, lift + 0.04}, {0.16, lift + 0.05}}, {230, 170, 40}));
  out.push_back(ellipse(0.09, lift + 0.06, 0.008, 0.008, {10, 10, 10}));
  if (perched) {
    out.push_back(ellipse(-0.02, lift + 0.005, 0.06, 0.03, scaled(body, 0.75), 0.2));
  } else {
    out.push_back(poly({{-0.05, lift + 0.02}, {0.04, lift + 0.02}, {-0.03, lift + rng.uniform(0.1, 0.16)}}, scaled(body, 0.75)));
  }
  return out;
}

std::vector<Prim> cat(Rng& rng) {
  const Rgb fur = pick_color(rng, {{215, 135, 55}, {120, 120, 125}, {40, 38, 38}, {225, 220, 210}});
  const Rgb ear = scaled(fur, 0.85);
  return {segment(-0.06, 0.03, -0.16, rng.uniform(0.08, 0.16), 0.018, ear),
          ellipse(0, 0.1, 0.085, 0.1, fur),
          ellipse(0.02, 0.23, 0.065, 0.055, fur),
          poly({{-0.035, 0.25}, {0.0, 0.27}, {-0.035, 0.33}}, ear),
          poly({{0.045, 0.27}, {0.075, 0.25}, {0.075, 0.33}}, ear),
          ellipse(-0.005, 0.24, 0.011, 0.014, {120, 190, 60}),
          ellipse(0.045, 0.24, 0.011, 0.014, {120, 190, 60}),
          ellipse(0.02, 0.21, 0.01, 0.008, {210, 120, 130})};
}

std::vector<Prim> deer(Rng& rng) {
  const Rgb fur = pick_color(rng, {{150, 100, 55}, {170, 120, 70}, {120, 85, 50}});
  const Rgb leg = scaled(fur, 0.85);
  const Rgb antler{200, 185, 150};
  return {segment(-0.11, 0.18, -0.12, 0.0, 0.016, leg),
          segment(-0.06, 0.18, -0.05, 0.0, 0.016, leg),
          segment(0.07, 0.18, 0.06, 0.0, 0.016, leg),
          segment(0.11, 0.18, 0.12, 0.0, 0.016, leg),
          ellipse(0, 0.21, 0.15, 0.06, fur),
          ellipse(-0.14, 0.23, 0.025, 0.02, {235, 230, 220}),
          segment(0.11, 0.22, 0.17, 0.33, 0.025, fur),
          ellipse(0.2, 0.34, 0.05, 0.028, fur, -0.3),
          segment(0.17, 0.36, 0.14, 0.47, 0.008, antler),
          segment(0.155, 0.42, 0.10, 0.45, 0.007, antler),
          segment(0.19, 0.36, 0.23, 0.46, 0.008, antler),
          segment(0.215, 0.42, 0.26, 0.44, 0.007, antler)};
}

std::vector<Prim> dog(Rng& rng) {
  const Rgb fur = pick_color(rng, {{140, 90, 50}, {35, 30, 30}, {210, 180, 130}, {230, 225, 215}});
  const Rgb dark = scaled(fur, 0.6);
  const double tail = rng.uniform(0.2, 0.27);
  return {segment(-0.11, 0.14, -0.18, tail, 0.015, fur),
          segment(-0.1, 0.12, -0.1, 0.0, 0.02, fur),
          segment(-0.05, 0.12, -0.05, 0.0, 0.02, fur),
          segment(0.06, 0.12, 0.06, 0.0, 0.02, fur),
          segment(0.1, 0.12, 0.1, 0.0, 0.02, fur),
          ellipse(0, 0.13, 0.13, 0.055, fur),
          ellipse(0.14, 0.2, 0.05, 0.045, fur),
          ellipse(0.19, 0.185, 0.035, 0.022, fur),
          ellipse(0.22, 0.19, 0.01, 0.009, {15, 15, 15}),
          ellipse(0.115, 0.18, 0.017, 0.045, dark, 0.2),
          ellipse(0.155, 0.215, 0.008, 0.008, {15, 15, 15})};
}

std::vector<Prim> frog(Rng& rng) {
  const Rgb skin = pick_color(rng, {{70, 150, 55}, {110, 140, 50}, {60, 110, 60}, {150, 130, 60}});
  const Rgb belly = rng.jitter({200, 205, 140}, 15);
  const Rgb spots = scaled(skin, 0.6);
  return {poly({{-0.13, 0.0}, {-0.01, 0.0}, {-0.1, 0.08}}, scaled(skin, 0.85)),
          ellipse(0, 0.06, 0.13, 0.06, skin),
          ellipse(0.03, 0.035, 0.08, 0.03, belly),
          ellipse(0.06, 0.12, 0.028, 0.028, skin),
          ellipse(0.065, 0.125, 0.014, 0.014, {20, 20, 20}),
          ellipse(-0.04, 0.09, 0.02, 0.014, spots),
          ellipse(-0.08, 0.07, 0.015, 0.012, spots),
          segment(0.08, 0.04, 0.11, 0.0, 0.012, skin)};
}

std::vector<Prim> horse(Rng& rng) {
  const Rgb coat = pick_color(rng, {{120, 70, 35}, {40, 30, 25}, {225, 220, 210}, {160, 95, 50}});
  const Rgb mane = scaled(coat, 0.5);
  return {segment(-0.16, 0.29, -0.22, 0.12, 0.022, mane),
          segment(-0.13, 0.23, -0.13, 0.0, 0.022, coat),
          segment(-0.08, 0.23, -0.08, 0.0, 0.022, coat),
          segment(0.09, 0.23, 0.09, 0.0, 0.022, coat),
          segment(0.14, 0.23, 0.14, 0.0, 0.022, coat),
          ellipse(0, 0.27, 0.18, 0.07, coat),
          poly({{0.1, 0.28}, {0.17, 0.25}, {0.25, 0.41}, {0.18, 0.44}}, coat),
          segment(0.11, 0.31, 0.19, 0.45, 0.012, mane),
          ellipse(0.26, 0.4, 0.075, 0.03, coat, -0.6),
          ellipse(0.25, 0.425, 0.008, 0.008, {10, 10, 10})};
}

std::vector<Prim> ship(Rng& rng) {
  const Rgb hull = pick_color(rng, {{150, 35, 35}, {35, 35, 40}, {90, 95, 105}, {30, 60, 110}});
  const Rgb deck = rng.jitter({235, 235, 230}, 12);
  const Rgb funnel = pick_color(rng, {{220, 180, 40}, {200, 60, 40}, {40, 40, 40}});
  return {segment(0.0, 0.16, 0.0, 0.34, 0.006, {60, 60, 60}),
          box(-0.11, 0.16, -0.06, rng.uniform(0.24, 0.3), funnel),
          box(-0.14, 0.08, 0.1, 0.16, deck),
          box(-0.04, 0.16, 0.06, 0.22, deck),
          box(-0.02, 0.18, 0.05, 0.2, {70, 100, 130}),
          poly({{-0.3, 0.08}, {0.34, 0.08}, {0.26, -0.03}, {-0.26, -0.03}}, hull),
          box(-0.29, 0.07, 0.33, 0.085, deck)};
}

std::vector<Prim> truck(Rng& rng) {
  const Rgb cargo = pick_color(rng, {{230, 230, 230}, {200, 40, 40}, {40, 90, 170}, {220, 170, 40}, {90, 120, 70}});
  const Rgb cab = pick_color(rng, {{200, 40, 40}, {40, 90, 170}, {235, 235, 235}, {40, 40, 45}});
  const double top = rng.uniform(0.24, 0.3);
  return {box(-0.29, 0.035, 0.25, 0.065, {40, 40, 40}),
          box(-0.29, 0.06, 0.08, top, cargo),
          box(0.09, 0.06, 0.25, 0.2, cab),
          box(0.16, 0.13, 0.235, 0.19, {110, 150, 180}),
          ellipse(-0.21, 0.045, 0.048, 0.048, {20, 20, 20}),
          ellipse(-0.1, 0.045, 0.048, 0.048, {20, 20, 20}),
          ellipse(0.17, 0.045, 0.048, 0.048, {20, 20, 20}),
          ellipse(0.24, 0.09, 0.012, 0.012, {250, 240, 180})};
}

ImageTensor render_scene(int label, Rng& rng) {
  Canvas canvas;
  // Outdoor wide shot with a horizon, a close-up filling the frame, or a
  // studio shot against a plain backdrop.
  const double kind = rng.uniform(0.0, 1.0);
  const bool outdoor = kind < 0.4, closeup = !outdoor && kind < 0.75;
  const double horizon = rng.uniform(0.55, 0.78);
  const bool flying = outdoor && (label == 0 || (label == 2 && rng.chance(0.6)));
  if (outdoor) {
    paint_background(canvas, rng, horizon, label == 8);
  } else {
    paint_backdrop(canvas, rng);
  }

  std::vector<Prim> prims;
  switch (label) {
    case 0: prims = airplane(rng); break;
    case 1: prims = automobile(rng); break;
    case 2: prims = bird(rng, !flying); break;
    case 3: prims = cat(rng); break;
    case 4: prims = deer(rng); break;
    case 5: prims = dog(rng); break;
    case 6: prims = frog(rng); break;
    case 7: prims = horse(rng); break;
    case 8: prims = ship(rng); break;
    default: prims = truck(rng); break;
  }
  Placement at;
  at.mirror = rng.chance(0.5) ? 1.0 : -1.0;
  at.cx = rng.uniform(0.35, 0.65);
  const double size_boost = (label == 2 || label == 3 || label == 6) ? 1.5 : 1.1;
  if (outdoor) {
    at.scale = size_boost * rng.uniform(0.85, 1.25);
    const double tilt = rng.uniform(-0.5, 0.5);
    at.light_x = std::sin(tilt);
    at.light_y = std::cos(tilt);
    if (flying) {
      at.base_y = rng.uniform(0.2, horizon - 0.12);
    } else {
      at.base_y = std::min(0.97, horizon + rng.uniform(label == 8 ? 0.03 : 0.06, 0.2));
    }
  } else {
    at.scale = size_boost * (closeup ? rng.uniform(2.0, 3.2) : rng.uniform(1.3, 1.9));
    const double light = rng.uniform(0.0, 6.283185307179586);
    at.light_x = std::cos(light);
    at.light_y = std::sin(light);
    double v0, v1;
    object_extent(prims, v0, v1);
    const double centre = closeup ? rng.uniform(0.35, 0.65) : rng.uniform(0.42, 0.58);
    at.base_y = centre + 0.5 * (v0 + v1) * at.scale;
    if (closeup) at.cx = rng.uniform(0.25, 0.75);
  }
  draw(canvas, prims, at);

  const double gain = rng.uniform(0.85, 1.15);
  ImageTensor img(kCifarSide, kCifarSide, 3);
  for (int r = 0; r < kCifarSide; ++r) {
    for (int c = 0; c < kCifarSide; ++c) {
      Rgb sum;
      for (int dy = 0; dy < kSuper; ++dy)
        for (int dx = 0; dx < kSuper; ++dx) {
          const auto& p = canvas.at(r * kSuper + dy, c * kSuper + dx);
          sum.r += p.r, sum.g += p.g, sum.b += p.b;
        }
      const double n = kSuper * kSuper;
      const std::array<double, 3> px{sum.r / n, sum.g / n, sum.b / n};
      for (int ch = 0; ch < 3; ++ch)
        img.at(r, c, ch) = std::clamp(std::round(px[static_cast<std::size_t>(ch)] * gain + rng.normal(4.0)), 0.0, 255.0);
    }
  }
  return img;
}

CifarBatch to_batch(const LabeledImages& data, std::size_t begin, std::size_t end) {
  CifarBatch batch;
  batch.data.resize((end - begin) * kCifarRow);
  for (std::size_t k = begin; k < end; ++k) {
    auto* row = batch.data.data() + (k - begin) * kCifarRow;
    const auto& img = data.images[k];
    for (int ch = 0; ch < 3; ++ch)
      for (int r = 0; r < kCifarSide; ++r)
        for (int c = 0; c < kCifarSide; ++c)
          row[static_cast<std::size_t>(ch * 1024 + r * kCifarSide + c)] = static_cast<std::uint8_t>(img.at(r, c, ch));
    batch.labels.push_back(data.labels[k]);
  }
  return batch;
}

}  // namespace

std::string to_string(DatasetKind kind) { return kind == DatasetKind::cifar10_archive ? "cifar10_archive" : "image_folder"; }

DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "cifar10_archive") return DatasetKind::cifar10_archive;
  if (s == "image_folder") return DatasetKind::image_folder;
  throw ConfigError("unknown dataset kind '" + s + "'");
}

CifarBatch parse_cifar_batch(const std::string& bytes, const std::string& file_name) {
  auto root = Unpickler(bytes, file_name).load();
  if (root->kind != PyObj::Kind::dict) throw IngestionError(file_name + ": batch is not a dictionary");
  auto data = dict_get(root, "data");
  auto labels = dict_get(root, "labels");
  if (!data || !labels) throw IngestionError(file_name + ": batch lacks data or labels");
  if (data->kind != PyObj::Kind::ndarray || !data->built || data->dtype != "u1")
    throw IngestionError(file_name + ": data is not a uint8 array");
  if (data->shape.size() != 2 || data->shape[1] != static_cast<std::int64_t>(kCifarRow))
    throw IngestionError(file_name + ": data rows are not 3072 bytes");
  const auto rows = static_cast<std::size_t>(data->shape[0]);
  if (data->s.size() != rows * kCifarRow) throw IngestionError(file_name + ": data payload size disagrees with shape");
  if (labels->kind != PyObj::Kind::list || labels->items.size() != rows)
    throw IngestionError(file_name + ": label count disagrees with data rows");
  CifarBatch batch;
  batch.data.assign(data->s.begin(), data->s.end());
  for (const auto& y : labels->items) {
    if (y->kind != PyObj::Kind::integer || y->i < 0 || y->i > 255) throw IngestionError(file_name + ": invalid label");
    batch.labels.push_back(static_cast<int>(y->i));
  }
  return batch;
}

std::vector<std::string> parse_cifar_meta(const std::string& bytes, const std::string& file_name) {
  auto root = Unpickler(bytes, file_name).load();
  if (root->kind != PyObj::Kind::dict) throw IngestionError(file_name + ": meta is not a dictionary");
  auto names = dict_get(root, "label_names");
  if (!names || names->kind != PyObj::Kind::list || names->items.empty())
    throw IngestionError(file_name + ": meta lacks label_names");
  std::vector<std::string> out;
  for (const auto& n : names->items) {
    if (n->kind != PyObj::Kind::bytes && n->kind != PyObj::Kind::text) throw IngestionError(file_name + ": bad label name");
    out.push_back(n->s);
  }
  return out;
}

std::string encode_cifar_batch(const CifarBatch& batch, const std::string& batch_label) {
  if (batch.data.size() != batch.labels.size() * kCifarRow) throw ArgumentError("batch data and labels disagree");
  std::string out = pickle_header();
  put_bytes(out, "batch_label");
  put_bytes(out, batch_label);
  put_bytes(out, "labels");
  out += "](";
  for (int y : batch.labels) put_int(out, y);
  out += 'e';
  put_bytes(out, "data");
  out += "cnumpy.core.multiarray\n_reconstruct\ncnumpy\nndarray\n";
  put_int(out, 0);
  out += '\x85';
  put_bytes(out, "b");
  out += "\x87R(";
  put_int(out, 1);
  out += '(';
  put_int(out, static_cast<std::int64_t>(batch.labels.size()));
  put_int(out, static_cast<std::int64_t>(kCifarRow));
  out += "tcnumpy\ndtype\n";
  put_bytes(out, "u1");
  put_int(out, 0);
  put_int(out, 1);
  out += "\x87R(";
  put_int(out, 3);
  put_bytes(out, "|");
  out += "NNN";
  put_int(out, -1);
  put_int(out, -1);
  put_int(out, 0);
  out += "tb\x89";
  put_bytes(out, std::string_view(reinterpret_cast<const char*>(batch.data.data()), batch.data.size()));
  out += "tbu.";
  return out;
}

std::string encode_cifar_meta(const std::vector<std::string>& label_names) {
  std::string out = pickle_header();
  put_bytes(out, "num_cases_per_batch");
  put_int(out, 10000);
  put_bytes(out, "label_names");
  out += "](";
  for (const auto& n : label_names) put_bytes(out, n);
  out += 'e';
  put_bytes(out, "num_vis");
  put_int(out, static_cast<std::int64_t>(kCifarRow));
  out += "u.";
  return out;
}

ImageTensor cifar_row_to_image(const std::uint8_t* row) {
  ImageTensor img(kCifarSide, kCifarSide, 3);
  for (int ch = 0; ch < 3; ++ch)
    for (int r = 0; r < kCifarSide; ++r)
      for (int c = 0; c < kCifarSide; ++c) img.at(r, c, ch) = row[ch * 1024 + r * kCifarSide + c];
  return img;
}

std::string dataset_digest(const LabeledImages& train, const LabeledImages& test) {
  std::string bytes;
  for (const auto* split : {&train, &test}) {
    bytes += std::to_string(split->size()) + ";";
    for (const auto& n : split->class_names) bytes += n + ";";
    for (const auto& img : split->images) {
      bytes += std::to_string(img.height()) + "x" + std::to_string(img.width()) + "x" + std::to_string(img.channels());
      for (double v : img.data()) bytes.push_back(static_cast<char>(static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0))));
    }
    for (int y : split->labels) bytes += std::to_string(y) + ",";
  }
  return sha256_hex(bytes);
}

Dataset ingest_dataset(const DatasetSpec& spec) {
  if (!fs::exists(spec.path)) throw IngestionError(spec.path.string() + ": path does not exist");
  Dataset ds = spec.kind == DatasetKind::cifar10_archive ? ingest_cifar(spec) : ingest_image_folder(spec);
  ds.digest = dataset_digest(ds.train, ds.test);
  return ds;
}

LabeledImages synthesize_cifar_like(int per_class, std::uint64_t seed) {
  if (per_class < 0) throw ArgumentError("per_class must be non-negative");
  LabeledImages out;
  out.class_names = cifar10_class_names();
  const int classes = static_cast<int>(out.class_names.size());
  for (int k = 0; k < per_class * classes; ++k) {
    const int label = k % classes;
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
    out.images.push_back(render_scene(label, rng));
    out.labels.push_back(label);
  }
  return out;
}

void write_synthetic_cifar(const fs::path& dir, const SynthOptions& options) {
  if (options.train_per_class < 1 || options.test_per_class < 0)
    throw ArgumentError("synthetic dataset needs train_per_class >= 1 and test_per_class >= 0");
  fs::create_directories(dir);
  const auto train = synthesize_cifar_like(options.train_per_class, derive_seed(options.seed, 1));
  const auto test = synthesize_cifar_like(options.test_per_class, derive_seed(options.seed, 2));
  std::vector<std::pair<std::string, std::string>> files;
  const std::size_t per_batch = train.size() / kCifarTrainBatches;  // 10 classes, so always exact
  for (int b = 0; b < kCifarTrainBatches; ++b) {
    const auto label = "training batch " + std::to_string(b + 1) + " of 5";
    files.emplace_back("data_batch_" + std::to_string(b + 1),
                       encode_cifar_batch(to_batch(train, b * per_batch, (b + 1) * per_batch), label));
  }
  files.emplace_back("test_batch", encode_cifar_batch(to_batch(test, 0, test.size()), "testing batch 1 of 1"));
  files.emplace_back("batches.meta", encode_cifar_meta(train.class_names));
  std::string sums;
  for (const auto& [name, bytes] : files) {
    write_file_atomic(dir / name, bytes);
    sums += sha256_hex(bytes) + "  " + name + "\n";
  }
  write_file_atomic(dir / "SHA256SUMS", sums);
}

}  // namespace scalenet
