#include "pan/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "pan/error.hpp"
#include "pan/ops.hpp"

namespace pan {

namespace {

constexpr double kClassColors[4][3] = {
    {0.45, 0.45, 0.45},  // background base, overridden per image
    {0.85, 0.25, 0.20},
    {0.20, 0.75, 0.30},
    {0.25, 0.35, 0.90},
};

double edge(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

ShapeDesc random_shape(std::int32_t label, std::int64_t h, std::int64_t w, Rng& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double side = static_cast<double>(std::min(h, w));
  ShapeDesc s;
  s.label = label;
  s.kind = static_cast<ShapeKind>(label);
  switch (s.kind) {
    case ShapeKind::disk: {
      s.radius = std::max(3.0, side * (0.08 + 0.14 * u01(rng)));
      s.cx = static_cast<double>(w) * u01(rng);
      s.cy = static_cast<double>(h) * u01(rng);
      break;
    }
    case ShapeKind::rectangle: {
      const double rw = std::max(6.0, static_cast<double>(w) * (0.15 + 0.30 * u01(rng)));
      const double rh = std::max(6.0, static_cast<double>(h) * (0.15 + 0.30 * u01(rng)));
      s.x0 = std::floor((static_cast<double>(w) - rw) * u01(rng));
      s.y0 = std::floor((static_cast<double>(h) - rh) * u01(rng));
      s.x1 = s.x0 + std::round(rw);
      s.y1 = s.y0 + std::round(rh);
      break;
    }
    case ShapeKind::triangle: {
      const double r = std::max(5.0, side * (0.14 + 0.16 * u01(rng)));
      const double cx = static_cast<double>(w) * (0.15 + 0.7 * u01(rng));
      const double cy = static_cast<double>(h) * (0.15 + 0.7 * u01(rng));
      const double theta = 2.0 * std::numbers::pi * u01(rng);
      for (int v = 0; v < 3; ++v) {
        const double a = theta + 2.0 * std::numbers::pi * v / 3.0 + 0.4 * (u01(rng) - 0.5);
        s.tx[v] = cx + r * std::cos(a);
        s.ty[v] = cy + r * std::sin(a);
      }
      break;
    }
  }
  return s;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(0, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

struct PnmHeader {
  std::int64_t width = 0, height = 0;
  std::size_t payload = 0;  // offset of first payload byte
};

PnmHeader parse_pnm_header(const std::string& bytes, const char* magic) {
  if (bytes.size() < 2 || bytes.compare(0, 2, magic) != 0) {
    throw FormatError(0, std::string("expected magic ") + magic);
  }
  std::size_t pos = 2;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      const char c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* what) -> std::int64_t {
    skip_space();
    const std::size_t start = pos;
    std::int64_t v = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      v = v * 10 + (bytes[pos] - '0');
      if (v > (1 << 24)) throw FormatError(start, std::string("header ") + what + " is too large");
      ++pos;
    }
    if (pos == start) throw FormatError(pos, std::string("malformed header: expected ") + what);
    return v;
  };
  PnmHeader h;
  h.width = read_int("width");
  h.height = read_int("height");
  skip_space();
  const std::size_t maxval_at = pos;
  const std::int64_t maxval = read_int("maxval");
  if (h.width < 1 || h.height < 1) throw FormatError(maxval_at, "malformed header: zero extent");
  if (maxval != 255) throw FormatError(maxval_at, "unsupported maxval " + std::to_string(maxval) + " (need 255)");
  if (pos >= bytes.size()) throw FormatError(pos, "truncated header");
  const char sep = bytes[pos];
  if (sep != ' ' && sep != '\t' && sep != '\n' && sep != '\r') {
    throw FormatError(pos, "malformed header: missing whitespace before payload");
  }
  h.payload = pos + 1;
  return h;
}

std::uint8_t quantize(double v) {
  const double q = std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(q);
}

}  // namespace

bool shape_covers(const ShapeDesc& s, std::int64_t px, std::int64_t py) {
  const double x = static_cast<double>(px) + 0.5;
  const double y = static_cast<double>(py) + 0.5;
  switch (s.kind) {
    case ShapeKind::disk:
      return (x - s.cx) * (x - s.cx) + (y - s.cy) * (y - s.cy) <= s.radius * s.radius;
    case ShapeKind::rectangle:
      return x >= s.x0 && x < s.x1 && y >= s.y0 && y < s.y1;
    case ShapeKind::triangle: {
      const double e0 = edge(s.tx[0], s.ty[0], s.tx[1], s.ty[1], x, y);
      const double e1 = edge(s.tx[1], s.ty[1], s.tx[2], s.ty[2], x, y);
      const double e2 = edge(s.tx[2], s.ty[2], s.tx[0], s.ty[0], x, y);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  }
  return false;
}

void DatasetSpec::validate() const {
  if (num_classes < 2 || num_classes > 4) {
    throw ConfigError("num_classes", "dataset: num_classes must be in [2,4] (background + up to 3 shapes)");
  }
  if (height < 16 || width < 16) throw ConfigError("canvas", "dataset: canvas must be at least 16x16");
  if (min_shapes < 1 || max_shapes < min_shapes) {
    throw ConfigError("shapes", "dataset: need 1 <= min_shapes <= max_shapes");
  }
  if (noise < 0.0) throw ConfigError("noise", "dataset: noise must be non-negative");
}

Sample generate_sample(const DatasetSpec& spec, std::int64_t index) {
  spec.validate();
  if (index < 0) throw ConfigError("index", "dataset: sample index must be non-negative");
  Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::int64_t h = spec.height, w = spec.width;

  Sample s;
  s.id = index;
  s.image = Tensor({3, h, w});
  s.label = IntTensor({h, w}, 0);

  // textured background: base gray plus a low-frequency plane wave per channel
  const double base = 0.35 + 0.2 * u01(rng);
  const double fx = 2.0 * std::numbers::pi * (1.0 + 2.0 * u01(rng)) / static_cast<double>(w);
  const double fy = 2.0 * std::numbers::pi * (1.0 + 2.0 * u01(rng)) / static_cast<double>(h);
  double phase[3];
  for (double& p : phase) p = 2.0 * std::numbers::pi * u01(rng);

  const std::int64_t count =
      spec.min_shapes + static_cast<std::int64_t>(u01(rng) * static_cast<double>(spec.max_shapes - spec.min_shapes + 1));
  std::uniform_int_distribution<std::int32_t> pick(1, static_cast<std::int32_t>(spec.num_classes - 1));
  double colors[4][3];
  for (int c = 1; c < 4; ++c) {
    for (int ch = 0; ch < 3; ++ch) colors[c][ch] = kClassColors[c][ch] + 0.1 * (u01(rng) - 0.5);
  }
  for (std::int64_t i = 0; i < std::min(count, spec.max_shapes); ++i) {
    s.shapes.push_back(random_shape(pick(rng), h, w, rng));
  }

  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      std::int32_t cls = 0;
      for (const ShapeDesc& shape : s.shapes) {
        if (shape_covers(shape, x, y)) cls = shape.label;
      }
      s.label.data[static_cast<std::size_t>(y * w + x)] = cls;
      for (std::int64_t ch = 0; ch < 3; ++ch) {
        double v = cls == 0 ? base + 0.08 * std::sin(fx * static_cast<double>(x) + fy * static_cast<double>(y) + phase[ch])
                            : colors[cls][ch];
        v += spec.noise * noise(rng);
        s.image[(ch * h + y) * w + x] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return s;
}

std::vector<Sample> generate_dataset(const DatasetSpec& spec, std::int64_t count) {
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) out.push_back(generate_sample(spec, i));
  return out;
}

Sample flip_sample(const Sample& sample) {
  Sample out = sample;
  const std::int64_t h = sample.label.shape[0], w = sample.label.shape[1];
  out.image = flip_horizontal(sample.image.reshaped({1, 3, h, w})).reshaped({3, h, w});
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      out.label.data[static_cast<std::size_t>(y * w + x)] = sample.label.data[static_cast<std::size_t>(y * w + w - 1 - x)];
    }
  }
  out.shapes.clear();
  return out;
}

IntTensor resize_labels_nearest(const IntTensor& label, std::int64_t out_h, std::int64_t out_w) {
  if (label.shape.size() != 2) throw ShapeError("rank", "resize_labels_nearest: expected [H,W]");
  const std::int64_t h = label.shape[0], w = label.shape[1];
  IntTensor out({out_h, out_w});
  auto src_index = [](std::int64_t d, std::int64_t in, std::int64_t out) {
    const auto s = static_cast<std::int64_t>(
        std::floor((static_cast<double>(d) + 0.5) * static_cast<double>(in) / static_cast<double>(out)));
    return std::clamp<std::int64_t>(s, 0, in - 1);
  };
  for (std::int64_t y = 0; y < out_h; ++y) {
    const std::int64_t sy = src_index(y, h, out_h);
    for (std::int64_t x = 0; x < out_w; ++x) {
      out.data[static_cast<std::size_t>(y * out_w + x)] = label.data[static_cast<std::size_t>(sy * w + src_index(x, w, out_w))];
    }
  }
  return out;
}

Sample augment(const Sample& sample, std::int64_t crop, Rng& rng, const AugmentOptions& options) {
  if (crop < 16 || crop % 16 != 0) throw ConfigError("crop", "augment: crop must be a positive multiple of 16");
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  bool flip = false;
  if (options.flip) {
    flip = *options.flip;
  } else if (options.random_flip) {
    flip = u01(rng) < 0.5;
  }
  double factor = 1.0;
  if (options.scale) {
    factor = *options.scale;
  } else {
    factor = options.min_scale + (options.max_scale - options.min_scale) * u01(rng);
  }
  if (!(factor > 0.0)) throw ConfigError("scale", "augment: scale must be positive");

  Sample cur = flip ? flip_sample(sample) : sample;
  const std::int64_t h = cur.label.shape[0], w = cur.label.shape[1];
  const std::int64_t sh = std::max<std::int64_t>(1, std::llround(static_cast<double>(h) * factor));
  const std::int64_t sw = std::max<std::int64_t>(1, std::llround(static_cast<double>(w) * factor));
  Tensor image = cur.image;
  IntTensor label = cur.label;
  if (sh != h || sw != w) {
    image = resize_bilinear(cur.image.reshaped({1, 3, h, w}), sh, sw).reshaped({3, sh, sw});
    label = resize_labels_nearest(cur.label, sh, sw);
  }

  // pad bottom/right up to the crop, then pick a window
  const std::int64_t ph = std::max(sh, crop), pw = std::max(sw, crop);
  const std::int64_t oy = ph > crop ? std::uniform_int_distribution<std::int64_t>(0, ph - crop)(rng) : 0;
  const std::int64_t ox = pw > crop ? std::uniform_int_distribution<std::int64_t>(0, pw - crop)(rng) : 0;

  Sample out;
  out.id = sample.id;
  out.image = Tensor({3, crop, crop}, 0.0);
  out.label = IntTensor({crop, crop}, kIgnoreIndex);
  for (std::int64_t y = 0; y < crop; ++y) {
    const std::int64_t sy = y + oy;
    if (sy >= sh) continue;
    for (std::int64_t x = 0; x < crop; ++x) {
      const std::int64_t sx = x + ox;
      if (sx >= sw) continue;
      out.label.data[static_cast<std::size_t>(y * crop + x)] = label.data[static_cast<std::size_t>(sy * sw + sx)];
      for (std::int64_t ch = 0; ch < 3; ++ch) {
        out.image[(ch * crop + y) * crop + x] = image[(ch * sh + sy) * sw + sx];
      }
    }
  }
  return out;
}

Tensor stack_images(const std::vector<const Sample*>& batch) {
  if (batch.empty()) throw ShapeError("batch", "stack_images: empty batch");
  const Shape& s = batch.front()->image.shape();
  Tensor out({static_cast<std::int64_t>(batch.size()), s[0], s[1], s[2]});
  const std::int64_t per = shape_numel(s);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i]->image.shape() != s) throw ShapeError("batch", "stack_images: samples differ in shape");
    std::copy(batch[i]->image.data().begin(), batch[i]->image.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(i) * per);
  }
  return out;
}

IntTensor stack_labels(const std::vector<const Sample*>& batch) {
  if (batch.empty()) throw ShapeError("batch", "stack_labels: empty batch");
  const Shape& s = batch.front()->label.shape;
  IntTensor out({static_cast<std::int64_t>(batch.size()), s[0], s[1]});
  const std::int64_t per = shape_numel(s);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i]->label.shape != s) throw ShapeError("batch", "stack_labels: samples differ in shape");
    std::copy(batch[i]->label.data.begin(), batch[i]->label.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(i) * per);
  }
  return out;
}

std::string encode_ppm(const Tensor& image) {
  if (image.ndim() != 3 || image.dim(0) != 3) throw ShapeError("image", "write_image: expected [3,H,W]");
  const std::int64_t h = image.dim(1), w = image.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + static_cast<std::size_t>(3 * h * w));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      for (std::int64_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(quantize(image[(c * h + y) * w + x])));
    }
  }
  return out;
}

Tensor decode_ppm(const std::string& bytes) {
  const PnmHeader hd = parse_pnm_header(bytes, "P6");
  const std::size_t need = static_cast<std::size_t>(3 * hd.width * hd.height);
  if (bytes.size() - hd.payload < need) {
    throw FormatError(bytes.size(), "truncated payload: expected " + std::to_string(need) + " bytes, found " +
                                        std::to_string(bytes.size() - hd.payload));
  }
  Tensor img({3, hd.height, hd.width});
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + hd.payload);
  for (std::int64_t y = 0; y < hd.height; ++y) {
    for (std::int64_t x = 0; x < hd.width; ++x) {
      for (std::int64_t c = 0; c < 3; ++c) {
        img[(c * hd.height + y) * hd.width + x] = static_cast<double>(p[(y * hd.width + x) * 3 + c]) / 255.0;
      }
    }
  }
  return img;
}

std::string encode_pgm(const IntTensor& mask) {
  if (mask.shape.size() != 2) throw ShapeError("mask", "write_mask: expected [H,W]");
  std::string out = "P5\n" + std::to_string(mask.shape[1]) + " " + std::to_string(mask.shape[0]) + "\n255\n";
  for (auto v : mask.data) {
    if (v < 0 || v > 255) throw ShapeError("mask", "write_mask: value " + std::to_string(v) + " outside [0,255]");
    out.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  }
  return out;
}

IntTensor decode_pgm(const std::string& bytes) {
  const PnmHeader hd = parse_pnm_header(bytes, "P5");
  const std::size_t need = static_cast<std::size_t>(hd.width * hd.height);
  if (bytes.size() - hd.payload < need) {
    throw FormatError(bytes.size(), "truncated payload: expected " + std::to_string(need) + " bytes, found " +
                                        std::to_string(bytes.size() - hd.payload));
  }
  IntTensor m({hd.height, hd.width});
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + hd.payload);
  for (std::size_t i = 0; i < need; ++i) m.data[i] = p[i];
  return m;
}

void write_image(const std::filesystem::path& path, const Tensor& image) { write_file(path, encode_ppm(image)); }
Tensor read_image(const std::filesystem::path& path) { return decode_ppm(read_file(path)); }
void write_mask(const std::filesystem::path& path, const IntTensor& mask) { write_file(path, encode_pgm(mask)); }
IntTensor read_mask(const std::filesystem::path& path) { return decode_pgm(read_file(path)); }

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::string text;
  for (const auto& e : entries) text += std::to_string(e.index) + "\t" + e.image_path + "\t" + e.mask_path + "\n";
  write_file(path, text);
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  std::vector<ManifestEntry> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    if (!line.empty()) {
      const auto t1 = line.find('\t');
      const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
      if (t2 == std::string::npos || line.find('\t', t2 + 1) != std::string::npos) {
        throw FormatError(pos, "manifest line must have exactly three tab-separated fields");
      }
      ManifestEntry e;
      try {
        std::size_t used = 0;
        e.index = std::stoll(line.substr(0, t1), &used);
        if (used != t1) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw FormatError(pos, "manifest index is not an integer");
      }
      e.image_path = line.substr(t1 + 1, t2 - t1 - 1);
      e.mask_path = line.substr(t2 + 1);
      out.push_back(std::move(e));
    }
    pos = end + 1;
  }
  return out;
}

std::vector<Sample> load_dataset(const std::filesystem::path& manifest) {
  const auto dir = manifest.parent_path();
  std::vector<Sample> out;
  for (const auto& e : read_manifest(manifest)) {
    Sample s;
    s.id = e.index;
    s.image = read_image(dir / e.image_path);
    s.label = read_mask(dir / e.mask_path);
    if (s.image.dim(1) != s.label.shape[0] || s.image.dim(2) != s.label.shape[1]) {
      throw ShapeError("mask", "sample " + std::to_string(e.index) + ": image and mask extents differ");
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace pan
