#include "ks/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

#include "ks/rng.hpp"

namespace ks {

namespace {

constexpr char kMagic[] = "KSIMG1";
constexpr std::size_t kMagicLen = 6;
constexpr std::size_t kHeaderLen = kMagicLen + 4 * 4;

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

std::uint32_t get_u32(const std::string& bytes, std::size_t at) {
  std::uint32_t v;
  std::memcpy(&v, bytes.data() + at, 4);
  return v;
}

}  // namespace

std::string encode_images(std::span<const ImageU8> images) {
  static_assert(std::endian::native == std::endian::little);
  std::string out(kMagic, kMagicLen);
  const int h = images.empty() ? 0 : images.front().height;
  const int w = images.empty() ? 0 : images.front().width;
  const int c = images.empty() ? 3 : images.front().channels;
  put_u32(out, static_cast<std::uint32_t>(images.size()));
  put_u32(out, static_cast<std::uint32_t>(h));
  put_u32(out, static_cast<std::uint32_t>(w));
  put_u32(out, static_cast<std::uint32_t>(c));
  for (const auto& img : images) {
    if (img.height != h || img.width != w || img.channels != c)
      throw DimensionError("all images in a container must share dimensions");
    out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  }
  return out;
}

std::vector<ImageU8> decode_images(const std::string& bytes) {
  if (bytes.size() < kHeaderLen || bytes.compare(0, kMagicLen, kMagic) != 0)
    throw FormatError("bad image container header (expected magic KSIMG1)");
  const auto count = get_u32(bytes, kMagicLen);
  const auto h = get_u32(bytes, kMagicLen + 4);
  const auto w = get_u32(bytes, kMagicLen + 8);
  const auto c = get_u32(bytes, kMagicLen + 12);
  const std::size_t per = std::size_t(h) * w * c;
  const std::size_t expected = per * count;
  const std::size_t actual = bytes.size() - kHeaderLen;
  if (actual != expected)
    throw FormatError("image container body has " + std::to_string(actual) + " bytes, expected " +
                      std::to_string(expected));
  std::vector<ImageU8> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    ImageU8 img(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
    std::memcpy(img.pixels.data(), bytes.data() + kHeaderLen + i * per, per);
    out.push_back(std::move(img));
  }
  return out;
}

void save_dataset(const std::filesystem::path& dir, const LabeledImages& data) {
  if (data.images.size() != data.labels.size()) throw LabelError("label count differs from image count");
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / kImagesFile, std::ios::binary);
    if (!out) throw FormatError("cannot write " + (dir / kImagesFile).string());
    const auto bytes = encode_images(data.images);
    out.write(bytes.data(), std::streamsize(bytes.size()));
  }
  std::ofstream labels(dir / kLabelsFile);
  if (!labels) throw FormatError("cannot write " + (dir / kLabelsFile).string());
  for (int y : data.labels) labels << y << '\n';
}

LabeledImages load_dataset(const std::filesystem::path& dir, int num_classes) {
  std::ifstream in(dir / kImagesFile, std::ios::binary);
  if (!in) throw FormatError("cannot open " + (dir / kImagesFile).string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  LabeledImages data;
  try {
    data.images = decode_images(bytes);
  } catch (const FormatError& e) {
    throw FormatError((dir / kImagesFile).string() + ": " + e.what());
  }

  std::ifstream lab(dir / kLabelsFile);
  if (!lab) throw LabelError("cannot open " + (dir / kLabelsFile).string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lab, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    int y;
    if (!(ls >> y)) throw LabelError(std::string(kLabelsFile) + ":" + std::to_string(lineno) + ": not an integer");
    if (y < 0 || (num_classes > 0 && y >= num_classes))
      throw LabelError(std::string(kLabelsFile) + ":" + std::to_string(lineno) + ": label " + std::to_string(y) +
                       " out of range");
    data.labels.push_back(y);
  }
  if (data.labels.size() != data.images.size())
    throw LabelError("found " + std::to_string(data.labels.size()) + " labels for " +
                     std::to_string(data.images.size()) + " images");
  return data;
}

ImageU8 to_image(const Tensor<float>& batch, Index index) {
  ImageU8 img(int(batch.dim(2)), int(batch.dim(3)), int(batch.dim(1)));
  const Index per = Index(img.pixels.size());
  for (Index j = 0; j < per; ++j) {
    const float v = std::clamp(batch[index * per + j], 0.0f, 1.0f);
    img.pixels[std::size_t(j)] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return img;
}

ImageU8 quantize_toward(const Tensor<float>& perturbed, const Tensor<float>& original, Index index) {
  ImageU8 img(int(original.dim(2)), int(original.dim(3)), int(original.dim(1)));
  const Index per = Index(img.pixels.size());
  for (Index j = 0; j < per; ++j) {
    const double base = std::round(double(original[index * per + j]) * 255.0);
    const double delta = std::trunc(double(perturbed[index * per + j]) * 255.0 - base);
    img.pixels[std::size_t(j)] = static_cast<std::uint8_t>(std::clamp(base + delta, 0.0, 255.0));
  }
  return img;
}

namespace {

/// Signed-distance-like membership test of shape `kind` at offset (dx, dy)
/// from the center, with radius `rad`.
bool inside(int kind, double dx, double dy, double rad) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  const double r2 = dx * dx + dy * dy;
  switch (kind) {
    case 0: return r2 <= rad * rad;                                        // disk
    case 1: return ax <= rad * 0.85 && ay <= rad * 0.85;                    // square
    case 2: return dy <= rad * 0.8 && dy >= -rad && ax <= (dy + rad) * 0.55;  // triangle
    case 3: return (ax <= rad * 0.3 && ay <= rad) || (ay <= rad * 0.3 && ax <= rad);  // plus
    case 4: return r2 <= rad * rad && r2 >= (rad * 0.55) * (rad * 0.55);     // ring
    case 5: return ax <= rad && ay <= rad && int(std::floor((dy + rad) / 2.0)) % 2 == 0;  // h-stripes
    case 6: return ax <= rad && ay <= rad && int(std::floor((dx + rad) / 2.0)) % 2 == 0;  // v-stripes
    case 7: return ax <= rad && ay <= rad && (std::abs(dx - dy) <= rad * 0.28 || std::abs(dx + dy) <= rad * 0.28);  // X
    case 8: return ax + ay <= rad;                                          // diamond
    default: return ax <= rad && ay <= rad && ((int(std::floor((dx + rad) / 3.0)) + int(std::floor((dy + rad) / 3.0))) % 2 == 0);  // checker
  }
}

}  // namespace

LabeledImages synthesize_dataset(std::size_t count, int side, std::uint64_t seed, int num_classes) {
  if (num_classes < 2 || num_classes > 10) throw ConfigError("synthetic dataset supports 2..10 classes");
  if (side < 8) throw ConfigError("synthetic images need side >= 8");
  SplitMix64 rng(seed);
  LabeledImages data;
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = int(i % std::size_t(num_classes));
  for (std::size_t i = count; i > 1; --i) std::swap(labels[i - 1], labels[rng.below(i)]);

  // Every pixel is one of two colors of equal luminance. The labeled shape
  // is a pixel checker; a distractor shape of another class and the
  // background are 1-pixel stripes of opposite orientations. Masks are
  // sampled on aligned 2x2 cells, so every even-sized block holds equal
  // counts of both colors. Luminance carries a class-independent texture.
  const double e1[3] = {1 / std::sqrt(2.0), -1 / std::sqrt(2.0), 0};
  const double e2[3] = {1 / std::sqrt(6.0), 1 / std::sqrt(6.0), -2 / std::sqrt(6.0)};
  auto chroma = [&](double angle, double amp, double* out) {
    for (int c = 0; c < 3; ++c) out[c] = amp * (std::cos(angle) * e1[c] + std::sin(angle) * e2[c]);
  };
  struct Placed {
    int kind;
    double rad, cx, cy;
  };
  auto place = [&](int kind) {
    const double rad = side * rng.uniform(0.17, 0.24);
    return Placed{kind, rad, rng.uniform(rad, side - rad), rng.uniform(rad, side - rad)};
  };
  for (std::size_t n = 0; n < count; ++n) {
    ImageU8 img(side, side, 3);
    const double lum = rng.uniform(0.38, 0.62);
    const double freq = rng.uniform(0.2, 0.9);
    const double angle = rng.uniform(0.0, std::numbers::pi);
    const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
    const double tex_amp = rng.uniform(0.04, 0.12);
    double bg[3], fg[3];
    const double bg_hue = rng.uniform(0.0, 2 * std::numbers::pi);
    chroma(bg_hue, rng.uniform(0.0, 0.08), bg);
    chroma(bg_hue + rng.uniform(0.6, 2 * std::numbers::pi - 0.6), rng.uniform(0.15, 0.25), fg);
    const int parity = int(rng.below(2));
    const bool vertical = rng.below(2) == 1;

    const Placed target = place(labels[n]);
    Placed other = place(int((labels[n] + 1 + rng.below(std::uint64_t(num_classes - 1))) % num_classes));
    for (int tries = 0; tries < 50; ++tries) {
      if (std::hypot(other.cx - target.cx, other.cy - target.cy) >= 0.9 * (other.rad + target.rad)) break;
      other = place(other.kind);
    }

    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const double tex = tex_amp * std::sin(freq * (x * std::cos(angle) + y * std::sin(angle)) + phase);
        int cell = vertical ? x : y;
        if (inside(other.kind, (x | 1) - other.cx, (y | 1) - other.cy, other.rad)) cell = vertical ? y : x;
        if (inside(target.kind, (x | 1) - target.cx, (y | 1) - target.cy, target.rad)) cell = x + y;
        const double sign = ((cell + parity) % 2 == 0) ? 1.0 : -1.0;
        for (int c = 0; c < 3; ++c) {
          const double v = lum + tex + bg[c] + sign * fg[c] + 0.03 * rng.normal();
          img.at(c, y, x) = static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
        }
      }
    data.images.push_back(std::move(img));
  }
  data.labels = std::move(labels);
  return data;
}

LabeledImages subset(const LabeledImages& data, std::span<const std::size_t> indices) {
  LabeledImages out;
  for (auto i : indices) {
    out.images.push_back(data.images.at(i));
    out.labels.push_back(data.labels.at(i));
  }
  return out;
}

}  // namespace ks
