#include "dsd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "dsd/error.hpp"
#include "dsd/random.hpp"

namespace dsd::data {

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  const std::size_t per = images.numel() / std::max<std::size_t>(size(), 1);
  std::vector<double> out;
  out.reserve(indices.size() * per);
  for (auto i : indices) {
    if (i >= size()) throw DataError("dataset: index " + std::to_string(i) + " out of range " + std::to_string(size()));
    const auto src = images.data().subspan(i * per, per);
    out.insert(out.end(), src.begin(), src.end());
  }
  return Tensor({indices.size(), images.dim(1), images.dim(2), images.dim(3)}, std::move(out));
}

std::vector<std::size_t> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

Tensor Dataset::class_mean(std::size_t label) const {
  const std::size_t per = images.numel() / std::max<std::size_t>(size(), 1);
  std::vector<double> acc(per, 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < size(); ++i) {
    if (labels[i] != label) continue;
    ++count;
    const auto src = images.data().subspan(i * per, per);
    for (std::size_t k = 0; k < per; ++k) acc[k] += src[k];
  }
  if (count == 0) throw DataError("dataset: no samples with label " + std::to_string(label));
  for (auto& v : acc) v /= static_cast<double>(count);
  return Tensor({images.dim(1), images.dim(2), images.dim(3)}, std::move(acc));
}

namespace {

// Coverage test for one shape family at offset (dx, dy) from the centre.
bool covered(std::size_t family, double dx, double dy, double r, double w, double cell, double s) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (family) {
    case 0: return ay < w && ax < r;                                     // horizontal bar
    case 1: return ax < w && ay < r;                                     // vertical bar
    case 2: return dx * dx + dy * dy < r * r;                            // disk
    case 3: {                                                            // ring
      const double d = std::sqrt(dx * dx + dy * dy);
      return d < r && d > 0.55 * r;
    }
    case 4: return (ax < w && ay < r) || (ay < w && ax < r);             // plus
    case 5: return std::abs(ax - ay) < w && std::max(ax, ay) < r;        // diagonal cross
    case 6: {                                                            // checkerboard
      const auto gx = static_cast<long>(std::floor((dx + 4.0 * s) / cell));
      const auto gy = static_cast<long>(std::floor((dy + 4.0 * s) / cell));
      return (gx + gy) % 2 == 0;
    }
    case 7: {                                                            // square outline
      const double m = std::max(ax, ay);
      return m < r && m > r - 1.5 * w;
    }
    case 8: return std::max(ax, ay) < 0.7 * r;                           // filled square
    default: return dy > -r && dy < r && ax < 0.5 * (dy + r);            // triangle
  }
}

}  // namespace

Dataset synth_dataset(std::size_t classes, std::size_t samples_per_class, std::size_t image_size, std::uint64_t seed,
                      std::size_t channels) {
  if (classes < 2) throw ConfigError("synth_dataset: class count must be >= 2");
  if (image_size < 4) throw ConfigError("synth_dataset: image size must be >= 4");
  if (channels == 0) throw ConfigError("synth_dataset: channels must be >= 1");
  const std::size_t n = classes * samples_per_class, px = image_size * image_size;
  const double s = static_cast<double>(image_size);
  std::vector<double> pixels(n * channels * px);
  Dataset out;
  out.classes = classes;
  out.labels.reserve(n);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t k = 0; k < classes; ++k) {
    const std::size_t family = k % kShapeFamilies;
    const double variant = 1.0 + 0.25 * static_cast<double>(k / kShapeFamilies);
    for (std::size_t j = 0; j < samples_per_class; ++j) {
      auto rng = keyed_rng({seed, k, j});
      const double cx = 0.5 * s + s * (unit(rng) - 0.5) / 4.0;
      const double cy = 0.5 * s + s * (unit(rng) - 0.5) / 4.0;
      const double r = s * (0.26 + 0.1 * unit(rng)) * std::min(variant, 1.6);
      const double w = std::max(1.0, s / 10.0);
      const double cell = s / 4.0 / variant;
      const double level = 0.6 + 0.4 * unit(rng);
      const std::size_t idx = k * samples_per_class + j;
      for (std::size_t y = 0; y < image_size; ++y) {
        for (std::size_t x = 0; x < image_size; ++x) {
          const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
          const double noise = 0.05 * unit(rng);
          const double v = std::clamp((covered(family, dx, dy, r, w, cell, s) ? level : 0.0) + noise, 0.0, 1.0);
          for (std::size_t c = 0; c < channels; ++c) pixels[(idx * channels + c) * px + y * image_size + x] = v;
        }
      }
      out.labels.push_back(k);
    }
  }
  out.images = Tensor({n, channels, image_size, image_size}, std::move(pixels));
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

// Separable area weights mapping n source pixels onto m target pixels.
std::vector<std::vector<std::pair<std::size_t, double>>> area_weights(std::size_t n, std::size_t m) {
  std::vector<std::vector<std::pair<std::size_t, double>>> w(m);
  const double scale = static_cast<double>(n) / static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double lo = static_cast<double>(i) * scale, hi = lo + scale;
    for (auto j = static_cast<std::size_t>(std::floor(lo)); j < n && static_cast<double>(j) < hi; ++j) {
      const double overlap = std::min(hi, static_cast<double>(j + 1)) - std::max(lo, static_cast<double>(j));
      if (overlap > 0.0) w[i].emplace_back(j, overlap / scale);
    }
  }
  return w;
}

}  // namespace

Tensor resize_image(const Tensor& image, std::size_t size) {
  if (image.rank() != 3 || image.dim(1) != image.dim(2))
    throw ShapeError("resize_image: expected [channels, n, n], got " + to_string(image.shape()));
  const std::size_t c = image.dim(0), n = image.dim(1);
  if (n == size) return image.detached();
  std::vector<double> out(c * size * size, 0.0);
  const auto src = image.data();
  if (n < size) {
    const std::size_t off = (size - n) / 2;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) out[(ch * size + y + off) * size + x + off] = src[(ch * n + y) * n + x];
  } else {
    const auto w = area_weights(n, size);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          double s = 0.0;
          for (auto [sy, wy] : w[y])
            for (auto [sx, wx] : w[x]) s += wy * wx * src[(ch * n + sy) * n + sx];
          out[(ch * size + y) * size + x] = s;
        }
  }
  return Tensor({c, size, size}, std::move(out));
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t image_size) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (img.size() < 16) throw DataError("idx: truncated image header in " + images_path.string());
  if (lab.size() < 8) throw DataError("idx: truncated label header in " + labels_path.string());
  if (be32(img, 0) != kIdxImageMagic)
    throw DataError("idx: bad magic in " + images_path.string() + " (expected 0x00000803)");
  if (be32(lab, 0) != kIdxLabelMagic)
    throw DataError("idx: bad magic in " + labels_path.string() + " (expected 0x00000801)");
  const std::size_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
  const std::size_t nl = be32(lab, 4);
  if (n != nl) {
    throw DataError("idx: count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
  }
  if (rows != cols || rows == 0) throw DataError("idx: only square images are supported");
  if (img.size() < 16 + n * rows * cols) throw DataError("idx: truncated image payload in " + images_path.string());
  if (lab.size() < 8 + n) throw DataError("idx: truncated label payload in " + labels_path.string());

  const std::size_t size = image_size == 0 ? rows : image_size;
  Dataset out;
  std::vector<double> pixels;
  pixels.reserve(n * size * size);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> one(rows * cols);
    for (std::size_t k = 0; k < one.size(); ++k) one[k] = img[16 + i * rows * cols + k] / 255.0;
    const Tensor r = resize_image(Tensor({1, rows, cols}, std::move(one)), size);
    pixels.insert(pixels.end(), r.data().begin(), r.data().end());
    out.labels.push_back(lab[8 + i]);
    out.classes = std::max<std::size_t>(out.classes, lab[8 + i] + 1);
  }
  out.images = Tensor({n, 1, size, size}, std::move(pixels));
  return out;
}

void write_idx(const Dataset& dataset, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
  if (dataset.channels() != 1) throw DataError("idx: only single-channel datasets can be written");
  const std::size_t n = dataset.size(), s = dataset.image_size();
  std::ofstream img(images_path, std::ios::binary), lab(labels_path, std::ios::binary);
  if (!img) throw IoError("cannot write " + images_path.string());
  if (!lab) throw IoError("cannot write " + labels_path.string());
  put_be32(img, kIdxImageMagic);
  put_be32(img, static_cast<std::uint32_t>(n));
  put_be32(img, static_cast<std::uint32_t>(s));
  put_be32(img, static_cast<std::uint32_t>(s));
  std::vector<char> bytes(dataset.images.numel());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = std::floor(std::clamp(dataset.images[i], 0.0, 1.0) * 255.0 + 0.5);
    bytes[i] = static_cast<char>(static_cast<unsigned char>(v));
  }
  img.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  put_be32(lab, kIdxLabelMagic);
  put_be32(lab, static_cast<std::uint32_t>(n));
  for (auto l : dataset.labels) {
    if (l > 255) throw DataError("idx: label " + std::to_string(l) + " does not fit a byte");
    lab.put(static_cast<char>(l));
  }
  if (!img || !lab) throw IoError("write failed for " + images_path.string());
}

}  // namespace dsd::data
