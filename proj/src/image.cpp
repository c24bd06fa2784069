#include "ppks/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>

#include "ppks/error.hpp"

namespace ppks {

Image::Image(int w, int h, float fill)
    : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {
  if (w <= 0 || h <= 0) throw ValueError("Image: extents must be positive");
}

Image read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buffer(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  Image out(static_cast<int>(img.width), static_cast<int>(img.height));
  for (std::size_t i = 0; i < buffer.size(); ++i) out.pixels[i] = static_cast<float>(buffer[i]) / 255.0f;
  return out;
}

namespace {

unsigned char to_byte(float v) {
  const float clamped = std::clamp(v, 0.0f, 1.0f);
  return static_cast<unsigned char>(std::lround(clamped * 255.0f));
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.empty()) throw ValueError("write_png: empty image");
  std::vector<unsigned char> buffer(image.pixels.size());
  std::transform(image.pixels.begin(), image.pixels.end(), buffer.begin(), to_byte);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!png_image_write_to_file(&img, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

Image quantize(const Image& image) {
  Image out = image;
  for (float& v : out.pixels) v = static_cast<float>(to_byte(v)) / 255.0f;
  return out;
}

Image crop(const Image& image, const Rect& rect) {
  if (rect.empty() || rect.x0 < 0 || rect.y0 < 0 || rect.x1 > image.width || rect.y1 > image.height) {
    throw ValueError("crop: rectangle outside image");
  }
  Image out(rect.width(), rect.height());
  for (int y = 0; y < out.height; ++y) {
    const float* src = &image.pixels[(static_cast<std::size_t>(rect.y0 + y) * image.width + rect.x0) * 3];
    std::copy(src, src + out.width * 3, &out.pixels[static_cast<std::size_t>(y) * out.width * 3]);
  }
  return out;
}

Image hflip(const Image& image) {
  Image out = image;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(y, image.width - 1 - x, c);
  return out;
}

Image vflip(const Image& image) {
  Image out = image;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(image.height - 1 - y, x, c);
  return out;
}

std::array<float, 3> rgb_to_hsv(float r, float g, float b) {
  const float mx = std::max({r, g, b});
  const float mn = std::min({r, g, b});
  const float delta = mx - mn;
  float h = 0.0f;
  if (delta > 0.0f) {
    if (mx == r) {
      h = 60.0f * std::fmod((g - b) / delta, 6.0f);
    } else if (mx == g) {
      h = 60.0f * ((b - r) / delta + 2.0f);
    } else {
      h = 60.0f * ((r - g) / delta + 4.0f);
    }
    if (h < 0.0f) h += 360.0f;
  }
  const float s = mx > 0.0f ? delta / mx : 0.0f;
  return {h, s, mx};
}

std::array<float, 3> hsv_to_rgb(float h, float s, float v) {
  if (s <= 0.0f) return {v, v, v};
  h = std::fmod(h, 360.0f);
  if (h < 0.0f) h += 360.0f;
  const float c = v * s;
  const float hp = h / 60.0f;
  const float x = c * (1.0f - std::fabs(std::fmod(hp, 2.0f) - 1.0f));
  float r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const float m = v - c;
  return {r + m, g + m, b + m};
}

namespace {

template <typename Fn>
Image map_hsv(const Image& image, Fn fn) {
  Image out = image;
  for (std::size_t i = 0; i < image.pixels.size(); i += 3) {
    auto hsv = rgb_to_hsv(image.pixels[i], image.pixels[i + 1], image.pixels[i + 2]);
    fn(hsv);
    auto rgb = hsv_to_rgb(hsv[0], hsv[1], hsv[2]);
    for (int c = 0; c < 3; ++c) out.pixels[i + c] = rgb[c];
  }
  return out;
}

int reflect_index(long i, int n) {
  if (n == 1) return 0;
  const long period = 2L * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<int>(i < n ? i : period - i);
}

double reflect_coord(double u, int n) {
  if (n == 1) return 0.0;
  const double period = 2.0 * (n - 1);
  u = std::fmod(u, period);
  if (u < 0.0) u += period;
  return u <= n - 1 ? u : period - u;
}

}  // namespace

Image rotate_hue(const Image& image, float degrees) {
  if (degrees == 0.0f) return image;
  return map_hsv(image, [degrees](std::array<float, 3>& hsv) { hsv[0] += degrees; });
}

Image scale_saturation(const Image& image, float factor) {
  if (factor == 1.0f) return image;
  return map_hsv(image, [factor](std::array<float, 3>& hsv) { hsv[1] = std::clamp(hsv[1] * factor, 0.0f, 1.0f); });
}

Image shift_brightness(const Image& image, float delta) {
  Image out = image;
  if (delta == 0.0f) return out;
  for (float& v : out.pixels) v = std::clamp(v + delta, 0.0f, 1.0f);
  return out;
}

Image scale_contrast(const Image& image, float factor) {
  Image out = image;
  if (factor == 1.0f) return out;
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::size_t i = c; i < image.pixels.size(); i += 3) mean += image.pixels[i];
    mean /= static_cast<double>(image.pixels.size() / 3);
    for (std::size_t i = c; i < image.pixels.size(); i += 3) {
      out.pixels[i] = std::clamp(static_cast<float>(mean + factor * (image.pixels[i] - mean)), 0.0f, 1.0f);
    }
  }
  return out;
}

Image gaussian_blur(const Image& image, float sigma) {
  if (sigma <= 0.0f) return image;
  const int radius = static_cast<int>(std::ceil(3.0f * sigma));
  std::vector<float> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = static_cast<float>(std::exp(-0.5 * (i * i) / (static_cast<double>(sigma) * sigma)));
    total += kernel[i + radius];
  }
  for (float& k : kernel) k = static_cast<float>(k / total);

  Image tmp = image, out = image;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) {
        float acc = 0.0f;
        for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * image.at(y, reflect_index(x + i, image.width), c);
        tmp.at(y, x, c) = acc;
      }
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) {
        float acc = 0.0f;
        for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * tmp.at(reflect_index(y + i, image.height), x, c);
        out.at(y, x, c) = acc;
      }
  return out;
}

std::optional<Homography> solve_homography(const std::array<Point, 4>& src, const std::array<Point, 4>& dst) {
  // Unknowns h0..h7 with h8 = 1:
  //   u = (h0 x + h1 y + h2) / (h6 x + h7 y + 1), v = (h3 x + h4 y + h5) / (h6 x + h7 y + 1)
  double a[8][9] = {};
  for (int i = 0; i < 4; ++i) {
    const double x = src[i].x, y = src[i].y, u = dst[i].x, v = dst[i].y;
    double* r0 = a[2 * i];
    double* r1 = a[2 * i + 1];
    r0[0] = x, r0[1] = y, r0[2] = 1, r0[6] = -u * x, r0[7] = -u * y, r0[8] = u;
    r1[3] = x, r1[4] = y, r1[5] = 1, r1[6] = -v * x, r1[7] = -v * y, r1[8] = v;
  }
  double scale = 0.0;
  for (auto& row : a)
    for (int j = 0; j < 8; ++j) scale = std::max(scale, std::fabs(row[j]));
  if (scale == 0.0) return std::nullopt;
  for (int col = 0; col < 8; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 8; ++r) {
      if (std::fabs(a[r][col]) > std::fabs(a[pivot][col])) pivot = r;
    }
    if (std::fabs(a[pivot][col]) < 1e-12 * scale) return std::nullopt;
    if (pivot != col) std::swap(a[pivot], a[col]);
    for (int r = 0; r < 8; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      if (f == 0.0) continue;
      for (int j = col; j < 9; ++j) a[r][j] -= f * a[col][j];
    }
  }
  Homography h{};
  for (int i = 0; i < 8; ++i) h[i] = a[i][8] / a[i][i];
  h[8] = 1.0;
  return h;
}

Point apply_homography(const Homography& h, Point p) {
  const double w = h[6] * p.x + h[7] * p.y + h[8];
  return {(h[0] * p.x + h[1] * p.y + h[2]) / w, (h[3] * p.x + h[4] * p.y + h[5]) / w};
}

float sample_bilinear_reflect(const Image& image, double x, double y, int channel) {
  x = reflect_coord(x, image.width);
  y = reflect_coord(y, image.height);
  const int x0 = std::min(static_cast<int>(std::floor(x)), image.width - 1);
  const int y0 = std::min(static_cast<int>(std::floor(y)), image.height - 1);
  const int x1 = std::min(x0 + 1, image.width - 1);
  const int y1 = std::min(y0 + 1, image.height - 1);
  const double fx = x - x0, fy = y - y0;
  const double top = (1.0 - fx) * image.at(y0, x0, channel) + fx * image.at(y0, x1, channel);
  const double bottom = (1.0 - fx) * image.at(y1, x0, channel) + fx * image.at(y1, x1, channel);
  return static_cast<float>((1.0 - fy) * top + fy * bottom);
}

Image warp_perspective(const Image& image, const Homography& source_from_output) {
  Image out(image.width, image.height);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const Point s = apply_homography(source_from_output, {static_cast<double>(x), static_cast<double>(y)});
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = sample_bilinear_reflect(image, s.x, s.y, c);
    }
  return out;
}

}  // namespace ppks
