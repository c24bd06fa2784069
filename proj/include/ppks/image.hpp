#pragma once

// RGB float images and the pixel-level transforms shared by augmentation,
// synthetic data generation and descriptor perturbations.

#include <array>
#include <filesystem>
#include <optional>
#include <vector>

namespace ppks {

/// Interleaved RGB, row-major, nominal range [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int w, int h, float fill = 0.0f);

  bool empty() const { return pixels.empty(); }
  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

  friend bool operator==(const Image&, const Image&) = default;
};

struct Rect {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open [x0, x1) × [y0, y1)
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool empty() const { return x1 <= x0 || y1 <= y0; }
  bool contains(const Rect& other) const {
    return other.x0 >= x0 && other.y0 >= y0 && other.x1 <= x1 && other.y1 <= y1;
  }
  friend bool operator==(const Rect&, const Rect&) = default;
};

Image read_png(const std::filesystem::path& path);
/// Writes 8-bit RGB; values are clamped and rounded.
void write_png(const std::filesystem::path& path, const Image& image);
/// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
Image quantize(const Image& image);

Image crop(const Image& image, const Rect& rect);
Image hflip(const Image& image);
Image vflip(const Image& image);

// Colour. Hue in degrees [0, 360), saturation and value in [0, 1].
std::array<float, 3> rgb_to_hsv(float r, float g, float b);
std::array<float, 3> hsv_to_rgb(float h, float s, float v);

Image rotate_hue(const Image& image, float degrees);
Image scale_saturation(const Image& image, float factor);
Image shift_brightness(const Image& image, float delta);
/// Per-channel contrast scaling about the channel mean.
Image scale_contrast(const Image& image, float factor);
/// Separable Gaussian blur with reflected borders; sigma 0 returns a copy.
Image gaussian_blur(const Image& image, float sigma);

// Geometry.
struct Point {
  double x = 0.0, y = 0.0;
};
using Homography = std::array<double, 9>;  // row-major 3×3, h[8] = 1

/// Solves the projective map sending each src[i] to dst[i] from the 8×8
/// linear system; empty when the system is singular.
std::optional<Homography> solve_homography(const std::array<Point, 4>& src, const std::array<Point, 4>& dst);
Point apply_homography(const Homography& h, Point p);

/// Output pixel (x, y) samples the source at source_from_output(x, y) with
/// bilinear interpolation and reflected out-of-range coordinates.
Image warp_perspective(const Image& image, const Homography& source_from_output);

/// Bilinear sample of one channel at a continuous pixel-index coordinate,
/// reflecting outside [0, size-1].
float sample_bilinear_reflect(const Image& image, double x, double y, int channel);

}  // namespace ppks
