#pragma once

#include <filesystem>
#include <vector>

namespace dve {

/// Interleaved H x W x 3 float image, values nominally in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), data(static_cast<size_t>(h) * w * 3, fill) {}

  float& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return data[(static_cast<size_t>(y) * width + x) * 3 + c]; }

  bool empty() const { return data.empty(); }
};

// Normalized coordinates: pixel centers span [-1, 1] with (-1,-1) at the
// top-left pixel center.
inline double pixel_to_norm(double p, int extent) {
  return extent > 1 ? 2.0 * p / (extent - 1) - 1.0 : 0.0;
}
inline double norm_to_pixel(double n, int extent) {
  return extent > 1 ? (n + 1.0) * 0.5 * (extent - 1) : 0.0;
}

Image load_image(const std::filesystem::path& path);
void save_image(const Image& image, const std::filesystem::path& path);

/// Bilinear resize (pixel-center aligned, same convention as cv::resize).
Image resize_image(const Image& image, int height, int width);

/// Copies the window [top, top+height) x [left, left+width); pixels outside
/// the source are zero.
Image crop_image(const Image& image, int top, int left, int height, int width);

}  // namespace dve

namespace dve {

/// Resamples with the axis-aligned map dst = (sx * x + tx, sy * y + ty) in
/// pixel-center coordinates (bilinear, zero outside the source).
Image affine_resample(const Image& image, double sx, double tx, double sy, double ty, int out_height,
                      int out_width);

}  // namespace dve
