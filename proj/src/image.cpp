#include "dve/image.hpp"

#include <algorithm>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dve/errors.hpp"

namespace dve {

namespace {

cv::Mat to_mat(const Image& image) {
  cv::Mat mat(image.height, image.width, CV_32FC3);
  std::copy(image.data.begin(), image.data.end(), mat.ptr<float>());
  return mat;
}

Image from_mat(const cv::Mat& mat) {
  Image out(mat.rows, mat.cols);
  cv::Mat cont = mat.isContinuous() ? mat : mat.clone();
  std::copy(cont.ptr<float>(), cont.ptr<float>() + out.data.size(), out.data.begin());
  return out;
}

}  // namespace

Image load_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) {
    throw DataError("cannot read image: " + path.string());
  }
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  cv::Mat f;
  rgb.convertTo(f, CV_32FC3, 1.0 / 255.0);
  return from_mat(f);
}

void save_image(const Image& image, const std::filesystem::path& path) {
  cv::Mat rgb;
  to_mat(image).convertTo(rgb, CV_8UC3, 255.0);
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) {
    throw DataError("cannot write image: " + path.string());
  }
}

Image resize_image(const Image& image, int height, int width) {
  if (image.height == height && image.width == width) {
    return image;
  }
  cv::Mat out;
  cv::resize(to_mat(image), out, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  return from_mat(out);
}

Image crop_image(const Image& image, int top, int left, int height, int width) {
  Image out(height, width);
  for (int y = 0; y < height; ++y) {
    const int sy = top + y;
    if (sy < 0 || sy >= image.height) continue;
    for (int x = 0; x < width; ++x) {
      const int sx = left + x;
      if (sx < 0 || sx >= image.width) continue;
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(sy, sx, c);
    }
  }
  return out;
}

Image affine_resample(const Image& image, double sx, double tx, double sy, double ty, int out_height,
                      int out_width) {
  if (out_height <= 0 || out_width <= 0) throw ShapeError("resample target must be non-empty");
  if (sx == 0.0 || sy == 0.0) throw ShapeError("degenerate resample scale");
  const cv::Matx23d m(sx, 0.0, tx, 0.0, sy, ty);
  cv::Mat out;
  cv::warpAffine(to_mat(image), out, m, cv::Size(out_width, out_height), cv::INTER_LINEAR, cv::BORDER_CONSTANT,
                 cv::Scalar::all(0));
  return from_mat(out);
}

}  // namespace dve
