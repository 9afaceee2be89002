#pragma once

// Frames, boxes, crops and patch extraction.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ubatrack/numerics/tensor.hpp"

namespace ubatrack {

// Interleaved HWC, values in [0, 1].
struct Image {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

// Pixel box, top-left origin.
struct Box {
  double x = 0, y = 0, w = 0, h = 0;

  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  double area() const { return w * h; }
  friend bool operator==(const Box&, const Box&) = default;
};

struct GroundTruth {
  Box box;
  bool present = true;
};

// Identical boxes score exactly 1; (x + w) - x need not round back to w.
inline double iou(const Box& a, const Box& b) {
  if (a == b) return a.area() > 0 ? 1.0 : 0.0;
  const double iw = std::clamp(std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x), 0.0, std::min(a.w, b.w));
  const double ih = std::clamp(std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y), 0.0, std::min(a.h, b.h));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline double giou(const Box& a, const Box& b) {
  if (!(a.w > 0 && a.h > 0 && b.w > 0 && b.h > 0)) throw DomainError("giou: boxes need positive extents");
  const double iw = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double ih = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  const double ew = std::max(a.x + a.w, b.x + b.w) - std::min(a.x, b.x);
  const double eh = std::max(a.y + a.h, b.y + b.h) - std::min(a.y, b.y);
  const double enc = ew * eh;
  return inter / uni - (enc - uni) / enc;
}

// A square window of a frame in frame pixel coordinates.
struct CropWindow {
  double x0 = 0, y0 = 0;
  std::size_t size = 0;

  Box to_frame(const Box& in_crop) const { return {in_crop.x + x0, in_crop.y + y0, in_crop.w, in_crop.h}; }
  Box to_crop(const Box& in_frame) const { return {in_frame.x - x0, in_frame.y - y0, in_frame.w, in_frame.h}; }
};

// Window of `size` centred on (cx, cy). With keep_inside the window is shifted
// to stay within the frame when the frame is large enough.
inline CropWindow centred_window(const Image& img, double cx, double cy, std::size_t size, bool keep_inside) {
  double x0 = std::round(cx - 0.5 * double(size));
  double y0 = std::round(cy - 0.5 * double(size));
  if (keep_inside) {
    if (img.width >= size) x0 = std::clamp(x0, 0.0, double(img.width - size));
    if (img.height >= size) y0 = std::clamp(y0, 0.0, double(img.height - size));
  }
  return {x0, y0, size};
}

// Integer-offset crop, zero outside the frame; output has `out_channels`
// (a single input channel is replicated).
inline Image crop(const Image& img, const CropWindow& win, std::size_t out_channels = 3) {
  if (img.channels != 1 && img.channels != out_channels) {
    throw ShapeError("crop: cannot map " + std::to_string(img.channels) + " channels to " +
                     std::to_string(out_channels));
  }
  Image out(win.size, win.size, out_channels);
  const long ox = static_cast<long>(win.x0), oy = static_cast<long>(win.y0);
  for (std::size_t y = 0; y < win.size; ++y) {
    const long sy = oy + long(y);
    if (sy < 0 || sy >= long(img.height)) continue;
    for (std::size_t x = 0; x < win.size; ++x) {
      const long sx = ox + long(x);
      if (sx < 0 || sx >= long(img.width)) continue;
      for (std::size_t c = 0; c < out_channels; ++c)
        out.at(y, x, c) = img.at(std::size_t(sy), std::size_t(sx), img.channels == 1 ? 0 : c);
    }
  }
  return out;
}

// Non-overlapping p x p patches in raster order, each flattened (py, px, c).
template <class T>
void patchify_into(const Image& img, std::size_t p, T* dst) {
  if (p == 0 || img.height % p != 0 || img.width % p != 0) {
    throw ShapeError("patchify: " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " is not divisible by patch " + std::to_string(p));
  }
  const std::size_t C = img.channels;
  for (std::size_t gy = 0; gy < img.height / p; ++gy)
    for (std::size_t gx = 0; gx < img.width / p; ++gx)
      for (std::size_t py = 0; py < p; ++py)
        for (std::size_t px = 0; px < p; ++px)
          for (std::size_t c = 0; c < C; ++c) *dst++ = static_cast<T>(img.at(gy * p + py, gx * p + px, c));
}

inline std::size_t patch_count(const Image& img, std::size_t p) { return (img.height / p) * (img.width / p); }

}  // namespace ubatrack
