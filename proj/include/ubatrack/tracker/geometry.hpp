#pragma once

// Mapping between frame pixel boxes and normalized search-crop boxes.

#include "ubatrack/tracker/head.hpp"
#include "ubatrack/tracker/image.hpp"

namespace ubatrack {

inline NormBox to_crop_norm(const Box& frame_box, const CropWindow& win) {
  const Box b = win.to_crop(frame_box);
  const double s = double(win.size);
  return {b.cx() / s, b.cy() / s, b.w / s, b.h / s};
}

inline Box from_crop_norm(const NormBox& nb, const CropWindow& win) {
  const double s = double(win.size);
  const double w = nb.w * s, h = nb.h * s;
  return win.to_frame({nb.cx * s - 0.5 * w, nb.cy * s - 0.5 * h, w, h});
}

// Template crop: centred on the box, zero padded at frame borders.
inline Image template_crop(const Image& frame, const Box& box, std::size_t size) {
  return crop(frame, centred_window(frame, box.cx(), box.cy(), size, false));
}

// Search window: centred on the reference box, shifted to stay inside the frame.
inline CropWindow search_window(const Image& frame, const Box& reference, std::size_t size) {
  return centred_window(frame, reference.cx(), reference.cy(), size, true);
}

}  // namespace ubatrack
