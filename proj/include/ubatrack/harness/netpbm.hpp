#pragma once

// Binary PPM (P6) and PGM (P5), 8-bit.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "ubatrack/tracker/image.hpp"

namespace ubatrack {

inline std::vector<unsigned char> encode_netpbm(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ShapeError("netpbm: images need 1 or 3 channels");
  const std::string header = std::string(img.channels == 3 ? "P6" : "P5") + "\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(header.size() + img.pixels.size());
  for (float v : img.pixels) out.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  return out;
}

inline void write_netpbm(const std::string& path, const Image& img) {
  const auto bytes = encode_netpbm(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw Error("write failed for " + path);
}

inline Image decode_netpbm(const std::vector<unsigned char>& data, const std::string& where) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < data.size()) {
      if (data[pos] == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (std::isspace(data[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < data.size() && std::isdigit(data[pos])) {
      v = v * 10 + std::size_t(data[pos++] - '0');
      ++digits;
    }
    if (!digits) throw FormatError(where + ": bad netpbm header (" + what + ")");
    return v;
  };
  if (data.size() < 2 || data[0] != 'P' || (data[1] != '5' && data[1] != '6')) {
    throw FormatError(where + ": not a binary PGM/PPM file");
  }
  const std::size_t channels = data[1] == '6' ? 3 : 1;
  pos = 2;
  const std::size_t w = number("width"), h = number("height"), maxval = number("maxval");
  if (maxval == 0 || maxval > 255) throw FormatError(where + ": only 8-bit netpbm is supported");
  if (pos >= data.size() || !std::isspace(data[pos])) throw FormatError(where + ": bad netpbm header");
  ++pos;
  const std::size_t n = w * h * channels;
  if (data.size() - pos != n) {
    throw FormatError(where + ": expected " + std::to_string(n) + " pixel bytes, found " + std::to_string(data.size() - pos));
  }
  Image img(h, w, channels);
  for (std::size_t i = 0; i < n; ++i) img.pixels[i] = float(data[pos + i]) / float(maxval);
  return img;
}

inline Image read_netpbm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  const std::vector<unsigned char> data{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  return decode_netpbm(data, path);
}

}  // namespace ubatrack
