#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "aligngen/diffcore/tensor.hpp"
#include "aligngen/errors.hpp"

namespace aligngen {

// H x W x 3 image, row-major, channels interleaved, nominal range [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {
    if (h <= 0 || w <= 0) throw ArgumentError("Image: dims must be positive");
  }

  float& at(int r, int c, int ch) { return pixels[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }
  float at(int r, int c, int ch) const {
    return pixels[(static_cast<std::size_t>(r) * width + c) * 3 + ch];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

inline Image black_image(int height, int width) { return Image(height, width, 0.0f); }

inline std::uint8_t quantize8(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// Binary PPM (P6, maxval 255).
inline void write_ppm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("ppm: cannot write " + path);
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<char> bytes(img.pixels.size());
  std::transform(img.pixels.begin(), img.pixels.end(), bytes.begin(),
                 [](float v) { return static_cast<char>(quantize8(v)); });
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("ppm: write failed for " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("ppm: cannot open " + path);
  auto next_token = [&]() {
    std::string tok;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(c);
    }
    return tok;
  };
  if (next_token() != "P6") throw DataError("ppm: " + path + " is not a binary P6 file");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_token());
    h = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw DataError("ppm: malformed header in " + path);
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw DataError("ppm: unsupported header in " + path);
  Image img(h, w);
  std::vector<unsigned char> bytes(img.pixels.size());
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw DataError("ppm: truncated pixel data in " + path);
  }
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0f;
  return img;
}

// Non-overlapping p x p patches -> [num_patches, p*p*3], raster order over
// the patch grid; inside a patch rows, then columns, then channels.
template <typename T>
ad::Tensor<T> patchify(const Image& img, int p) {
  if (p <= 0 || img.height % p != 0 || img.width % p != 0) {
    throw ShapeError("patchify: image " + std::to_string(img.height) + "x" +
                     std::to_string(img.width) + " not divisible by patch " + std::to_string(p));
  }
  const int gh = img.height / p, gw = img.width / p;
  const std::size_t pd = static_cast<std::size_t>(p) * p * 3;
  ad::Tensor<T> out({static_cast<std::size_t>(gh) * gw, pd});
  for (int gr = 0; gr < gh; ++gr)
    for (int gc = 0; gc < gw; ++gc) {
      T* dst = out.raw() + (static_cast<std::size_t>(gr) * gw + gc) * pd;
      for (int r = 0; r < p; ++r)
        for (int c = 0; c < p; ++c)
          for (int ch = 0; ch < 3; ++ch) *dst++ = static_cast<T>(img.at(gr * p + r, gc * p + c, ch));
    }
  return out;
}

template <typename T>
Image unpatchify(const ad::Tensor<T>& patches, int height, int width, int p) {
  const int gh = height / p, gw = width / p;
  const std::size_t pd = static_cast<std::size_t>(p) * p * 3;
  if (patches.rows() != static_cast<std::size_t>(gh) * gw || patches.cols() != pd) {
    throw ShapeError("unpatchify: patches " + ad::shape_str(patches.dims()) +
                     " do not match image grid");
  }
  Image img(height, width);
  for (int gr = 0; gr < gh; ++gr)
    for (int gc = 0; gc < gw; ++gc) {
      const T* src = patches.raw() + (static_cast<std::size_t>(gr) * gw + gc) * pd;
      for (int r = 0; r < p; ++r)
        for (int c = 0; c < p; ++c)
          for (int ch = 0; ch < 3; ++ch) img.at(gr * p + r, gc * p + c, ch) = static_cast<float>(*src++);
    }
  return img;
}

}  // namespace aligngen
