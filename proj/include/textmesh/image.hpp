#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace textmesh {

// Row-major raster, top-left origin, channel-interleaved, values in double.
// RGB images keep values in [0,1]; intermediate buffers (noised images,
// noise predictions) may exceed that range.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c),
        data(static_cast<std::size_t>(w) * h * c, fill) {}

  std::size_t size() const { return data.size(); }
  double& at(int x, int y, int c) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double at(int x, int y, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool same_shape(const Image& other) const {
    return width == other.width && height == other.height &&
           channels == other.channels;
  }
};

Image clamp01(Image img);

// Quantize to 8-bit and back. Used wherever an image crosses an 8-bit
// persistence boundary, so in-memory and reloaded-from-disk paths see
// identical values.
Image quantize8(const Image& img);

double max_abs_diff(const Image& a, const Image& b);

// 8-bit PNG, RGB (3ch) or grayscale (1ch). Values clamped to [0,1] and
// rounded to the nearest of 256 levels.
void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

// 32-bit float grid with a plain-text header:
//   TXMGRID v1\nchannels C width W height H\n<raw little-endian f32>
// Round-trips bit-exactly for float32 payloads.
void write_float_grid(const std::filesystem::path& path, const Image& img);
Image read_float_grid(const std::filesystem::path& path);

// Pass an image through the float32 grid representation without touching
// disk (keeps in-memory state identical to a later reload).
Image round_to_float32(const Image& img);
double round_to_float32(double v);

}  // namespace textmesh
