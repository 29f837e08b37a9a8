#include "textmesh/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace textmesh {

namespace {

std::uint8_t to_u8(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t read_u32_be(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

void write_chunk(std::vector<std::uint8_t>& out, const char type[4],
                 const std::vector<std::uint8_t>& payload) {
  put_u32_be(out, static_cast<std::uint32_t>(payload.size()));
  std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start)));
  put_u32_be(out, crc);
}

constexpr std::array<std::uint8_t, 8> kPngMagic = {137, 80, 78, 71, 13, 10, 26, 10};

}  // namespace

Image clamp01(Image img) {
  for (auto& v : img.data) v = std::clamp(v, 0.0, 1.0);
  return img;
}

Image quantize8(const Image& img) {
  Image out = img;
  for (auto& v : out.data) v = to_u8(v) / 255.0;
  return out;
}

double max_abs_diff(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw std::invalid_argument("write_png: only 1 or 3 channels supported");
  if (img.width <= 0 || img.height <= 0)
    throw std::invalid_argument("write_png: empty image");

  const int w = img.width, h = img.height, c = img.channels;
  // Raw scanlines, each prefixed with filter byte 0 (no filtering).
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(h) * (1 + static_cast<std::size_t>(w) * c));
  std::size_t k = 0;
  for (int y = 0; y < h; ++y) {
    raw[k++] = 0;
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) raw[k++] = to_u8(img.at(x, y, ch));
  }

  uLongf comp_bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> comp(comp_bound);
  if (compress2(comp.data(), &comp_bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("write_png: zlib compression failed");
  comp.resize(comp_bound);

  std::vector<std::uint8_t> out(kPngMagic.begin(), kPngMagic.end());
  std::vector<std::uint8_t> ihdr;
  put_u32_be(ihdr, static_cast<std::uint32_t>(w));
  put_u32_be(ihdr, static_cast<std::uint32_t>(h));
  ihdr.push_back(8);                       // bit depth
  ihdr.push_back(c == 3 ? 2 : 0);          // color type: truecolor / gray
  ihdr.push_back(0);                       // compression
  ihdr.push_back(0);                       // filter
  ihdr.push_back(0);                       // no interlace
  write_chunk(out, "IHDR", ihdr);
  write_chunk(out, "IDAT", comp);
  write_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_png: cannot open " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("write_png: write failed for " + path.string());
}

Image read_png(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_png: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || !std::equal(kPngMagic.begin(), kPngMagic.end(), bytes.begin()))
    throw std::runtime_error("read_png: not a PNG file: " + path.string());

  int w = 0, h = 0, channels = 0;
  std::vector<std::uint8_t> idat;
  std::size_t pos = 8;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t len = read_u32_be(&bytes[pos]);
    const std::string type(reinterpret_cast<const char*>(&bytes[pos + 4]), 4);
    if (pos + 12 + len > bytes.size())
      throw std::runtime_error("read_png: truncated chunk");
    const std::uint8_t* payload = &bytes[pos + 8];
    if (type == "IHDR") {
      w = static_cast<int>(read_u32_be(payload));
      h = static_cast<int>(read_u32_be(payload + 4));
      const int depth = payload[8], color = payload[9], interlace = payload[12];
      if (depth != 8 || (color != 2 && color != 0) || interlace != 0)
        throw std::runtime_error("read_png: unsupported PNG variant (need 8-bit gray/RGB, no interlace)");
      channels = (color == 2) ? 3 : 1;
    } else if (type == "IDAT") {
      idat.insert(idat.end(), payload, payload + len);
    } else if (type == "IEND") {
      break;
    }
    pos += 12 + len;
  }
  if (w <= 0 || h <= 0 || idat.empty())
    throw std::runtime_error("read_png: missing IHDR/IDAT");

  const std::size_t stride = 1 + static_cast<std::size_t>(w) * channels;
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(h) * stride);
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw std::runtime_error("read_png: zlib decompression failed");

  const int bpp = channels;
  // Undo per-scanline filters (types 0-4).
  auto recon = [&](int y, std::size_t i) -> std::uint8_t& { return raw[y * stride + 1 + i]; };
  for (int y = 0; y < h; ++y) {
    const int filter = raw[y * stride];
    const std::size_t n = stride - 1;
    for (std::size_t i = 0; i < n; ++i) {
      const int a = (i >= static_cast<std::size_t>(bpp)) ? recon(y, i - bpp) : 0;
      const int b = (y > 0) ? recon(y - 1, i) : 0;
      const int cc = (y > 0 && i >= static_cast<std::size_t>(bpp)) ? recon(y - 1, i - bpp) : 0;
      int x = recon(y, i);
      switch (filter) {
        case 0: break;
        case 1: x += a; break;
        case 2: x += b; break;
        case 3: x += (a + b) / 2; break;
        case 4: {
          const int p = a + b - cc;
          const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - cc);
          x += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : cc);
          break;
        }
        default: throw std::runtime_error("read_png: unknown filter type");
      }
      recon(y, i) = static_cast<std::uint8_t>(x & 0xff);
    }
  }

  Image img(w, h, channels);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < channels; ++ch)
        img.at(x, y, ch) = recon(y, static_cast<std::size_t>(x) * channels + ch) / 255.0;
  return img;
}

void write_float_grid(const std::filesystem::path& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_float_grid: cannot open " + path.string());
  f << "TXMGRID v1\nchannels " << img.channels << " width " << img.width
    << " height " << img.height << "\n";
  std::vector<float> buf(img.data.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(img.data[i]);
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!f) throw std::runtime_error("write_float_grid: write failed for " + path.string());
}

Image read_float_grid(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_float_grid: cannot open " + path.string());
  std::string magic, version, kc, kw, kh;
  int c = 0, w = 0, h = 0;
  f >> magic >> version >> kc >> c >> kw >> w >> kh >> h;
  if (magic != "TXMGRID" || version != "v1" || kc != "channels" || kw != "width" || kh != "height")
    throw std::runtime_error("read_float_grid: bad header in " + path.string());
  f.get();  // newline after header
  if (w <= 0 || h <= 0 || c <= 0)
    throw std::runtime_error("read_float_grid: degenerate dimensions");
  Image img(w, h, c);
  std::vector<float> buf(img.data.size());
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!f) throw std::runtime_error("read_float_grid: truncated payload in " + path.string());
  for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i];
  return img;
}

Image round_to_float32(const Image& img) {
  Image out = img;
  for (auto& v : out.data) v = static_cast<float>(v);
  return out;
}

double round_to_float32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace textmesh
