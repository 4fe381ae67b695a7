#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

namespace rgbt {

// Interleaved 8-bit image, row-major, c in {1, 3}.
struct Image {
  int w = 0, h = 0, c = 1;
  std::vector<uint8_t> pix;

  Image() = default;
  Image(int w_, int h_, int c_, uint8_t fill = 0)
      : w(w_), h(h_), c(c_), pix(static_cast<size_t>(w_) * h_ * c_, fill) {}

  uint8_t& at(int x, int y, int ch) {
    return pix[(static_cast<size_t>(y) * w + x) * c + ch];
  }
  uint8_t at(int x, int y, int ch) const {
    return pix[(static_cast<size_t>(y) * w + x) * c + ch];
  }
};

namespace detail {

inline uint32_t be32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | p[3];
}
inline void put_be32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v >> 24));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v));
}

inline int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

inline std::vector<uint8_t> zlib_inflate(const std::vector<uint8_t>& in, size_t expect) {
  std::vector<uint8_t> out(expect);
  uLongf dst = static_cast<uLongf>(expect);
  int rc = uncompress(out.data(), &dst, in.data(), static_cast<uLong>(in.size()));
  if (rc != Z_OK || dst != expect) throw std::runtime_error("png: corrupt compressed stream");
  return out;
}

inline std::vector<uint8_t> zlib_deflate(const std::vector<uint8_t>& in) {
  uLongf dst = compressBound(static_cast<uLong>(in.size()));
  std::vector<uint8_t> out(dst);
  if (compress2(out.data(), &dst, in.data(), static_cast<uLong>(in.size()), 6) != Z_OK)
    throw std::runtime_error("png: compression failed");
  out.resize(dst);
  return out;
}

inline void write_chunk(std::ofstream& os, const char type[4], const std::vector<uint8_t>& data) {
  std::vector<uint8_t> head;
  put_be32(head, static_cast<uint32_t>(data.size()));
  os.write(reinterpret_cast<const char*>(head.data()), 4);
  os.write(type, 4);
  if (!data.empty()) os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(type), 4);
  if (!data.empty()) crc = crc32(crc, data.data(), static_cast<uInt>(data.size()));
  std::vector<uint8_t> tail;
  put_be32(tail, static_cast<uint32_t>(crc));
  os.write(reinterpret_cast<const char*>(tail.data()), 4);
}

constexpr uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

}  // namespace detail

// Minimal PNG reader: 8-bit depth, gray / gray+alpha / RGB / RGBA, no
// interlace, no palette. Alpha is dropped on load.
inline Image load_png(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open image: " + path);
  std::vector<uint8_t> file((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (file.size() < 8 || std::memcmp(file.data(), detail::kPngSig, 8) != 0)
    throw std::runtime_error("not a png file: " + path);

  int w = 0, h = 0, depth = 0, color = 0;
  std::vector<uint8_t> idat;
  size_t off = 8;
  bool seen_ihdr = false, seen_iend = false;
  while (off + 8 <= file.size() && !seen_iend) {
    uint32_t len = detail::be32(&file[off]);
    if (off + 12 + len > file.size()) throw std::runtime_error("png: truncated chunk in " + path);
    const char* type = reinterpret_cast<const char*>(&file[off + 4]);
    const uint8_t* data = &file[off + 8];
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw std::runtime_error("png: bad IHDR in " + path);
      w = static_cast<int>(detail::be32(data));
      h = static_cast<int>(detail::be32(data + 4));
      depth = data[8];
      color = data[9];
      if (depth != 8) throw std::runtime_error("png: only 8-bit depth supported: " + path);
      if (color != 0 && color != 2 && color != 4 && color != 6)
        throw std::runtime_error("png: palette/unknown color type unsupported: " + path);
      if (data[12] != 0) throw std::runtime_error("png: interlaced images unsupported: " + path);
      seen_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      seen_iend = true;
    }
    off += 12 + len;
  }
  if (!seen_ihdr || w <= 0 || h <= 0) throw std::runtime_error("png: missing IHDR: " + path);

  int nch = color == 0 ? 1 : color == 2 ? 3 : color == 4 ? 2 : 4;
  size_t stride = static_cast<size_t>(w) * nch;
  std::vector<uint8_t> raw = detail::zlib_inflate(idat, (stride + 1) * static_cast<size_t>(h));

  // undo per-row filters in place
  std::vector<uint8_t> flat(stride * static_cast<size_t>(h));
  for (int y = 0; y < h; ++y) {
    uint8_t filter = raw[(stride + 1) * static_cast<size_t>(y)];
    const uint8_t* src = &raw[(stride + 1) * static_cast<size_t>(y) + 1];
    uint8_t* cur = &flat[stride * static_cast<size_t>(y)];
    const uint8_t* up = y > 0 ? &flat[stride * static_cast<size_t>(y - 1)] : nullptr;
    for (size_t i = 0; i < stride; ++i) {
      int a = i >= static_cast<size_t>(nch) ? cur[i - nch] : 0;
      int b = up ? up[i] : 0;
      int c = (up && i >= static_cast<size_t>(nch)) ? up[i - nch] : 0;
      int x = src[i];
      switch (filter) {
        case 0: break;
        case 1: x += a; break;
        case 2: x += b; break;
        case 3: x += (a + b) / 2; break;
        case 4: x += detail::paeth(a, b, c); break;
        default: throw std::runtime_error("png: unknown row filter in " + path);
      }
      cur[i] = static_cast<uint8_t>(x);
    }
  }

  Image img(w, h, nch <= 2 ? 1 : 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < img.c; ++ch)
        img.at(x, y, ch) = flat[stride * static_cast<size_t>(y) + static_cast<size_t>(x) * nch + ch];
  return img;
}

inline void save_png(const std::string& path, const Image& img) {
  if (img.c != 1 && img.c != 3) throw std::invalid_argument("save_png: 1 or 3 channels only");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open image for writing: " + path);
  os.write(reinterpret_cast<const char*>(detail::kPngSig), 8);

  std::vector<uint8_t> ihdr;
  detail::put_be32(ihdr, static_cast<uint32_t>(img.w));
  detail::put_be32(ihdr, static_cast<uint32_t>(img.h));
  ihdr.push_back(8);                               // bit depth
  ihdr.push_back(img.c == 1 ? 0 : 2);              // gray / rgb
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);                               // no interlace
  detail::write_chunk(os, "IHDR", ihdr);

  size_t stride = static_cast<size_t>(img.w) * img.c;
  std::vector<uint8_t> raw((stride + 1) * static_cast<size_t>(img.h));
  for (int y = 0; y < img.h; ++y) {
    raw[(stride + 1) * static_cast<size_t>(y)] = 0;  // filter: none
    std::memcpy(&raw[(stride + 1) * static_cast<size_t>(y) + 1], &img.pix[stride * static_cast<size_t>(y)], stride);
  }
  detail::write_chunk(os, "IDAT", detail::zlib_deflate(raw));
  detail::write_chunk(os, "IEND", {});
  if (!os) throw std::runtime_error("image write failed: " + path);
}

// ---------- PPM / PGM (binary, maxval 255) ----------

inline Image load_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open image: " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5" && magic != "P6") throw std::runtime_error("unsupported pnm format: " + path);
  auto next_int = [&]() {
    int v;
    while (is >> std::ws && is.peek() == '#') is.ignore(1 << 20, '\n');
    if (!(is >> v)) throw std::runtime_error("pnm: bad header in " + path);
    return v;
  };
  int w = next_int(), h = next_int(), maxval = next_int();
  if (maxval != 255) throw std::runtime_error("pnm: only maxval 255 supported: " + path);
  is.ignore(1);  // single whitespace before raster
  Image img(w, h, magic == "P5" ? 1 : 3);
  is.read(reinterpret_cast<char*>(img.pix.data()), static_cast<std::streamsize>(img.pix.size()));
  if (!is) throw std::runtime_error("pnm: truncated raster in " + path);
  return img;
}

inline void save_pnm(const std::string& path, const Image& img) {
  if (img.c != 1 && img.c != 3) throw std::invalid_argument("save_pnm: 1 or 3 channels only");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open image for writing: " + path);
  os << (img.c == 1 ? "P5" : "P6") << "\n" << img.w << " " << img.h << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pix.data()), static_cast<std::streamsize>(img.pix.size()));
}

// ---------- dispatch by extension ----------

inline bool has_suffix(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

inline Image load_image(const std::string& path) {
  if (has_suffix(path, ".png")) return load_png(path);
  if (has_suffix(path, ".ppm") || has_suffix(path, ".pgm")) return load_pnm(path);
  throw std::runtime_error("unsupported image extension: " + path);
}

inline void save_image(const std::string& path, const Image& img) {
  if (has_suffix(path, ".png")) return save_png(path, img);
  if (has_suffix(path, ".ppm") || has_suffix(path, ".pgm")) return save_pnm(path, img);
  throw std::runtime_error("unsupported image extension: " + path);
}

// ---------- geometry ----------

inline Image resize_bilinear(const Image& src, int nw, int nh) {
  if (nw < 1 || nh < 1) throw std::invalid_argument("resize: target must be positive");
  Image dst(nw, nh, src.c);
  double sx = static_cast<double>(src.w) / nw, sy = static_cast<double>(src.h) / nh;
  for (int y = 0; y < nh; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double wy = fy - y0;
    int y0c = std::clamp(y0, 0, src.h - 1), y1c = std::clamp(y0 + 1, 0, src.h - 1);
    for (int x = 0; x < nw; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double wx = fx - x0;
      int x0c = std::clamp(x0, 0, src.w - 1), x1c = std::clamp(x0 + 1, 0, src.w - 1);
      for (int ch = 0; ch < src.c; ++ch) {
        double top = src.at(x0c, y0c, ch) * (1 - wx) + src.at(x1c, y0c, ch) * wx;
        double bot = src.at(x0c, y1c, ch) * (1 - wx) + src.at(x1c, y1c, ch) * wx;
        dst.at(x, y, ch) = static_cast<uint8_t>(std::lround(top * (1 - wy) + bot * wy));
      }
    }
  }
  return dst;
}

inline Image to_gray(const Image& src) {
  if (src.c == 1) return src;
  Image g(src.w, src.h, 1);
  for (int y = 0; y < src.h; ++y)
    for (int x = 0; x < src.w; ++x)
      g.at(x, y, 0) = static_cast<uint8_t>(
          std::lround(0.299 * src.at(x, y, 0) + 0.587 * src.at(x, y, 1) + 0.114 * src.at(x, y, 2)));
  return g;
}

inline Image to_rgb(const Image& src) {
  if (src.c == 3) return src;
  Image out(src.w, src.h, 3);
  for (int y = 0; y < src.h; ++y)
    for (int x = 0; x < src.w; ++x)
      for (int ch = 0; ch < 3; ++ch) out.at(x, y, ch) = src.at(x, y, 0);
  return out;
}

// 1px-wide axis-aligned rectangle outline, clipped to the image.
inline void draw_rect(Image& img, int x1, int y1, int x2, int y2, uint8_t r, uint8_t g, uint8_t b) {
  uint8_t col[3] = {r, g, b};
  auto put = [&](int x, int y) {
    if (x < 0 || y < 0 || x >= img.w || y >= img.h) return;
    for (int ch = 0; ch < img.c; ++ch) img.at(x, y, ch) = col[img.c == 1 ? 0 : ch];
  };
  for (int x = x1; x <= x2; ++x) {
    put(x, y1);
    put(x, y2);
  }
  for (int y = y1; y <= y2; ++y) {
    put(x1, y);
    put(x2, y);
  }
}

}  // namespace rgbt
