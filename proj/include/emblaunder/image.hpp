#pragma once

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "emblaunder/tensor.hpp"

namespace emblaunder {

// RGB image with float pixels in [0,1], row-major HWC. The unit of I/O and
// the optimization variable of the attack.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pix;  // height * width * 3

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), pix(static_cast<size_t>(h) * w * 3, fill) {}

  float& at(int y, int x, int c) {
    return pix[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  float at(int y, int x, int c) const {
    return pix[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  int64_t size() const { return static_cast<int64_t>(pix.size()); }

  void validate() const {
    if (height < 1 || width < 1 ||
        pix.size() != static_cast<size_t>(height) * width * 3)
      throw Error("ShapeMismatch", "image dims do not match pixel count");
    for (float v : pix)
      if (!(v >= 0.0f && v <= 1.0f))
        throw Error("InvalidValue", "image pixel outside [0,1]");
  }
};

enum class ImageFormat { kPng, kPpm };

namespace detail {

inline uint8_t quantize_byte(float p) {
  long b = std::lround(static_cast<double>(p) * 255.0);  // half away from zero
  if (b < 0) b = 0;
  if (b > 255) b = 255;
  return static_cast<uint8_t>(b);
}

inline void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

inline uint32_t get_u32be(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

inline void png_chunk(std::vector<uint8_t>& out, const char type[4],
                      const std::vector<uint8_t>& payload) {
  put_u32be(out, static_cast<uint32_t>(payload.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  uint32_t crc = static_cast<uint32_t>(
      crc32(0, out.data() + start, static_cast<uInt>(out.size() - start)));
  put_u32be(out, crc);
}

inline uint8_t paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<uint8_t>(a);
  if (pb <= pc) return static_cast<uint8_t>(b);
  return static_cast<uint8_t>(c);
}

}  // namespace detail

// Quantizes each pixel to the nearest 8-bit level: round(p*255)/255,
// half rounded away from zero. Idempotent; moves no pixel by more than 1/510.
inline Image quantize_roundtrip(const Image& img) {
  Image out(img.height, img.width);
  for (size_t i = 0; i < img.pix.size(); ++i)
    out.pix[i] = static_cast<float>(detail::quantize_byte(img.pix[i])) / 255.0f;
  return out;
}

inline std::vector<uint8_t> encode_ppm(const Image& img) {
  std::string header = "P6\n" + std::to_string(img.width) + " " +
                       std::to_string(img.height) + "\n255\n";
  std::vector<uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.pix.size());
  for (float p : img.pix) out.push_back(detail::quantize_byte(p));
  return out;
}

inline Image decode_ppm(const std::vector<uint8_t>& bytes) {
  size_t pos = 0;
  auto next_token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) tok += static_cast<char>(bytes[pos++]);
    return tok;
  };
  if (next_token() != "P6") throw Error("Malformed", "not a binary PPM (P6) file");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_token());
    h = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw Error("Malformed", "bad PPM header");
  }
  if (w < 1 || h < 1) throw Error("Malformed", "bad PPM dimensions");
  if (maxval != 255) throw Error("Unsupported", "PPM maxval must be 255 (8-bit)");
  ++pos;  // single whitespace after maxval
  const size_t need = static_cast<size_t>(w) * h * 3;
  if (bytes.size() - pos < need) throw Error("Malformed", "truncated PPM payload");
  Image img(h, w);
  for (size_t i = 0; i < need; ++i)
    img.pix[i] = static_cast<float>(bytes[pos + i]) / 255.0f;
  return img;
}

// 8-bit truecolor PNG, no interlacing. Scanlines use filter 0 and a single
// IDAT chunk; zlib level 6 pinned for reproducible bytes.
inline std::vector<uint8_t> encode_png(const Image& img) {
  const int w = img.width, h = img.height;
  std::vector<uint8_t> raw(static_cast<size_t>(h) * (1 + static_cast<size_t>(w) * 3));
  size_t k = 0;
  for (int y = 0; y < h; ++y) {
    raw[k++] = 0;  // filter: None
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) raw[k++] = detail::quantize_byte(img.at(y, x, c));
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw Error("Internal", "zlib compression failed");
  compressed.resize(bound);

  std::vector<uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<uint8_t> ihdr;
  detail::put_u32be(ihdr, static_cast<uint32_t>(w));
  detail::put_u32be(ihdr, static_cast<uint32_t>(h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter method
  ihdr.push_back(0);   // no interlace
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", compressed);
  detail::png_chunk(out, "IEND", {});
  return out;
}

inline Image decode_png(const std::vector<uint8_t>& bytes) {
  static const uint8_t kSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kSig, 8) != 0)
    throw Error("Malformed", "bad PNG signature");
  size_t pos = 8;
  int w = 0, h = 0;
  bool have_ihdr = false, have_iend = false;
  std::vector<uint8_t> idat;
  while (pos + 12 <= bytes.size()) {
    const uint32_t len = detail::get_u32be(bytes.data() + pos);
    if (pos + 12 + len > bytes.size()) throw Error("Malformed", "truncated PNG chunk");
    const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
    const uint8_t* payload = bytes.data() + pos + 8;
    const uint32_t expect_crc = detail::get_u32be(payload + len);
    const uint32_t got_crc = static_cast<uint32_t>(
        crc32(0, bytes.data() + pos + 4, static_cast<uInt>(len + 4)));
    if (expect_crc != got_crc) throw Error("Malformed", "PNG chunk CRC mismatch");
    std::string t(type, 4);
    if (t == "IHDR") {
      if (len != 13) throw Error("Malformed", "bad IHDR length");
      w = static_cast<int>(detail::get_u32be(payload));
      h = static_cast<int>(detail::get_u32be(payload + 4));
      if (payload[8] != 8) throw Error("Unsupported", "PNG bit depth must be 8");
      if (payload[9] != 2) throw Error("Unsupported", "PNG color type must be truecolor RGB");
      if (payload[10] != 0 || payload[11] != 0) throw Error("Unsupported", "bad compression/filter method");
      if (payload[12] != 0) throw Error("Unsupported", "interlaced PNG not supported");
      if (w < 1 || h < 1) throw Error("Malformed", "bad PNG dimensions");
      have_ihdr = true;
    } else if (t == "IDAT") {
      if (!have_ihdr) throw Error("Malformed", "IDAT before IHDR");
      idat.insert(idat.end(), payload, payload + len);
    } else if (t == "IEND") {
      have_iend = true;
      break;
    } else if (!(type[0] & 0x20)) {
      throw Error("Unsupported", "unknown critical PNG chunk " + t);
    }
    pos += 12 + len;
  }
  if (!have_ihdr || !have_iend || idat.empty())
    throw Error("Malformed", "PNG missing required chunks");

  const size_t stride = static_cast<size_t>(w) * 3;
  const size_t raw_size = static_cast<size_t>(h) * (1 + stride);
  std::vector<uint8_t> raw(raw_size);
  uLongf out_len = static_cast<uLongf>(raw_size);
  const int zr = uncompress(raw.data(), &out_len, idat.data(), static_cast<uLong>(idat.size()));
  if (zr != Z_OK || out_len != raw_size)
    throw Error("Malformed", "PNG payload does not inflate to expected size");

  Image img(h, w);
  std::vector<uint8_t> prev(stride, 0), cur(stride);
  for (int y = 0; y < h; ++y) {
    const uint8_t* line = raw.data() + static_cast<size_t>(y) * (1 + stride);
    const uint8_t filter = line[0];
    const uint8_t* src = line + 1;
    for (size_t i = 0; i < stride; ++i) {
      const int a = i >= 3 ? cur[i - 3] : 0;
      const int b = prev[i];
      const int c = i >= 3 ? prev[i - 3] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += detail::paeth(a, b, c); break;
        default: throw Error("Malformed", "unknown PNG filter type");
      }
      cur[i] = static_cast<uint8_t>(v & 0xff);
    }
    for (size_t i = 0; i < stride; ++i)
      img.pix[static_cast<size_t>(y) * stride + i] = static_cast<float>(cur[i]) / 255.0f;
    std::swap(prev, cur);
  }
  return img;
}

inline std::vector<uint8_t> encode_image(const Image& img, ImageFormat fmt) {
  img.validate();
  return fmt == ImageFormat::kPng ? encode_png(img) : encode_ppm(img);
}

inline Image decode_image(const std::vector<uint8_t>& bytes, ImageFormat fmt) {
  return fmt == ImageFormat::kPng ? decode_png(bytes) : decode_ppm(bytes);
}

// Corner-aligned bilinear resize; a 1-wide output axis samples the source
// midpoint. Evaluation-side only (the differentiable variant lives in the
// graph op set).
inline Image resize_bilinear_eval(const Image& img, int oh, int ow) {
  if (oh < 1 || ow < 1) throw Error("InvalidValue", "resize target dims must be >= 1");
  if (oh == img.height && ow == img.width) return img;
  Image out(oh, ow);
  auto sample_pos = [](int i, int count, int limit) {
    double s = count == 1 ? (limit - 1) * 0.5
                          : static_cast<double>(i) * (limit - 1) / (count - 1);
    return s;
  };
  for (int y = 0; y < oh; ++y) {
    const double sy = sample_pos(y, oh, img.height);
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, img.height - 1);
    const float fy = static_cast<float>(sy - y0);
    for (int x = 0; x < ow; ++x) {
      const double sx = sample_pos(x, ow, img.width);
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, img.width - 1);
      const float fx = static_cast<float>(sx - x0);
      for (int c = 0; c < 3; ++c) {
        const float top = img.at(y0, x0, c) * (1.0f - fx) + img.at(y0, x1, c) * fx;
        const float bot = img.at(y1, x0, c) * (1.0f - fx) + img.at(y1, x1, c) * fx;
        float v = top * (1.0f - fy) + bot * fy;
        out.at(y, x, c) = std::min(std::max(v, 0.0f), 1.0f);
      }
    }
  }
  return out;
}

// HWC image <-> CHW tensor; graph-side image math runs in CHW.
inline Tensor image_to_chw(const Image& img) {
  Tensor t = Tensor::zeros({3, img.height, img.width});
  const int hw = img.height * img.width;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        t.data[static_cast<size_t>(c) * hw + y * img.width + x] = img.at(y, x, c);
  return t;
}

inline Image image_from_chw(const Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != 3)
    throw Error("ShapeMismatch", "expected [3,H,W] tensor");
  Image img(t.dim(1), t.dim(2));
  const int hw = t.dim(1) * t.dim(2);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = t.data[static_cast<size_t>(c) * hw + y * img.width + x];
  return img;
}

inline std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("IoError", "cannot open " + path);
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)),
                              std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("IoError", "cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("IoError", "short write to " + path);
}

inline ImageFormat format_from_path(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".ppm") return ImageFormat::kPpm;
  return ImageFormat::kPng;
}

inline Image load_image(const std::string& path) {
  return decode_image(read_file(path), format_from_path(path));
}

inline void save_image(const std::string& path, const Image& img) {
  write_file(path, encode_image(img, format_from_path(path)));
}

}  // namespace emblaunder
