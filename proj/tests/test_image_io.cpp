#include <catch2/catch_amalgamated.hpp>
#include <zlib.h>

#include "emblaunder/image.hpp"
#include "emblaunder/rng.hpp"

using namespace emblaunder;

namespace {

Image random_image(Rng& rng, int h, int w) {
  Image img(h, w);
  for (float& v : img.pix) v = rng.uniform_f(0.0f, 1.0f);
  return img;
}

// Independent align-corners bilinear reference in double precision.
double bilinear_reference(const Image& img, int oy, int ox, int c, int oh, int ow) {
  auto pos = [](int i, int n, int limit) {
    return n == 1 ? (limit - 1) * 0.5 : static_cast<double>(i) * (limit - 1) / (n - 1);
  };
  const double sy = pos(oy, oh, img.height), sx = pos(ox, ow, img.width);
  const int y0 = static_cast<int>(std::floor(sy));
  const int x0 = static_cast<int>(std::floor(sx));
  const int y1 = std::min(y0 + 1, img.height - 1);
  const int x1 = std::min(x0 + 1, img.width - 1);
  const double fy = sy - y0, fx = sx - x0;
  return img.at(y0, x0, c) * (1 - fy) * (1 - fx) + img.at(y0, x1, c) * (1 - fy) * fx +
         img.at(y1, x0, c) * fy * (1 - fx) + img.at(y1, x1, c) * fy * fx;
}

// Builds a PNG whose rows use the given filter types, to exercise the
// decoder's unfilter paths independently of our encoder (which emits None).
std::vector<uint8_t> png_with_filters(const std::vector<std::vector<uint8_t>>& rows,
                                      const std::vector<uint8_t>& filters) {
  const int h = static_cast<int>(rows.size());
  const int w = static_cast<int>(rows[0].size()) / 3;
  std::vector<uint8_t> raw;
  std::vector<uint8_t> prev(rows[0].size(), 0);
  for (int y = 0; y < h; ++y) {
    raw.push_back(filters[static_cast<size_t>(y)]);
    const auto& cur = rows[static_cast<size_t>(y)];
    for (size_t i = 0; i < cur.size(); ++i) {
      const int a = i >= 3 ? cur[i - 3] : 0;
      const int b = prev[i];
      const int cc = i >= 3 ? prev[i - 3] : 0;
      int v = cur[i];
      switch (filters[static_cast<size_t>(y)]) {
        case 0: break;
        case 1: v -= a; break;
        case 2: v -= b; break;
        case 3: v -= (a + b) / 2; break;
        case 4: v -= detail::paeth(a, b, cc); break;
      }
      raw.push_back(static_cast<uint8_t>(v & 0xff));
    }
    prev = cur;
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> comp(bound);
  REQUIRE(compress2(comp.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) == Z_OK);
  comp.resize(bound);
  std::vector<uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<uint8_t> ihdr;
  detail::put_u32be(ihdr, static_cast<uint32_t>(w));
  detail::put_u32be(ihdr, static_cast<uint32_t>(h));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", comp);
  detail::png_chunk(out, "IEND", {});
  return out;
}

}  // namespace

TEST_CASE("PPM decode examples") {
  std::string s = "P6\n1 1\n255\n";
  std::vector<uint8_t> bytes(s.begin(), s.end());
  bytes.insert(bytes.end(), {255, 0, 0});
  Image img = decode_image(bytes, ImageFormat::kPpm);
  REQUIRE(img.height == 1);
  REQUIRE(img.width == 1);
  REQUIRE(img.at(0, 0, 0) == 1.0f);
  REQUIRE(img.at(0, 0, 1) == 0.0f);
  REQUIRE(img.at(0, 0, 2) == 0.0f);

  // comments in header are allowed
  std::string c = "P6\n# a comment\n2 1\n255\n";
  std::vector<uint8_t> cb(c.begin(), c.end());
  cb.insert(cb.end(), {0, 0, 0, 128, 128, 128});
  Image ci = decode_image(cb, ImageFormat::kPpm);
  REQUIRE(ci.width == 2);
  REQUIRE(ci.at(0, 1, 0) == Catch::Approx(128.0 / 255.0));

  // truncated payload
  std::vector<uint8_t> trunc(bytes.begin(), bytes.end() - 2);
  try {
    decode_image(trunc, ImageFormat::kPpm);
    FAIL("expected Malformed");
  } catch (const Error& e) {
    REQUIRE(e.code() == "Malformed");
  }

  // unsupported bit depth
  std::string deep = "P6\n1 1\n65535\n";
  std::vector<uint8_t> db(deep.begin(), deep.end());
  db.insert(db.end(), {0, 0, 0, 0, 0, 0});
  REQUIRE_THROWS_AS(decode_image(db, ImageFormat::kPpm), Error);
}

TEST_CASE("encode rounding rule: half away from zero") {
  Image img(1, 2);
  img.at(0, 0, 0) = 0.5f;  // 127.5 -> 128
  img.at(0, 1, 0) = 1.0f;  // -> 255
  auto bytes = encode_image(img, ImageFormat::kPpm);
  const size_t off = bytes.size() - 6;
  REQUIRE(bytes[off] == 128);
  REQUIRE(bytes[off + 3] == 255);
}

TEST_CASE("PNG decode examples") {
  Image zero(2, 2);
  auto bytes = encode_image(zero, ImageFormat::kPng);
  Image back = decode_image(bytes, ImageFormat::kPng);
  REQUIRE(back.height == 2);
  for (float v : back.pix) REQUIRE(v == 0.0f);

  // truncated file
  std::vector<uint8_t> trunc(bytes.begin(), bytes.begin() + bytes.size() / 2);
  REQUIRE_THROWS_AS(decode_image(trunc, ImageFormat::kPng), Error);

  // corrupted chunk payload breaks the CRC
  std::vector<uint8_t> bad = bytes;
  bad[40] ^= 0x01;
  try {
    decode_image(bad, ImageFormat::kPng);
    FAIL("expected error");
  } catch (const Error& e) {
    REQUIRE((e.code() == "Malformed" || e.code() == "Unsupported"));
  }

  // bad signature
  std::vector<uint8_t> sig = bytes;
  sig[0] = 0;
  REQUIRE_THROWS_AS(decode_image(sig, ImageFormat::kPng), Error);
}

TEST_CASE("PNG decoder handles all standard filter types") {
  Rng rng(7);
  std::vector<std::vector<uint8_t>> rows(5, std::vector<uint8_t>(4 * 3));
  for (auto& r : rows)
    for (auto& v : r) v = static_cast<uint8_t>(rng.below(256));
  const std::vector<uint8_t> filters = {0, 1, 2, 3, 4};
  Image img = decode_image(png_with_filters(rows, filters), ImageFormat::kPng);
  for (int y = 0; y < 5; ++y)
    for (size_t i = 0; i < rows[static_cast<size_t>(y)].size(); ++i)
      REQUIRE(img.pix[static_cast<size_t>(y) * 12 + i] ==
              Catch::Approx(rows[static_cast<size_t>(y)][i] / 255.0).margin(1e-7));
}

TEST_CASE("decode(encode(img)) equals quantize_roundtrip(img)") {
  Rng rng(13);
  for (ImageFormat fmt : {ImageFormat::kPng, ImageFormat::kPpm}) {
    Image img = random_image(rng, 9, 7);
    Image rq = quantize_roundtrip(img);
    Image rt = decode_image(encode_image(img, fmt), fmt);
    REQUIRE(rt.pix == rq.pix);
  }
}

TEST_CASE("decode/encode is the identity on already-quantized images") {
  Rng rng(17);
  Image img = quantize_roundtrip(random_image(rng, 6, 5));
  // PPM: bit-exact bytes
  auto b1 = encode_image(img, ImageFormat::kPpm);
  auto b2 = encode_image(decode_image(b1, ImageFormat::kPpm), ImageFormat::kPpm);
  REQUIRE(b1 == b2);
  // PNG: pixel-exact
  Image back = decode_image(encode_image(img, ImageFormat::kPng), ImageFormat::kPng);
  REQUIRE(back.pix == img.pix);
}

TEST_CASE("quantize_roundtrip examples and properties") {
  Image half(3, 3, 0.5f);
  Image q = quantize_roundtrip(half);
  for (float v : q.pix) REQUIRE(v == Catch::Approx(128.0 / 255.0));

  Rng rng(19);
  for (int t = 0; t < 20; ++t) {
    Image img = random_image(rng, 8, 8);
    Image once = quantize_roundtrip(img);
    Image twice = quantize_roundtrip(once);
    REQUIRE(once.pix == twice.pix);  // idempotent
    for (size_t i = 0; i < img.pix.size(); ++i) {
      REQUIRE(std::fabs(once.pix[i] - img.pix[i]) <= 1.0f / 510.0f + 1e-7f);
      REQUIRE(once.pix[i] >= 0.0f);
      REQUIRE(once.pix[i] <= 1.0f);
    }
  }
}

TEST_CASE("resize_bilinear_eval") {
  Rng rng(23);
  Image img = random_image(rng, 5, 4);
  Image same = resize_bilinear_eval(img, 5, 4);
  REQUIRE(same.pix == img.pix);

  // 2x2 checkerboard to 1x1 averages the four pixels
  Image checker(2, 2);
  checker.at(0, 0, 0) = 1.0f;
  checker.at(1, 1, 0) = 1.0f;
  Image one = resize_bilinear_eval(checker, 1, 1);
  REQUIRE(one.at(0, 0, 0) == Catch::Approx(0.5));

  // 4x4 ramp down to 2x2 matches the brute-force reference
  Image ramp(4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) ramp.at(y, x, c) = (y * 4 + x) / 15.0f;
  Image small = resize_bilinear_eval(ramp, 2, 2);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x)
      REQUIRE(small.at(y, x, 0) ==
              Catch::Approx(bilinear_reference(ramp, y, x, 0, 2, 2)).margin(1e-6));

  // random up/down sizes stay within [0,1] and match the reference
  for (int t = 0; t < 10; ++t) {
    Image src = random_image(rng, 3 + static_cast<int>(rng.below(6)),
                             3 + static_cast<int>(rng.below(6)));
    const int oh = 1 + static_cast<int>(rng.below(9));
    const int ow = 1 + static_cast<int>(rng.below(9));
    Image out = resize_bilinear_eval(src, oh, ow);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x)
        for (int c = 0; c < 3; ++c) {
          REQUIRE(out.at(y, x, c) >= 0.0f);
          REQUIRE(out.at(y, x, c) <= 1.0f);
          REQUIRE(out.at(y, x, c) ==
                  Catch::Approx(bilinear_reference(src, y, x, c, oh, ow)).margin(1e-5));
        }
  }

  REQUIRE_THROWS_AS(resize_bilinear_eval(img, 0, 4), Error);
}

TEST_CASE("CHW conversion round-trips") {
  Rng rng(29);
  Image img = random_image(rng, 6, 7);
  Image back = image_from_chw(image_to_chw(img));
  REQUIRE(back.pix == img.pix);
  REQUIRE(back.height == img.height);
  REQUIRE(back.width == img.width);
}
