#pragma once

// File formats: Middlebury .flo, PFM, KITTI 16-bit flow/depth PNG, 8-bit
// image PNG, intrinsics text and KITTI pose lists. Readers throw FormatError
// carrying the byte offset where parsing failed.
//
// Link with libpng and zlib.

#include <png.h>
#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "motionparse/field.hpp"
#include "motionparse/geometry.hpp"

namespace motionparse::io {

static_assert(std::endian::native == std::endian::little, "readers assume a little-endian host");

class FormatError : public DomainError {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : DomainError(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

using Bytes = std::vector<std::uint8_t>;

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DomainError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const Bytes& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DomainError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DomainError("write failed for " + path.string());
}

namespace detail {

template <class T>
void put(Bytes& b, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  b.insert(b.end(), p, p + sizeof(T));
}

template <class T>
T get(const Bytes& b, std::size_t& pos, const char* what) {
  if (b.size() - pos < sizeof(T) || pos > b.size()) throw FormatError(std::string(what) + ": truncated", pos);
  T v;
  std::memcpy(&v, b.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// .flo

inline constexpr float kFloMagic = 202021.25f;

inline Bytes encode_flo(const VectorField& flow) {
  if (flow.channels() != 2) throw DomainError("encode_flo: flow must have 2 channels");
  Bytes b;
  b.reserve(12 + flow.size() * 4);
  detail::put(b, kFloMagic);
  detail::put(b, static_cast<std::int32_t>(flow.width()));
  detail::put(b, static_cast<std::int32_t>(flow.height()));
  for (double v : flow.data()) detail::put(b, static_cast<float>(v));
  return b;
}

inline VectorField decode_flo(const Bytes& b) {
  std::size_t pos = 0;
  if (detail::get<float>(b, pos, "flo") != kFloMagic) throw FormatError("flo: bad magic", 0);
  const auto w = detail::get<std::int32_t>(b, pos, "flo");
  const auto h = detail::get<std::int32_t>(b, pos, "flo");
  if (w <= 0 || h <= 0 || w > (1 << 16) || h > (1 << 16)) throw FormatError("flo: bad shape", 4);
  const std::size_t need = 12 + static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 8;
  if (b.size() != need)
    throw FormatError("flo: expected " + std::to_string(need) + " bytes, found " + std::to_string(b.size()),
                      std::min(b.size(), need));
  VectorField f(w, h, 2);
  for (double& v : f.data()) v = detail::get<float>(b, pos, "flo");
  return f;
}

// ---------------------------------------------------------------------------
// PFM: "Pf" (1 channel) or "PF" (3 channels), little-endian, bottom-up rows.

inline Bytes encode_pfm(const ScalarField& f) {
  if (f.channels() != 1 && f.channels() != 3) throw DomainError("encode_pfm: need 1 or 3 channels");
  std::ostringstream hdr;
  hdr << (f.channels() == 1 ? "Pf" : "PF") << '\n' << f.width() << ' ' << f.height() << "\n-1.0\n";
  const std::string h = hdr.str();
  Bytes b(h.begin(), h.end());
  b.reserve(b.size() + f.size() * 4);
  for (int y = f.height() - 1; y >= 0; --y)
    for (int x = 0; x < f.width(); ++x)
      for (int c = 0; c < f.channels(); ++c) detail::put(b, static_cast<float>(f(x, y, c)));
  return b;
}

inline ScalarField decode_pfm(const Bytes& b) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < b.size() && std::isspace(b[pos])) ++pos;
    const std::size_t start = pos;
    while (pos < b.size() && !std::isspace(b[pos])) ++pos;
    if (start == pos) throw FormatError("pfm: truncated header", start);
    return std::pair{std::string(b.begin() + static_cast<std::ptrdiff_t>(start), b.begin() + static_cast<std::ptrdiff_t>(pos)), start};
  };
  const auto [magic, m_at] = token();
  int channels;
  if (magic == "Pf")
    channels = 1;
  else if (magic == "PF")
    channels = 3;
  else
    throw FormatError("pfm: bad magic '" + magic + "'", m_at);
  auto number = [&](const char* what) {
    const auto [t, at] = token();
    try {
      std::size_t used = 0;
      const double v = std::stod(t, &used);
      if (used != t.size()) throw std::invalid_argument(t);
      return std::pair{v, at};
    } catch (const std::exception&) {
      throw FormatError(std::string("pfm: bad ") + what, at);
    }
  };
  const auto [wd, w_at] = number("width");
  const auto [hd, h_at] = number("height");
  const auto [scale, s_at] = number("scale");
  if (wd < 1 || hd < 1 || wd != std::floor(wd) || hd != std::floor(hd) || wd > 65536 || hd > 65536)
    throw FormatError("pfm: bad shape", w_at);
  if (scale >= 0.0) throw FormatError("pfm: big-endian data is not supported", s_at);
  if (pos >= b.size() || !std::isspace(b[pos])) throw FormatError("pfm: missing header terminator", pos);
  ++pos;
  const int w = static_cast<int>(wd), h = static_cast<int>(hd);
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * channels * 4;
  if (b.size() - pos != need)
    throw FormatError("pfm: expected " + std::to_string(need) + " data bytes, found " + std::to_string(b.size() - pos), pos);
  ScalarField f(w, h, channels);
  for (int y = h - 1; y >= 0; --y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) f(x, y, c) = detail::get<float>(b, pos, "pfm");
  return f;
}

// ---------------------------------------------------------------------------
// PNG

inline constexpr std::uint8_t kPngSignature[8] = {137, 80, 78, 71, 13, 10, 26, 10};

/// Walks the chunk list and checks every CRC; throws at the first bad chunk.
inline void validate_png_chunks(const Bytes& b) {
  if (b.size() < 8 || std::memcmp(b.data(), kPngSignature, 8) != 0) throw FormatError("png: bad signature", 0);
  std::size_t pos = 8;
  bool seen_end = false;
  while (!seen_end) {
    const std::size_t at = pos;
    if (b.size() - pos < 12) throw FormatError("png: truncated chunk", at);
    const std::uint32_t len = (std::uint32_t{b[pos]} << 24) | (std::uint32_t{b[pos + 1]} << 16) |
                              (std::uint32_t{b[pos + 2]} << 8) | b[pos + 3];
    if (len > b.size() - pos - 12) throw FormatError("png: chunk length overruns file", at);
    const std::uint8_t* type = b.data() + pos + 4;
    const uLong crc = crc32(crc32(0L, Z_NULL, 0), type, static_cast<uInt>(len + 4));
    const std::size_t crc_at = pos + 8 + len;
    const std::uint32_t stored = (std::uint32_t{b[crc_at]} << 24) | (std::uint32_t{b[crc_at + 1]} << 16) |
                                 (std::uint32_t{b[crc_at + 2]} << 8) | b[crc_at + 3];
    if (stored != static_cast<std::uint32_t>(crc))
      throw FormatError("png: CRC mismatch in chunk '" + std::string(type, type + 4) + "'", crc_at);
    seen_end = std::memcmp(type, "IEND", 4) == 0;
    pos = crc_at + 4;
  }
}

struct RawImage {
  int width = 0, height = 0, channels = 0, bit_depth = 8;
  std::vector<std::uint16_t> samples;  // row-major, interleaved
};

namespace detail {

struct PngReadCursor {
  const Bytes* bytes;
  std::size_t pos;
};

inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text != nullptr) *text = msg;
  png_longjmp(png, 1);
}
inline void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace detail

/// Decodes gray, gray+alpha, RGB or RGBA at 8 or 16 bits; palettes expand to
/// RGB and low bit depths to 8 bits.
inline RawImage decode_png(const Bytes& b) {
  validate_png_chunks(b);
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
  if (png == nullptr) throw DomainError("png: out of memory");
  png_infop info = png_create_info_struct(png);
  detail::PngReadCursor cur{&b, 0};
  RawImage img;
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("png: " + (err.empty() ? std::string("decode failed") : err), cur.pos);
  }
  png_set_read_fn(png, &cur, [](png_structp p, png_bytep out, png_size_t n) {
    auto* c = static_cast<detail::PngReadCursor*>(png_get_io_ptr(p));
    if (c->bytes->size() - c->pos < n) png_error(p, "unexpected end of data");
    std::memcpy(out, c->bytes->data() + c->pos, n);
    c->pos += n;
  });
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (depth == 16) png_set_swap(png);
  png_read_update_info(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = png_get_channels(png, info);
  img.bit_depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(stride * static_cast<std::size_t>(img.height));
  rows.resize(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) rows[static_cast<std::size_t>(y)] = buffer.data() + stride * static_cast<std::size_t>(y);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * img.channels;
  img.samples.resize(n);
  if (img.bit_depth == 16) {
    for (std::size_t i = 0; i < n; ++i) std::memcpy(&img.samples[i], buffer.data() + 2 * i, 2);
  } else {
    for (std::size_t i = 0; i < n; ++i) img.samples[i] = buffer[i];
  }
  return img;
}

inline Bytes encode_png(const RawImage& img) {
  if (img.bit_depth != 8 && img.bit_depth != 16) throw DomainError("encode_png: bit depth must be 8 or 16");
  if (img.channels < 1 || img.channels > 4) throw DomainError("encode_png: 1 to 4 channels");
  if (img.samples.size() != static_cast<std::size_t>(img.width) * img.height * img.channels)
    throw DomainError("encode_png: sample count does not match shape");
  static constexpr int kColor[] = {PNG_COLOR_TYPE_GRAY, PNG_COLOR_TYPE_GRAY_ALPHA, PNG_COLOR_TYPE_RGB,
                                   PNG_COLOR_TYPE_RGB_ALPHA};
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
  if (png == nullptr) throw DomainError("png: out of memory");
  png_infop info = png_create_info_struct(png);
  Bytes out;
  const std::size_t bytes_per = img.bit_depth / 8;
  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels * bytes_per;
  std::vector<std::uint8_t> buffer(stride * static_cast<std::size_t>(img.height));
  for (std::size_t i = 0; i < img.samples.size(); ++i) {
    if (bytes_per == 2) {
      buffer[2 * i] = static_cast<std::uint8_t>(img.samples[i] >> 8);
      buffer[2 * i + 1] = static_cast<std::uint8_t>(img.samples[i] & 0xff);
    } else {
      buffer[i] = static_cast<std::uint8_t>(img.samples[i]);
    }
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) rows[static_cast<std::size_t>(y)] = buffer.data() + stride * static_cast<std::size_t>(y);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DomainError("png: " + (err.empty() ? std::string("encode failed") : err));
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t n) {
        auto* o = static_cast<Bytes*>(png_get_io_ptr(p));
        o->insert(o->end(), data, data + n);
      },
      [](png_structp) {});
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), img.bit_depth,
               kColor[img.channels - 1], PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

// KITTI flow PNG: 16-bit RGB, (u*64 + 2^15, v*64 + 2^15, valid).

inline constexpr double kFlowPngScale = 64.0;
inline constexpr double kFlowPngOffset = 32768.0;
inline constexpr double kDepthPngScale = 256.0;

struct KittiFlow {
  VectorField flow;
  MaskField valid;
};

inline std::uint16_t quantize16(double v, const char* what) {
  const double r = std::round(v);
  if (!(r >= 0.0 && r <= 65535.0)) throw DomainError(std::string(what) + ": value outside the 16-bit range");
  return static_cast<std::uint16_t>(r);
}

inline Bytes encode_kitti_flow(const VectorField& flow, const MaskField* valid = nullptr) {
  if (flow.channels() != 2) throw DomainError("encode_kitti_flow: flow must have 2 channels");
  if (valid != nullptr) require_same_grid(*valid, flow, "encode_kitti_flow");
  RawImage img{flow.width(), flow.height(), 3, 16, {}};
  img.samples.reserve(flow.pixels() * 3);
  for (int y = 0; y < flow.height(); ++y)
    for (int x = 0; x < flow.width(); ++x) {
      const bool ok = valid == nullptr || (*valid)(x, y) != 0;
      img.samples.push_back(ok ? quantize16(flow(x, y, 0) * kFlowPngScale + kFlowPngOffset, "kitti flow") : 0);
      img.samples.push_back(ok ? quantize16(flow(x, y, 1) * kFlowPngScale + kFlowPngOffset, "kitti flow") : 0);
      img.samples.push_back(ok ? 1 : 0);
    }
  return encode_png(img);
}

inline KittiFlow decode_kitti_flow(const Bytes& b) {
  const RawImage img = decode_png(b);
  if (img.channels != 3 || img.bit_depth != 16) throw FormatError("kitti flow: expected 16-bit RGB", 0);
  KittiFlow r{VectorField(img.width, img.height, 2), MaskField(img.width, img.height, 1)};
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const std::size_t i = (static_cast<std::size_t>(y) * img.width + x) * 3;
      const bool ok = img.samples[i + 2] != 0;
      r.valid(x, y) = ok ? 1 : 0;
      r.flow(x, y, 0) = ok ? (img.samples[i] - kFlowPngOffset) / kFlowPngScale : 0.0;
      r.flow(x, y, 1) = ok ? (img.samples[i + 1] - kFlowPngOffset) / kFlowPngScale : 0.0;
    }
  return r;
}

/// KITTI depth PNG: 16-bit gray, depth*256; 0 marks a missing value.
inline Bytes encode_kitti_depth(const ScalarField& depth, const MaskField* valid = nullptr) {
  if (depth.channels() != 1) throw DomainError("encode_kitti_depth: depth must have 1 channel");
  if (valid != nullptr) require_same_grid(*valid, depth, "encode_kitti_depth");
  RawImage img{depth.width(), depth.height(), 1, 16, {}};
  img.samples.reserve(depth.pixels());
  for (int y = 0; y < depth.height(); ++y)
    for (int x = 0; x < depth.width(); ++x) {
      const bool ok = valid == nullptr || (*valid)(x, y) != 0;
      img.samples.push_back(ok ? quantize16(depth(x, y) * kDepthPngScale, "kitti depth") : 0);
    }
  return encode_png(img);
}

struct KittiDepth {
  ScalarField depth;
  MaskField valid;
};

inline KittiDepth decode_kitti_depth(const Bytes& b) {
  const RawImage img = decode_png(b);
  if (img.channels != 1 || img.bit_depth != 16) throw FormatError("kitti depth: expected 16-bit gray", 0);
  KittiDepth r{ScalarField(img.width, img.height, 1), MaskField(img.width, img.height, 1)};
  for (std::size_t i = 0; i < img.samples.size(); ++i) {
    r.depth.data()[i] = img.samples[i] / kDepthPngScale;
    r.valid.data()[i] = img.samples[i] != 0;
  }
  return r;
}

/// Image in [0, 1]; colour is reduced to luma (0.299, 0.587, 0.114) and alpha
/// dropped.
inline ScalarField decode_image_gray(const Bytes& b) {
  const RawImage img = decode_png(b);
  const double maxv = img.bit_depth == 16 ? 65535.0 : 255.0;
  ScalarField out(img.width, img.height, 1);
  const int colour = img.channels >= 3 ? 3 : 1;
  for (std::size_t p = 0; p < out.pixels(); ++p) {
    const std::uint16_t* s = img.samples.data() + p * static_cast<std::size_t>(img.channels);
    out.data()[p] = (colour == 3 ? 0.299 * s[0] + 0.587 * s[1] + 0.114 * s[2] : double(s[0])) / maxv;
  }
  return out;
}

/// 8-bit gray PNG of values in [0, 1] (clamped).
inline Bytes encode_image_gray(const ScalarField& f) {
  if (f.channels() != 1) throw DomainError("encode_image_gray: need 1 channel");
  RawImage img{f.width(), f.height(), 1, 8, {}};
  img.samples.reserve(f.pixels());
  for (double v : f.data()) img.samples.push_back(static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  return encode_png(img);
}

/// 8-bit mask PNG: nonzero -> 255.
inline Bytes encode_mask(const MaskField& m) {
  RawImage img{m.width(), m.height(), 1, 8, {}};
  img.samples.reserve(m.pixels());
  for (std::uint8_t v : m.data()) img.samples.push_back(v != 0 ? 255 : 0);
  return encode_png(img);
}

inline MaskField decode_mask(const Bytes& b) {
  const RawImage img = decode_png(b);
  MaskField m(img.width, img.height, 1);
  for (std::size_t p = 0; p < m.pixels(); ++p) m.data()[p] = img.samples[p * static_cast<std::size_t>(img.channels)] != 0;
  return m;
}

// ---------------------------------------------------------------------------
// Text formats

inline CameraIntrinsics parse_intrinsics(const std::string& text) {
  std::istringstream in(text);
  CameraIntrinsics k;
  if (!(in >> k.fx >> k.fy >> k.cx >> k.cy >> k.width >> k.height))
    throw FormatError("intrinsics: expected 'fx fy cx cy width height'", static_cast<std::size_t>(std::max<std::streamoff>(in.tellg(), 0)));
  std::string extra;
  if (in >> extra) throw FormatError("intrinsics: trailing content", text.find(extra));
  k.validate();
  return k;
}

inline std::string format_intrinsics(const CameraIntrinsics& k) {
  std::ostringstream out;
  out << std::setprecision(17) << k.fx << ' ' << k.fy << ' ' << k.cx << ' ' << k.cy << ' ' << k.width << ' ' << k.height
      << '\n';
  return out.str();
}

/// One 3x4 row-major [R | t] per non-empty line.
inline std::vector<Pose> parse_poses(const std::string& text) {
  std::vector<Pose> poses;
  std::size_t offset = 0;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    const std::size_t at = offset;
    offset += line.size() + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream in(line);
    double m[12];
    for (double& v : m)
      if (!(in >> v)) throw FormatError("pose file: expected 12 numbers per line", at);
    std::string extra;
    if (in >> extra) throw FormatError("pose file: more than 12 numbers on a line", at);
    Pose p;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) p.rotation(r, c) = m[r * 4 + c];
    p.translation = {m[3], m[7], m[11]};
    poses.push_back(p);
  }
  return poses;
}

inline std::string format_poses(const std::vector<Pose>& poses) {
  std::ostringstream out;
  out << std::setprecision(17);
  for (const Pose& p : poses) {
    const double t[3] = {p.translation.x, p.translation.y, p.translation.z};
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) out << p.rotation(r, c) << ' ';
      out << t[r] << (r == 2 ? '\n' : ' ');
    }
  }
  return out.str();
}

}  // namespace motionparse::io
