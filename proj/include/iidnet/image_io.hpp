// PFM read/write for linear data and 16-bit PNG export for display.
//
// PFM layout: "PF" (RGB) or "Pf" (gray), then "<width> <height>", then the
// scale line. A negative scale means little-endian float32 samples. Rows are
// stored bottom-to-top. We always write little-endian with scale -1.0.
#pragma once

#include <png.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "iidnet/errors.hpp"
#include "iidnet/image.hpp"

namespace iidnet {

struct PfmData {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;  // 1 or 3
  std::vector<float> samples;  // top-to-bottom, interleaved
};

namespace detail {

inline std::uint32_t byteswap32(std::uint32_t v) {
  return ((v & 0xFF000000u) >> 24) | ((v & 0x00FF0000u) >> 8) | ((v & 0x0000FF00u) << 8) |
         ((v & 0x000000FFu) << 24);
}

inline float float_from_bytes(const unsigned char* p, bool little) {
  std::uint32_t u;
  std::memcpy(&u, p, 4);
  const bool host_little = std::endian::native == std::endian::little;
  if (little != host_little) u = byteswap32(u);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

inline void float_to_le_bytes(float f, unsigned char* p) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  if constexpr (std::endian::native != std::endian::little) u = byteswap32(u);
  std::memcpy(p, &u, 4);
}

inline std::string read_token(std::istream& in) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (!std::isspace(static_cast<unsigned char>(ch))) {
      tok.push_back(ch);
      break;
    }
  }
  while (in.get(ch)) {
    if (std::isspace(static_cast<unsigned char>(ch))) break;
    tok.push_back(ch);
  }
  return tok;
}

}  // namespace detail

inline PfmData read_pfm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());

  const std::string magic = detail::read_token(in);
  PfmData out;
  if (magic == "PF")
    out.channels = 3;
  else if (magic == "Pf")
    out.channels = 1;
  else
    throw CorruptFileError(path.string() + ": not a PFM file");

  const std::string ws = detail::read_token(in);
  const std::string hs = detail::read_token(in);
  const std::string ss = detail::read_token(in);  // consumes the single separator byte
  double scale = 0.0;
  try {
    out.width = std::stoul(ws);
    out.height = std::stoul(hs);
    scale = std::stod(ss);
  } catch (const std::exception&) {
    throw CorruptFileError(path.string() + ": malformed PFM header");
  }
  if (out.width == 0 || out.height == 0 || scale == 0.0)
    throw CorruptFileError(path.string() + ": malformed PFM header");

  const bool little = scale < 0.0;
  const std::size_t row_values = out.width * out.channels;
  const std::size_t count = row_values * out.height;
  std::vector<unsigned char> raw(count * 4);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    throw CorruptFileError(path.string() + ": truncated PFM payload");

  out.samples.resize(count);
  for (std::size_t row = 0; row < out.height; ++row) {
    const std::size_t dst_row = out.height - 1 - row;  // file is bottom-to-top
    for (std::size_t i = 0; i < row_values; ++i)
      out.samples[dst_row * row_values + i] =
          detail::float_from_bytes(&raw[(row * row_values + i) * 4], little);
  }
  return out;
}

inline void write_pfm(const std::filesystem::path& path, std::size_t height, std::size_t width,
                      std::size_t channels, const std::vector<float>& samples) {
  if (samples.size() != height * width * channels)
    throw StructuralError("write_pfm: sample count does not match dimensions");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << (channels == 3 ? "PF" : "Pf") << '\n' << width << ' ' << height << '\n' << "-1.0\n";
  const std::size_t row_values = width * channels;
  std::vector<unsigned char> row_bytes(row_values * 4);
  for (std::size_t row = 0; row < height; ++row) {
    const std::size_t src_row = height - 1 - row;
    for (std::size_t i = 0; i < row_values; ++i)
      detail::float_to_le_bytes(samples[src_row * row_values + i], &row_bytes[i * 4]);
    out.write(reinterpret_cast<const char*>(row_bytes.data()),
              static_cast<std::streamsize>(row_bytes.size()));
  }
  out.flush();
  if (!out) throw IoError("failed writing " + path.string());
}

inline LinearImage read_linear_image(const std::filesystem::path& path) {
  PfmData pfm = read_pfm(path);
  std::vector<double> data(pfm.height * pfm.width * 3);
  for (std::size_t i = 0; i < pfm.height * pfm.width; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      data[3 * i + c] = pfm.samples[i * pfm.channels + (pfm.channels == 3 ? c : 0)];
  for (double v : data)
    if (!std::isfinite(v) || v < 0.0)
      throw CorruptFileError(path.string() + ": image contains negative or non-finite values");
  return LinearImage::from_data(pfm.height, pfm.width, std::move(data));
}

/// Reads a gray map. RGB files are reduced to their luminance.
inline GrayMap read_gray_map(const std::filesystem::path& path) {
  PfmData pfm = read_pfm(path);
  std::vector<double> data(pfm.height * pfm.width);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (pfm.channels == 1) {
      data[i] = pfm.samples[i];
    } else {
      data[i] = kLuminanceWeights[0] * pfm.samples[3 * i] +
                kLuminanceWeights[1] * pfm.samples[3 * i + 1] +
                kLuminanceWeights[2] * pfm.samples[3 * i + 2];
    }
    if (!std::isfinite(data[i]) || data[i] < 0.0)
      throw CorruptFileError(path.string() + ": map contains negative or non-finite values");
  }
  return GrayMap::from_data(pfm.height, pfm.width, std::move(data));
}

inline void write_pfm(const std::filesystem::path& path, const LinearImage& img) {
  std::vector<float> samples(img.data().begin(), img.data().end());
  write_pfm(path, img.height(), img.width(), 3, samples);
}

inline void write_pfm(const std::filesystem::path& path, const GrayMap& map) {
  std::vector<float> samples(map.data().begin(), map.data().end());
  write_pfm(path, map.height(), map.width(), 1, samples);
}

inline std::uint16_t to_png16(double x) {
  return static_cast<std::uint16_t>(std::lround(std::clamp(x, 0.0, 1.0) * 65535.0));
}

namespace detail {

inline void write_png16_raw(const std::filesystem::path& path, std::size_t height,
                            std::size_t width, int color_type, std::size_t channels,
                            std::span<const double> values) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  std::vector<unsigned char> row(width * channels * 2);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 16,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t i = 0; i < width * channels; ++i) {
      const std::uint16_t v = to_png16(values[y * width * channels + i]);
      row[2 * i] = static_cast<unsigned char>(v >> 8);  // PNG is big-endian
      row[2 * i + 1] = static_cast<unsigned char>(v & 0xFF);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

/// 16-bit RGB PNG, each sample round(clip(x, 0, 1) * 65535).
inline void write_png16(const std::filesystem::path& path, const LinearImage& img) {
  detail::write_png16_raw(path, img.height(), img.width(), PNG_COLOR_TYPE_RGB, 3, img.data());
}

inline void write_png16(const std::filesystem::path& path, const GrayMap& map) {
  detail::write_png16_raw(path, map.height(), map.width(), PNG_COLOR_TYPE_GRAY, 1, map.data());
}

}  // namespace iidnet
