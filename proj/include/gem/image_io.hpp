#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gem/kernels.hpp"
#include "gem/model_io.hpp"
#include "gem/tensor.hpp"

namespace gem {

/// Malformed pixmap or annotation file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ImageRecord {
  Tensor pixels;  // h×w×3 in [0, 1]
  std::string source_id;

  std::size_t height() const { return pixels.extent(0); }
  std::size_t width() const { return pixels.extent(1); }
};

/// Integer label image, one value per pixel.
struct LabelImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint16_t> values;

  std::uint16_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

namespace detail {

struct NetpbmHeader {
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
};

inline NetpbmHeader read_netpbm_header(std::istream& in, const std::string& path) {
  NetpbmHeader h;
  auto next_token = [&]() {
    std::string tok;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!tok.empty()) break;
        continue;
      }
      tok += ch;
    }
    return tok;
  };
  h.magic = next_token();
  auto number = [&](const char* what) {
    const std::string tok = next_token();
    std::size_t v = 0;
    try {
      std::size_t used = 0;
      v = std::stoul(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw FormatError(path + ": malformed pixmap header (" + what + ")");
    }
    return v;
  };
  if (h.magic != "P6" && h.magic != "P5") {
    throw FormatError(path + ": unsupported pixmap magic \"" + h.magic + "\"");
  }
  h.width = number("width");
  h.height = number("height");
  h.maxval = number("maxval");
  if (h.width == 0 || h.height == 0) throw FormatError(path + ": zero image extent");
  if (h.maxval == 0 || h.maxval > 65535) throw FormatError(path + ": invalid maxval");
  return h;
}

}  // namespace detail

/// Binary 8-bit RGB pixmap (P6, maxval 255) → pixels scaled to [0, 1].
inline ImageRecord read_pixmap(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open image " + path.string());
  const auto h = detail::read_netpbm_header(in, path.string());
  if (h.magic != "P6") throw FormatError(path.string() + ": expected P6 pixmap, got " + h.magic);
  if (h.maxval != 255) throw FormatError(path.string() + ": expected maxval 255");
  std::vector<unsigned char> raw(h.width * h.height * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
    throw FormatError(path.string() + ": truncated pixel data");
  }
  ImageRecord rec{Tensor({h.height, h.width, 3}), path.stem().string()};
  for (std::size_t i = 0; i < raw.size(); ++i) rec.pixels[i] = static_cast<float>(raw[i]) / 255.0f;
  return rec;
}

inline void write_pixmap(const fs::path& path, const Tensor& pixels) {
  require_rank(pixels, 3, "write_pixmap");
  if (pixels.extent(2) != 3) throw DimensionError("write_pixmap: expected 3 channels");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P6\n" << pixels.extent(1) << " " << pixels.extent(0) << "\n255\n";
  std::vector<unsigned char> raw(pixels.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const float v = std::clamp(pixels[i], 0.0f, 1.0f);
    raw[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

/// Single-channel graymap (P5). Samples are 16-bit big-endian when maxval > 255.
inline LabelImage read_pgm16(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open label map " + path.string());
  const auto h = detail::read_netpbm_header(in, path.string());
  if (h.magic != "P5") throw FormatError(path.string() + ": expected P5 graymap, got " + h.magic);
  const std::size_t bps = h.maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(h.width * h.height * bps);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
    throw FormatError(path.string() + ": truncated sample data");
  }
  LabelImage img{h.height, h.width, std::vector<std::uint16_t>(h.width * h.height)};
  for (std::size_t i = 0; i < img.values.size(); ++i) {
    img.values[i] = bps == 2 ? static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]) : raw[i];
  }
  return img;
}

inline void write_pgm16(const fs::path& path, const LabelImage& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P5\n" << img.width << " " << img.height << "\n65535\n";
  std::vector<unsigned char> raw(img.values.size() * 2);
  for (std::size_t i = 0; i < img.values.size(); ++i) {
    raw[2 * i] = static_cast<unsigned char>(img.values[i] >> 8);
    raw[2 * i + 1] = static_cast<unsigned char>(img.values[i] & 0xff);
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

/// One line of a point-annotation file: `image_id class_name x_rel y_rel is_positive`.
struct PointAnnotation {
  std::string image_id;
  std::string class_name;
  double x_rel = 0.0, y_rel = 0.0;
  bool positive = false;
};

// Class names may contain spaces, so the class is everything between the first token and
// the trailing three numeric fields.
inline PointAnnotation parse_point_line(const std::string& line, std::size_t line_no = 0) {
  std::istringstream ss(line);
  std::vector<std::string> tok;
  for (std::string t; ss >> t;) tok.push_back(t);
  const auto fail = [&](const std::string& why) {
    return FormatError("points line " + std::to_string(line_no) + ": " + why);
  };
  if (tok.size() < 5) throw fail("expected `image_id class_name x_rel y_rel is_positive`");
  PointAnnotation p;
  p.image_id = tok[0];
  for (std::size_t i = 1; i + 3 < tok.size(); ++i) {
    if (i > 1) p.class_name += ' ';
    p.class_name += tok[i];
  }
  try {
    p.x_rel = std::stod(tok[tok.size() - 3]);
    p.y_rel = std::stod(tok[tok.size() - 2]);
  } catch (const std::exception&) {
    throw fail("non-numeric coordinate");
  }
  const std::string& flag = tok.back();
  if (flag == "1") p.positive = true;
  else if (flag == "0") p.positive = false;
  else throw fail("is_positive must be 0 or 1");
  if (p.x_rel < 0.0 || p.x_rel > 1.0 || p.y_rel < 0.0 || p.y_rel > 1.0) {
    throw fail("coordinates must lie in [0, 1]");
  }
  return p;
}

inline std::vector<PointAnnotation> read_points(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<PointAnnotation> points;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    points.push_back(parse_point_line(line, line_no));
  }
  return points;
}

inline std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

/// Output extents for an aspect-preserving resize that sets the shorter side.
inline std::pair<std::size_t, std::size_t> preprocess_size(std::size_t h, std::size_t w,
                                                           std::size_t shorter_side) {
  const std::size_t s = std::min(h, w);
  if (s == shorter_side) return {h, w};
  const double scale = static_cast<double>(shorter_side) / static_cast<double>(s);
  const auto scaled = [&](std::size_t e) {
    return e == s ? shorter_side
                  : std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(e * scale)));
  };
  return {scaled(h), scaled(w)};
}

/// Bilinear resize so the shorter side equals `spec.shorter_side`, then per-channel
/// (x − mean) / std. No crop.
inline Tensor preprocess(const ImageRecord& img, const PreprocessSpec& spec) {
  const auto [oh, ow] = preprocess_size(img.height(), img.width(), spec.shorter_side);
  Tensor out = bilinear_resize(img.pixels, oh, ow);
  for (std::size_t i = 0; i < out.size(); i += 3) {
    for (std::size_t c = 0; c < 3; ++c) {
      out[i + c] = (out[i + c] - spec.channel_mean[c]) / spec.channel_std[c];
    }
  }
  return out;
}

}  // namespace gem
