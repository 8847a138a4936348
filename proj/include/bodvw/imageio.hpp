#pragma once

// Dataset manifests, PNG/JPEG decoding and the model-input preprocessing.

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "bodvw/binary_io.hpp"
#include "bodvw/error.hpp"

namespace bodvw {

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
  std::string image_path;
  std::size_t label = 0;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::string name;
  std::vector<std::string> categories;
  std::vector<ManifestEntry> entries;
  /// Directory relative image paths are resolved against. Not part of equality.
  std::string source_dir;

  bool operator==(const DatasetManifest& o) const {
    return name == o.name && categories == o.categories && entries == o.entries;
  }

  [[nodiscard]] std::string resolve(const ManifestEntry& e) const {
    std::filesystem::path p(e.image_path);
    if (p.is_absolute() || source_dir.empty()) return p.string();
    return (std::filesystem::path(source_dir) / p).string();
  }

  [[nodiscard]] std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(categories.size(), 0);
    for (const auto& e : entries) ++counts.at(e.label);
    return counts;
  }
};

/// Throws ConfigError if any manifest invariant is broken.
inline void validate_manifest(const DatasetManifest& m) {
  if (m.entries.empty()) throw ConfigError("empty manifest");
  if (m.categories.empty()) throw ConfigError("manifest has no categories");
  std::set<std::string> names(m.categories.begin(), m.categories.end());
  if (names.size() != m.categories.size()) throw ConfigError("duplicate category name");
  std::set<std::string> paths;
  std::vector<std::size_t> counts(m.categories.size(), 0);
  for (const auto& e : m.entries) {
    if (e.label >= m.categories.size())
      throw ConfigError("label index " + std::to_string(e.label) + " out of range");
    if (!paths.insert(e.image_path).second)
      throw ConfigError("duplicate path in manifest: " + e.image_path);
    ++counts[e.label];
  }
  for (std::size_t c = 0; c < counts.size(); ++c)
    if (counts[c] == 0) throw ConfigError("category '" + m.categories[c] + "' has no entries");
}

namespace detail {

// RFC 4180 style: quoted fields may contain commas, quotes are doubled.
inline std::vector<std::string> split_csv_line(std::string_view line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (quoted) throw ConfigError("line " + std::to_string(line_no) + ": unterminated quote");
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out.push_back('"');
    out.push_back(ch);
  }
  out.push_back('"');
  return out;
}

inline std::vector<std::string> text_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
    start = end + 1;
  }
  return lines;
}

}  // namespace detail

/// Sidecar that fixes category order: "<manifest>.json" with {"name", "categories"}.
inline std::string manifest_sidecar_path(const std::string& manifest_path) {
  return manifest_path + ".json";
}

inline DatasetManifest load_manifest(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("manifest not found: " + path);
  const auto lines = detail::text_lines(io::read_text_file(path));

  DatasetManifest m;
  m.name = std::filesystem::path(path).stem().string();
  m.source_dir = std::filesystem::path(path).parent_path().string();

  std::size_t line_no = 0;
  bool header_seen = false;
  std::vector<std::pair<std::string, std::string>> rows;
  for (const auto& line : lines) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = detail::split_csv_line(line, line_no);
    if (!header_seen) {
      // Tolerate a UTF-8 BOM on the header.
      if (fields[0].starts_with("\xEF\xBB\xBF")) fields[0].erase(0, 3);
      if (fields.size() != 2 || fields[0] != "path" || fields[1] != "label")
        throw ConfigError(path + ": expected header 'path,label'");
      header_seen = true;
      continue;
    }
    if (fields.size() != 2 || fields[0].empty() || fields[1].empty())
      throw ConfigError(path + ": malformed record on line " + std::to_string(line_no));
    rows.emplace_back(std::move(fields[0]), std::move(fields[1]));
  }
  if (!header_seen) throw ConfigError(path + ": missing header");
  if (rows.empty()) throw ConfigError("empty manifest");

  const auto sidecar = manifest_sidecar_path(path);
  if (std::filesystem::exists(sidecar)) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(io::read_text_file(sidecar));
      m.categories = j.at("categories").get<std::vector<std::string>>();
      if (j.contains("name")) m.name = j.at("name").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(sidecar + ": " + e.what());
    }
  } else {
    std::set<std::string> distinct;
    for (const auto& r : rows) distinct.insert(r.second);
    m.categories.assign(distinct.begin(), distinct.end());
  }

  std::map<std::string, std::size_t> index;
  for (std::size_t c = 0; c < m.categories.size(); ++c) index[m.categories[c]] = c;
  for (const auto& [p, label] : rows) {
    auto it = index.find(label);
    if (it == index.end()) throw ConfigError("label '" + label + "' not in category list");
    m.entries.push_back({p, it->second});
  }
  validate_manifest(m);
  return m;
}

/// Writes the CSV and the order-fixing sidecar.
inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  validate_manifest(m);
  std::string csv = "path,label\n";
  for (const auto& e : m.entries)
    csv += detail::csv_field(e.image_path) + "," + detail::csv_field(m.categories[e.label]) + "\n";
  io::write_text_file(path, csv);
  nlohmann::json side{{"name", m.name}, {"categories", m.categories}};
  io::write_text_file(manifest_sidecar_path(path), side.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Images

struct RawImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;  // 1 or 3
  std::vector<std::uint8_t> data;  // row-major (h, w, c)

  RawImage() = default;
  RawImage(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), data(h * w * c, fill) {
    check();
  }

  void check() const {
    if (channels != 1 && channels != 3) throw InvalidArgument("image channels must be 1 or 3");
    if (height == 0 || width == 0) throw InvalidArgument("zero-dimension image");
    if (data.size() != height * width * channels)
      throw InvalidArgument("image buffer size does not match dimensions");
  }

  std::uint8_t& at(std::size_t h, std::size_t w, std::size_t c) {
    return data[(h * width + w) * channels + c];
  }
  [[nodiscard]] std::uint8_t at(std::size_t h, std::size_t w, std::size_t c) const {
    return data[(h * width + w) * channels + c];
  }
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open '" + path + "'");
  return f;
}

inline RawImage decode_png(const std::string& path) {
  auto file = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw FormatError("png: out of memory");
  png_infop info = png_create_info_struct(png);
  RawImage img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("png: cannot decode '" + path + "'");
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_set_interlace_handling(png);
  png_read_update_info(png, info);

  const auto height = png_get_image_height(png, info);
  const auto width = png_get_image_width(png, info);
  const auto channels = png_get_channels(png, info);
  if (height == 0 || width == 0) longjmp(png_jmpbuf(png), 1);
  if (channels != 1 && channels != 3) longjmp(png_jmpbuf(png), 1);
  img.height = height;
  img.width = width;
  img.channels = channels;
  img.data.resize(img.height * img.width * img.channels);
  rows.resize(height);
  for (std::size_t r = 0; r < height; ++r) rows[r] = img.data.data() + r * width * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  img.check();
  return img;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

inline void jpeg_silent(j_common_ptr cinfo, int level) {
  if (level < 0) ++cinfo->err->num_warnings;
}

inline RawImage decode_jpeg(const std::string& path) {
  auto file = open_file(path, "rb");
  jpeg_decompress_struct cinfo{};
  JpegErrorManager jerr{};
  cinfo.err = jpeg_std_error(&jerr.base);
  jerr.base.error_exit = jpeg_error_exit;
  jerr.base.emit_message = jpeg_silent;
  RawImage img;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw FormatError("jpeg: cannot decode '" + path + "'");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.height = cinfo.output_height;
  img.width = cinfo.output_width;
  img.channels = static_cast<std::size_t>(cinfo.output_components);
  if (img.height == 0 || img.width == 0) std::longjmp(jerr.jump, 1);
  img.data.resize(img.height * img.width * img.channels);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.data.data() + cinfo.output_scanline * img.width * img.channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  // A truncated stream only raises warnings in libjpeg; treat it as corrupt.
  const bool had_warnings = jerr.base.num_warnings > 0;
  jpeg_destroy_decompress(&cinfo);
  if (had_warnings) throw FormatError("jpeg: corrupt or truncated data in '" + path + "'");
  img.check();
  return img;
}

}  // namespace detail

inline RawImage load_image(const std::string& path) {
  std::uint8_t magic[4] = {0, 0, 0, 0};
  {
    auto f = detail::open_file(path, "rb");
    if (std::fread(magic, 1, 4, f.get()) != 4) throw FormatError("unreadable image '" + path + "'");
  }
  if (magic[0] == 0x89 && magic[1] == 'P' && magic[2] == 'N' && magic[3] == 'G')
    return detail::decode_png(path);
  if (magic[0] == 0xFF && magic[1] == 0xD8 && magic[2] == 0xFF) return detail::decode_jpeg(path);
  throw FormatError("unsupported image format: '" + path + "'");
}

inline void save_png(const RawImage& img, const std::string& path) {
  img.check();
  png_image out{};
  out.version = PNG_IMAGE_VERSION;
  out.width = static_cast<png_uint_32>(img.width);
  out.height = static_cast<png_uint_32>(img.height);
  out.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&out, path.c_str(), 0, img.data.data(), 0, nullptr))
    throw IoError("cannot write png '" + path + "': " + out.message);
}

inline void save_jpeg(const RawImage& img, const std::string& path, int quality = 95) {
  img.check();
  auto file = detail::open_file(path, "wb");
  jpeg_compress_struct cinfo{};
  detail::JpegErrorManager jerr{};
  cinfo.err = jpeg_std_error(&jerr.base);
  jerr.base.error_exit = detail::jpeg_error_exit;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_compress(&cinfo);
    throw IoError("cannot write jpeg '" + path + "'");
  }
  jpeg_create_compress(&cinfo);
  jpeg_stdio_dest(&cinfo, file.get());
  cinfo.image_width = static_cast<JDIMENSION>(img.width);
  cinfo.image_height = static_cast<JDIMENSION>(img.height);
  cinfo.input_components = static_cast<int>(img.channels);
  cinfo.in_color_space = img.channels == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    auto* row = const_cast<JSAMPLE*>(img.data.data() + cinfo.next_scanline * img.width * img.channels);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
}

// ---------------------------------------------------------------------------
// Preprocessing

inline constexpr std::size_t kInputSize = 224;
inline constexpr std::size_t kInputChannels = 3;
/// Per-channel means in B, G, R order (Caffe-style ImageNet statistics).
inline constexpr std::array<double, 3> kBgrMeans = {103.939, 116.779, 123.68};
inline constexpr const char* kPreprocessTag =
    "resize=bilinear_half_pixel:224x224;order=bgr;mean=103.939,116.779,123.68;scale=none;"
    "gray=replicate";

/// 224x224x3 tensor in (h, w, c) order, channels B, G, R, mean-subtracted.
struct ModelInput {
  std::vector<float> tensor;
  std::string provenance;

  ModelInput() : tensor(kInputSize * kInputSize * kInputChannels, 0.0f) {}

  float& at(std::size_t h, std::size_t w, std::size_t c) {
    return tensor[(h * kInputSize + w) * kInputChannels + c];
  }
  [[nodiscard]] float at(std::size_t h, std::size_t w, std::size_t c) const {
    return tensor[(h * kInputSize + w) * kInputChannels + c];
  }
};

namespace detail {

struct ResizeTap {
  std::size_t lo, hi;
  double frac;
};

// Half-pixel-centre bilinear sampling positions, clamped at the borders.
inline std::vector<ResizeTap> resize_taps(std::size_t in, std::size_t out) {
  std::vector<ResizeTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const auto hi = std::min(lo + 1, in - 1);
    taps[d] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

inline ModelInput preprocess(const RawImage& image, std::string provenance = {}) {
  image.check();
  ModelInput out;
  out.provenance = std::move(provenance);
  const auto ty = detail::resize_taps(image.height, kInputSize);
  const auto tx = detail::resize_taps(image.width, kInputSize);
  for (std::size_t h = 0; h < kInputSize; ++h) {
    const auto& ry = ty[h];
    for (std::size_t w = 0; w < kInputSize; ++w) {
      const auto& rx = tx[w];
      for (std::size_t c = 0; c < 3; ++c) {
        // Output channel c is B, G, R; source RGB index is 2 - c.
        const std::size_t src_c = image.channels == 1 ? 0 : 2 - c;
        const double top = (1.0 - rx.frac) * image.at(ry.lo, rx.lo, src_c) +
                           rx.frac * image.at(ry.lo, rx.hi, src_c);
        const double bottom = (1.0 - rx.frac) * image.at(ry.hi, rx.lo, src_c) +
                              rx.frac * image.at(ry.hi, rx.hi, src_c);
        const double v = (1.0 - ry.frac) * top + ry.frac * bottom;
        out.at(h, w, c) = static_cast<float>(v - kBgrMeans[c]);
      }
    }
  }
  return out;
}

}  // namespace bodvw
